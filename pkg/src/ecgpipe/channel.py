"""Cellular-link emulation: latency mixtures, payload corruption, batch loss.

A profile describes one direction of a link as a Gaussian latency mixture
plus independent per-sample corruption and per-batch loss probabilities.
Presets mirror desk-scale 3G/4G/5G behaviour: 3G is bimodal (137/210 ms),
4G and 5G unimodal (134 and 114 ms).

Every connection owns one :class:`ChannelEmulator` seeded from
``(profile.seed, connection_id)``, so runs replay bit-for-bit while distinct
connections see independent draws.  Delivery is in order: a batch never
overtakes its predecessor on the same connection.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

_BATCH_PAYLOAD_LEN = 76
_SAMPLES_OFFSET = 12
_SAMPLE_WIDTH = 4
_SAMPLES_PER_BATCH = 16


class ProfileError(ValueError):
    """Invalid channel profile definition."""


@dataclass(frozen=True)
class LatencyComponent:
    """One Gaussian mixture component: ``weight`` of draws ~ N(mean, std)."""

    weight: float
    mean_ms: float
    std_ms: float


@dataclass(frozen=True)
class ChannelProfile:
    name: str
    latency_components: Tuple[LatencyComponent, ...]
    per_sample_corruption_prob: float = 0.0
    per_batch_loss_prob: float = 0.0
    clock_skew_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, LatencyComponent) else LatencyComponent(*c)
            for c in self.latency_components
        )
        object.__setattr__(self, "latency_components", comps)
        if not comps:
            raise ProfileError("profile needs at least one latency component")
        for c in comps:
            if c.weight <= 0 or c.mean_ms <= 0 or c.std_ms < 0:
                raise ProfileError(f"bad latency component {c}")
        if abs(sum(c.weight for c in comps) - 1.0) > 1e-9:
            raise ProfileError("latency component weights must sum to 1")
        for label, p in (
            ("per_sample_corruption_prob", self.per_sample_corruption_prob),
            ("per_batch_loss_prob", self.per_batch_loss_prob),
        ):
            if not (0.0 <= p <= 1.0):
                raise ProfileError(f"{label} must lie in [0, 1]")

    def mixture_mean(self) -> float:
        return sum(c.weight * c.mean_ms for c in self.latency_components)

    def mixture_std(self) -> float:
        mean = self.mixture_mean()
        second = sum(c.weight * (c.std_ms ** 2 + c.mean_ms ** 2) for c in self.latency_components)
        return math.sqrt(max(second - mean * mean, 0.0))

    def with_seed(self, seed: int) -> "ChannelProfile":
        return replace(self, seed=seed)


PRESETS = {
    "3g": ChannelProfile(
        name="3g",
        latency_components=(
            LatencyComponent(0.65, 137.0, 8.0),
            LatencyComponent(0.35, 210.0, 8.0),
        ),
        per_sample_corruption_prob=0.0298,
    ),
    "4g": ChannelProfile(
        name="4g",
        latency_components=(LatencyComponent(1.0, 134.0, 12.0),),
        per_sample_corruption_prob=0.0085,
    ),
    "5g": ChannelProfile(
        name="5g",
        latency_components=(LatencyComponent(1.0, 114.0, 6.0),),
        per_sample_corruption_prob=0.0007,
    ),
}


def preset(generation: str) -> ChannelProfile:
    """Return the built-in profile for a cellular generation name."""
    try:
        return PRESETS[generation.lower()]
    except KeyError:
        raise ProfileError(
            f"unknown generation {generation!r}; expected one of {', '.join(sorted(PRESETS))}"
        ) from None


def load_profile(name_or_path: str) -> ChannelProfile:
    """Resolve a preset name (``3g``/``4g``/``5g``) or read a profile JSON file."""
    key = name_or_path.lower()
    if key in PRESETS:
        return PRESETS[key]
    try:
        with open(name_or_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ProfileError(
            f"unknown profile {name_or_path!r}: not a preset ({', '.join(sorted(PRESETS))}) "
            "and no such file"
        ) from None
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{name_or_path}: invalid JSON: {exc}") from None
    return profile_from_dict(raw, default_name=name_or_path)


def profile_from_dict(raw: dict, default_name: str = "custom") -> ChannelProfile:
    try:
        comps = tuple(
            LatencyComponent(float(c["weight"]), float(c["mean_ms"]), float(c["std_ms"]))
            for c in raw["latency_components"]
        )
        return ChannelProfile(
            name=str(raw.get("name", default_name)),
            latency_components=comps,
            per_sample_corruption_prob=float(raw.get("per_sample_corruption_prob", 0.0)),
            per_batch_loss_prob=float(raw.get("per_batch_loss_prob", 0.0)),
            clock_skew_ms=float(raw.get("clock_skew_ms", 0.0)),
            seed=int(raw.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProfileError):
            raise
        raise ProfileError(f"bad profile definition: {exc}") from None


def profile_to_dict(profile: ChannelProfile) -> dict:
    return {
        "name": profile.name,
        "latency_components": [
            {"weight": c.weight, "mean_ms": c.mean_ms, "std_ms": c.std_ms}
            for c in profile.latency_components
        ],
        "per_sample_corruption_prob": profile.per_sample_corruption_prob,
        "per_batch_loss_prob": profile.per_batch_loss_prob,
        "clock_skew_ms": profile.clock_skew_ms,
        "seed": profile.seed,
    }


def sample_latency(profile: ChannelProfile, rng: random.Random) -> float:
    """Draw one latency: pick a component by weight, then its Gaussian,
    truncated below at zero (negligible mass there for the presets)."""
    pick = rng.random()
    acc = 0.0
    comp = profile.latency_components[-1]
    for c in profile.latency_components:
        acc += c.weight
        if pick < acc:
            comp = c
            break
    return max(rng.gauss(comp.mean_ms, comp.std_ms), 0.0)


@dataclass(frozen=True)
class Delivery:
    """A payload scheduled to arrive at the far end at ``deliver_at_ms``."""

    deliver_at_ms: float
    payload: bytes


class ChannelEmulator:
    """Stateful per-connection link shim.

    Draw order per batch is fixed (loss gate, then latency, then one
    corruption gate per sample field, each corrupt field drawing a non-zero
    32-bit XOR mask) so identical seeds replay identical impairment
    sequences.  Control frames share the same RNG stream via
    :meth:`pass_through`.
    """

    def __init__(self, profile: ChannelProfile, connection_id="0"):
        self.profile = profile
        self.connection_id = str(connection_id)
        self._rng = random.Random(f"{profile.seed}:{self.connection_id}")
        self._last_deliver_ms = -math.inf
        self.sent = 0
        self.dropped = 0
        self.corrupted_fields = 0

    def _schedule(self, arrival_ms: float) -> float:
        latency = sample_latency(self.profile, self._rng)
        deliver = arrival_ms + latency + self.profile.clock_skew_ms
        deliver = max(deliver, self._last_deliver_ms)
        self._last_deliver_ms = deliver
        return deliver

    def transmit(self, payload: bytes, arrival_ms: float) -> Optional[Delivery]:
        """Impair one batch payload entering the link at ``arrival_ms``.

        Returns ``None`` when the batch is lost (no further draws are made
        for a lost batch); otherwise the possibly-corrupted payload with its
        in-order delivery time.
        """
        if len(payload) != _BATCH_PAYLOAD_LEN:
            raise ValueError(
                f"batch payload must be {_BATCH_PAYLOAD_LEN} bytes, got {len(payload)}"
            )
        self.sent += 1
        if self.profile.per_batch_loss_prob > 0 and self._rng.random() < self.profile.per_batch_loss_prob:
            self.dropped += 1
            return None
        deliver = self._schedule(arrival_ms)
        p_corrupt = self.profile.per_sample_corruption_prob
        if p_corrupt <= 0:
            return Delivery(deliver, bytes(payload))
        data = bytearray(payload)
        for i in range(_SAMPLES_PER_BATCH):
            if self._rng.random() < p_corrupt:
                mask = self._rng.getrandbits(32)
                while mask == 0:
                    mask = self._rng.getrandbits(32)
                lo = _SAMPLES_OFFSET + i * _SAMPLE_WIDTH
                word = int.from_bytes(data[lo:lo + _SAMPLE_WIDTH], "little") ^ mask
                data[lo:lo + _SAMPLE_WIDTH] = word.to_bytes(_SAMPLE_WIDTH, "little")
                self.corrupted_fields += 1
        return Delivery(deliver, bytes(data))

    def pass_through(self, payload: bytes, arrival_ms: float) -> Delivery:
        """Delay a control frame without loss or corruption (same RNG stream)."""
        return Delivery(self._schedule(arrival_ms), bytes(payload))
