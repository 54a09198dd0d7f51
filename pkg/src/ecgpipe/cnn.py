"""From-scratch 1-D CNN inference for 10-second ECG segments.

The classifier is the fixed eleven-compute-layer stack (four conv, four
max-pool, three dense) over one 2560-sample channel, with LeakyReLU(0.01)
after every conv/dense except the last, a flatten between the conv trunk and
the dense head, and a two-way softmax (p_mi, p_normal) at the end.

Numerics: inputs are integer amplitudes normalised by 2^15; conv/pool/dense
run in float32; the closing softmax runs in float64 so the two output
probabilities always sum to 1 well within 1e-9.  No learning framework is
involved -- the heavy lifting is plain numpy windowing and matmul.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

INPUT_LENGTH = 2560
AMPLITUDE_SCALE = 2.0 ** 15
DEFAULT_ALPHA = 0.01


class ShapeError(ValueError):
    """Layer shapes do not compose; message names the layer index."""


class ModelFormatError(ValueError):
    """Model file is not valid JSON or not a valid layer description."""


@dataclass(frozen=True)
class Conv1d:
    weights: np.ndarray  # (out_channels, in_channels, kernel)
    bias: np.ndarray     # (out_channels,)
    stride: int = 1


@dataclass(frozen=True)
class LeakyRelu:
    alpha: float = DEFAULT_ALPHA


@dataclass(frozen=True)
class MaxPool1d:
    size: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray     # (out_dim,)


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Conv1d, LeakyRelu, MaxPool1d, Flatten, Dense, Softmax]


@dataclass(frozen=True)
class ClassProbs:
    p_mi: float
    p_normal: float


@dataclass(frozen=True)
class Segment:
    index: int
    start_sample: int
    samples: np.ndarray


@dataclass(frozen=True)
class InferenceLogEntry:
    segment_index: int
    start_sample: int
    p_mi: float
    p_normal: float
    duration_ms: float


@dataclass
class Model:
    layers: list
    input_length: int = INPUT_LENGTH
    input_channels: int = 1

    def __post_init__(self):
        self.layers = list(self.layers)
        _validate_shapes(self)


def _validate_shapes(model: Model) -> None:
    """Walk the stack once; raises :class:`ShapeError` naming the bad layer."""
    if model.input_length < 1 or model.input_channels < 1:
        raise ShapeError("input must have positive channels and length")
    if not model.layers:
        raise ShapeError("model has no layers")
    shape = ("spatial", model.input_channels, model.input_length)
    for idx, layer in enumerate(model.layers):
        where = f"layer {idx} ({type(layer).__name__})"
        if isinstance(layer, Conv1d):
            if shape[0] != "spatial":
                raise ShapeError(f"{where}: conv after flatten")
            _, ch, length = shape
            w = np.asarray(layer.weights)
            if w.ndim != 3:
                raise ShapeError(f"{where}: weights must be 3-D, got shape {w.shape}")
            out_ch, in_ch, kernel = w.shape
            if in_ch != ch:
                raise ShapeError(f"{where}: expects {in_ch} input channels, stream has {ch}")
            if np.asarray(layer.bias).shape != (out_ch,):
                raise ShapeError(f"{where}: bias shape {np.asarray(layer.bias).shape} "
                                 f"!= ({out_ch},)")
            if layer.stride < 1 or kernel < 1 or kernel > length:
                raise ShapeError(f"{where}: kernel {kernel}/stride {layer.stride} "
                                 f"invalid for length {length}")
            shape = ("spatial", out_ch, (length - kernel) // layer.stride + 1)
        elif isinstance(layer, MaxPool1d):
            if shape[0] != "spatial":
                raise ShapeError(f"{where}: pool after flatten")
            _, ch, length = shape
            if layer.size < 1 or layer.stride < 1 or layer.size > length:
                raise ShapeError(f"{where}: pool size {layer.size}/stride {layer.stride} "
                                 f"invalid for length {length}")
            shape = ("spatial", ch, (length - layer.size) // layer.stride + 1)
        elif isinstance(layer, Flatten):
            if shape[0] != "spatial":
                raise ShapeError(f"{where}: duplicate flatten")
            shape = ("flat", shape[1] * shape[2])
        elif isinstance(layer, Dense):
            if shape[0] != "flat":
                raise ShapeError(f"{where}: dense before flatten")
            w = np.asarray(layer.weights)
            if w.ndim != 2:
                raise ShapeError(f"{where}: weights must be 2-D, got shape {w.shape}")
            out_dim, in_dim = w.shape
            if in_dim != shape[1]:
                raise ShapeError(f"{where}: expects {in_dim} inputs, stream has {shape[1]}")
            if np.asarray(layer.bias).shape != (out_dim,):
                raise ShapeError(f"{where}: bias shape mismatch")
            shape = ("flat", out_dim)
        elif isinstance(layer, (LeakyRelu, Softmax)):
            if isinstance(layer, Softmax) and idx != len(model.layers) - 1:
                raise ShapeError(f"{where}: softmax must be the final layer")
        else:
            raise ShapeError(f"{where}: unknown layer kind")
    if not isinstance(model.layers[-1], Softmax):
        raise ShapeError("final layer must be a softmax")
    if shape != ("flat", 2):
        raise ShapeError(f"final output shape {shape[1:]} != (2,)")


def conv1d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (no padding) 1-D convolution; ``x`` is (channels, length) float32."""
    windows = np.lib.stride_tricks.sliding_window_view(x, weights.shape[2], axis=1)
    windows = windows[:, ::stride, :]
    out = np.einsum("oik,ilk->ol", weights, windows, dtype=np.float32)
    return (out + bias[:, None]).astype(np.float32, copy=False)


def leaky_relu(x: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    return np.where(x >= 0, x, np.float32(alpha) * x)


def max_pool1d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, size, axis=1)
    return windows[:, ::stride, :].max(axis=2)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return (weights @ x + bias).astype(np.float32, copy=False)


def softmax(logits) -> np.ndarray:
    """Numerically stable (max-subtracted) softmax, computed in float64 so
    the output probabilities sum to 1 to full double precision."""
    v = np.asarray(logits, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def forward(model: Model, segment) -> ClassProbs:
    """Run one segment (``input_length`` integer amplitudes) through the model."""
    if isinstance(segment, Segment):
        segment = segment.samples
    seg = np.asarray(segment)
    if seg.shape != (model.input_length,):
        raise ValueError(f"segment shape {seg.shape} != ({model.input_length},)")
    x = (seg.astype(np.float32) / np.float32(AMPLITUDE_SCALE)).reshape(
        model.input_channels, -1
    )
    for layer in model.layers:
        if isinstance(layer, Conv1d):
            x = conv1d(x, layer.weights, layer.bias, layer.stride)
        elif isinstance(layer, LeakyRelu):
            x = leaky_relu(x, layer.alpha)
        elif isinstance(layer, MaxPool1d):
            x = max_pool1d(x, layer.size, layer.stride)
        elif isinstance(layer, Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, Dense):
            x = dense(x, layer.weights, layer.bias)
        elif isinstance(layer, Softmax):
            p = softmax(x)
            return ClassProbs(p_mi=float(p[0]), p_normal=float(p[1]))
    raise AssertionError("validated model always ends in softmax")


def default_model(seed: int = 20240) -> Model:
    """The fixed architecture with seeded He-style random weights.

    Weights are generated, not trained -- classification quality is out of
    scope here; the model exists to exercise inference numerics and timing.
    """
    rng = np.random.default_rng(seed)

    def conv(out_ch, in_ch, kernel):
        scale = np.sqrt(2.0 / (in_ch * kernel))
        return Conv1d(
            weights=rng.normal(0.0, scale, (out_ch, in_ch, kernel)).astype(np.float32),
            bias=rng.normal(0.0, 0.05, out_ch).astype(np.float32),
        )

    def dense_layer(out_dim, in_dim):
        scale = np.sqrt(2.0 / in_dim)
        return Dense(
            weights=rng.normal(0.0, scale, (out_dim, in_dim)).astype(np.float32),
            bias=rng.normal(0.0, 0.05, out_dim).astype(np.float32),
        )

    layers = [
        conv(3, 1, 5), LeakyRelu(), MaxPool1d(2, 2),
        conv(10, 3, 5), LeakyRelu(), MaxPool1d(2, 2),
        conv(10, 10, 5), LeakyRelu(), MaxPool1d(2, 2),
        conv(10, 10, 5), LeakyRelu(), MaxPool1d(2, 2),
        Flatten(),
        dense_layer(30, 1560), LeakyRelu(),
        dense_layer(10, 30), LeakyRelu(),
        dense_layer(2, 10),
        Softmax(),
    ]
    return Model(layers=layers)


def save_model(model: Model, path) -> None:
    """Write the model as canonical JSON (sorted keys, compact separators)."""
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv1d):
            layers.append({
                "type": "conv1d",
                "stride": layer.stride,
                "weights": np.asarray(layer.weights, dtype=np.float32).tolist(),
                "bias": np.asarray(layer.bias, dtype=np.float32).tolist(),
            })
        elif isinstance(layer, LeakyRelu):
            layers.append({"type": "leaky_relu", "alpha": layer.alpha})
        elif isinstance(layer, MaxPool1d):
            layers.append({"type": "max_pool1d", "size": layer.size, "stride": layer.stride})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
        elif isinstance(layer, Dense):
            layers.append({
                "type": "dense",
                "weights": np.asarray(layer.weights, dtype=np.float32).tolist(),
                "bias": np.asarray(layer.bias, dtype=np.float32).tolist(),
            })
        elif isinstance(layer, Softmax):
            layers.append({"type": "softmax"})
    doc = {
        "input_length": model.input_length,
        "input_channels": model.input_channels,
        "layers": layers,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> Model:
    """Read a model JSON; shape composition is checked here, once."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON: {exc}") from None
    try:
        layers = []
        for idx, raw in enumerate(doc["layers"]):
            kind = raw["type"]
            if kind == "conv1d":
                layers.append(Conv1d(
                    weights=np.array(raw["weights"], dtype=np.float32),
                    bias=np.array(raw["bias"], dtype=np.float32),
                    stride=int(raw.get("stride", 1)),
                ))
            elif kind == "leaky_relu":
                layers.append(LeakyRelu(alpha=float(raw.get("alpha", DEFAULT_ALPHA))))
            elif kind == "max_pool1d":
                layers.append(MaxPool1d(size=int(raw["size"]), stride=int(raw["stride"])))
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "dense":
                layers.append(Dense(
                    weights=np.array(raw["weights"], dtype=np.float32),
                    bias=np.array(raw["bias"], dtype=np.float32),
                ))
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise ModelFormatError(f"{path}: layer {idx}: unknown type {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (ModelFormatError, ShapeError)):
            raise
        raise ModelFormatError(f"{path}: bad layer description: {exc}") from None
    return Model(
        layers=layers,
        input_length=int(doc.get("input_length", INPUT_LENGTH)),
        input_channels=int(doc.get("input_channels", 1)),
    )


def segment_stream(samples, segment_len: int = INPUT_LENGTH, hop: Optional[int] = None):
    """Cut a received sample stream into ordered fixed-length segments.

    The default hop equals the segment length (no overlap); a trailing
    partial segment is dropped.
    """
    if hop is None:
        hop = segment_len
    if segment_len < 1 or hop < 1:
        raise ValueError("segment_len and hop must be >= 1")
    arr = np.asarray(samples, dtype=np.int64)
    segments = []
    index = 0
    start = 0
    while start + segment_len <= arr.size:
        segments.append(Segment(index=index, start_sample=start,
                                samples=arr[start:start + segment_len].astype(np.int32)))
        index += 1
        start += hop
    return segments


def classify_stream(model: Model, segments, workers: int = 2):
    """Classify segments on a small thread pool.

    Results keep segment order regardless of worker interleaving;
    ``duration_ms`` wraps only the forward pass of that segment.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    segments = list(segments)

    def job(segment: Segment) -> InferenceLogEntry:
        t0 = time.perf_counter()
        probs = forward(model, segment.samples)
        dt_ms = (time.perf_counter() - t0) * 1000.0
        return InferenceLogEntry(
            segment_index=segment.index,
            start_sample=segment.start_sample,
            p_mi=probs.p_mi,
            p_normal=probs.p_normal,
            duration_ms=dt_ms,
        )

    if not segments:
        return []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, segments))
