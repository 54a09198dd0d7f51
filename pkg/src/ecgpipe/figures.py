"""Histogram figure rendering for report output (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _hist_fields(histogram) -> tuple:
    if hasattr(histogram, "to_dict"):
        histogram = histogram.to_dict()
    width = histogram["bin_width_ms"]
    start = histogram["start_ms"]
    counts = list(histogram["counts"])
    starts = [start + k * width for k in range(len(counts))]
    return starts, counts, width


def save_histogram_figure(histogram, path, title, xlabel,
                          modes_ms=(), note=None) -> str:
    """Render one histogram to ``path``; returns the path.

    ``modes_ms`` values are drawn as dashed markers; ``note`` lands in the
    top-right corner (used for the clamp percentage on duration plots).
    """
    starts, counts, width = _hist_fields(histogram)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    if counts:
        ax.bar(starts, counts, width=width, align="edge",
               color="#4878a8", edgecolor="white", linewidth=0.3)
    else:
        ax.text(0.5, 0.5, "no data", transform=ax.transAxes,
                ha="center", va="center", color="gray")
    for mode in modes_ms:
        ax.axvline(mode, color="#c44e52", linestyle="--", linewidth=1.2)
        ax.annotate(f"{mode:.0f} ms", xy=(mode, 1.0), xycoords=("data", "axes fraction"),
                    xytext=(2, -12), textcoords="offset points",
                    color="#c44e52", fontsize=8)
    if note:
        ax.annotate(note, xy=(0.99, 0.97), xycoords="axes fraction",
                    ha="right", va="top", fontsize=8, color="dimgray")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("samples per bin")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return str(path)


def save_latency_figure(latency_dict, path, title) -> str:
    return save_histogram_figure(
        latency_dict["histogram"], path, title,
        xlabel="transmission delay (ms)",
        modes_ms=latency_dict.get("modes_ms", ()),
    )


def save_duration_figure(inference_dict, path, title) -> str:
    note = None
    if inference_dict.get("total"):
        note = f"{100.0 * inference_dict['clamped_fraction']:.2f}% clamped"
    return save_histogram_figure(
        inference_dict["histogram"], path, title,
        xlabel="inference duration (ms)",
        note=note,
    )
