"""Grid and alignment renderings: binary PGM for tests/diffs, PNG figures for reading.

Images put time on the horizontal axis and the low end of the vertical
axis (mel bin 0, text position 0) at the bottom.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def to_gray(values: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Linear map [vmin, vmax] -> [0, 255]; a zero-width range maps to mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    if vmax <= vmin:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.round(np.clip((v - vmin) / (vmax - vmin), 0, 1) * 255).astype(np.uint8)


def grid_image(values: np.ndarray, vmin: float | None = None, vmax: float | None = None):
    """(bins x frames) uint8 image of a (frames, bins) grid, plus the bounds used."""
    v = np.asarray(values, dtype=np.float64)
    vmin = float(v.min()) if vmin is None else vmin
    vmax = float(v.max()) if vmax is None else vmax
    return to_gray(v.T[::-1], vmin, vmax), (vmin, vmax)


def attention_image(weights: np.ndarray) -> np.ndarray:
    """(U x steps) uint8 image with value round(255 * weight)."""
    w = np.asarray(weights, dtype=np.float64)
    return np.round(np.clip(w, 0, 1) * 255).astype(np.uint8).T[::-1]


def write_pgm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte follows maxval; pixel bytes may look like whitespace
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if head is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in head.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = data[head.end():head.end() + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def render_sample_figure(path, grid: np.ndarray, attention: np.ndarray | None = None,
                         title: str | None = None) -> None:
    """Alignment (if given) stacked over the generated grid, saved as PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = 2 if attention is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(6, 2.2 * rows), squeeze=False)
    ax = axes[0, 0]
    if attention is not None:
        ax.imshow(np.asarray(attention).T, origin="lower", aspect="auto", cmap="viridis",
                  interpolation="nearest", vmin=0, vmax=1)
        ax.set_ylabel("text position")
        ax = axes[1, 0]
    ax.imshow(np.asarray(grid).T, origin="lower", aspect="auto", cmap="magma", interpolation="nearest")
    ax.set_ylabel("mel bin")
    ax.set_xlabel("frame")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
