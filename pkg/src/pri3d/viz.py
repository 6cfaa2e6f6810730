"""Static figures: correspondence pairs, loss traces and invariance reports.

Everything renders through the Agg backend to PNG files with fixed metadata,
so the same inputs produce the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .errors import FrameMismatch  # noqa: E402
from .geometry import CameraFrame, backproject_pixels, transform_points  # noqa: E402
from .miner import CorrespondenceSet  # noqa: E402

PNG_METADATA = {"Software": None}
_DPI = 100


@dataclass
class PairFigure:
    """What was drawn: segments in canvas pixels and their world distances."""

    segments: np.ndarray  # (n, 4) x0, y0, x1, y1; the target image is offset by the source width
    distances: np.ndarray  # (n,) recomputed world distance of each drawn pair
    indices: np.ndarray  # (n,) rows of the correspondence set


def world_of(f: CameraFrame, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    d = f.depth[pixels[:, 1], pixels[:, 0]]
    cam = backproject_pixels(pixels[:, 0].astype(np.float64), pixels[:, 1].astype(np.float64), d, f.intrinsics)
    return transform_points(f.pose.matrix, cam)


def sample_rows(n: int, sample: int, seed: int) -> np.ndarray:
    if sample < 0:
        raise ValueError("sample must be >= 0")
    if n <= sample:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=sample, replace=False))


def _canvas(fA: CameraFrame, fB: CameraFrame) -> np.ndarray:
    h = max(fA.height, fB.height)
    out = np.zeros((h, fA.width + fB.width, 3), dtype=np.uint8)
    out[: fA.height, : fA.width] = fA.color
    out[: fB.height, fA.width :] = fB.color
    return out


def visualize_pair(fA: CameraFrame, fB: CameraFrame, corrs: CorrespondenceSet, sample: int = 50,
                   out=None, seed: int = 0, cmap: str = "viridis") -> PairFigure:
    """Draw ``sample`` correspondence lines over the two images side by side.

    Each drawn pair is lifted to world space again from the frames' own depth
    and pose; a pair farther apart than the set's radius means the set does
    not belong to these frames and raises ``FrameMismatch``.
    """
    if (corrs.source_id, corrs.target_id) != (fA.frame_index, fB.frame_index):
        raise FrameMismatch(f"correspondences are for frames {corrs.source_id},{corrs.target_id}, "
                            f"not {fA.frame_index},{fB.frame_index}")
    rows = sample_rows(len(corrs), sample, seed)
    pa, pb = corrs.pixels_a[rows], corrs.pixels_b[rows]
    for f, p in ((fA, pa), (fB, pb)):
        if len(p) and (p[:, 0].max() >= f.width or p[:, 1].max() >= f.height or p.min() < 0):
            raise FrameMismatch(f"correspondence pixel outside frame {f.frame_index}")
    dist = np.linalg.norm(world_of(fA, pa) - world_of(fB, pb), axis=1) if len(rows) else np.zeros(0)
    if np.any(dist > corrs.radius * (1 + 1e-9)):
        raise FrameMismatch(f"drawn pair is {dist.max():.4f} m apart, above the radius {corrs.radius}")
    seg = np.zeros((len(rows), 4))
    seg[:, 0], seg[:, 1] = pa[:, 0], pa[:, 1]
    seg[:, 2], seg[:, 3] = pb[:, 0] + fA.width, pb[:, 1]

    if out is not None:
        canvas = _canvas(fA, fB)
        h, w = canvas.shape[:2]
        scale = max(1.0, 640.0 / w)
        fig = plt.figure(figsize=(w * scale / _DPI, h * scale / _DPI), dpi=_DPI)
        ax = fig.add_axes((0, 0, 1, 1))
        ax.imshow(canvas, interpolation="nearest")
        lc = LineCollection(seg.reshape(-1, 2, 2), cmap=cmap, linewidths=0.8)
        lc.set_array(dist)
        lc.set_clim(0.0, corrs.radius)
        ax.add_collection(lc)
        ax.set_xlim(-0.5, w - 0.5)
        ax.set_ylim(h - 0.5, -0.5)
        ax.axis("off")
        fig.savefig(out, format="png", metadata=PNG_METADATA)
        plt.close(fig)
    return PairFigure(seg, dist, rows)


def plot_loss_trace(trace, out) -> None:
    """Loss curves from ``TraceRow``-like records."""
    steps = np.array([r.step for r in trace])
    fig, ax = plt.subplots(figsize=(6, 4), dpi=_DPI)
    for name, label in (("loss_mean", "joint"), ("loss_view_mean", "view"), ("loss_geo_mean", "geo")):
        y = np.array([getattr(r, name) for r in trace], dtype=np.float64)
        if np.any(np.isfinite(y)):
            ax.plot(steps, y, label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (mean per match)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def plot_invariance(stats, out) -> None:
    """Per-pair positive and negative cosine bars from ``InvarianceStats``."""
    labels = [f"{s.source_id}-{s.target_id}" for s in stats]
    x = np.arange(len(stats))
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(stats) + 2), 4), dpi=_DPI)
    ax.bar(x - 0.2, [s.pos_cos for s in stats], 0.4, label="positive")
    ax.bar(x + 0.2, [s.neg_cos for s in stats], 0.4, label="negative")
    ax.set_xticks(x, labels, rotation=90, fontsize=7)
    ax.set_ylabel("mean cosine similarity")
    ax.axhline(0, color="k", lw=0.5)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, format="png", metadata=PNG_METADATA)
    plt.close(fig)
