"""View-invariance score: positive minus negative cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMatchSet
from ..geometry import CameraFrame
from ..miner import CorrespondenceSet
from .encoder import EncoderParams, featmap_rows, image_forward


@dataclass
class InvarianceStats:
    source_id: int
    target_id: int
    n_pos: int
    n_neg: int
    pos_cos: float
    neg_cos: float

    @property
    def score(self) -> float:
        return self.pos_cos - self.neg_cos


def _unit(f: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(n == 0, 1.0, n)


def pair_invariance(params: EncoderParams, fa: CameraFrame, fb: CameraFrame, corrs: CorrespondenceSet,
                    n_neg: int = 2048, seed: int = 0) -> InvarianceStats:
    """Cosine statistics for one evaluation pair.

    Positives are every match in ``corrs``. Negatives pair a random matched
    source location with the target location of a different match, skipping
    draws that land on the true partner's feature cell.
    """
    if len(corrs) == 0:
        raise EmptyMatchSet("evaluation pair has no correspondences")
    d = params.dim
    A = _unit(image_forward(params, fa.color)[0].reshape(-1, d))
    B = _unit(image_forward(params, fb.color)[0].reshape(-1, d))
    ra = featmap_rows(corrs.pixels_a, fa.width)
    rb = featmap_rows(corrs.pixels_b, fb.width)
    pos = np.sum(A[ra] * B[rb], axis=1)

    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(ra), size=n_neg)
    j = rng.integers(0, len(rb), size=n_neg)
    keep = rb[j] != rb[i]
    neg = np.sum(A[ra[i[keep]]] * B[rb[j[keep]]], axis=1)
    neg_mean = float(neg.mean()) if len(neg) else float(pos.mean())
    return InvarianceStats(corrs.source_id, corrs.target_id, len(pos), len(neg), float(pos.mean()), neg_mean)


def view_invariance_score(params: EncoderParams, eval_pairs, n_neg: int = 2048, seed: int = 0) -> float:
    """Mean over ``(frame_a, frame_b, corrs)`` triples of the per-pair score."""
    stats = [pair_invariance(params, fa, fb, c, n_neg, seed + k) for k, (fa, fb, c) in enumerate(eval_pairs)]
    return float(np.mean([s.score for s in stats]))
