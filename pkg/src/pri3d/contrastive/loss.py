"""PointInfoNCE contrastive loss with analytic gradients.

For matches ``M = [(a_0, b_0), ..., (a_{m-1}, b_{m-1})]`` the loss is

    sum_i  -log( exp(f_{a_i} . g_{b_i} / tau) / sum_k exp(f_{a_i} . g_{b_k} / tau) )

i.e. an m-way softmax per match whose candidates are the target-side
features of every match (duplicated targets are kept). Features may be
L2-normalized first; the gradient then includes the normalization Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMatchSet, NonFiniteFeature, NormalizationOfZeroVector

DEFAULT_TAU = 0.4


@dataclass
class LossReport:
    loss_sum: float
    loss_mean: float
    count: int
    tau: float
    grad_a: np.ndarray | None = None
    grad_b: np.ndarray | None = None


def l2_normalize(f: np.ndarray):
    """Row-normalize ``f``; returns ``(unit rows, norms)``."""
    norms = np.sqrt(np.sum(f * f, axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise NormalizationOfZeroVector("cannot normalize a zero feature vector")
    return f / norms, norms


def normalize_backward(z: np.ndarray, norms: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit vectors ``z = f/|f|`` back to ``f``."""
    return (dz - z * np.sum(z * dz, axis=-1, keepdims=True)) / norms


def _check(feat_a, feat_b, matches, tau):
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) == 0:
        raise EmptyMatchSet("correspondence set is empty")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.ndim != 2 or feat_b.ndim != 2 or feat_a.shape[1] != feat_b.shape[1]:
        raise ValueError(f"feature shapes {feat_a.shape} and {feat_b.shape} are incompatible")
    ia, ib = matches[:, 0], matches[:, 1]
    if ia.min() < 0 or ia.max() >= len(feat_a) or ib.min() < 0 or ib.max() >= len(feat_b):
        raise IndexError("match references a location outside its feature container")
    fa, fb = feat_a[ia], feat_b[ib]
    if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
        raise NonFiniteFeature("non-finite feature in a matched location")
    return feat_a, feat_b, ia, ib, fa, fb


def point_info_nce(feat_a, feat_b, matches, tau: float = DEFAULT_TAU, normalize: bool = True,
                   grad: bool = True) -> LossReport:
    """Loss over ``matches`` (rows of (index into feat_a, index into feat_b)).

    With ``grad=True`` the report carries gradients of ``loss_sum`` shaped
    like ``feat_a`` and ``feat_b``; rows not referenced by any match are zero.
    """
    feat_a, feat_b, ia, ib, fa, fb = _check(feat_a, feat_b, matches, tau)
    if normalize:
        za, na = l2_normalize(fa)
        zb, nb = l2_normalize(fb)
    else:
        za, zb = fa, fb
    logits = (za @ zb.T) / tau
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    denom = ex.sum(axis=1, keepdims=True)
    terms = (top[:, 0] + np.log(denom[:, 0])) - np.diagonal(logits)
    m = len(ia)
    loss_sum = float(np.sum(terms))
    report = LossReport(loss_sum, loss_sum / m, m, float(tau))
    if not grad:
        return report

    dlog = ex / denom
    dlog[np.arange(m), np.arange(m)] -= 1.0
    dza = (dlog @ zb) / tau
    dzb = (dlog.T @ za) / tau
    if normalize:
        dza = normalize_backward(za, na, dza)
        dzb = normalize_backward(zb, nb, dzb)
    ga = np.zeros_like(feat_a)
    gb = np.zeros_like(feat_b)
    np.add.at(ga, ia, dza)
    np.add.at(gb, ib, dzb)
    report.grad_a, report.grad_b = ga, gb
    return report


def point_info_nce_grad(feat_a, feat_b, matches, tau: float = DEFAULT_TAU, normalize: bool = True):
    r = point_info_nce(feat_a, feat_b, matches, tau, normalize, grad=True)
    return r.grad_a, r.grad_b
