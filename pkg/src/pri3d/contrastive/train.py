"""Joint view + geometry loss over a frame pair and its SGD training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .._parallel import pmap
from ..errors import DivergenceDetected, EmptyMatchSet, InvalidConfig
from ..geometry import CameraFrame
from ..geoprior import OccupancyChunk, PixelVoxelCorrs
from ..miner import CorrespondenceSet, subsample_matches
from .encoder import (
    EncoderParams,
    chunk_backward,
    chunk_forward,
    chunk_neighbourhoods,
    featmap_rows,
    image_backward,
    image_forward,
)
from .loss import DEFAULT_TAU, point_info_nce


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 8
    decay: float = 0.99
    decay_every: int = 1000
    iterations: int = 200
    tau: float = DEFAULT_TAU
    k: int = 1024
    w_view: float = 1.0
    w_geo: float = 1.0
    momentum: float = 0.0
    geo_grad_3d: bool = True
    eval_every: int = 50

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise InvalidConfig("learning rate must be finite and >= 0")
        if not self.tau > 0:
            raise InvalidConfig("temperature must be positive")
        if self.w_view < 0 or self.w_geo < 0 or (self.w_view == 0 and self.w_geo == 0):
            raise InvalidConfig("loss weights must be >= 0 and not both zero")
        if self.batch_size < 1 or self.k < 1 or self.iterations < 0:
            raise InvalidConfig("batch size and k must be >= 1, iterations >= 0")

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay ** (step // self.decay_every)


@dataclass
class PairSample:
    """One training tuple: two overlapping frames and their chunks."""

    frame_i: CameraFrame
    frame_j: CameraFrame
    chunk_i: OccupancyChunk
    chunk_j: OccupancyChunk
    view: CorrespondenceSet
    geo_i: PixelVoxelCorrs
    geo_j: PixelVoxelCorrs
    _nbh: dict = field(default_factory=dict, repr=False)

    def neighbourhoods(self, which: str) -> np.ndarray:
        if which not in self._nbh:
            self._nbh[which] = chunk_neighbourhoods(self.chunk_i if which == "i" else self.chunk_j)
        return self._nbh[which]


@dataclass
class JointReport:
    loss_sum: float
    loss_mean: float
    count: int
    tau: float
    view_sum: float = 0.0
    view_count: int = 0
    geo_sum: float = 0.0
    geo_count: int = 0
    grads: EncoderParams | None = None

    @property
    def view_mean(self) -> float:
        return self.view_sum / self.view_count if self.view_count else float("nan")

    @property
    def geo_mean(self) -> float:
        return self.geo_sum / self.geo_count if self.geo_count else float("nan")


def joint_loss(params: EncoderParams, frames, chunks, m_view: CorrespondenceSet,
               m_geo_i: PixelVoxelCorrs, m_geo_j: PixelVoxelCorrs, cfg: TrainConfig,
               grad: bool = True, neighbourhoods=None) -> JointReport:
    """Weighted view loss plus both geometry losses for one frame pair.

    ``loss_sum`` is ``w_view * L_view + w_geo * (L_geo_i + L_geo_j)`` and
    ``count`` the number of matches in the enabled terms. Gradients are with
    respect to ``loss_sum``.
    """
    fi, fj = frames
    use_view, use_geo = cfg.w_view > 0, cfg.w_geo > 0
    feats, caches = [], []
    for f in (fi, fj):
        F, cache = image_forward(params, f.color)
        feats.append(F)
        caches.append(cache)
    d = params.dim
    flat = [F.reshape(-1, d) for F in feats]
    dflat = [np.zeros_like(x) for x in flat]
    rep = JointReport(0.0, 0.0, 0, cfg.tau)
    g = params.zeros_like() if grad else None

    if use_view:
        if len(m_view) == 0:
            raise EmptyMatchSet("view correspondence set is empty")
        M = np.stack([featmap_rows(m_view.pixels_a, fi.width), featmap_rows(m_view.pixels_b, fj.width)], 1)
        r = point_info_nce(flat[0], flat[1], M, cfg.tau, params.normalize, grad)
        rep.view_sum, rep.view_count = r.loss_sum, r.count
        if grad:
            dflat[0] += cfg.w_view * r.grad_a
            dflat[1] += cfg.w_view * r.grad_b

    if use_geo:
        nbhs = neighbourhoods or (chunk_neighbourhoods(chunks[0]), chunk_neighbourhoods(chunks[1]))
        for side, (f, chunk, mg, nbh) in enumerate(zip(frames, chunks, (m_geo_i, m_geo_j), nbhs)):
            if len(mg) == 0:
                raise EmptyMatchSet(f"geometry correspondence set for frame {f.frame_index} is empty")
            # only matched voxels enter the loss, so only those are encoded
            used, vrow = np.unique(chunk.rows_of(mg.voxels), return_inverse=True)
            V, vcache = chunk_forward(params, nbh[used])
            M = np.stack([featmap_rows(mg.pixels, f.width), vrow.reshape(-1)], 1)
            r = point_info_nce(flat[side], V, M, cfg.tau, params.normalize, grad)
            rep.geo_sum += r.loss_sum
            rep.geo_count += r.count
            if grad:
                dflat[side] += cfg.w_geo * r.grad_a
                if cfg.geo_grad_3d:
                    for k, v in chunk_backward(params, vcache, cfg.w_geo * r.grad_b).items():
                        g.arrays[k] += v

    rep.loss_sum = cfg.w_view * rep.view_sum + cfg.w_geo * rep.geo_sum
    rep.count = (rep.view_count if use_view else 0) + (rep.geo_count if use_geo else 0)
    rep.loss_mean = rep.loss_sum / rep.count
    if grad:
        for F, dF, cache in zip(feats, dflat, caches):
            if np.any(dF):
                for k, v in image_backward(params, cache, dF.reshape(F.shape)).items():
                    g.arrays[k] += v
        rep.grads = g
    return rep


def sample_tuple(s: PairSample, k: int, seed) -> tuple:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=3)
    v = subsample_matches(s.view, k, int(seeds[0])) if len(s.view) else s.view
    gi = _subsample_pv(s.geo_i, k, int(seeds[1]))
    gj = _subsample_pv(s.geo_j, k, int(seeds[2]))
    return v, gi, gj


def _subsample_pv(c: PixelVoxelCorrs, k: int, seed: int) -> PixelVoxelCorrs:
    n = len(c)
    if n <= k:
        return c
    return c.subset(np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False)))


def sample_loss(params: EncoderParams, s: PairSample, cfg: TrainConfig, seed, grad: bool = True) -> JointReport:
    v, gi, gj = sample_tuple(s, cfg.k, seed)
    return joint_loss(params, (s.frame_i, s.frame_j), (s.chunk_i, s.chunk_j), v, gi, gj, cfg, grad,
                      (s.neighbourhoods("i"), s.neighbourhoods("j")) if cfg.w_geo > 0 else None)


def dataset_loss(params: EncoderParams, dataset: list[PairSample], cfg: TrainConfig, seed: int = 0,
                 threads: int | None = None) -> float:
    """Mean ``loss_mean`` over the dataset with a fixed correspondence draw."""
    reps = pmap(lambda t: sample_loss(params, t[1], cfg, (seed, t[0]), grad=False),
                list(enumerate(dataset)), threads)
    return float(np.mean([r.loss_mean for r in reps]))


@dataclass
class TraceRow:
    step: int
    lr: float
    loss_mean: float
    loss_view_mean: float
    loss_geo_mean: float
    invariance_score: float = float("nan")


@dataclass
class TrainResult:
    params: EncoderParams
    trace: list[TraceRow]
    invariance: list[tuple[int, float]]


def _batch_indices(n: int, batch: int, step: int, seed: int) -> list[int]:
    out = []
    for pos in range(step * batch, (step + 1) * batch):
        epoch, r = divmod(pos, n)
        perm = np.random.default_rng((seed, epoch)).permutation(n)
        out.append(int(perm[r]))
    return out


def train(params: EncoderParams, dataset: list[PairSample], cfg: TrainConfig, seed: int = 0,
          eval_pairs=None, threads: int | None = None, log=None) -> TrainResult:
    """Plain SGD (optional momentum) on the batch-averaged ``loss_mean``.

    Batch items run in parallel; their gradients are summed in batch order,
    so the result does not depend on the worker count.
    """
    from .invariance import view_invariance_score

    if not dataset:
        raise ValueError("training dataset is empty")
    params = params.copy()
    velocity = params.zeros_like() if cfg.momentum else None
    trace, inv = [], []
    for step in range(cfg.iterations):
        idx = _batch_indices(len(dataset), cfg.batch_size, step, seed)
        reps = pmap(lambda bi: sample_loss(params, dataset[bi[1]], cfg, (seed, step, bi[0])),
                    list(enumerate(idx)), threads)
        loss = float(np.mean([r.loss_mean for r in reps]))
        if not math.isfinite(loss):
            raise DivergenceDetected(f"loss became non-finite at step {step}")
        lr = cfg.lr_at(step)
        row = TraceRow(step, lr, loss, float(np.mean([r.view_mean for r in reps])) if cfg.w_view > 0 else float("nan"),
                       float(np.mean([r.geo_mean for r in reps])) if cfg.w_geo > 0 else float("nan"))
        if eval_pairs and cfg.eval_every and (step % cfg.eval_every == 0):
            row.invariance_score = view_invariance_score(params, eval_pairs, seed=seed)
            inv.append((step, row.invariance_score))
        trace.append(row)
        if log:
            log(row)
        if lr == 0:
            continue
        scale = 1.0 / len(reps)
        for k in params.arrays:
            gk = reps[0].grads.arrays[k] / reps[0].count
            for r in reps[1:]:
                gk = gk + r.grads.arrays[k] / r.count
            gk *= scale
            if velocity is not None:
                velocity.arrays[k] = cfg.momentum * velocity.arrays[k] + gk
                gk = velocity.arrays[k]
            params.arrays[k] = params.arrays[k] - lr * gk
        if not all(np.all(np.isfinite(a)) for a in params.arrays.values()):
            raise DivergenceDetected(f"parameters became non-finite at step {step}")
    if eval_pairs and cfg.iterations:
        s = view_invariance_score(params, eval_pairs, seed=seed)
        inv.append((cfg.iterations, s))
    return TrainResult(params, trace, inv)
