"""Multi-view pixel correspondence mining.

Frames are lifted to world space and matched with a fixed-radius nearest
neighbour search over a spatial hash grid whose cell edge equals the
matching radius, so the 27-cell neighbourhood of a query cell is always
sufficient. Matching is one-directional (each source pixel keeps its nearest
target within the radius) and fully deterministic: ties go to the smaller
distance, then the lower row-major target pixel index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numba
import numpy as np

from ._parallel import pmap
from .errors import ZeroValidPixels
from .geometry import CameraFrame, WorldPoints, frame_to_world_points

DEFAULT_RADIUS = 0.02
DEFAULT_FRAME_STRIDE = 25
DEFAULT_MIN_OVERLAP = 0.3

_KEY_OFFSET = 1 << 20
_KEY_BITS = 21


def _cell_keys(cells: np.ndarray) -> np.ndarray:
    if cells.size and np.abs(cells).max() >= _KEY_OFFSET:
        raise ValueError("point coordinates too large for the spatial hash key range")
    c = cells.astype(np.int64) + _KEY_OFFSET
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


@dataclass(eq=False)
class CorrespondenceSet:
    """Pixel-to-pixel matches from a source frame into a target frame."""

    source_id: int
    target_id: int
    pixels_a: np.ndarray  # (N, 2) int64 (u, v) in the source frame
    pixels_b: np.ndarray  # (N, 2) int64 (u, v) in the target frame
    distances: np.ndarray  # (N,) float64 world distance in meters
    valid_a: int
    valid_b: int
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        self.pixels_a = np.asarray(self.pixels_a, dtype=np.int64).reshape(-1, 2)
        self.pixels_b = np.asarray(self.pixels_b, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if not (len(self.pixels_a) == len(self.pixels_b) == len(self.distances)):
            raise ValueError("correspondence arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.distances)

    def records(self) -> set[tuple]:
        return {
            (int(a[0]), int(a[1]), int(b[0]), int(b[1]), float(d))
            for a, b, d in zip(self.pixels_a, self.pixels_b, self.distances)
        }

    def same_matches(self, other: "CorrespondenceSet") -> bool:
        return (
            np.array_equal(self.pixels_a, other.pixels_a)
            and np.array_equal(self.pixels_b, other.pixels_b)
            and np.array_equal(self.distances, other.distances)
        )

    def subset(self, idx: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.source_id, self.target_id, self.pixels_a[idx], self.pixels_b[idx],
            self.distances[idx], self.valid_a, self.valid_b, self.radius,
        )


@dataclass(frozen=True)
class FramePair:
    i: int
    j: int
    overlap: float
    count: int


class SpatialHashGrid:
    """Points bucketed by ``floor(p / cell)``.

    Buckets are stored CSR-style: ``keys`` holds the sorted occupied cell
    keys, ``starts`` the bucket boundaries into ``order``, and ``order`` the
    point indices sorted by (cell key, point index).
    """

    def __init__(self, points: np.ndarray, cell: float, pixels: np.ndarray | None = None):
        if not cell > 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        self.pixels = None if pixels is None else np.asarray(pixels, dtype=np.int64)
        cells = np.floor(self.points / self.cell).astype(np.int64)
        keys = _cell_keys(cells)
        self.order = np.argsort(keys, kind="stable").astype(np.int64)
        sorted_keys = keys[self.order]
        self.keys, first = np.unique(sorted_keys, return_index=True)
        self.starts = np.append(first, len(sorted_keys)).astype(np.int64)
        self._cells = cells

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_cells(self) -> int:
        return len(self.keys)

    def cell_of(self, p) -> tuple[int, int, int]:
        c = np.floor(np.asarray(p, dtype=np.float64) / self.cell).astype(np.int64)
        return int(c[0]), int(c[1]), int(c[2])

    def __getitem__(self, cell) -> np.ndarray:
        """Indices of the points stored in ``cell`` (empty if unoccupied)."""
        key = _cell_keys(np.asarray([cell], dtype=np.int64))[0]
        pos = np.searchsorted(self.keys, key)
        if pos == len(self.keys) or self.keys[pos] != key:
            return np.empty(0, dtype=np.int64)
        return self.order[self.starts[pos] : self.starts[pos + 1]]

    def cells(self) -> list[tuple[int, int, int]]:
        firsts = self.order[self.starts[:-1]]
        return [tuple(int(x) for x in self._cells[i]) for i in firsts]

    def nearest(self, queries: np.ndarray, radius: float, tie: np.ndarray | None = None):
        """Nearest stored point within ``radius`` of each query.

        Returns ``(index, distance)`` arrays; index is -1 where nothing lies
        within the radius. ``tie`` ranks equidistant candidates (lower wins)
        and defaults to the storage index.
        """
        if radius > self.cell:
            raise ValueError("query radius exceeds the grid cell size")
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        if tie is None:
            tie = np.arange(len(self.points), dtype=np.int64)
        if len(self.points) == 0:
            return np.full(len(q), -1, dtype=np.int64), np.full(len(q), np.inf)
        return _grid_nearest(q, self.points, np.asarray(tie, dtype=np.int64), self.keys,
                             self.starts, self.order, self.cell, float(radius))


def build_grid(points, cell: float, pixels=None) -> SpatialHashGrid:
    return SpatialHashGrid(points, cell, pixels)


@numba.njit(cache=True, nogil=True)
def _grid_nearest(q, pts, tie, keys, starts, order, cell, radius):
    n = q.shape[0]
    best_j = np.full(n, -1, dtype=np.int64)
    best_d = np.full(n, np.inf)
    nk = keys.shape[0]
    off = 1 << 20
    for i in range(n):
        qx, qy, qz = q[i, 0], q[i, 1], q[i, 2]
        cx = np.int64(np.floor(qx / cell))
        cy = np.int64(np.floor(qy / cell))
        cz = np.int64(np.floor(qz / cell))
        bd = np.inf
        bj = -1
        bt = 0
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    key = ((cx + dx + off) << 42) | ((cy + dy + off) << 21) | (cz + dz + off)
                    pos = np.searchsorted(keys, key)
                    if pos >= nk or keys[pos] != key:
                        continue
                    for s in range(starts[pos], starts[pos + 1]):
                        j = order[s]
                        ex = qx - pts[j, 0]
                        ey = qy - pts[j, 1]
                        ez = qz - pts[j, 2]
                        d = np.sqrt(ex * ex + ey * ey + ez * ez)
                        if d <= radius and (d < bd or (d == bd and tie[j] < bt)):
                            bd = d
                            bj = j
                            bt = tie[j]
        best_j[i] = bj
        best_d[i] = bd
    return best_j, best_d


def match_points(wa: WorldPoints, wb: WorldPoints, radius: float = DEFAULT_RADIUS,
                 source_id: int = 0, target_id: int = 0) -> CorrespondenceSet:
    """Grid-accelerated matching of pre-lifted world points."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    grid = SpatialHashGrid(wb.points, radius)
    j, d = grid.nearest(wa.points, radius, tie=wb.pixel_index)
    hit = j >= 0
    # wa is already in row-major pixel order, so the result is sorted
    return CorrespondenceSet(
        source_id, target_id, wa.pixels[hit], wb.pixels[j[hit]], d[hit],
        len(wa), len(wb), radius,
    )


def match_frames(fA: CameraFrame, fB: CameraFrame, radius: float = DEFAULT_RADIUS,
                 stride: int = 1) -> CorrespondenceSet:
    return match_points(frame_to_world_points(fA, stride), frame_to_world_points(fB, stride),
                        radius, fA.frame_index, fB.frame_index)


def compute_overlap(corrs: CorrespondenceSet) -> float:
    total = corrs.valid_a + corrs.valid_b
    if total == 0:
        raise ZeroValidPixels("neither frame has valid depth pixels")
    return float(min(1.0, max(0.0, 2.0 * len(corrs) / total)))


def candidate_frames(seq: list[CameraFrame], frame_stride: int) -> list[CameraFrame]:
    if frame_stride < 1:
        raise ValueError("frame stride must be >= 1")
    return list(seq[::frame_stride])


def mine_pairs(seq: list[CameraFrame], frame_stride: int = DEFAULT_FRAME_STRIDE,
               min_overlap: float = DEFAULT_MIN_OVERLAP, radius: float = DEFAULT_RADIUS,
               pixel_stride: int = 1, threads: int | None = None) -> list[FramePair]:
    """Overlapping frame pairs among every ``frame_stride``-th frame."""
    if not seq:
        raise ValueError("sequence is empty")
    frames = candidate_frames(seq, frame_stride)
    lifted = pmap(lambda f: frame_to_world_points(f, pixel_stride), frames, threads)
    combos = list(itertools.combinations(range(len(frames)), 2))

    def evaluate(ab):
        a, b = ab
        c = match_points(lifted[a], lifted[b], radius, frames[a].frame_index, frames[b].frame_index)
        if c.valid_a + c.valid_b == 0:
            return None
        return FramePair(frames[a].frame_index, frames[b].frame_index, compute_overlap(c), len(c))

    pairs = [p for p in pmap(evaluate, combos, threads) if p is not None]
    return sorted((p for p in pairs if p.overlap >= min_overlap), key=lambda p: (p.i, p.j))


def subsample_matches(corrs: CorrespondenceSet, k: int, seed) -> CorrespondenceSet:
    """Uniform sample of ``min(k, |M|)`` matches, kept in source-pixel order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(corrs)
    if n <= k:
        return corrs.subset(np.arange(n))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return corrs.subset(idx)
