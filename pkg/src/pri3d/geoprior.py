"""Frustum chunks, occupancy voxelization and pixel-voxel correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import pmap
from .errors import NoValidDepth
from .geometry import CameraFrame, frame_to_world_points

DEFAULT_VOXEL = 0.02


@dataclass(frozen=True, eq=False)
class FrustumBox:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts).reshape(-1, 3)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0


@dataclass(eq=False)
class OccupancyChunk:
    """Occupied cells of a voxel lattice anchored at ``origin``.

    ``occupied`` rows are unique (i, j, k) indices sorted lexicographically,
    which is also ascending linear-index order.
    """

    origin: np.ndarray
    voxel: float
    dims: tuple[int, int, int]
    occupied: np.ndarray  # (M, 3) int64
    frame_id: int = -1

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.occupied = np.asarray(self.occupied, dtype=np.int64).reshape(-1, 3)
        self.dims = tuple(int(n) for n in self.dims)
        if not self.voxel > 0:
            raise ValueError("voxel size must be positive")
        if len(self.occupied) and (
            np.any(self.occupied < 0) or np.any(self.occupied >= np.asarray(self.dims))
        ):
            raise ValueError("occupied voxel index outside chunk bounds")

    def __len__(self) -> int:
        return len(self.occupied)

    def linear(self, idx: np.ndarray | None = None) -> np.ndarray:
        idx = self.occupied if idx is None else np.asarray(idx, dtype=np.int64)
        _, ny, nz = self.dims
        return (idx[..., 0] * ny + idx[..., 1]) * nz + idx[..., 2]

    def centers(self, idx: np.ndarray | None = None) -> np.ndarray:
        idx = self.occupied if idx is None else np.asarray(idx, dtype=np.int64)
        return self.origin + (idx + 0.5) * self.voxel

    def rows_of(self, idx: np.ndarray) -> np.ndarray:
        """Row positions in ``occupied`` of the given voxel indices."""
        lin = self.linear()
        q = self.linear(np.asarray(idx, dtype=np.int64).reshape(-1, 3))
        pos = np.searchsorted(lin, q)
        if np.any(pos >= len(lin)) or np.any(lin[np.minimum(pos, len(lin) - 1)] != q):
            raise KeyError("voxel index not occupied in chunk")
        return pos

    def same_as(self, other: "OccupancyChunk") -> bool:
        return (
            np.array_equal(self.origin, other.origin)
            and self.voxel == other.voxel
            and self.dims == other.dims
            and np.array_equal(self.occupied, other.occupied)
        )


@dataclass(eq=False)
class PixelVoxelCorrs:
    frame_id: int
    pixels: np.ndarray  # (N, 2) int64 (u, v)
    voxels: np.ndarray  # (N, 3) int64 chunk indices
    distances: np.ndarray  # (N,) float64
    radius: float = DEFAULT_VOXEL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.distances)

    def subset(self, idx) -> "PixelVoxelCorrs":
        return PixelVoxelCorrs(self.frame_id, self.pixels[idx], self.voxels[idx],
                               self.distances[idx], self.radius)

    def same_matches(self, other: "PixelVoxelCorrs") -> bool:
        return (
            np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.distances, other.distances)
        )


def frustum_aabb(f: CameraFrame, voxel: float = DEFAULT_VOXEL, stride: int = 1) -> FrustumBox:
    """Bounding box of the frame's back-projected points, padded by one voxel."""
    pts = frame_to_world_points(f, stride).points
    if len(pts) == 0:
        raise NoValidDepth(f"frame {f.frame_index} has no valid depth")
    return FrustumBox(pts.min(axis=0) - voxel, pts.max(axis=0) + voxel)


def crop_chunk(surface_points: np.ndarray, box: FrustumBox, voxel: float = DEFAULT_VOXEL,
               frame_id: int = -1) -> OccupancyChunk:
    """Bin the surface points inside ``box`` into a lattice-snapped occupancy grid."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    origin = np.floor(box.lo / voxel) * voxel
    dims = (np.floor((box.hi - origin) / voxel).astype(np.int64) + 1)
    pts = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    pts = pts[box.contains(pts)]
    idx = np.floor((pts - origin) / voxel).astype(np.int64)
    # guard against a point on the far face rounding one cell past the end
    idx = np.minimum(np.maximum(idx, 0), dims - 1)
    occ = np.unique(idx, axis=0) if len(idx) else np.zeros((0, 3), dtype=np.int64)
    return OccupancyChunk(origin, float(voxel), tuple(dims), occ, frame_id)


def build_surface(frames: list[CameraFrame], stride: int = 1, threads: int | None = None) -> np.ndarray:
    """Point-cloud surface: union of all frames' back-projected depth."""
    parts = pmap(lambda f: frame_to_world_points(f, stride).points, frames, threads)
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def frame_chunk(f: CameraFrame, surface: np.ndarray, voxel: float = DEFAULT_VOXEL) -> OccupancyChunk:
    return crop_chunk(surface, frustum_aabb(f, voxel), voxel, f.frame_index)


def pixel_voxel_correspondences(f: CameraFrame, chunk: OccupancyChunk, radius: float = DEFAULT_VOXEL,
                                stride: int = 1) -> PixelVoxelCorrs:
    """Nearest occupied voxel center within ``radius`` of each valid pixel."""
    wp = frame_to_world_points(f, stride)
    empty = PixelVoxelCorrs(f.frame_index, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), radius)
    if len(chunk) == 0 or len(wp) == 0:
        return empty
    v = chunk.voxel
    base = np.floor((wp.points - chunk.origin) / v).astype(np.int64)
    s = int(np.floor(0.5 + radius / v))
    rng = np.arange(-s, s + 1)
    offs = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = base[:, None, :] + offs[None, :, :]  # (P, C, 3)
    inside = np.all((cand >= 0) & (cand < np.asarray(chunk.dims)), axis=2)
    lin_occ = chunk.linear()
    lin = chunk.linear(np.where(inside[..., None], cand, 0))
    pos = np.minimum(np.searchsorted(lin_occ, lin), len(lin_occ) - 1)
    occupied = inside & (lin_occ[pos] == lin)

    c = chunk.origin + (cand + 0.5) * v
    ex = wp.points[:, None, 0] - c[..., 0]
    ey = wp.points[:, None, 1] - c[..., 1]
    ez = wp.points[:, None, 2] - c[..., 2]
    d = np.sqrt(ex * ex + ey * ey + ez * ez)
    ok = occupied & (d <= radius)
    d = np.where(ok, d, np.inf)
    dmin = d.min(axis=1)
    lin_tie = np.where(ok & (d == dmin[:, None]), lin, np.iinfo(np.int64).max)
    pick = lin_tie.argmin(axis=1)
    hit = np.isfinite(dmin)
    rows = np.nonzero(hit)[0]
    return PixelVoxelCorrs(f.frame_index, wp.pixels[hit], cand[rows, pick[hit]], dmin[hit], radius)


def frame_chunks(frames: list[CameraFrame], surface: np.ndarray, voxel: float = DEFAULT_VOXEL,
                 threads: int | None = None) -> list[OccupancyChunk]:
    return pmap(lambda f: frame_chunk(f, surface, voxel), frames, threads)
