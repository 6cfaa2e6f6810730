"""Procedural RGB-D scenes with closed-form ray casting.

Scenes are a box-shaped room (six inward-facing planes) with axis-aligned
boxes resting on the floor inside a central disk. Cameras move on a ring
around that disk, so no box ever contains a camera position. Because every
primitive is a plane or an axis-aligned box, the rendered depth is the exact
ray-primitive intersection, which makes the renderer usable as ground truth.

Color is a Lambertian term plus a Phong highlight that depends on the viewing
direction; albedo carries a world-anchored value-noise pattern so that local
appearance identifies surface locations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .geometry import CameraFrame, Intrinsics, RigidPose, frame_to_world_points
from .miner import CorrespondenceSet

FAR_CLIP = 10.0
SPECULAR = 0.3
PHONG_EXPONENT = 8
AMBIENT = 0.3
DIFFUSE = 0.6
DEFAULT_LIGHT = (0.3, 0.5, 1.0)
TEXTURE_SCALE = 0.12


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError("box half-extents must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.subtract(self.center, self.half)

    @property
    def hi(self) -> np.ndarray:
        return np.add(self.center, self.half)

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass(frozen=True)
class Plane:
    """Points ``x`` with ``normal . x == offset``."""

    normal: tuple[float, float, float]
    offset: float
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if abs(math.sqrt(sum(c * c for c in self.normal)) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    boxes: tuple[Box, ...]
    planes: tuple[Plane, ...]
    room_min: tuple[float, float, float]
    room_max: tuple[float, float, float]
    ring_radius: float = 1.8
    camera_height: float = 1.4
    texture: float = 0.35

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.room_min) + np.asarray(self.room_max)) / 2.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["boxes"] = tuple(Box(**{k: tuple(v) for k, v in b.items()}) for b in d["boxes"])
        d["planes"] = tuple(
            Plane(tuple(p["normal"]), p["offset"], tuple(p["albedo"])) for p in d["planes"]
        )
        d["room_min"], d["room_max"] = tuple(d["room_min"]), tuple(d["room_max"])
        return cls(**d)


def room_planes(lo, hi, albedos) -> tuple[Plane, ...]:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    normals = [(1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
               (0.0, -1.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, -1.0)]
    offsets = [x0, -x1, y0, -y1, z0, -z1]
    return tuple(Plane(n, float(o), a) for n, o, a in zip(normals, offsets, albedos))


def _albedo(rng) -> tuple[float, float, float]:
    return tuple(float(x) for x in np.round(rng.uniform(0.2, 0.9, size=3), 6))


def generate_scene(seed: int, n_boxes: int, texture: float = 0.35) -> SceneSpec:
    """Deterministic random room with ``n_boxes`` boxes inside the camera ring."""
    if n_boxes < 0:
        raise ValueError("n_boxes must be >= 0")
    rng = np.random.default_rng(seed)
    lx, ly = (float(x) for x in np.round(rng.uniform(5.0, 7.0, size=2), 3))
    lo, hi = (0.0, 0.0, 0.0), (lx, ly, 2.8)
    planes = room_planes(lo, hi, [_albedo(rng) for _ in range(6)])
    ring = 0.3 * min(lx, ly)
    cx, cy = lx / 2.0, ly / 2.0
    limit = ring - 0.5
    boxes = []
    while len(boxes) < n_boxes:
        hx, hy, hz = (float(x) for x in np.round(rng.uniform([0.08, 0.08, 0.08], [0.45, 0.45, 0.5]), 4))
        r = rng.uniform(0.0, limit)
        phi = rng.uniform(0.0, 2 * math.pi)
        bx, by = round(cx + r * math.cos(phi), 4), round(cy + r * math.sin(phi), 4)
        corner = math.hypot(abs(bx - cx) + hx, abs(by - cy) + hy)
        if corner > limit:
            continue
        boxes.append(Box((bx, by, hz), (hx, hy, hz), _albedo(rng)))
    return SceneSpec(int(seed), tuple(boxes), planes, lo, hi, ring, 1.4, float(texture))


@dataclass
class CameraPath:
    poses: list[RigidPose]
    intrinsics: Intrinsics
    fov_x_deg: float = 70.0
    meta: dict = field(default_factory=dict)


def circular_path(scene: SceneSpec, n_frames: int, width: int = 128, height: int = 96,
                  fov_x_deg: float = 70.0, look_height: float = 0.5, arc: float = 2 * math.pi) -> CameraPath:
    """Cameras on the scene's ring, looking at the room center."""
    c = scene.center
    poses = []
    for k in range(n_frames):
        phi = arc * k / n_frames
        eye = (c[0] + scene.ring_radius * math.cos(phi), c[1] + scene.ring_radius * math.sin(phi),
               scene.camera_height)
        poses.append(RigidPose.look_at(eye, (c[0], c[1], look_height)))
    return CameraPath(poses, Intrinsics.from_fov(width, height, fov_x_deg), fov_x_deg)


# --- procedural albedo -------------------------------------------------------

def _lattice_hash(ix, iy, iz, salt: int) -> np.ndarray:
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(p: np.ndarray, scale: float, salt: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1) evaluated at world points (N, 3)."""
    g = p / scale
    i0 = np.floor(g)
    f = g - i0
    w = f * f * (3.0 - 2.0 * f)
    i0 = i0.astype(np.int64)
    out = np.zeros(len(p))
    with np.errstate(over="ignore"):
        for dx in (0, 1):
            wx = w[:, 0] if dx else 1.0 - w[:, 0]
            for dy in (0, 1):
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                for dz in (0, 1):
                    wz = w[:, 2] if dz else 1.0 - w[:, 2]
                    v = _lattice_hash(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, salt)
                    out += wx * wy * wz * v
    return out


def albedo_pattern(p: np.ndarray, seed: int, amplitude: float) -> np.ndarray:
    """Per-channel multiplicative albedo variation, (N, 3), mean near 1."""
    if amplitude == 0:
        return np.ones((len(p), 3))
    chans = []
    for c in range(3):
        n = 0.65 * value_noise(p, TEXTURE_SCALE, seed * 7919 + c) + 0.35 * value_noise(
            p, TEXTURE_SCALE / 2.7, seed * 7919 + 101 + c)
        chans.append(1.0 - amplitude + 2.0 * amplitude * n)
    return np.stack(chans, axis=1)


# --- ray casting -------------------------------------------------------------

def _pixel_rays(pose: RigidPose, K: Intrinsics):
    vs, us = np.mgrid[0 : K.height, 0 : K.width]
    dc = np.stack([(us.ravel() - K.cx) / K.fx, (vs.ravel() - K.cy) / K.fy, np.ones(us.size)], axis=1)
    R = pose.R
    dw = np.empty_like(dc)
    for r in range(3):
        dw[:, r] = R[r, 0] * dc[:, 0] + R[r, 1] * dc[:, 1] + R[r, 2] * dc[:, 2]
    return dw


def cast_rays(scene: SceneSpec, eye: np.ndarray, dirs: np.ndarray):
    """Nearest hit along ``eye + s * dirs``.

    Returns ``(s, normal, albedo)`` with ``s = inf`` for misses. Normals are
    not yet oriented toward the viewer.
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        for pl in scene.planes:
            nv = np.asarray(pl.normal)
            denom = dirs @ nv
            s = (pl.offset - float(nv @ eye)) / denom
            hit = (denom != 0) & (s > 1e-9) & (s < best)
            best[hit] = s[hit]
            normal[hit] = nv
            albedo[hit] = pl.albedo
        for bx in scene.boxes:
            lo, hi = bx.lo, bx.hi
            tmins, tmaxs = [], []
            for a in range(3):
                d = dirs[:, a]
                t1 = (lo[a] - eye[a]) / d
                t2 = (hi[a] - eye[a]) / d
                tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
                par = d == 0
                inside = lo[a] <= eye[a] <= hi[a]
                tmin[par] = -np.inf if inside else np.inf
                tmax[par] = np.inf if inside else -np.inf
                tmins.append(tmin)
                tmaxs.append(tmax)
            tmins, tmaxs = np.stack(tmins, 1), np.stack(tmaxs, 1)
            near = tmins.max(axis=1)
            far = tmaxs.min(axis=1)
            hit = (near <= far) & (near > 1e-9) & (near < best)
            axis = tmins.argmax(axis=1)
            best[hit] = near[hit]
            nv = np.zeros((n, 3))
            nv[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            normal[hit] = nv[hit]
            albedo[hit] = bx.albedo
    return best, normal, albedo


def shade(albedo: np.ndarray, normal: np.ndarray, view: np.ndarray, light_dir) -> np.ndarray:
    """Lambert plus Phong highlight; ``view`` points from surface to camera."""
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    ndl = normal @ l
    lam = np.maximum(ndl, 0.0)
    refl = 2.0 * ndl[:, None] * normal - l
    rv = np.maximum(np.sum(refl * view, axis=1), 0.0)
    spec = SPECULAR * rv**PHONG_EXPONENT
    return albedo * (AMBIENT + DIFFUSE * lam)[:, None] + spec[:, None]


def quantize_color(c: np.ndarray) -> np.ndarray:
    return np.clip(np.round(c * 255.0), 0, 255).astype(np.uint8)


def render_frame(scene: SceneSpec, pose: RigidPose, K: Intrinsics, light_dir=DEFAULT_LIGHT,
                 frame_index: int = 0, depth_noise: float = 0.0, noise_seed: int = 0) -> CameraFrame:
    dirs = _pixel_rays(pose, K)
    eye = np.array(pose.t)
    s, normal, albedo = cast_rays(scene, eye, dirs)
    valid = np.isfinite(s) & (s <= FAR_CLIP)
    depth = np.where(valid, s, 0.0)
    color = np.zeros((len(dirs), 3))
    if valid.any():
        d = dirs[valid]
        p = eye + depth[valid, None] * d
        view = -d / np.linalg.norm(d, axis=1, keepdims=True)
        nrm = normal[valid]
        flip = np.sum(nrm * view, axis=1) < 0
        nrm[flip] *= -1.0
        alb = albedo[valid] * albedo_pattern(p, scene.seed, scene.texture)
        color[valid] = shade(alb, nrm, view, light_dir)
    if depth_noise > 0:
        rng = np.random.default_rng(noise_seed)
        depth = np.where(valid, np.maximum(depth + rng.normal(0.0, depth_noise, depth.shape), 0.0), 0.0)
    return CameraFrame(frame_index, quantize_color(color).reshape(K.height, K.width, 3),
                       depth.reshape(K.height, K.width), K, pose)


def render_path(scene: SceneSpec, path: CameraPath, light_dir=DEFAULT_LIGHT) -> list[CameraFrame]:
    return [render_frame(scene, T, path.intrinsics, light_dir, frame_index=k)
            for k, T in enumerate(path.poses)]


def surface_distance(scene: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest primitive surface."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(p), np.inf)
    for pl in scene.planes:
        best = np.minimum(best, np.abs(p @ np.asarray(pl.normal) - pl.offset))
    for bx in scene.boxes:
        lo, hi = bx.lo, bx.hi
        outside = np.linalg.norm(np.maximum(np.maximum(lo - p, p - hi), 0.0), axis=1)
        inside = np.minimum(p - lo, hi - p).min(axis=1)
        best = np.minimum(best, np.where(inside >= 0, inside, outside))
    return best


def sample_surface(scene: SceneSpec, spacing: float = 0.01) -> np.ndarray:
    """Regular point samples on every primitive inside the room, (N, 3)."""
    lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
    out = []
    for pl in scene.planes:
        nv = np.asarray(pl.normal)
        k = int(np.argmax(np.abs(nv)))
        a, b = [ax for ax in range(3) if ax != k]
        ga = np.arange(lo[a], hi[a] + 1e-12, spacing)
        gb = np.arange(lo[b], hi[b] + 1e-12, spacing)
        A, B = np.meshgrid(ga, gb, indexing="ij")
        pts = np.zeros((A.size, 3))
        pts[:, a], pts[:, b] = A.ravel(), B.ravel()
        pts[:, k] = (pl.offset - nv[a] * pts[:, a] - nv[b] * pts[:, b]) / nv[k]
        keep = (pts[:, k] >= lo[k]) & (pts[:, k] <= hi[k])
        out.append(pts[keep])
    for bx in scene.boxes:
        blo, bhi = bx.lo, bx.hi
        for k in range(3):
            a, b = [ax for ax in range(3) if ax != k]
            ga = np.arange(blo[a], bhi[a] + 1e-12, spacing)
            gb = np.arange(blo[b], bhi[b] + 1e-12, spacing)
            A, B = np.meshgrid(ga, gb, indexing="ij")
            for side in (blo[k], bhi[k]):
                pts = np.zeros((A.size, 3))
                pts[:, a], pts[:, b], pts[:, k] = A.ravel(), B.ravel(), side
                out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


# --- brute-force correspondence oracle ---------------------------------------

@numba.njit(cache=True, nogil=True)
def _exhaustive_nearest(a, b, tie, radius):
    na, nb = a.shape[0], b.shape[0]
    best_j = np.full(na, -1, dtype=np.int64)
    best_d = np.full(na, np.inf)
    for i in range(na):
        bd = np.inf
        bj = -1
        bt = 0
        for j in range(nb):
            ex = a[i, 0] - b[j, 0]
            ey = a[i, 1] - b[j, 1]
            ez = a[i, 2] - b[j, 2]
            d = np.sqrt(ex * ex + ey * ey + ez * ez)
            if d <= radius and (d < bd or (d == bd and tie[j] < bt)):
                bd = d
                bj = j
                bt = tie[j]
        best_j[i] = bj
        best_d[i] = bd
    return best_j, best_d


def oracle_correspondences(fA: CameraFrame, fB: CameraFrame, radius: float,
                           stride: int = 1) -> CorrespondenceSet:
    """Exhaustive O(N_A * N_B) scan applying the miner's matching rule."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    wa, wb = frame_to_world_points(fA, stride), frame_to_world_points(fB, stride)
    if len(wa) == 0 or len(wb) == 0:
        j = np.full(len(wa), -1, dtype=np.int64)
        d = np.full(len(wa), np.inf)
    else:
        j, d = _exhaustive_nearest(np.ascontiguousarray(wa.points), np.ascontiguousarray(wb.points),
                                   wb.pixel_index, float(radius))
    hit = j >= 0
    order = np.argsort(wa.pixel_index[hit], kind="stable")
    return CorrespondenceSet(
        fA.frame_index, fB.frame_index, wa.pixels[hit][order], wb.pixels[j[hit]][order],
        d[hit][order], len(wa), len(wb), radius,
    )
