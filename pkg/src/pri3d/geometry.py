"""Pinhole camera model, rigid poses and depth back-projection.

Conventions
-----------
* Camera frame is x right, y down, z forward.
* Pixel centers sit at integer coordinates ``(u, v)``; ``u`` indexes columns.
* Poses are camera-to-world 4x4 homogeneous matrices.
* All geometry is float64. Bulk transforms are written out component by
  component instead of going through BLAS so results do not depend on the
  linear-algebra backend or its thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    BehindCamera,
    FrameMismatch,
    InvalidDepth,
    InvalidIntrinsics,
    InvalidPose,
    OutOfBounds,
    OutOfView,
)

POSE_TOL = 1e-6
PROJECT_SLACK = 1e-9

CAMERA = "camera"
WORLD = "world"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(x) for x in vals):
            raise InvalidIntrinsics(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics(f"bad image size {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidIntrinsics(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics with the principal point at the image center."""
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def check_rotation(R: np.ndarray, tol: float = POSE_TOL) -> float:
    """Return the worst deviation of ``R`` from a proper rotation."""
    ortho = np.abs(R.T @ R - np.eye(3)).max()
    det = abs(np.linalg.det(R) - 1.0)
    return float(max(ortho, det))


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Camera-to-world rigid transform stored as a 4x4 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidPose(f"pose must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidPose("pose contains non-finite values")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidPose(f"last row must be (0, 0, 0, 1), got {m[3]}")
        dev = check_rotation(m[:3, :3])
        if dev > POSE_TOL:
            raise InvalidPose(f"rotation block deviates from SO(3) by {dev:.3g}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, R, t) -> "RigidPose":
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return cls(m)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "RigidPose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-9:
            raise InvalidPose("look_at direction is parallel to the up vector")
        right /= n
        down = np.cross(fwd, right)
        return cls.from_rt(np.stack([right, down, fwd], axis=1), eye)

    @property
    def R(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R.T
        m[:3, 3] = -self.R.T @ self.t
        return m

    def __eq__(self, other):
        return isinstance(other, RigidPose) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    frame: str = CAMERA

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite point ({self.x}, {self.y}, {self.z})")
        if self.frame not in (CAMERA, WORLD):
            raise ValueError(f"unknown coordinate frame {self.frame!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(eq=False)
class CameraFrame:
    """One RGB-D observation: color, metric depth, intrinsics and pose."""

    frame_index: int
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 meters, 0 = invalid
    intrinsics: Intrinsics
    pose: RigidPose
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.color = np.asarray(self.color)
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3):
            raise FrameMismatch(f"color {self.color.shape} does not match depth {self.depth.shape}")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise FrameMismatch(
                f"intrinsics are for {self.intrinsics.width}x{self.intrinsics.height}, frame is {w}x{h}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidDepth("depth map must be finite and non-negative")

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0


def backproject(u, v, d, K: Intrinsics) -> Point3:
    """Lift pixel ``(u, v)`` with depth ``d`` into the camera frame."""
    if not math.isfinite(d) or d <= 0:
        raise InvalidDepth(f"depth must be positive and finite, got {d}")
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {K.width}x{K.height}")
    return Point3((u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, float(d), CAMERA)


def to_world(p: Point3, T: RigidPose) -> Point3:
    if p.frame != CAMERA:
        raise ValueError("to_world expects a camera-frame point")
    x, y, z = transform_points(T.matrix, np.array([[p.x, p.y, p.z]]))[0]
    return Point3(float(x), float(y), float(z), WORLD)


def project(p: Point3, T: RigidPose, K: Intrinsics) -> tuple[float, float, float]:
    """Project a world point to continuous pixel coordinates and depth."""
    if p.frame != WORLD:
        raise ValueError("project expects a world-frame point")
    x, y, z = transform_points(T.inverse_matrix(), np.array([[p.x, p.y, p.z]]))[0]
    if z <= 0:
        raise BehindCamera(f"point has camera depth {z}")
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    # a little slack so edge pixels survive the back-projection round trip
    if not (-PROJECT_SLACK <= u < K.width and -PROJECT_SLACK <= v < K.height):
        raise OutOfView(f"projection ({u:.3f}, {v:.3f}) outside the image")
    return float(u), float(v), float(z)


def transform_points(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply the rigid 4x4 transform ``M`` to an (N, 3) array."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    out = np.empty_like(pts)
    for r in range(3):
        out[:, r] = M[r, 0] * x + M[r, 1] * y + M[r, 2] * z + M[r, 3]
    return out


def backproject_pixels(u: np.ndarray, v: np.ndarray, d: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Vectorized :func:`backproject` without validation; returns (N, 3)."""
    return np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, np.asarray(d, dtype=np.float64)], axis=1)


class WorldPoints(NamedTuple):
    """Back-projected valid pixels of one frame, in row-major pixel order."""

    pixels: np.ndarray  # (N, 2) int64 columns (u, v)
    points: np.ndarray  # (N, 3) float64 world coordinates
    width: int

    @property
    def pixel_index(self) -> np.ndarray:
        return self.pixels[:, 1] * self.width + self.pixels[:, 0]

    def __len__(self):
        return len(self.pixels)


def frame_to_world_points(f: CameraFrame, stride: int = 1) -> WorldPoints:
    """World points of every valid-depth pixel on a ``stride`` lattice."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vs, us = np.mgrid[0 : f.height : stride, 0 : f.width : stride]
    d = f.depth[vs, us]
    keep = d > 0
    us, vs, d = us[keep].astype(np.int64), vs[keep].astype(np.int64), d[keep]
    cam = backproject_pixels(us.astype(np.float64), vs.astype(np.float64), d, f.intrinsics)
    pts = transform_points(f.pose.matrix, cam)
    return WorldPoints(np.stack([us, vs], axis=1), pts, f.width)


def count_valid(f: CameraFrame, stride: int = 1) -> int:
    return int(np.count_nonzero(f.depth[::stride, ::stride] > 0))
