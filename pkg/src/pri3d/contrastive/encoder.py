"""Tiny 2D and 3D encoders with hand-written backpropagation.

2D path (per image, zero padding 1)::

    conv3x3(3 -> 16, stride 2) -> tanh -> conv3x3(16 -> 32) -> tanh -> conv1x1(32 -> d)

The output is exactly half the input resolution; feature ``(i, j)`` is
centered on input pixel ``(2j, 2i)`` and sees a 7x7 input window.

3D path (per occupied voxel)::

    27 occupancy bits of the 3x3x3 neighbourhood -> affine(27 -> 32) -> tanh -> affine(32 -> d)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyChunk, NonFiniteFeature, OddDimensions, OutOfBounds
from ..geoprior import OccupancyChunk
from .loss import l2_normalize

HIDDEN_1 = 16
HIDDEN_2 = 32
HIDDEN_3D = 32
DEFAULT_DIM = 32

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "v1", "c1", "v2", "c2")
IMAGE_PARAMS = PARAM_NAMES[:6]
CHUNK_PARAMS = PARAM_NAMES[6:]


def param_shapes(dim: int = DEFAULT_DIM) -> dict[str, tuple[int, ...]]:
    return {
        "w1": (3, 3, 3, HIDDEN_1), "b1": (HIDDEN_1,),
        "w2": (3, 3, HIDDEN_1, HIDDEN_2), "b2": (HIDDEN_2,),
        "w3": (HIDDEN_2, dim), "b3": (dim,),
        "v1": (27, HIDDEN_3D), "c1": (HIDDEN_3D,),
        "v2": (HIDDEN_3D, dim), "c2": (dim,),
    }


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]
    normalize: bool = True

    def __post_init__(self):
        dim = self.arrays["b3"].shape[0]
        shapes = param_shapes(dim)
        if set(self.arrays) != set(PARAM_NAMES):
            raise ValueError(f"expected parameters {PARAM_NAMES}")
        for k in PARAM_NAMES:
            a = np.asarray(self.arrays[k], dtype=np.float64)
            if a.shape != shapes[k]:
                raise ValueError(f"{k} has shape {a.shape}, expected {shapes[k]}")
            if not np.all(np.isfinite(a)):
                raise NonFiniteFeature(f"parameter {k} is not finite")
            self.arrays[k] = a

    @property
    def dim(self) -> int:
        return self.arrays["b3"].shape[0]

    def __getitem__(self, k: str) -> np.ndarray:
        return self.arrays[k]

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()}, self.normalize)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams({k: np.zeros_like(v) for k, v in self.arrays.items()}, self.normalize)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        out, pos = {}, 0
        for k in PARAM_NAMES:
            a = self.arrays[k]
            out[k] = np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return EncoderParams(out, self.normalize)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def equals(self, other: "EncoderParams") -> bool:
        return self.normalize == other.normalize and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_NAMES
        )


def init_params(seed: int, dim: int = DEFAULT_DIM, normalize: bool = True,
                gain: float = 0.15) -> EncoderParams:
    """Small random weights plus a shared random output bias.

    The output biases of both paths are the same random unit vector and the
    weights are scaled down by ``gain``, so at initialization every feature
    points in nearly the same direction and carries almost no information.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(dim)
    arrays = {}
    for k in PARAM_NAMES:
        shp = shapes[k]
        if len(shp) == 1:
            arrays[k] = np.zeros(shp)
            continue
        fan_in = int(np.prod(shp[:-1]))
        arrays[k] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shp)
    arrays["w3"] *= gain
    arrays["v2"] *= gain
    bias = rng.normal(size=dim)
    bias /= np.linalg.norm(bias)
    arrays["b3"] = bias.copy()
    arrays["c2"] = bias.copy()
    return EncoderParams(arrays, normalize)


@dataclass
class FeatureMap:
    features: np.ndarray  # (H/2, W/2, d)
    normalized: bool

    @property
    def flat(self) -> np.ndarray:
        return self.features.reshape(-1, self.features.shape[-1])


@dataclass
class VoxelFeatures:
    occupied: np.ndarray  # (M, 3) chunk indices, same order as ``features``
    features: np.ndarray  # (M, d)
    normalized: bool


# --- 2D ---------------------------------------------------------------------

def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    H, W, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ho, wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    out = np.broadcast_to(b, (ho, wo, w.shape[-1])).copy()
    for ky in range(3):
        for kx in range(3):
            patch = xp[ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride]
            out += patch @ w[ky, kx]
    return out, xp


def _conv_backward(xp: np.ndarray, w: np.ndarray, dout: np.ndarray, stride: int, need_dx: bool):
    ho, wo, cout = dout.shape
    cin = xp.shape[-1]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    d2 = dout.reshape(-1, cout)
    for ky in range(3):
        for kx in range(3):
            sl = (slice(ky, ky + stride * (ho - 1) + 1, stride), slice(kx, kx + stride * (wo - 1) + 1, stride))
            dw[ky, kx] = xp[sl].reshape(-1, cin).T @ d2
            if need_dx:
                dxp[sl] += dout @ w[ky, kx].T
    db = d2.sum(axis=0)
    dx = dxp[1:-1, 1:-1] if need_dx else None
    return dw, db, dx


def image_input(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise OddDimensions(f"image dimensions must be even, got {img.shape[1]}x{img.shape[0]}")
    return img.astype(np.float64) / 255.0 - 0.5


def image_forward(p: EncoderParams, img: np.ndarray):
    """Raw (unnormalized) features and the cache needed for backprop."""
    x = image_input(img)
    a1, xp = _conv(x, p["w1"], p["b1"], 2)
    h1 = np.tanh(a1)
    a2, h1p = _conv(h1, p["w2"], p["b2"], 1)
    h2 = np.tanh(a2)
    f = h2 @ p["w3"] + p["b3"]
    return f, (xp, h1, h1p, h2)


def image_backward(p: EncoderParams, cache, dfeat: np.ndarray) -> dict[str, np.ndarray]:
    xp, h1, h1p, h2 = cache
    d = dfeat.shape[-1]
    g = {"w3": h2.reshape(-1, HIDDEN_2).T @ dfeat.reshape(-1, d), "b3": dfeat.reshape(-1, d).sum(axis=0)}
    da2 = (dfeat @ p["w3"].T) * (1.0 - h2 * h2)
    g["w2"], g["b2"], dh1 = _conv_backward(h1p, p["w2"], da2, 1, True)
    da1 = dh1 * (1.0 - h1 * h1)
    g["w1"], g["b1"], _ = _conv_backward(xp, p["w1"], da1, 2, False)
    return g


def encode_image(p: EncoderParams, img: np.ndarray) -> FeatureMap:
    f, _ = image_forward(p, img)
    if p.normalize:
        f, _ = l2_normalize(f)
    return FeatureMap(f, p.normalize)


def pixel_to_featmap_coord(u: int, v: int, width: int | None = None, height: int | None = None):
    """Feature-map cell ``(u // 2, v // 2)`` for image pixel ``(u, v)``."""
    if u < 0 or v < 0 or (width is not None and u >= width) or (height is not None and v >= height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside the image")
    return u // 2, v // 2


def featmap_rows(pixels: np.ndarray, width: int) -> np.ndarray:
    """Row index into a flattened half-resolution feature map, vectorized."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return (pixels[:, 1] // 2) * (width // 2) + pixels[:, 0] // 2


# --- 3D ---------------------------------------------------------------------

_OFFSETS = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(27, 3)


def chunk_neighbourhoods(chunk: OccupancyChunk) -> np.ndarray:
    """(M, 27) occupancy of each occupied voxel's 3x3x3 neighbourhood."""
    occ = chunk.occupied
    lin_occ = chunk.linear()
    dims = np.asarray(chunk.dims)
    nb = occ[:, None, :] + _OFFSETS[None, :, :]
    inside = np.all((nb >= 0) & (nb < dims), axis=2)
    lin = chunk.linear(np.where(inside[..., None], nb, 0))
    pos = np.minimum(np.searchsorted(lin_occ, lin), len(lin_occ) - 1)
    return (inside & (lin_occ[pos] == lin)).astype(np.float64)


def chunk_forward(p: EncoderParams, nbh: np.ndarray):
    h = np.tanh(nbh @ p["v1"] + p["c1"])
    return h @ p["v2"] + p["c2"], (nbh, h)


def chunk_backward(p: EncoderParams, cache, dfeat: np.ndarray) -> dict[str, np.ndarray]:
    nbh, h = cache
    dh = (dfeat @ p["v2"].T) * (1.0 - h * h)
    return {"v2": h.T @ dfeat, "c2": dfeat.sum(axis=0), "v1": nbh.T @ dh, "c1": dh.sum(axis=0)}


def encode_chunk(p: EncoderParams, chunk: OccupancyChunk) -> VoxelFeatures:
    if len(chunk) == 0:
        raise EmptyChunk("chunk has no occupied voxels")
    f, _ = chunk_forward(p, chunk_neighbourhoods(chunk))
    if p.normalize:
        f, _ = l2_normalize(f)
    return VoxelFeatures(chunk.occupied.copy(), f, p.normalize)
