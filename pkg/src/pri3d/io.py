"""On-disk formats: sequence layout, binary records, checkpoints.

Sequence directory layout::

    manifest.json
    color/000000.png   8-bit RGB
    depth/000000.png   16-bit grayscale, integer units of ``depth_scale`` meters
    pose/000000.txt    4x4 camera-to-world matrix, row-major, whitespace separated

Binary files share a 12-byte header: 8-byte magic, little-endian uint16
version, one endianness byte (``b"L"``) and one reserved zero byte. Every
multi-byte field after the header is little-endian.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .contrastive.encoder import PARAM_NAMES, EncoderParams
from .errors import (
    BadMagic,
    DepthSizeMismatch,
    MalformedImage,
    MalformedManifest,
    MalformedPose,
    MissingFile,
    TruncatedFile,
    UnsupportedVersion,
)
from .geometry import CameraFrame, Intrinsics, RigidPose, check_rotation
from .geoprior import OccupancyChunk, PixelVoxelCorrs
from .miner import CorrespondenceSet, FramePair, compute_overlap

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_DEPTH_SCALE = 0.001

CORR_MAGIC = b"PRI3DCOR"
CHUNK_MAGIC = b"PRI3DCHK"
PVC_MAGIC = b"PRI3DPVC"
CKPT_MAGIC = b"PRI3DENC"
FORMAT_VERSION = 1

POSE_HARD_TOL = 1e-4
POSE_SOFT_TOL = 1e-6

_CORR_RECORD = np.dtype([("ua", "<u2"), ("va", "<u2"), ("ub", "<u2"), ("vb", "<u2"), ("d", "<f4")])
_PVC_RECORD = np.dtype([("u", "<u2"), ("v", "<u2"), ("i", "<i4"), ("j", "<i4"), ("k", "<i4"), ("d", "<f4")])


# --- binary helpers ----------------------------------------------------------

def _header(magic: bytes, version: int = FORMAT_VERSION) -> bytes:
    return magic + struct.pack("<H", version) + b"L\x00"


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"{self.path}: expected {n} more bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)

    def header(self, magic: bytes) -> int:
        if len(self.data) < 8 or self.data[:8] != magic:
            raise BadMagic(f"{self.path}: expected magic {magic!r}, got {self.data[:8]!r}")
        self.take(8)
        (version,) = self.unpack("<H")
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"{self.path}: version {version} not supported")
        endian, _ = self.take(1), self.take(1)
        if endian != b"L":
            raise BadMagic(f"{self.path}: unknown endianness tag {endian!r}")
        return version

    def finish(self):
        if self.pos != len(self.data):
            raise TruncatedFile(f"{self.path}: {len(self.data) - self.pos} unexpected trailing bytes")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None


# --- correspondences ---------------------------------------------------------

@dataclass
class CorrespondenceFile:
    corrs: CorrespondenceSet
    overlap: float


def correspondences_to_bytes(corrs: CorrespondenceSet, overlap: float | None = None) -> bytes:
    if overlap is None:
        overlap = compute_overlap(corrs) if corrs.valid_a + corrs.valid_b else 0.0
    pix = np.concatenate([corrs.pixels_a, corrs.pixels_b], axis=1) if len(corrs) else np.zeros((0, 4))
    if len(corrs) and (pix.min() < 0 or pix.max() > 0xFFFF):
        raise ValueError("pixel coordinates do not fit in 16 bits")
    rec = np.zeros(len(corrs), dtype=_CORR_RECORD)
    for n, name in enumerate(("ua", "va", "ub", "vb")):
        rec[name] = pix[:, n]
    rec["d"] = corrs.distances
    meta = struct.pack("<qqdQQdQ", corrs.source_id, corrs.target_id, overlap, corrs.valid_a,
                       corrs.valid_b, corrs.radius, len(corrs))
    return _header(CORR_MAGIC) + meta + rec.tobytes()


def correspondences_from_bytes(data: bytes, path="<bytes>") -> CorrespondenceFile:
    r = _Reader(data, path)
    r.header(CORR_MAGIC)
    src, dst, overlap, va, vb, radius, count = r.unpack("<qqdQQdQ")
    rec = r.array(_CORR_RECORD, count)
    r.finish()
    pa = np.stack([rec["ua"], rec["va"]], axis=1).astype(np.int64)
    pb = np.stack([rec["ub"], rec["vb"]], axis=1).astype(np.int64)
    return CorrespondenceFile(
        CorrespondenceSet(src, dst, pa, pb, rec["d"].astype(np.float64), va, vb, radius), overlap
    )


def save_correspondences(path, corrs: CorrespondenceSet, overlap: float | None = None) -> None:
    Path(path).write_bytes(correspondences_to_bytes(corrs, overlap))


def load_correspondences(path) -> CorrespondenceFile:
    return correspondences_from_bytes(_read_bytes(path), path)


# --- chunks and pixel-voxel correspondences ----------------------------------

def chunk_to_bytes(chunk: OccupancyChunk) -> bytes:
    meta = struct.pack("<q3dd3qQ", chunk.frame_id, *chunk.origin, chunk.voxel, *chunk.dims, len(chunk))
    return _header(CHUNK_MAGIC) + meta + chunk.occupied.astype("<i4").tobytes()


def chunk_from_bytes(data: bytes, path="<bytes>") -> OccupancyChunk:
    r = _Reader(data, path)
    r.header(CHUNK_MAGIC)
    fid, ox, oy, oz, voxel, nx, ny, nz, count = r.unpack("<q3dd3qQ")
    occ = r.array("<i4", 3 * count).reshape(-1, 3).astype(np.int64)
    r.finish()
    try:
        return OccupancyChunk(np.array([ox, oy, oz]), voxel, (nx, ny, nz), occ, fid)
    except ValueError as e:
        raise TruncatedFile(f"{path}: inconsistent chunk contents ({e})") from None


def save_chunk(path, chunk: OccupancyChunk) -> None:
    Path(path).write_bytes(chunk_to_bytes(chunk))


def load_chunk(path) -> OccupancyChunk:
    return chunk_from_bytes(_read_bytes(path), path)


def pixel_voxel_to_bytes(pv: PixelVoxelCorrs) -> bytes:
    rec = np.zeros(len(pv), dtype=_PVC_RECORD)
    rec["u"], rec["v"] = pv.pixels[:, 0], pv.pixels[:, 1]
    rec["i"], rec["j"], rec["k"] = pv.voxels[:, 0], pv.voxels[:, 1], pv.voxels[:, 2]
    rec["d"] = pv.distances
    return _header(PVC_MAGIC) + struct.pack("<qdQ", pv.frame_id, pv.radius, len(pv)) + rec.tobytes()


def pixel_voxel_from_bytes(data: bytes, path="<bytes>") -> PixelVoxelCorrs:
    r = _Reader(data, path)
    r.header(PVC_MAGIC)
    fid, radius, count = r.unpack("<qdQ")
    rec = r.array(_PVC_RECORD, count)
    r.finish()
    return PixelVoxelCorrs(
        fid,
        np.stack([rec["u"], rec["v"]], axis=1).astype(np.int64),
        np.stack([rec["i"], rec["j"], rec["k"]], axis=1).astype(np.int64),
        rec["d"].astype(np.float64),
        radius,
    )


def save_pixel_voxel(path, pv: PixelVoxelCorrs) -> None:
    Path(path).write_bytes(pixel_voxel_to_bytes(pv))


def load_pixel_voxel(path) -> PixelVoxelCorrs:
    return pixel_voxel_from_bytes(_read_bytes(path), path)


# --- checkpoints -------------------------------------------------------------

def checkpoint_to_bytes(params: EncoderParams) -> bytes:
    out = [_header(CKPT_MAGIC), struct.pack("<BxxxII", int(params.normalize), params.dim, len(PARAM_NAMES))]
    for name in PARAM_NAMES:
        a = params[name]
        out.append(struct.pack("<B", len(name)) + name.encode("ascii"))
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype("<f8").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(data: bytes, path="<bytes>") -> EncoderParams:
    r = _Reader(data, path)
    r.header(CKPT_MAGIC)
    normalize, dim, n = r.unpack("<BxxxII")
    arrays = {}
    for _ in range(n):
        (ln,) = r.unpack("<B")
        name = r.take(ln).decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        arrays[name] = r.array("<f8", int(np.prod(shape))).reshape(shape).astype(np.float64)
    r.finish()
    try:
        params = EncoderParams(arrays, bool(normalize))
    except (ValueError, KeyError) as e:
        raise TruncatedFile(f"{path}: checkpoint contents inconsistent ({e})") from None
    if params.dim != dim:
        raise TruncatedFile(f"{path}: header dim {dim} does not match parameters")
    return params


def save_checkpoint(path, params: EncoderParams) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(params))


def load_checkpoint(path) -> EncoderParams:
    return checkpoint_from_bytes(_read_bytes(path), path)


# --- frame pairs -------------------------------------------------------------

def save_pairs(path, pairs: list[FramePair], **settings) -> None:
    doc = {
        "version": FORMAT_VERSION,
        "settings": settings,
        "pairs": [{"i": p.i, "j": p.j, "overlap": p.overlap, "count": p.count} for p in pairs],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_pairs(path) -> list[FramePair]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"{path}: {e}") from None
    if doc.get("version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: pairs version {doc.get('version')!r}")
    return [FramePair(int(p["i"]), int(p["j"]), float(p["overlap"]), int(p["count"])) for p in doc["pairs"]]


# --- sequences ---------------------------------------------------------------

def parse_pose(text: str, path="<pose>") -> RigidPose:
    """Parse a row-major 4x4 pose.

    Rotation blocks off by more than 1e-6 but at most 1e-4 are projected
    back onto SO(3) with a warning; anything worse is rejected.
    """
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise MalformedPose(f"{path}: expected 4 rows of 4 values")
    try:
        m = np.array([[float(x) for x in r] for r in rows])
    except ValueError:
        raise MalformedPose(f"{path}: non-numeric entry") from None
    if not np.all(np.isfinite(m)):
        raise MalformedPose(f"{path}: non-finite entry")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise MalformedPose(f"{path}: last row must be 0 0 0 1")
    dev = check_rotation(m[:3, :3])
    if dev > POSE_HARD_TOL:
        raise MalformedPose(f"{path}: rotation deviates from SO(3) by {dev:.3g}")
    if dev > POSE_SOFT_TOL:
        u, _, vt = np.linalg.svd(m[:3, :3])
        R = u @ vt
        if np.linalg.det(R) < 0:
            raise MalformedPose(f"{path}: rotation is a reflection")
        m[:3, :3] = R
        log.warning("%s: re-orthonormalized rotation (deviation %.3g)", path, dev)
    return RigidPose(m)


def format_pose(T: RigidPose) -> str:
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in T.matrix) + "\n"


def read_png(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im)
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise MalformedImage(f"{path}: {e}") from None
    if mode == "depth":
        if arr.ndim != 2:
            raise MalformedImage(f"{path}: depth image must be single-channel")
        return arr.astype(np.uint16) if arr.dtype != np.uint16 else arr
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise MalformedImage(f"{path}: color image must be RGB")
    return np.ascontiguousarray(arr[:, :, :3].astype(np.uint8))


def resample_nearest(depth: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = depth.shape
    ys = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return depth[ys[:, None], xs[None, :]]


def depth_to_units(depth: np.ndarray, scale: float) -> np.ndarray:
    units = np.round(np.asarray(depth) / scale)
    if units.max(initial=0) > 0xFFFF:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    return units.astype(np.uint16)


def quantize_depth(frame: CameraFrame, scale: float = DEFAULT_DEPTH_SCALE) -> CameraFrame:
    """The frame as it reads back from disk at ``scale`` meters per unit."""
    depth = depth_to_units(frame.depth, scale).astype(np.float64) * scale
    return CameraFrame(frame.frame_index, frame.color, depth, frame.intrinsics, frame.pose, dict(frame.meta))


def write_sequence(frames: list[CameraFrame], out_dir, sequence_id: str = "synthetic",
                   depth_scale: float = DEFAULT_DEPTH_SCALE, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    for sub in ("color", "depth", "pose"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    K = frames[0].intrinsics
    records = []
    for f in frames:
        name = f"{f.frame_index:06d}"
        Image.fromarray(f.color).save(out / "color" / f"{name}.png")
        Image.fromarray(depth_to_units(f.depth, depth_scale)).save(out / "depth" / f"{name}.png")
        (out / "pose" / f"{name}.txt").write_text(format_pose(f.pose))
        records.append({"index": f.frame_index, "color": f"color/{name}.png",
                        "depth": f"depth/{name}.png", "pose": f"pose/{name}.txt"})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "sequence_id": sequence_id,
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
        "depth_scale": depth_scale,
        "frames": records,
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / MANIFEST_NAME


@dataclass
class SequenceManifest:
    sequence_id: str
    intrinsics: Intrinsics
    frames: list[dict]
    depth_scale: float
    version: int
    root: Path


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedManifest(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise MalformedManifest(f"{path}: top level must be an object")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise UnsupportedVersion(f"{path}: manifest version {doc.get('format_version')!r}")
    try:
        k = doc["intrinsics"]
        K = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                       int(k["width"]), int(k["height"]))
        scale = float(doc.get("depth_scale", DEFAULT_DEPTH_SCALE))
        frames = list(doc["frames"])
        idx = [int(fr["index"]) for fr in frames]
        for fr in frames:
            fr["color"], fr["depth"], fr["pose"]
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedManifest(f"{path}: {type(e).__name__}: {e}") from None
    if not (math.isfinite(scale) and scale > 0):
        raise MalformedManifest(f"{path}: depth_scale must be positive, got {scale}")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise MalformedManifest(f"{path}: frame indices must be strictly increasing")
    return SequenceManifest(str(doc.get("sequence_id", "")), K, frames, scale, MANIFEST_VERSION, path.parent)


def load_frame(m: SequenceManifest, rec: dict, resample: bool = True) -> CameraFrame:
    K = m.intrinsics
    color = read_png(m.root / rec["color"], "color")
    if color.shape[:2] != (K.height, K.width):
        raise MalformedImage(f"{rec['color']}: color is {color.shape[1]}x{color.shape[0]}, "
                             f"intrinsics say {K.width}x{K.height}")
    depth = read_png(m.root / rec["depth"], "depth")
    if depth.shape != color.shape[:2]:
        if not resample:
            raise DepthSizeMismatch(f"{rec['depth']}: depth {depth.shape} vs color {color.shape[:2]}")
        depth = resample_nearest(depth, K.width, K.height)
    try:
        pose_text = (m.root / rec["pose"]).read_text()
    except FileNotFoundError:
        raise MissingFile(str(m.root / rec["pose"])) from None
    pose = parse_pose(pose_text, rec["pose"])
    return CameraFrame(int(rec["index"]), color, depth.astype(np.float64) * m.depth_scale, K, pose)


def load_sequence(path, resample: bool = True, threads: int | None = None) -> list[CameraFrame]:
    from ._parallel import pmap

    m = read_manifest(path)
    return pmap(lambda rec: load_frame(m, rec, resample), m.frames, threads)


# --- delimited reports -------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header: list[str], rows) -> None:
    """Plain comma-separated table; floats use ``repr`` so values round-trip."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_csv(path) -> list[dict]:
    import csv

    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise MissingFile(str(path)) from None


TRACE_HEADER = ["step", "lr", "loss_mean", "loss_view_mean", "loss_geo_mean", "invariance_score"]
INVARIANCE_HEADER = ["source", "target", "n_pos", "n_neg", "pos_cos", "neg_cos", "score"]


def write_trace_csv(path, trace) -> None:
    write_csv(path, TRACE_HEADER, ([getattr(r, k) for k in TRACE_HEADER] for r in trace))


def write_invariance_csv(path, stats) -> None:
    rows = [[s.source_id, s.target_id, s.n_pos, s.n_neg, s.pos_cos, s.neg_cos, s.score] for s in stats]
    if stats:
        rows.append(["mean", "", sum(s.n_pos for s in stats), sum(s.n_neg for s in stats),
                     float(np.mean([s.pos_cos for s in stats])), float(np.mean([s.neg_cos for s in stats])),
                     float(np.mean([s.score for s in stats]))])
    write_csv(path, INVARIANCE_HEADER, rows)
