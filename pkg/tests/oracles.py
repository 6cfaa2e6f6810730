"""Independent brute-force references used by the unit and acceptance tests."""

import math

import numpy as np

from pri3d.geometry import frame_to_world_points


def binning_oracle(points, lo, hi, voxel):
    """One pass over the points with scalar floor arithmetic; returns (origin, dims, set)."""
    origin = [math.floor(lo[a] / voxel) * voxel for a in range(3)]
    dims = [math.floor((hi[a] - origin[a]) / voxel) + 1 for a in range(3)]
    occ = set()
    for p in np.asarray(points).tolist():
        if all(lo[a] <= p[a] <= hi[a] for a in range(3)):
            occ.add(tuple(math.floor((p[a] - origin[a]) / voxel) for a in range(3)))
    return origin, dims, occ


def pixel_voxel_oracle(frame, chunk, radius, stride=1):
    """Every valid pixel against every occupied voxel center."""
    wp = frame_to_world_points(frame, stride)
    occ = chunk.occupied
    c = chunk.origin + (occ + 0.5) * chunk.voxel
    lin = chunk.linear()
    out = []
    for (u, v), p in zip(wp.pixels, wp.points):
        ex, ey, ez = p[0] - c[:, 0], p[1] - c[:, 1], p[2] - c[:, 2]
        d = np.sqrt(ex * ex + ey * ey + ez * ez)
        ok = np.nonzero(d <= radius)[0]
        if len(ok) == 0:
            continue
        best = min(ok, key=lambda k: (d[k], lin[k]))
        out.append((int(u), int(v), *map(int, occ[best]), float(d[best])))
    return out
