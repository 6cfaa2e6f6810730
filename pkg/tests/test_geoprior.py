import numpy as np
import pytest

from pri3d.errors import NoValidDepth
from pri3d.geometry import Intrinsics, RigidPose, frame_to_world_points
from pri3d.geoprior import (
    FrustumBox,
    OccupancyChunk,
    build_surface,
    crop_chunk,
    frame_chunk,
    frame_chunks,
    frustum_aabb,
    pixel_voxel_correspondences,
)
from pri3d.synthetic import sample_surface

from conftest import flat_frame
from oracles import binning_oracle, pixel_voxel_oracle

V = 0.02


def box(lo, hi):
    return FrustumBox(np.asarray(lo, float), np.asarray(hi, float))


class TestFrustumAabb:
    def test_plane_at_two_meters(self):
        K = Intrinsics.from_fov(32, 24, 60)
        b = frustum_aabb(flat_frame(np.full((24, 32), 2.0), K=K))
        assert b.lo[2] == pytest.approx(2 - V, abs=1e-12) and b.hi[2] == pytest.approx(2 + V, abs=1e-12)
        assert b.center[2] == pytest.approx(2.0, abs=1e-6)
        # lateral extent follows the corner rays: (0 - cx) * d / fx minus the margin
        assert b.lo[0] == pytest.approx(-K.cx * 2 / K.fx - V, abs=1e-12)
        assert b.hi[1] == pytest.approx((23 - K.cy) * 2 / K.fy + V, abs=1e-12)

    def test_all_invalid(self):
        with pytest.raises(NoValidDepth):
            frustum_aabb(flat_frame(np.zeros((4, 4))))

    def test_single_pixel(self):
        d = np.zeros((4, 4))
        d[2, 1] = 1.5
        f = flat_frame(d)
        p = frame_to_world_points(f).points[0]
        b = frustum_aabb(f)
        assert np.allclose(b.hi - b.lo, 2 * V, atol=1e-12)
        assert np.allclose(b.center, p, atol=1e-12)

    def test_containment(self, frames_small):
        for f in frames_small[::5]:
            pts = frame_to_world_points(f).points
            assert np.all(frustum_aabb(f).contains(pts))


class TestCropChunk:
    def test_point_at_origin(self):
        c = crop_chunk(np.array([[0.0, 0.0, 0.0]]), box([0, 0, 0], [0.1, 0.1, 0.1]), V)
        assert c.occupied.tolist() == [[0, 0, 0]] and np.array_equal(c.origin, [0, 0, 0])

    def test_sub_voxel_points_share_bin(self):
        pts = np.array([[0.011, 0.011, 0.011], [0.016, 0.011, 0.011]])
        c = crop_chunk(pts, box([0, 0, 0], [0.1, 0.1, 0.1]), V)
        assert len(c) == 1

    def test_points_outside_discarded(self):
        pts = np.array([[0.05, 0.05, 0.05], [1.0, 0.0, 0.0], [-0.01, 0.05, 0.05]])
        c = crop_chunk(pts, box([0, 0, 0], [0.1, 0.1, 0.1]), V)
        assert len(c) == 1

    def test_origin_on_lattice(self):
        c = crop_chunk(np.array([[0.333, -0.211, 1.0]]), box([0.31, -0.25, 0.99], [0.4, -0.2, 1.01]), V)
        assert np.allclose(c.origin / V, np.round(c.origin / V), atol=1e-9)

    def test_bad_voxel_and_empty(self):
        with pytest.raises(ValueError):
            crop_chunk(np.zeros((1, 3)), box([0, 0, 0], [1, 1, 1]), 0.0)
        assert len(crop_chunk(np.zeros((0, 3)), box([0, 0, 0], [1, 1, 1]), V)) == 0

    def test_chunk_validates_indices(self):
        with pytest.raises(ValueError):
            OccupancyChunk(np.zeros(3), V, (2, 2, 2), np.array([[2, 0, 0]]))

    @pytest.mark.parametrize("idx", [0, 7, 15])
    def test_room_scene_matches_binning_oracle(self, scene, frames_small, idx):
        surface = sample_surface(scene, 0.015)
        f = frames_small[idx]
        b = frustum_aabb(f)
        c = crop_chunk(surface, b, V, f.frame_index)
        origin, dims, occ = binning_oracle(surface, b.lo, b.hi, V)
        assert np.array_equal(c.origin, origin) and list(c.dims) == dims
        assert set(map(tuple, c.occupied.tolist())) == occ and len(c) == len(occ)
        # sorted and unique, so rows ascend in linear index
        assert np.all(np.diff(c.linear()) > 0)

    def test_surface_from_frames(self, frames_small):
        surf = build_surface(frames_small[:4])
        assert len(surf) == sum(len(frame_to_world_points(f)) for f in frames_small[:4])
        chunks = frame_chunks(frames_small[:4], surf)
        assert [c.frame_id for c in chunks] == [0, 1, 2, 3]
        assert chunks[1].same_as(frame_chunk(frames_small[1], surf))


class TestPixelVoxel:
    def test_own_points_match_almost_all(self, frames_small):
        for f in frames_small[::6]:
            c = frame_chunk(f, frame_to_world_points(f).points)
            pv = pixel_voxel_correspondences(f, c)
            assert len(pv) >= 0.99 * int((f.depth > 0).sum())

    def test_empty_chunk(self, frames_small):
        f = frames_small[0]
        c = OccupancyChunk(np.zeros(3), V, (1, 1, 1), np.zeros((0, 3)))
        assert len(pixel_voxel_correspondences(f, c)) == 0

    def test_far_voxel_omitted(self):
        d = np.zeros((4, 4))
        d[1, 1] = 1.0
        f = flat_frame(d)
        p = frame_to_world_points(f).points[0]
        origin = np.floor((p + 0.05) / V) * V
        c = OccupancyChunk(origin - 3 * V, V, (8, 8, 8), np.array([[3, 3, 3]]))
        dist = np.linalg.norm(c.centers()[0] - p)
        assert dist >= 0.05
        assert len(pixel_voxel_correspondences(f, c)) == 0

    @pytest.mark.parametrize("idx", [2, 11, 20])
    def test_matches_brute_force(self, scene, frames_small, idx):
        f = frames_small[idx]
        c = frame_chunk(f, build_surface(frames_small[::3]))
        pv = pixel_voxel_correspondences(f, c, stride=2)
        expect = pixel_voxel_oracle(f, c, V, stride=2)
        got = [(int(p[0]), int(p[1]), *map(int, v), float(d)) for p, v, d in zip(pv.pixels, pv.voxels, pv.distances)]
        assert got == expect and len(got) > 0

    def test_soundness(self, frames_small):
        f = frames_small[4]
        c = frame_chunk(f, build_surface(frames_small[:8]))
        pv = pixel_voxel_correspondences(f, c)
        pts = dict(zip(map(tuple, frame_to_world_points(f).pixels), frame_to_world_points(f).points))
        rec = np.array([np.linalg.norm(pts[tuple(p)] - c.centers(v[None])[0]) for p, v in zip(pv.pixels, pv.voxels)])
        assert np.all(rec <= V) and np.allclose(rec, pv.distances, atol=1e-15)
        c.rows_of(pv.voxels)  # every voxel occupied
        idx = pv.pixels[:, 1] * f.width + pv.pixels[:, 0]
        assert np.all(np.diff(idx) > 0)

    def test_rows_of_rejects_unoccupied(self):
        c = OccupancyChunk(np.zeros(3), V, (2, 2, 2), np.array([[0, 0, 0], [1, 1, 1]]))
        assert c.rows_of(np.array([[1, 1, 1]])).tolist() == [1]
        with pytest.raises(KeyError):
            c.rows_of(np.array([[0, 1, 0]]))

    def test_deterministic(self, frames_small):
        surf = build_surface(frames_small[:6], threads=1)
        assert np.array_equal(surf, build_surface(frames_small[:6], threads=3))
        a = frame_chunks(frames_small[:6], surf, threads=1)
        b = frame_chunks(frames_small[:6], surf, threads=3)
        assert all(x.same_as(y) for x, y in zip(a, b))
