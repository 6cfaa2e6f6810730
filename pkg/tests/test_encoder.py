import numpy as np
import pytest

from pri3d.contrastive.encoder import (
    CHUNK_PARAMS,
    IMAGE_PARAMS,
    PARAM_NAMES,
    EncoderParams,
    chunk_backward,
    chunk_forward,
    chunk_neighbourhoods,
    encode_chunk,
    encode_image,
    featmap_rows,
    image_backward,
    image_forward,
    init_params,
    param_shapes,
    pixel_to_featmap_coord,
)
from pri3d.errors import EmptyChunk, NonFiniteFeature, NormalizationOfZeroVector, OddDimensions, OutOfBounds
from pri3d.geoprior import OccupancyChunk

from gradcheck import joint_instance_error, numeric_grad, rel_error


def rand_image(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def zero_params(normalize=True):
    return EncoderParams({k: np.zeros(s) for k, s in param_shapes(32).items()}, normalize)


class TestParams:
    def test_shapes_and_count(self):
        p = init_params(0)
        assert p.dim == 32 and set(p.arrays) == set(PARAM_NAMES)
        assert p.n_params() == sum(int(np.prod(s)) for s in param_shapes().values())

    def test_flat_round_trip(self):
        p = init_params(1, dim=8)
        q = p.with_flat(p.flat())
        assert q.equals(p) and q is not p

    def test_deterministic_init(self):
        assert init_params(3).equals(init_params(3)) and not init_params(3).equals(init_params(4))

    def test_rejects_bad_shape_and_nan(self):
        a = init_params(0).arrays
        with pytest.raises(ValueError):
            EncoderParams({**a, "w1": np.zeros((3, 3, 3, 15))})
        bad = {k: v.copy() for k, v in a.items()}
        bad["c1"][0] = np.nan
        with pytest.raises(NonFiniteFeature):
            EncoderParams(bad)


class TestImageEncoder:
    def test_half_resolution(self):
        fm = encode_image(init_params(0), rand_image(48, 64))
        assert fm.features.shape == (24, 32, 32) and fm.normalized
        assert np.allclose(np.linalg.norm(fm.features, axis=-1), 1.0, atol=1e-6)
        assert fm.flat.shape == (24 * 32, 32)

    def test_odd_dimensions(self):
        with pytest.raises(OddDimensions):
            encode_image(init_params(0), rand_image(47, 64))

    def test_zero_weights(self):
        raw, _ = image_forward(zero_params(), rand_image(8, 8))
        assert np.all(raw == 0)
        with pytest.raises(NormalizationOfZeroVector):
            encode_image(zero_params(True), rand_image(8, 8))
        assert np.all(encode_image(zero_params(False), rand_image(8, 8)).features == 0)

    def test_deterministic(self):
        p, img = init_params(2), rand_image(12, 16, 3)
        assert np.array_equal(encode_image(p, img).features, encode_image(p, img).features)

    @pytest.mark.parametrize("yx", [(0, 0), (7, 10), (15, 23), (8, 0)])
    def test_receptive_field(self, yx):
        p = init_params(5, gain=1.0)
        img = rand_image(16, 24, 1)
        base, _ = image_forward(p, img)
        y, x = yx
        img2 = img.copy()
        img2[y, x] = 255 - img2[y, x]
        diff = np.any(image_forward(p, img2)[0] != base, axis=-1)
        ii, jj = np.nonzero(diff)
        # conv3x3 stride 2 then conv3x3: output (i, j) sees input rows 2i-3..2i+3
        expect = {(i, j) for i in range(8) for j in range(12) if abs(2 * i - y) <= 3 and abs(2 * j - x) <= 3}
        assert set(zip(ii.tolist(), jj.tolist())) == expect

    def test_backward_matches_fd(self):
        p = init_params(6, dim=4, gain=1.0)
        img = rand_image(6, 8, 2)
        w = np.random.default_rng(0).normal(size=(3, 4, 4))
        f, cache = image_forward(p, img)
        g = image_backward(p, cache, w)
        rng = np.random.default_rng(1)
        for k in IMAGE_PARAMS:
            coords = rng.choice(p[k].size, size=min(10, p[k].size), replace=False)
            num = numeric_grad(lambda: float(np.sum(image_forward(p, img)[0] * w)), p.arrays[k], coords)
            assert rel_error(g[k].reshape(-1)[coords], num).max() < 1e-6


class TestFeatmapCoord:
    def test_examples(self):
        assert pixel_to_featmap_coord(0, 0) == (0, 0)
        assert pixel_to_featmap_coord(5, 3) == (2, 1)
        assert pixel_to_featmap_coord(63, 47, 64, 48) == (31, 23)

    @pytest.mark.parametrize("uv", [(-1, 0), (0, -1), (64, 0), (0, 48)])
    def test_out_of_bounds(self, uv):
        with pytest.raises(OutOfBounds):
            pixel_to_featmap_coord(*uv, 64, 48)

    def test_rows_vectorized(self):
        px = np.array([[0, 0], [5, 3], [63, 47]])
        assert featmap_rows(px, 64).tolist() == [0, 1 * 32 + 2, 23 * 32 + 31]


class TestChunkEncoder:
    def test_isolated_voxel_one_hot(self):
        c = OccupancyChunk(np.zeros(3), 0.02, (3, 3, 3), np.array([[1, 1, 1]]))
        nbh = chunk_neighbourhoods(c)
        assert nbh.shape == (1, 27) and nbh[0, 13] == 1 and nbh.sum() == 1
        p = init_params(0, normalize=False)
        vf = encode_chunk(p, c)
        expect = np.tanh(p["v1"][13] + p["c1"]) @ p["v2"] + p["c2"]
        assert np.allclose(vf.features[0], expect, atol=1e-15)

    def test_boundary_neighbours_read_zero(self):
        c = OccupancyChunk(np.zeros(3), 0.02, (2, 1, 1), np.array([[0, 0, 0], [1, 0, 0]]))
        nbh = chunk_neighbourhoods(c)
        # offsets are ordered (dx, dy, dz) with dx slowest: +x neighbour is index 22
        assert nbh[0].nonzero()[0].tolist() == [13, 22]
        assert nbh[1].nonzero()[0].tolist() == [4, 13]

    def test_neighbourhood_brute_force(self):
        rng = np.random.default_rng(3)
        occ = np.unique(rng.integers(0, 5, size=(40, 3)), axis=0)
        c = OccupancyChunk(np.zeros(3), 0.02, (5, 5, 5), occ)
        nbh = chunk_neighbourhoods(c)
        s = set(map(tuple, occ.tolist()))
        for row, (i, j, k) in zip(nbh, occ.tolist()):
            want = [float((i + dx, j + dy, k + dz) in s) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
            assert row.tolist() == want

    def test_identical_neighbourhoods_identical_features(self):
        c = OccupancyChunk(np.zeros(3), 0.02, (9, 3, 3), np.array([[1, 1, 1], [6, 1, 1]]))
        vf = encode_chunk(init_params(2), c)
        assert np.array_equal(vf.features[0], vf.features[1])
        assert np.allclose(np.linalg.norm(vf.features, axis=1), 1.0, atol=1e-6)
        assert np.array_equal(vf.occupied, c.occupied)

    def test_empty_chunk(self):
        with pytest.raises(EmptyChunk):
            encode_chunk(init_params(0), OccupancyChunk(np.zeros(3), 0.02, (1, 1, 1), np.zeros((0, 3))))

    def test_backward_matches_fd(self):
        p = init_params(4, dim=6, gain=1.0)
        nbh = (np.random.default_rng(1).random((12, 27)) < 0.4).astype(float)
        w = np.random.default_rng(2).normal(size=(12, 6))
        f, cache = chunk_forward(p, nbh)
        g = chunk_backward(p, cache, w)
        for k in CHUNK_PARAMS:
            coords = np.arange(p[k].size)
            num = numeric_grad(lambda: float(np.sum(chunk_forward(p, nbh)[0] * w)), p.arrays[k], coords)
            assert rel_error(g[k].reshape(-1), num).max() < 1e-6


class TestEncoderGradientsThroughLoss:
    @pytest.mark.parametrize("seed", range(3))
    def test_image_encoder_view_loss(self, seed):
        assert joint_instance_error(seed, 1.0, 0.0, names=IMAGE_PARAMS) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_chunk_encoder_geo_loss(self, seed):
        assert joint_instance_error(seed, 0.0, 1.0, names=CHUNK_PARAMS) < 1e-5

    @pytest.mark.parametrize("seed", range(2))
    def test_unnormalized(self, seed):
        assert joint_instance_error(seed, 1.0, 1.0, normalize=False) < 1e-5
