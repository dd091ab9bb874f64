import hashlib

import numpy as np
import pytest

from voxelselect.features import (CostVolume, FeatureError, FeatureLayout,
                                  FeatureMap2D, assemble_features,
                                  build_cost_volume, cache_key,
                                  extract_2d_features, feature_camera,
                                  ibr_feature, ibr_features,
                                  load_feature_volume, mvs_projection,
                                  population_variance, positional_feature,
                                  positional_features, refine_cost_volume,
                                  save_feature_volume)
from voxelselect.geometry import Camera, DepthPlaneSet
from voxelselect.volume import BASIS_SH1, PlaneVolume

# fingerprint of the frozen 32-channel recipe on the seeded image below;
# regenerating it intentionally requires editing this constant
GOLDEN_2D_SHA = "0f2959d513ff572692849f274e66095a5c59a368a09dcc423cd3a76daec0ac0e"


def make_camera(width=16, height=12, f=20.0, t=(0, 0, 0)):
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    return Camera(K, np.eye(3), np.array(t, float), width, height)


def make_volume(width=16, height=12, depth=5, basis="constant"):
    cam = make_camera(width, height)
    planes = DepthPlaneSet.make(2.0, 4.0, depth, "linear")
    n = 1 if basis == "constant" else 4
    xi = np.full((depth, height, width), 0.3, np.float32)
    co = np.full((depth, height, width, n, 3), 0.4, np.float32)
    return PlaneVolume(cam, planes, xi, co, basis)


class TestExtract2D:
    def test_constant_image(self):
        img = np.full((16, 20, 3), 0.6)
        fm = extract_2d_features(img)
        assert fm.values.shape == (4, 5, 32)
        assert np.all(fm.values[..., 0:3] == 0.6)
        assert np.all(fm.values[..., 14:20] == 0.6)
        rest = np.concatenate([fm.values[..., 3:14],
                               fm.values[..., 20:]], axis=-1)
        assert np.all(rest == 0)

    def test_output_shape_ceil(self):
        img = np.zeros((13, 18, 3))
        fm = extract_2d_features(img)
        assert (fm.height, fm.width, fm.channels) == (4, 5, 32)

    def test_vertical_edge_gradient_bin(self):
        img = np.zeros((16, 32, 3))
        img[:, 16:] = 1.0
        fm = extract_2d_features(img)
        # the edge sits in cell column 4; gradient points +x (bin 0)
        hist = fm.values[2, 4, 6:14]
        assert hist.argmax() == 0
        assert hist[0] > 0

    def test_rejects_empty_and_out_of_range(self):
        with pytest.raises(FeatureError):
            extract_2d_features(np.zeros((0, 4, 3)))
        with pytest.raises(FeatureError):
            extract_2d_features(np.full((8, 8, 3), 1.5))

    def test_golden_fingerprint(self):
        rng = np.random.default_rng(1234)
        img = rng.random((24, 32, 3))
        fm = extract_2d_features(img)
        q = np.round(fm.values, 10).astype(np.float64)
        got = hashlib.sha256(q.tobytes()).hexdigest()
        assert got == GOLDEN_2D_SHA

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        img = rng.random((20, 20, 3))
        a = extract_2d_features(img).values
        b = extract_2d_features(img).values
        assert np.array_equal(a, b)


class TestCostVolume:
    def test_population_variance_example(self):
        stack = np.array([1.0, 2.0, 3.0]).reshape(3, 1)
        assert population_variance(stack)[0] == pytest.approx(2.0 / 3.0)

    def test_identical_views_zero_variance(self):
        rng = np.random.default_rng(2)
        img = rng.random((16, 16, 3))
        cam = make_camera(16, 16)
        planes = DepthPlaneSet.make(2.0, 3.0, 4, "linear")
        cv = build_cost_volume(cam, [(img, cam)] * 3, planes)
        assert np.abs(cv.values).max() < 1e-18
        assert cv.values.min() >= 0

    def test_requires_two_views(self):
        img = np.zeros((8, 8, 3))
        cam = make_camera(8, 8)
        planes = DepthPlaneSet.make(2.0, 3.0, 2, "linear")
        with pytest.raises(FeatureError):
            build_cost_volume(cam, [(img, cam)], planes)

    def test_view_permutation_invariant(self):
        rng = np.random.default_rng(3)
        cam = make_camera(16, 12)
        planes = DepthPlaneSet.make(2.0, 4.0, 3, "linear")
        views = [(rng.random((12, 16, 3)),
                  make_camera(16, 12, t=(0.05 * i, 0, 0))) for i in range(3)]
        a = build_cost_volume(cam, views, planes)
        b = build_cost_volume(cam, views[::-1], planes)
        assert np.allclose(a.values, b.values, atol=1e-15)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(4)
        cam = make_camera(16, 12)
        planes = DepthPlaneSet.make(2.0, 4.0, 3, "linear")
        views = [(rng.random((12, 16, 3)),
                  make_camera(16, 12, t=(0.03, 0.02 * i, 0))) for i in range(3)]
        cv = build_cost_volume(cam, views, planes)
        assert cv.values.min() >= 0


class TestRefine:
    def _cv(self, values, vol):
        return CostVolume(feature_camera(vol.ref_cam), vol.planes,
                          values, (0, 1, 2))

    def test_constant_maps_to_projected_constant(self):
        vol = make_volume()
        fcam = feature_camera(vol.ref_cam)
        c = np.arange(32, dtype=np.float64) / 32.0
        values = np.broadcast_to(
            c, (len(vol.planes), fcam.height, fcam.width, 32)).copy()
        out = refine_cost_volume(self._cv(values, vol), vol, seed=7)
        expect = c @ mvs_projection(7)
        assert np.abs(out - expect.astype(np.float32)).max() < 1e-6

    def test_impulse_support_radius(self):
        vol = make_volume(width=80, height=80, depth=17)
        fcam = feature_camera(vol.ref_cam)  # 20 x 20
        values = np.zeros((17, fcam.height, fcam.width, 32))
        values[8, 10, 10, :] = 1.0
        cv = self._cv(values, vol)
        out = refine_cost_volume(cv, vol, seed=0)
        # inspect on the cost grid before XY resampling: plane axis is
        # untouched by resampling (plane sets match), so check planes
        nz_planes = np.flatnonzero(np.abs(out).sum(axis=(1, 2, 3)) > 1e-12)
        assert nz_planes.min() >= 8 - 7 and nz_planes.max() <= 8 + 7

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        vol = make_volume()
        fcam = feature_camera(vol.ref_cam)
        values = rng.random((len(vol.planes), fcam.height, fcam.width, 32))
        cv = self._cv(values, vol)
        a = refine_cost_volume(cv, vol, seed=3)
        b = refine_cost_volume(cv, vol, seed=3)
        c = refine_cost_volume(cv, vol, seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_output_channels(self):
        vol = make_volume()
        fcam = feature_camera(vol.ref_cam)
        values = np.zeros((len(vol.planes), fcam.height, fcam.width, 32))
        out = refine_cost_volume(self._cv(values, vol), vol)
        assert out.shape == vol.xi.shape + (8,)


class TestIbrFeature:
    def test_direct_read(self):
        vol = make_volume()
        vol.xi[2, 3, 4] = 0.5
        vol.coeffs[2, 3, 4, 0] = [0.1, 0.2, 0.3]
        f = ibr_feature(vol, (4, 3, 2))
        assert np.allclose(f, [0.5, 0.1, 0.2, 0.3])

    def test_dimensions(self):
        assert ibr_features(make_volume()).shape[-1] == 4
        assert ibr_features(make_volume(basis=BASIS_SH1)).shape[-1] == 13

    def test_equal_voxels_equal_features(self):
        vol = make_volume()
        a = ibr_feature(vol, (1, 1, 1))
        b = ibr_feature(vol, (5, 7, 3))
        assert np.array_equal(a, b)


class TestPositional:
    def test_width_and_origin(self):
        vol = make_volume(width=17, height=13, depth=5)
        # middle voxel normalizes to exactly 0 on every axis
        f = positional_feature(vol, (8, 6, 2))
        assert f.shape == (56,)
        assert np.allclose(f[0::2], 0.0)
        assert np.allclose(f[1::2], 1.0)

    def test_half_coordinate_j1_slots(self):
        vol = make_volume(width=5, height=3, depth=2)
        # u=3 of width 5 -> normalized 0.5; j=1 slots are indices 2,3
        f = positional_feature(vol, (3, 0, 0))
        assert abs(f[2] - 0.0) < 1e-12   # sin(2 pi * 0.5) = sin(pi)
        assert abs(f[3] + 1.0) < 1e-12   # cos(pi)

    def test_grid_matches_single(self):
        vol = make_volume(width=6, height=4, depth=3)
        grid = positional_features(vol)
        for (u, v, d) in [(0, 0, 0), (5, 3, 2), (2, 1, 1)]:
            assert np.allclose(grid[d, v, u], positional_feature(vol, (u, v, d)))

    def test_same_xy_different_plane(self):
        # interior plane pair: the encoding aliases only the two exact
        # endpoints z = -1 and z = +1 of the normalized range
        vol = make_volume(depth=4)
        grid = positional_features(vol)
        a, b = grid[0, 2, 3], grid[2, 2, 3]
        assert np.allclose(a[:40], b[:40])
        assert not np.allclose(a[40:], b[40:])


class TestAssemble:
    def test_total_channels(self):
        vol = make_volume()
        mvs = np.zeros(vol.xi.shape + (8,), np.float32)
        fv = assemble_features(vol, mvs)
        assert fv.channels == 68
        assert fv.layout.total == 68

    def test_layout_slices_reproduce_sources(self):
        rng = np.random.default_rng(8)
        vol = make_volume()
        mvs = rng.random(vol.xi.shape + (8,)).astype(np.float32)
        fv = assemble_features(vol, mvs)
        assert np.array_equal(fv.segment("mvs"), mvs)
        assert np.array_equal(fv.segment("ibr"),
                              ibr_features(vol).astype(np.float32))
        assert np.array_equal(fv.segment("xyz"),
                              positional_features(vol).astype(np.float32))

    def test_zeroed_mvs_zeroes_prefix(self):
        vol = make_volume()
        fv = assemble_features(vol, np.zeros(vol.xi.shape + (8,), np.float32))
        assert np.all(fv.values[..., 0:8] == 0)
        assert np.abs(fv.values[..., 8:]).max() > 0

    def test_grid_mismatch_rejected(self):
        vol = make_volume()
        with pytest.raises(FeatureError):
            assemble_features(vol, np.zeros((1, 2, 3, 8), np.float32))


class TestCache:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(9)
        vol = make_volume()
        mvs = rng.random(vol.xi.shape + (8,)).astype(np.float32)
        fv = assemble_features(vol, mvs)
        p = tmp_path / "f.fvl"
        save_feature_volume(p, fv)
        back = load_feature_volume(p)
        assert np.array_equal(back.values, fv.values)
        assert back.layout == fv.layout

    def test_cache_key_sensitivity(self):
        a = np.zeros(4)
        assert cache_key(a, 1) != cache_key(a, 2)
        assert cache_key(a, 1) == cache_key(np.zeros(4), 1)
