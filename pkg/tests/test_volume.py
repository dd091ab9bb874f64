import numpy as np
import pytest

from voxelselect.geometry import Camera, DepthPlaneSet, pixel_ray
from voxelselect.volume import (BASIS_CONSTANT, BASIS_SH1, DownsampleMap,
                                PlaneVolume, VolumeError, basis_color,
                                block_reduce_xy, downsample_volume,
                                load_labels, load_volume, render_view,
                                save_labels, save_volume, surface_voxel,
                                surface_voxels, transmittance_profile)


def make_camera(width=16, height=12, f=20.0):
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    return Camera(K, np.eye(3), np.zeros(3), width, height)


def make_volume(width=16, height=12, depth=6, rng=None, basis=BASIS_CONSTANT):
    cam = make_camera(width, height)
    planes = DepthPlaneSet.make(2.0, 4.0, depth, "linear")
    n = 1 if basis == BASIS_CONSTANT else 4
    if rng is None:
        xi = np.zeros((depth, height, width), np.float32)
        co = np.zeros((depth, height, width, n, 3), np.float32)
    else:
        xi = rng.random((depth, height, width)).astype(np.float32)
        co = rng.random((depth, height, width, n, 3)).astype(np.float32)
    return PlaneVolume(cam, planes, xi, co, basis)


class TestPlaneVolume:
    def test_rejects_bad_xi(self):
        vol = make_volume()
        xi = vol.xi.copy()
        xi[0, 0, 0] = 1.5
        with pytest.raises(VolumeError):
            PlaneVolume(vol.ref_cam, vol.planes, xi, vol.coeffs)

    def test_rejects_coeff_mismatch(self):
        vol = make_volume()
        with pytest.raises(VolumeError):
            PlaneVolume(vol.ref_cam, vol.planes, vol.xi,
                        vol.coeffs.repeat(4, axis=3), BASIS_CONSTANT)

    def test_rejects_camera_size_mismatch(self):
        vol = make_volume()
        cam = make_camera(8, 6)
        with pytest.raises(VolumeError):
            PlaneVolume(cam, vol.planes, vol.xi, vol.coeffs)

    def test_voxel_positions_on_pixel_rays(self):
        vol = make_volume()
        x = vol.world_positions(3, 5, 2)
        ray = pixel_ray(vol.ref_cam, 3.0, 5.0)
        y = ray.point_at_depth(vol.planes.depths[2])
        assert np.abs(x - y).max() < 1e-12


class TestBasisColor:
    def test_constant_any_direction(self):
        co = np.array([[0.2, 0.4, 0.6]])
        for d in ([0, 0, 1], [1, 0, 0], [0, -1, 0]):
            assert np.allclose(basis_color(co, np.array(d, float)), [0.2, 0.4, 0.6])

    def test_sh1_degenerates_to_constant(self):
        co = np.zeros((4, 3))
        co[0] = [0.3, 0.5, 0.7]
        d = np.array([0.6, 0.8, 0.0])
        assert np.allclose(basis_color(co, d), [0.3, 0.5, 0.7])

    def test_sh1_odd_component(self):
        rng = np.random.default_rng(0)
        co = np.zeros((4, 3))
        co[0] = 0.5
        co[1] = [0.05, -0.03, 0.02]  # k^2
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        from voxelselect.volume import sh_basis
        h2 = sh_basis(d, 4)[1]
        a = basis_color(co, d, clamp=False)
        b = basis_color(co, -d, clamp=False)
        assert np.abs((a - b) - 2.0 * co[1] * h2).max() < 1e-12

    def test_rejects_non_unit(self):
        with pytest.raises(VolumeError):
            basis_color(np.array([[0.5, 0.5, 0.5]]), np.array([0.0, 0.0, 2.0]))


class TestRenderView:
    def test_opaque_front_plane(self):
        vol = make_volume()
        vol.xi[0] = 1.0
        vol.coeffs[0, :, :, 0] = [0.25, 0.5, 0.75]
        out = render_view(vol, vol.ref_cam)
        inner = out.rgb[2:-2, 2:-2]
        assert np.abs(inner - np.array([0.25, 0.5, 0.75])).max() < 1e-12
        assert np.abs(out.alpha[2:-2, 2:-2] - 1.0).max() < 1e-12

    def test_empty_volume(self):
        vol = make_volume()
        out = render_view(vol, vol.ref_cam)
        assert np.all(out.rgb == 0) and np.all(out.alpha == 0)

    def test_two_plane_compositing_by_hand(self):
        vol = make_volume(depth=2)
        vol.xi[0] = 0.5
        vol.xi[1] = 1.0
        vol.coeffs[0, :, :, 0] = [1, 0, 0]
        vol.coeffs[1, :, :, 0] = [0, 0, 1]
        out = render_view(vol, vol.ref_cam)
        px = out.rgb[6, 8]
        assert np.abs(px - np.array([0.5, 0.0, 0.5])).max() < 1e-12
        assert abs(out.alpha[6, 8] - 1.0) < 1e-12

    def test_output_in_range_random(self):
        rng = np.random.default_rng(1)
        vol = make_volume(rng=rng, basis=BASIS_SH1)
        out = render_view(vol, vol.ref_cam)
        assert out.rgb.min() >= 0 and out.rgb.max() <= 1
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1

    def test_full_selection_equals_no_mask(self):
        rng = np.random.default_rng(2)
        vol = make_volume(rng=rng)
        a = render_view(vol, vol.ref_cam)
        b = render_view(vol, vol.ref_cam, selection=np.ones(vol.xi.shape, bool))
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.alpha, b.alpha)

    def test_empty_selection_black(self):
        rng = np.random.default_rng(3)
        vol = make_volume(rng=rng)
        out = render_view(vol, vol.ref_cam, selection=np.zeros(vol.xi.shape, bool))
        assert np.all(out.rgb == 0) and np.all(out.alpha == 0)

    def test_workers_bitwise_identical(self):
        rng = np.random.default_rng(4)
        vol = make_volume(width=24, height=18, rng=rng)
        a = render_view(vol, vol.ref_cam, workers=1)
        b = render_view(vol, vol.ref_cam, workers=4)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.alpha, b.alpha)

    def test_novel_view_sees_volume(self):
        rng = np.random.default_rng(5)
        vol = make_volume(rng=rng)
        cam = Camera(vol.ref_cam.K, np.eye(3), np.array([0.05, 0.0, 0.0]),
                     vol.ref_cam.width, vol.ref_cam.height)
        out = render_view(vol, cam)
        assert out.alpha.max() > 0.5


class TestTransmittance:
    def test_conservation_single_ray(self):
        rng = np.random.default_rng(6)
        vol = make_volume(width=1, height=1, depth=12, rng=rng)
        xi = vol.xi[:, 0, 0].astype(np.float64)
        weights = xi * np.cumprod(np.concatenate([[1.0], 1.0 - xi[:-1]]))
        total = weights.sum() + np.prod(1.0 - xi)
        assert abs(total - 1.0) < 1e-9

    def test_profile_non_increasing(self):
        rng = np.random.default_rng(7)
        vol = make_volume(rng=rng)
        ray = pixel_ray(vol.ref_cam, 8.0, 6.0)
        prof = transmittance_profile(vol, ray)
        Ts = [T for _, _, T in prof]
        assert all(a >= b - 1e-15 for a, b in zip(Ts, Ts[1:]))

    def test_profile_reference_ray_stays_in_column(self):
        rng = np.random.default_rng(8)
        vol = make_volume(rng=rng)
        prof = transmittance_profile(vol, pixel_ray(vol.ref_cam, 5.0, 7.0))
        for k, (idx, xi, _) in enumerate(prof):
            assert idx == (5, 7, k)
            assert xi == pytest.approx(float(vol.xi[k, 7, 5]))


class TestSurfaceVoxel:
    def test_opaque_plane(self):
        vol = make_volume()
        vol.xi[5 if vol.xi.shape[0] > 5 else -1] = 1.0
        vol2 = make_volume(depth=8)
        vol2.xi[5] = 1.0
        got = surface_voxel(vol2, pixel_ray(vol2.ref_cam, 4.0, 3.0))
        assert got == (4, 3, 5)

    def test_uniform_xi_02(self):
        vol = make_volume(depth=32)
        vol.xi[:] = 0.2
        got = surface_voxel(vol, pixel_ray(vol.ref_cam, 8.0, 6.0), gamma=0.01)
        assert got == (8, 6, 20)

    def test_none_when_transparent(self):
        vol = make_volume(depth=8)
        vol.xi[:] = 0.01
        assert surface_voxel(vol, pixel_ray(vol.ref_cam, 1.0, 1.0)) is None

    def test_gamma_validation(self):
        vol = make_volume()
        with pytest.raises(VolumeError):
            surface_voxel(vol, pixel_ray(vol.ref_cam, 1.0, 1.0), gamma=0.0)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(9)
        vol = make_volume(depth=16, rng=rng)
        vol.xi[:] = (vol.xi > 0.5) * 0.9
        us = rng.integers(0, vol.ref_cam.width, 20)
        vs = rng.integers(0, vol.ref_cam.height, 20)
        rays = [pixel_ray(vol.ref_cam, float(u), float(v)) for u, v in zip(us, vs)]
        origins = np.stack([r.origin for r in rays])
        dirs = np.stack([r.direction for r in rays])
        out, found = surface_voxels(vol, origins, dirs)
        for i, r in enumerate(rays):
            got = surface_voxel(vol, r)
            if got is None:
                assert not found[i]
            else:
                assert found[i] and tuple(out[i]) == got


class TestDownsample:
    def test_identity(self):
        rng = np.random.default_rng(10)
        vol = make_volume(rng=rng)
        down, m = downsample_volume(vol, 1, vol.xi.shape[0],
                                    range(vol.xi.shape[0]))
        assert np.array_equal(down.xi, vol.xi)
        assert np.array_equal(down.coeffs, vol.coeffs)
        assert np.array_equal(m.map_z, np.arange(vol.xi.shape[0]))

    def test_constant_preserved(self):
        vol = make_volume(width=10, height=9, depth=7)
        vol.xi[:] = 0.25
        vol.coeffs[..., 0, :] = 0.5
        down, _ = downsample_volume(vol, 4, 3, [0, 2, 4, 6])
        assert np.abs(down.xi - 0.25).max() < 1e-7
        assert np.abs(down.coeffs - 0.5).max() < 1e-7

    def test_block_mean_ragged(self):
        arr = np.arange(12.0).reshape(1, 3, 4)
        out = block_reduce_xy(arr, 2)
        # blocks: rows {0,1}x cols {0,1}, {2,3}; ragged row {2}
        assert np.allclose(out[0], [[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                                    [(8 + 9) / 2, (10 + 11) / 2]])

    def test_upsample_round_trip_on_blocks(self):
        vol = make_volume(width=8, height=8, depth=4)
        down, m = downsample_volume(vol, 2, 4, range(4))
        labels = np.zeros(down.xi.shape, bool)
        labels[1, 2, 3] = True
        up = m.upsample_labels(labels)
        assert up.shape == vol.xi.shape
        assert up[1, 4:6, 6:8].all()
        assert up.sum() == 4

    def test_truncated_planes_background(self):
        vol = make_volume(depth=6)
        down, m = downsample_volume(vol, 1, 3, [1, 2, 3])
        labels = np.ones(down.xi.shape, bool)
        up = m.upsample_labels(labels)
        assert not up[0].any() and not up[4].any() and not up[5].any()
        assert up[2].all()

    def test_empty_keep_rejected(self):
        vol = make_volume()
        with pytest.raises(VolumeError):
            downsample_volume(vol, 2, 1, [])

    def test_grid_camera_consistency(self):
        vol = make_volume(width=10, height=9, depth=5)
        down, _ = downsample_volume(vol, 4, 2, [0, 4])
        assert (down.ref_cam.width, down.ref_cam.height) == (3, 3)
        assert down.shape == (3, 3, 2)


class TestVolumeIO:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        vol = make_volume(rng=rng, basis=BASIS_SH1)
        p = tmp_path / "v.plv"
        save_volume(p, vol)
        back = load_volume(p)
        assert np.array_equal(back.xi, vol.xi)
        assert np.array_equal(back.coeffs, vol.coeffs)
        assert back.basis_kind == vol.basis_kind
        assert np.abs(back.planes.depths - vol.planes.depths).max() < 1e-6
        assert np.abs(back.ref_cam.K - vol.ref_cam.K).max() == 0

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.plv"
        p.write_bytes(b"not a volume at all")
        with pytest.raises(VolumeError):
            load_volume(p)

    def test_rejects_irregular_depths(self, tmp_path):
        vol = make_volume()
        down, _ = downsample_volume(vol, 1, 4, [0, 1, 2, 5])
        with pytest.raises(VolumeError):
            save_volume(tmp_path / "x.plv", down)

    def test_labels_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        labels = rng.random((4, 6, 5)) > 0.5
        p = tmp_path / "l.bin"
        save_labels(p, labels)
        assert np.array_equal(load_labels(p), labels)
