import numpy as np
import pytest

from voxelselect.geometry import Camera, DepthPlaneSet, pixel_ray
from voxelselect.scribbles import (LabeledVoxels, ScribbleError, ScribbleSet,
                                   distance_field, lift_pixels,
                                   lift_scribbles, load_scribbles,
                                   project_labeled_voxels, raster_from_pixels,
                                   rasterize_scribbles, save_scribbles,
                                   scribbles_from_raster)
from voxelselect.volume import PlaneVolume


def make_volume(width=24, height=18, depth=8, far_plane=True):
    K = np.array([[30.0, 0, width / 2], [0, 30.0, height / 2], [0, 0, 1]])
    cam = Camera(K, np.eye(3), np.zeros(3), width, height)
    planes = DepthPlaneSet.make(2.0, 4.0, depth, "linear")
    xi = np.zeros((depth, height, width), np.float32)
    if far_plane:
        xi[-1] = 1.0
    co = np.zeros((depth, height, width, 1, 3), np.float32)
    return PlaneVolume(cam, planes, xi, co)


class TestRasterize:
    def test_single_point_radius0(self):
        s = ScribbleSet([[(5, 5)]], [[(1, 1)]])
        fg, bg = rasterize_scribbles(s, 24, 18, brush_radius=0)
        assert fg.shape == (1, 2) and tuple(fg[0]) == (5, 5)
        assert tuple(bg[0]) == (1, 1)

    def test_horizontal_stroke(self):
        s = ScribbleSet([[(3, 4), (12, 4)]], [[(0, 0)]])
        fg, _ = rasterize_scribbles(s, 24, 18, brush_radius=0)
        assert len(fg) == 10
        assert set(fg[:, 1]) == {4}

    def test_disk_radius_2(self):
        s = ScribbleSet([[(10, 10)]], [[(0, 0)]])
        fg, _ = rasterize_scribbles(s, 24, 18, brush_radius=2)
        assert len(fg) == 13

    def test_overlap_rejected(self):
        s = ScribbleSet([[(5, 5)]], [[(6, 5)]])
        with pytest.raises(ScribbleError) as ei:
            rasterize_scribbles(s, 24, 18, brush_radius=2)
        assert "both classes" in str(ei.value)

    def test_out_of_bounds_rejected(self):
        s = ScribbleSet([[(30, 5)]], [[(1, 1)]])
        with pytest.raises(ScribbleError):
            rasterize_scribbles(s, 24, 18)

    def test_diagonal_is_connected(self):
        s = ScribbleSet([[(0, 0), (7, 5)]], [[(20, 17)]])
        fg, _ = rasterize_scribbles(s, 24, 18, brush_radius=0)
        pts = set(map(tuple, fg))
        # 8-connectivity along the Bresenham line
        for (u, v) in list(pts)[:-1]:
            if (u, v) == (7, 5):
                continue
            assert any((u + du, v + dv) in pts
                       for du in (-1, 0, 1) for dv in (-1, 0, 1)
                       if (du, dv) != (0, 0))


class TestLift:
    def test_lift_hits_opaque_plane(self):
        vol = make_volume()
        vol.xi[3, 8:12, 9:15] = 1.0
        s = ScribbleSet([[(10, 9), (13, 9)]], [[(2, 2), (2, 6)]])
        lv = lift_scribbles(vol, s, brush_radius=0)
        fg, bg = lv.split()
        assert all(d == 3 for (_, _, d) in fg)
        assert all(d == 7 for (_, _, d) in bg)

    def test_analytic_sphere_depth(self):
        # opaque ellipsoid voxelized into the grid; lifted fg voxels sit
        # within one plane spacing of the analytic ray-sphere entry depth
        vol = make_volume(width=32, height=32, depth=24)
        planes = DepthPlaneSet.make(2.0, 4.0, 24, "linear")
        vol = PlaneVolume(vol.ref_cam, planes,
                          np.zeros((24, 32, 32), np.float32),
                          np.zeros((24, 32, 32, 1, 3), np.float32))
        center = np.array([0.0, 0.0, 3.0])
        radius = 0.5
        pos = vol.all_world_positions()
        inside = np.linalg.norm(pos - center, axis=-1) <= radius
        vol.xi[inside] = 1.0
        vol.xi[-1] = 1.0
        s = ScribbleSet([[(15, 15)]], [[(2, 2)]])
        lv = lift_scribbles(vol, s, brush_radius=0)
        fg, _ = lv.split()
        assert len(fg) == 1
        u, v, d = fg[0]
        ray = pixel_ray(vol.ref_cam, float(u), float(v))
        # analytic entry depth of the sphere along this ray
        oc = ray.origin - center
        b = ray.direction @ oc
        disc = b * b - (oc @ oc - radius ** 2)
        t_hit = -b - np.sqrt(disc)
        z_hit = (ray.origin + t_hit * ray.direction - ray.origin) @ vol.ref_cam.n
        spacing = planes.depths[1] - planes.depths[0]
        assert abs(planes.depths[d] - z_hit) <= spacing

    def test_transparent_ray_dropped(self):
        vol = make_volume(far_plane=False)
        vol.xi[2, 5, 5] = 1.0
        fg = np.array([[5, 5]])
        bg = np.array([[1, 1]])  # nothing under this ray
        with pytest.raises(ScribbleError):
            lift_pixels(vol, np.zeros((0, 2), np.int64), bg)
        lv = lift_pixels(vol, fg, bg)
        assert lv.dropped_no_surface == 1
        assert len(lv.voxels) == 1

    def test_conflict_dropped(self):
        vol = make_volume()
        # two pixels land on distinct far-plane voxels; force conflict by
        # labeling the same pixel fg and bg at the raw lift level
        fg = np.array([[4, 4]])
        bg = np.array([[4, 4]])
        with pytest.raises(ScribbleError):
            lift_pixels(vol, fg, bg)

    def test_lift_respects_gamma_invariant(self):
        rng = np.random.default_rng(0)
        vol = make_volume(depth=12, far_plane=False)
        vol.xi[:] = (rng.random(vol.xi.shape) * 0.9).astype(np.float32)
        vol.xi[-1] = 1.0
        s = ScribbleSet([[(3, 3), (9, 3)]], [[(3, 12), (9, 12)]])
        lv = lift_scribbles(vol, s, brush_radius=1)
        for (u, v, d) in lv.voxels:
            T = np.cumprod(1.0 - vol.xi[:, v, u].astype(np.float64))
            assert T[d] < 0.01
            if d > 0:
                assert np.all(T[:d] >= 0.01)

    def test_needs_both_classes(self):
        vol = make_volume()
        with pytest.raises(ScribbleError):
            lift_scribbles(vol, ScribbleSet([[(5, 5)]], []))


class TestProject:
    def test_reference_round_trip(self):
        vol = make_volume()
        s = ScribbleSet([[(6, 6), (12, 6)]], [[(3, 14), (9, 14)]])
        lv = lift_scribbles(vol, s, brush_radius=0)
        fg, bg = project_labeled_voxels(lv, vol, vol.ref_cam)
        src_fg = {(u, v) for (u, v), lab in zip(map(tuple, lv.sources), lv.labels)
                  if lab == 1}
        got_fg = set(map(tuple, fg))
        for (u, v) in src_fg:
            assert any(abs(u - a) <= 1 and abs(v - b) <= 1 for (a, b) in got_fg)

    def test_behind_camera_dropped(self):
        vol = make_volume()
        lv = LabeledVoxels(np.array([[5, 5, 0]]), np.array([1], np.uint8),
                           np.array([[5, 5]]))
        behind = Camera(vol.ref_cam.K, np.eye(3), np.array([0, 0, 10.0]),
                        vol.ref_cam.width, vol.ref_cam.height)
        fg, bg = project_labeled_voxels(lv, vol, behind)
        assert len(fg) == 0 and len(bg) == 0

    def test_empty_input(self):
        vol = make_volume()
        lv = LabeledVoxels(np.zeros((0, 3), np.int64),
                           np.zeros(0, np.uint8), np.zeros((0, 2), np.int64))
        fg, bg = project_labeled_voxels(lv, vol, vol.ref_cam)
        assert fg.shape == (0, 2) and bg.shape == (0, 2)


class TestDistanceField:
    def test_member_distance_zero(self):
        vol = make_volume()
        vset = np.array([[3, 4, 2], [10, 9, 5]])
        d = distance_field(vol, vset, query=vset)
        assert np.all(d == 0)

    def test_axis_neighbor_spacing(self):
        vol = make_volume()
        vset = np.array([[5, 5, 2]])
        q = np.array([[5, 5, 3]])
        d = distance_field(vol, vset, query=q)
        p0 = vol.world_positions(5, 5, 2)
        p1 = vol.world_positions(5, 5, 3)
        expect = np.linalg.norm(p1 - p0) / vol.bbox_diagonal()
        assert abs(d[0] - expect) < 1e-12

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        vol = make_volume(width=10, height=10, depth=10)
        vset = np.stack([rng.integers(0, 10, 20), rng.integers(0, 10, 20),
                         rng.integers(0, 10, 20)], axis=1)
        field = distance_field(vol, vset)
        set_pos = vol.world_positions(vset[:, 0], vset[:, 1], vset[:, 2])
        all_pos = vol.all_world_positions()
        brute = np.linalg.norm(all_pos[..., None, :] - set_pos, axis=-1).min(-1)
        brute /= vol.bbox_diagonal()
        assert np.abs(field - brute).max() < 1e-12

    def test_triangle_sanity(self):
        rng = np.random.default_rng(2)
        vol = make_volume(width=8, height=8, depth=6)
        vset = np.array([[1, 1, 1], [6, 6, 4]])
        field = distance_field(vol, vset)
        diag = vol.bbox_diagonal()
        for _ in range(100):
            u, v, d = rng.integers(0, 8), rng.integers(0, 8), rng.integers(0, 6)
            if u + 1 >= 8:
                continue
            pa = vol.world_positions(u, v, d)
            pb = vol.world_positions(u + 1, v, d)
            gap = np.linalg.norm(pb - pa) / diag
            assert abs(field[d, v, u] - field[d, v, u + 1]) <= gap + 1e-12

    def test_empty_set_rejected(self):
        vol = make_volume()
        with pytest.raises(ScribbleError):
            distance_field(vol, np.zeros((0, 3), np.int64))


class TestScribbleFiles:
    def test_text_round_trip(self, tmp_path):
        s = ScribbleSet([[(1.0, 2.0), (3.5, 4.0)]], [[(7.0, 8.0)]], "ref")
        p = tmp_path / "s.txt"
        save_scribbles(p, s)
        back = load_scribbles(p)
        assert back.fg_strokes == [[(1.0, 2.0), (3.5, 4.0)]]
        assert back.bg_strokes == [[(7.0, 8.0)]]

    def test_unknown_tag_rejected(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("maybe 1,2 3,4\n")
        with pytest.raises(ScribbleError) as ei:
            load_scribbles(p)
        assert "unknown tag" in str(ei.value)

    def test_raster_round_trip(self):
        fg = np.array([[2, 3], [4, 5]])
        bg = np.array([[0, 0]])
        raster = raster_from_pixels(fg, bg, 8, 8)
        fg2, bg2 = scribbles_from_raster(raster)
        assert set(map(tuple, fg2)) == set(map(tuple, fg))
        assert set(map(tuple, bg2)) == set(map(tuple, bg))

    def test_raster_bad_values(self):
        with pytest.raises(ScribbleError):
            scribbles_from_raster(np.array([[0, 3]]))
