from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdngp.errors import ConfigurationError, ContractViolation
from cdngp.renderer import (OccupancyGrid, RayBatch, generate_rays, march_ray,
                            march_rays, render_image, render_rays,
                            truncate_transmittance, update_occupancy,
                            volume_render, volume_render_backward)
from cdngp.scene_io import Camera, look_at

UNIT_AABB = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def make_camera(width=16, height=16, cx=None, cy=None):
    c2w = look_at([0.5, -2.0, 0.5], [0.5, 0.5, 0.5])
    return Camera(20.0, 20.0, cx if cx is not None else width / 2.0,
                  cy if cy is not None else height / 2.0, width, height, c2w)


class TestGenerateRays:
    def test_principal_point_is_forward(self):
        cam = make_camera(cx=8.5, cy=8.5)  # pixel (8, 8) center hits (cx, cy)
        rays = generate_rays(cam, [[8, 8]], aabb=UNIT_AABB)
        assert np.allclose(rays.dirs[0], cam.forward, atol=1e-12)

    def test_shared_origin(self):
        cam = make_camera()
        pix = [[0, 0], [15, 15], [7, 3]]
        rays = generate_rays(cam, pix, aabb=UNIT_AABB)
        assert np.allclose(rays.origins, cam.position)

    def test_corner_pixel_matches_pinhole_recompute(self):
        cam = make_camera()
        rays = generate_rays(cam, [[0, 15]], aabb=UNIT_AABB)
        # Independent computation: K^-1 applied to homogeneous pixel coords.
        K = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
        hom = np.array([0 + 0.5, 15 + 0.5, 1.0])
        d_cam = np.linalg.solve(K, hom)
        d_world = cam.c2w[:3, :3] @ d_cam
        d_world /= np.linalg.norm(d_world)
        assert np.allclose(rays.dirs[0], d_world, atol=1e-12)

    def test_unit_directions(self):
        cam = make_camera()
        pix = np.stack(np.meshgrid(np.arange(16), np.arange(16)), -1).reshape(-1, 2)
        rays = generate_rays(cam, pix, aabb=UNIT_AABB)
        assert np.allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-12)

    def test_degenerate_pose_rejected(self):
        cam = SimpleNamespace(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16,
                              c2w=np.zeros((4, 4)))
        with pytest.raises(ConfigurationError):
            generate_rays(cam, [[0, 0]])

    def test_pixels_out_of_bounds(self):
        with pytest.raises(ConfigurationError):
            generate_rays(make_camera(), [[16, 0]])


class TestMarch:
    def _grid(self, occupied=True, res=8):
        g = OccupancyGrid.create(res, UNIT_AABB)
        g.bits[...] = occupied
        return g

    def test_unoccupied_grid_no_samples(self):
        rays = RayBatch(np.array([[-0.5, 0.5, 0.5]]), np.array([[1.0, 0, 0]]),
                        np.array([0.5]), np.array([1.5]))
        s = march_rays(rays, self._grid(False), 0.05)
        assert s.n_samples == 0

    def test_occupied_count_ceil(self):
        rays = RayBatch(np.array([[-0.5, 0.5, 0.5]]), np.array([[1.0, 0, 0]]),
                        np.array([0.5]), np.array([1.5]))
        s = march_rays(rays, self._grid(True), 0.03)
        assert s.n_samples == int(np.ceil(1.0 / 0.03))

    def test_half_occupied_positions(self):
        g = self._grid(True)
        g.bits[:, :, 4:] = False  # only z < 0.5 occupied
        rays = RayBatch(np.array([[0.5, 0.5, -0.5]]), np.array([[0.0, 0, 1.0]]),
                        np.array([0.5]), np.array([1.5]))
        s = march_rays(rays, g, 0.01)
        assert s.n_samples > 0
        assert s.positions[:, 2].max() < 0.5 + 1e-9

    def test_single_ray_wrapper(self):
        s = march_ray([-0.5, 0.5, 0.5], [1.0, 0, 0], 0.5, 1.5, self._grid(True), 0.25)
        assert s.n_samples == 4

    def test_jitter_stays_in_bins(self):
        rays = RayBatch(np.array([[-0.5, 0.5, 0.5]]), np.array([[1.0, 0, 0]]),
                        np.array([0.5]), np.array([1.5]))
        s = march_rays(rays, self._grid(True), 0.1, rng=np.random.default_rng(0))
        x = s.positions[:, 0]
        assert np.all(np.diff(x) > 0)
        assert x.min() >= 0 and x.max() <= 1.0 + 1e-9

    def test_bad_step_rejected(self):
        rays = RayBatch(np.zeros((1, 3)), np.array([[1.0, 0, 0]]),
                        np.array([0.0]), np.array([1.0]))
        with pytest.raises(ConfigurationError):
            march_rays(rays, self._grid(), 0.0)


class TestVolumeRender:
    def test_all_zero_sigma(self):
        out = volume_render(np.zeros(5), np.ones((5, 3)), np.full(5, 0.1))
        assert np.allclose(out.color, 0)
        assert out.opacity[0] == 0
        assert np.all(out.weights == 0)

    def test_single_sample_closed_form(self):
        out = volume_render(np.array([np.log(2) / 0.1]), np.ones((1, 3)),
                            np.array([0.1]))
        assert out.opacity[0] == pytest.approx(0.5)
        assert np.allclose(out.color[0], 0.5)

    def test_two_samples_closed_form(self):
        sig = np.array([np.log(2), np.log(2)])
        colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        out = volume_render(sig, colors, np.ones(2))
        assert np.allclose(out.weights, [0.5, 0.25])
        assert np.allclose(out.color[0], [0.5, 0.25, 0.0])
        assert out.opacity[0] == pytest.approx(0.75)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ContractViolation):
            volume_render(np.array([-1.0]), np.ones((1, 3)), np.ones(1))

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 60))
    @settings(max_examples=40, deadline=None)
    def test_telescoping_identity(self, seed, n):
        rng = np.random.default_rng(seed)
        sig = rng.uniform(0, 30, n)
        deltas = rng.uniform(1e-4, 0.2, n)
        out = volume_render(sig, rng.random((n, 3)), deltas)
        assert out.opacity[0] + out.trans_final[0] == pytest.approx(1.0, abs=1e-9)

    def test_append_zero_density_invariant(self):
        rng = np.random.default_rng(1)
        sig = rng.uniform(0, 5, 10)
        col = rng.random((10, 3))
        dl = rng.uniform(0.01, 0.1, 10)
        a = volume_render(sig, col, dl)
        b = volume_render(np.concatenate([sig, [0.0]]),
                          np.concatenate([col, [[1.0, 1.0, 1.0]]]),
                          np.concatenate([dl, [0.05]]))
        assert np.allclose(a.color, b.color)
        assert np.allclose(a.opacity, b.opacity)

    def test_monotone_in_color(self):
        rng = np.random.default_rng(2)
        sig = rng.uniform(0, 5, 8)
        col = rng.random((8, 3))
        dl = rng.uniform(0.01, 0.1, 8)
        base = volume_render(sig, col, dl).color[0, 0]
        col2 = col.copy()
        col2[3, 0] += 0.2
        assert volume_render(sig, col2, dl).color[0, 0] >= base

    def test_multi_ray_packing_with_empty_rays(self):
        ids = np.array([1, 1, 3], dtype=np.int32)
        out = volume_render(np.array([1.0, 2.0, 3.0]), np.ones((3, 3)),
                            np.full(3, 0.1), ids, 5)
        assert out.color.shape == (5, 3)
        assert out.opacity[0] == 0 and out.opacity[2] == 0 and out.opacity[4] == 0
        assert out.trans_final[0] == 1.0

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        n = 12
        ids = np.sort(rng.integers(0, 3, n)).astype(np.int32)
        sig = rng.uniform(0.1, 4.0, n)
        col = rng.random((n, 3))
        dl = rng.uniform(0.02, 0.1, n)
        gc = rng.standard_normal((3, 3))
        go = rng.standard_normal(3)
        gw = rng.standard_normal(n)
        gt = rng.standard_normal(3)

        def value(s, c):
            out = volume_render(s, c, dl, ids, 3)
            return ((out.color * gc).sum() + (out.opacity * go).sum()
                    + (out.weights * gw).sum() + (out.trans_final * gt).sum())

        out, cache = volume_render(sig, col, dl, ids, 3, return_cache=True)
        dsig, dcol = volume_render_backward(cache, gc, go, gw, gt)
        h = 1e-6
        for i in rng.choice(n, 6, replace=False):
            sp, sm = sig.copy(), sig.copy()
            sp[i] += h
            sm[i] -= h
            fd = (value(sp, col) - value(sm, col)) / (2 * h)
            assert dsig[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
            cp, cm = col.copy(), col.copy()
            cp[i, 1] += h
            cm[i, 1] -= h
            fd = (value(sig, cp) - value(sig, cm)) / (2 * h)
            assert dcol[i, 1] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestQuadratureAndTermination:
    @staticmethod
    def _gauss_field(pos, dirs=None):
        d2 = ((pos - 0.5) ** 2).sum(axis=1)
        sigma = 25.0 * np.exp(-d2 / (2 * 0.1 ** 2))
        color = np.tile([0.8, 0.5, 0.3], (len(pos), 1))
        return sigma, color

    def _render_at(self, step):
        grid = OccupancyGrid.create(16, UNIT_AABB)
        grid.bits[...] = True
        rays = RayBatch(np.array([[0.5, 0.5, -1.0]]), np.array([[0.0, 0, 1.0]]),
                        np.array([1.0]), np.array([2.0]))
        color, _, _, _ = render_rays(self._gauss_field, grid, rays, step,
                                     early_stop=False)
        return color[0]

    def test_halving_step_improves_by_1_8x(self):
        ref = self._render_at(1.0 / 4096)
        for h in (1.0 / 64, 1.0 / 128):
            e1 = np.abs(self._render_at(h) - ref).max()
            e2 = np.abs(self._render_at(h / 2) - ref).max()
            assert e1 / max(e2, 1e-12) >= 1.8

    def test_early_termination_close_to_full(self):
        grid = OccupancyGrid.create(8, UNIT_AABB)
        grid.bits[...] = True
        rng = np.random.default_rng(4)
        rays = RayBatch(np.tile([[0.5, 0.5, -1.0]], (8, 1)),
                        np.tile([[0.0, 0, 1.0]], (8, 1)),
                        np.ones(8), np.full(8, 2.0))

        def dense_field(pos, dirs):
            sigma = 60.0 * rng.random(len(pos)) * 0 + 40.0
            return sigma, np.tile([0.9, 0.1, 0.4], (len(pos), 1))

        full, _, _, _ = render_rays(dense_field, grid, rays, 0.01, early_stop=False)
        trunc, _, _, _ = render_rays(dense_field, grid, rays, 0.01, early_stop=True)
        assert np.abs(full - trunc).max() <= 1e-3

    def test_truncation_mask_threshold(self):
        grid = OccupancyGrid.create(8, UNIT_AABB)
        grid.bits[...] = True
        rays = RayBatch(np.array([[0.5, 0.5, -1.0]]), np.array([[0.0, 0, 1.0]]),
                        np.array([1.0]), np.array([2.0]))
        samples = march_rays(rays, grid, 0.01)
        sig = np.full(samples.n_samples, 40.0)
        keep = truncate_transmittance(samples, sig)
        assert keep[0]
        assert not keep[-1]
        assert keep.sum() < samples.n_samples


class TestRenderImage:
    def test_empty_grid_background(self):
        cam = make_camera(width=8, height=8)
        grid = OccupancyGrid.create(8, UNIT_AABB)
        img, opacity = render_image(lambda p, d: (np.ones(len(p)), np.ones((len(p), 3))),
                                    grid, cam, UNIT_AABB, 0.05)
        assert np.all(img == 0)
        assert np.all(opacity == 0)

    def test_white_background_flag(self):
        cam = make_camera(width=8, height=8)
        grid = OccupancyGrid.create(8, UNIT_AABB)
        img, _ = render_image(lambda p, d: (np.zeros(len(p)), np.ones((len(p), 3))),
                              grid, cam, UNIT_AABB, 0.05, white_background=True)
        assert np.all(img == 1.0)

    def test_bitwise_deterministic(self):
        cam = make_camera(width=8, height=8)
        grid = OccupancyGrid.create(8, UNIT_AABB)
        grid.bits[...] = True

        def field(pos, dirs):
            d2 = ((pos - 0.5) ** 2).sum(axis=1)
            return 20 * np.exp(-8 * d2), np.tile([0.5, 0.6, 0.7], (len(pos), 1))

        a, _ = render_image(field, grid, cam, UNIT_AABB, 0.02)
        b, _ = render_image(field, grid, cam, UNIT_AABB, 0.02)
        assert np.array_equal(a, b)


class TestUpdateOccupancy:
    def test_zero_field_eventually_clears(self):
        grid = OccupancyGrid.create(8, UNIT_AABB, decay=0.95, threshold=0.01)
        grid.density[...] = 1.0
        grid.refresh_bits()
        rng = np.random.default_rng(0)
        zero = lambda pts: np.zeros(len(pts))
        for _ in range(200):
            update_occupancy(grid, zero, rng)
        assert not grid.bits.any()

    def test_constant_high_density_sets_all(self):
        grid = OccupancyGrid.create(8, UNIT_AABB)
        rng = np.random.default_rng(1)
        update_occupancy(grid, lambda pts: np.full(len(pts), 5.0), rng,
                         all_cells=True)
        assert grid.bits.all()

    def test_decay_one_spike_persists(self):
        grid = OccupancyGrid.create(4, UNIT_AABB, decay=1.0, threshold=0.01)
        rng = np.random.default_rng(2)
        update_occupancy(grid, lambda pts: np.full(len(pts), 3.0), rng,
                         all_cells=True)
        for _ in range(50):
            update_occupancy(grid, lambda pts: np.zeros(len(pts)), rng)
        assert grid.bits.all()

    def test_bit_cache_invariant(self):
        grid = OccupancyGrid.create(8, UNIT_AABB)
        rng = np.random.default_rng(3)
        update_occupancy(grid, lambda pts: rng.uniform(0, 0.02, len(pts)), rng,
                         all_cells=True)
        assert np.array_equal(grid.bits, grid.density > grid.threshold)
