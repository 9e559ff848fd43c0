import json

import numpy as np
import pytest

from cdngp import renderer, scene_io
from cdngp.errors import CheckpointFormatError, ConfigurationError
from cdngp.scene_io import (Blob, Camera, SynthSceneSpec, arc_cameras,
                            default_scene_spec, dssim, generate_dataset,
                            load_dataset, look_at, oracle_field, oracle_render,
                            psnr)


def single_blob_spec(center=(0.5, 0.5, 0.5), radius=0.1, peak=30.0,
                     albedo=(0.9, 0.4, 0.2)):
    return SynthSceneSpec([Blob([list(center)], radius, peak, list(albedo))])


class TestOracleField:
    def test_far_from_blobs(self):
        sigma, _ = oracle_field(single_blob_spec(), np.array([[0.0, 0.0, 0.0]]), 0.0)
        assert sigma[0] < 1e-6

    def test_peak_at_center(self):
        sigma, color = oracle_field(single_blob_spec(peak=25.0),
                                    np.array([[0.5, 0.5, 0.5]]), 0.0)
        assert sigma[0] == pytest.approx(25.0)
        assert np.allclose(color[0], [0.9, 0.4, 0.2])

    def test_two_identical_blobs_double_density(self):
        one = single_blob_spec()
        two = SynthSceneSpec([one.blobs[0], one.blobs[0]])
        x = np.array([[0.45, 0.5, 0.55]])
        s1, c1 = oracle_field(one, x, 0.0)
        s2, c2 = oracle_field(two, x, 0.0)
        assert s2[0] == pytest.approx(2 * s1[0])
        assert np.allclose(c1, c2)

    def test_moving_blob_follows_path(self):
        b = Blob([[0.3, 0.5, 0.5], [0.4, 0.0, 0.0]], 0.05, 10.0, [1, 0, 0])
        spec = SynthSceneSpec([b])
        s0, _ = oracle_field(spec, np.array([[0.3, 0.5, 0.5]]), 0.0)
        s1, _ = oracle_field(spec, np.array([[0.7, 0.5, 0.5]]), 1.0)
        assert s0[0] == pytest.approx(10.0)
        assert s1[0] == pytest.approx(10.0)

    def test_path_leaving_bounds_rejected(self):
        from cdngp.errors import SceneSpecError
        with pytest.raises(SceneSpecError):
            SynthSceneSpec([Blob([[0.5, 0.5, 0.5], [2.0, 0.0, 0.0]], 0.05, 1.0,
                                 [1, 0, 0])])


class TestOracleRender:
    def _camera(self, res=16):
        c2w = look_at([0.5, -2.0, 0.5], [0.5, 0.5, 0.5])
        return Camera(res * 1.2, res * 1.2, res / 2, res / 2, res, res, c2w)

    def test_empty_scene_background(self):
        img = oracle_render(SynthSceneSpec([]), self._camera(), 0.0, 512)
        assert np.all(img == 0)

    def test_axis_blob_brightest_at_principal_point(self):
        cam = self._camera(17)  # odd resolution: principal point on pixel (8, 8)
        img = oracle_render(single_blob_spec(center=(0.5, 0.5, 0.5)), cam, 0.0, 512)
        lum = img.sum(axis=2)
        assert np.unravel_index(np.argmax(lum), lum.shape) == (8, 8)

    def test_motion_mask(self):
        b = Blob([[0.35, 0.5, 0.5], [0.3, 0.0, 0.0]], 0.06, 25.0, [1, 1, 1])
        spec = SynthSceneSpec([b])
        cam = self._camera()
        a = oracle_render(spec, cam, 0.0, 512)
        c = oracle_render(spec, cam, 1.0, 512)
        diff = np.abs(a - c).max(axis=2)
        assert diff.max() > 0.2
        # Pixels whose rays never approach the path stay identical.
        assert (diff < 1e-6).sum() > diff.size // 4

    def test_substep_floor(self):
        with pytest.raises(ConfigurationError):
            oracle_render(single_blob_spec(), self._camera(), 0.0, 256)

    def test_shared_composite_path_matches_manual(self):
        spec = single_blob_spec()
        cam = self._camera(8)
        rays = renderer.generate_rays(cam, [[4, 4]], aabb=spec.bounds)
        substeps = 512
        span = rays.t_far[0] - rays.t_near[0]
        ts = rays.t_near[0] + (np.arange(substeps) + 0.5) / substeps * span
        pos = rays.origins[0] + ts[:, None] * rays.dirs[0]
        sigma, color = oracle_field(spec, pos, 0.0)
        out = renderer.volume_render(sigma, color,
                                     np.full(substeps, span / substeps))
        img = oracle_render(spec, cam, 0.0, substeps)
        assert np.allclose(img[4, 4], np.clip(out.color[0], 0, 1), atol=1e-6)


class TestDataset:
    def test_counts_and_manifest(self, micro_dataset):
        ds = load_dataset(micro_dataset)
        assert ds.n_views == 3
        assert ds.n_frames == 8
        pngs = list(micro_dataset.glob("frames/*/*.png"))
        assert len(pngs) == 24
        assert ds.held_out_view == 0
        assert 0 not in ds.train_views

    def test_deterministic_generation(self, tmp_path):
        spec = default_scene_spec(seed=3)
        a = generate_dataset(spec, 2, 2, 16, seed=3, out_dir=tmp_path / "a",
                             substeps=512, convergence_probe=False)
        b = generate_dataset(spec, 2, 2, 16, seed=3, out_dir=tmp_path / "b",
                             substeps=512, convergence_probe=False)
        ha = json.loads((a / "manifest.json").read_text())["hashes"]
        hb = json.loads((b / "manifest.json").read_text())["hashes"]
        assert ha == hb

    def test_round_trip_cameras(self, micro_dataset):
        ds = load_dataset(micro_dataset)
        manifest = json.loads((micro_dataset / "manifest.json").read_text())
        for cam, cj in zip(ds.cameras, manifest["views"]):
            assert cam.fx == cj["fx"]
            assert np.array_equal(cam.c2w, np.asarray(cj["c2w"]))

    def test_missing_frame_error_names_file(self, micro_dataset):
        ds = load_dataset(micro_dataset)
        target = ds.frame_path(1, 3)
        backup = target.read_bytes()
        try:
            target.unlink()
            with pytest.raises(CheckpointFormatError, match="f0003"):
                ds.frame(1, 3)
        finally:
            target.write_bytes(backup)

    def test_truncated_frame_error(self, micro_dataset, tmp_path):
        ds = load_dataset(micro_dataset)
        target = ds.frame_path(2, 0)
        backup = target.read_bytes()
        try:
            target.write_bytes(backup[:20])
            with pytest.raises(CheckpointFormatError, match="v02"):
                ds.frame(2, 0)
        finally:
            target.write_bytes(backup)

    def test_unknown_version_rejected(self, micro_dataset, tmp_path):
        manifest = json.loads((micro_dataset / "manifest.json").read_text())
        manifest["format_version"] = 99
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_dataset(bad)

    def test_residency_tracking(self, micro_dataset):
        ds = load_dataset(micro_dataset)
        with ds.load_chunk([0, 1, 2]) as chunk:
            assert ds.residency.resident == 3
            assert chunk.images.shape[0] == 3
        assert ds.residency.resident == 0

    def test_arc_cameras_face_scene(self):
        cams = arc_cameras(8, 32)
        assert len(cams) == 8
        center = np.array([0.5, 0.5, 0.5])
        for c in cams:
            to_center = center - c.position
            to_center /= np.linalg.norm(to_center)
            assert np.dot(c.forward, to_center) > 0.99


class TestMetrics:
    def test_psnr_identical_capped(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_psnr_known_values(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)
        assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0)

    def test_psnr_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        base = rng.random((16, 16, 3)) * 0.5 + 0.25
        vals = []
        for amp in (0.01, 0.02, 0.05, 0.1, 0.2):
            noisy = np.clip(base + amp * rng.standard_normal(base.shape), 0, 1)
            vals.append(psnr(base, noisy))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))

    def test_dssim_identical(self):
        img = np.random.default_rng(2).random((16, 16, 3))
        assert dssim(img, img) == pytest.approx(0.0, abs=1e-12)

    def test_dssim_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert dssim(a, b) == pytest.approx(dssim(b, a), rel=1e-12)

    def test_dssim_checkerboard_negative(self):
        ii, jj = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
        board = (((ii // 4) + (jj // 4)) % 2).astype(np.float64)
        board = 0.25 + 0.5 * board
        inv = 1.0 - board
        assert dssim(board, inv) > 0.4

    def test_dssim_close_to_reference_implementation(self):
        from skimage.metrics import structural_similarity
        rng = np.random.default_rng(4)
        a = rng.random((24, 24))
        b = np.clip(a + 0.15 * rng.standard_normal(a.shape), 0, 1)
        ours = dssim(a, b)
        ref = (1.0 - structural_similarity(a, b, win_size=11, data_range=1.0,
                                           gaussian_weights=True, sigma=1.5,
                                           use_sample_covariance=False)) / 2.0
        assert ours == pytest.approx(ref, abs=5e-3)

    def test_dssim_window_too_large(self):
        with pytest.raises(ConfigurationError):
            dssim(np.zeros((8, 8)), np.zeros((8, 8)))
