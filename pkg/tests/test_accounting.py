import dataclasses

import numpy as np
import pytest

from cdngp import accounting, checkpoint, continual, scene_io
from cdngp.accounting import (bandwidth_report, mlp_param_count, param_count,
                              predicted_b_min, predicted_total_bytes,
                              predicted_total_params, size_report)
from cdngp.encoders import EncoderConfig
from cdngp.errors import ConfigurationError


class TestParamCount:
    def test_aux_tables_match_reported_value(self):
        c = EncoderConfig(3, 12, 2, 14, 16, 2048)
        n = param_count(c)
        assert abs(n - 0.37e6) / 0.37e6 < 0.05

    def test_base_tables_within_band(self):
        c = EncoderConfig(3, 12, 2, 19, 16, 2048)
        n = param_count(c)
        assert abs(n - 9.9e6) / 9.9e6 < 0.15

    def test_unit_cube_corners(self):
        assert param_count(EncoderConfig(3, 1, 1, 8, 1, 1)) == 8

    def test_mlp_count(self):
        assert mlp_param_count([4, 8, 3]) == 4 * 8 + 8 + 8 * 3 + 3


class TestRatios:
    def test_asymmetric_fully_hashed_ratio(self):
        cfg = continual.TrainConfig(p1=19, p2=14)
        assert 2.0 ** (cfg.p2 - cfg.p1) == pytest.approx(1.0 / 32.0)

    def test_merf_capped_fraction(self):
        p = 16
        merf = 2 ** (p - 3) + 3 * 2 ** (p - 4)
        assert merf / 2 ** p == 0.3125

    def test_merf_config_fraction_from_layouts(self):
        from cdngp.field import spatial_encoder_configs
        voxel = spatial_encoder_configs("voxel", 12, 2, 16, 16, 2048)
        merf = spatial_encoder_configs("merf", 12, 2, 16, 16, 2048)
        # On fully-capped levels the per-level row budget obeys the 31.25% rule.
        vox_rows = voxel["voxel"].table_len
        merf_rows = merf["voxel"].table_len + 3 * merf["xy"].table_len
        assert merf_rows / vox_rows == 0.3125


class TestReports:
    def test_size_report_matches_closed_form(self, micro_repo):
        repo, _ = micro_repo
        rep = size_report(repo)
        cfg = repo.config
        assert rep.total_params == predicted_total_params(cfg, len(repo.branches))
        assert rep.total_bytes == predicted_total_bytes(cfg, len(repo.branches))
        assert rep.param_bytes == 4 * rep.total_params
        assert rep.grid_bytes == 2 * rep.grid_cells

    def test_bandwidth_formulas(self, micro_repo):
        repo, _ = micro_repo
        rep = size_report(repo)
        bw = bandwidth_report(repo)
        assert bw.b_min == pytest.approx(
            4 * bw.online_params / repo.schedule.t_chunk / 1e6, rel=1e-12)
        assert bw.b_avg == pytest.approx(
            rep.total_bytes / repo.schedule.n_frames / 1e6, rel=1e-12)
        assert bw.b_min <= bw.b_avg

    def test_single_branch_degenerate(self, micro_dataset):
        ds = scene_io.load_dataset(micro_dataset)
        cfg = continual.TrainConfig(
            p1=9, p2=6, levels=3, features=2, n_min=4, n_max=16,
            hidden_sigma=16, hidden_color=8, latent_dim=4, t_chunk=8,
            eta_init=10, eta_aux=5, batch_rays=64, occ_resolution=8,
            march_step_divisor=48, occ_warmup_steps=4, seed=31)
        repo = continual.run_continual(ds, cfg)
        bw = bandwidth_report(repo)
        assert bw.b_min == pytest.approx(bw.b_avg, rel=1e-12)

    def test_empty_repo_zero_totals(self, micro_dataset, micro_config):
        ds = scene_io.load_dataset(micro_dataset)
        repo = continual.new_repo(ds, micro_config)
        rep = size_report(repo)
        assert rep.total_params == 0
        assert rep.total_bytes == 0

    def test_disk_size_within_one_percent(self, micro_repo, tmp_path):
        repo, _ = micro_repo
        path = checkpoint.save_checkpoint(repo, tmp_path / "sized")
        blob_bytes = sum(f.stat().st_size for f in path.rglob("*.bin")
                         if "snapshot" not in f.name)
        rep = size_report(repo)
        assert abs(blob_bytes - rep.total_bytes) / rep.total_bytes < 0.01

    def test_bandwidth_requires_trained_repo(self, micro_dataset, micro_config):
        ds = scene_io.load_dataset(micro_dataset)
        repo = continual.new_repo(ds, micro_config)
        with pytest.raises(ConfigurationError):
            bandwidth_report(repo)


class TestScalingLaws:
    def test_affine_growth_in_chunk_count(self):
        cfg = continual.TrainConfig(p1=12, p2=8, levels=6, features=2,
                                    n_min=16, n_max=128, hidden_sigma=64,
                                    hidden_color=32, latent_dim=16, t_chunk=10,
                                    occ_resolution=32)
        sizes = {n: predicted_total_bytes(cfg, n) for n in (3, 6, 12)}
        # Exact affine fit: equal per-chunk increments (integer arithmetic).
        assert (sizes[6] - sizes[3]) % 3 == 0
        slope = (sizes[6] - sizes[3]) // 3
        assert sizes[12] - sizes[6] == 6 * slope
        assert sizes[3] == sizes[6] - 3 * slope

    def test_aux_branch_size_is_the_slope(self):
        cfg = continual.TrainConfig(p1=12, p2=8, levels=6, features=2,
                                    n_min=16, n_max=128, hidden_sigma=64,
                                    hidden_color=32, latent_dim=16)
        slope = (predicted_total_bytes(cfg, 7) - predicted_total_bytes(cfg, 6))
        assert slope == 4 * accounting.predicted_branch_params(cfg, 1)

    def test_asymmetric_beats_symmetric_total(self):
        asym = continual.TrainConfig(p1=19, p2=14)
        sym = continual.TrainConfig(p1=16, p2=16)
        n = 30
        assert predicted_total_params(asym, n) < predicted_total_params(sym, n)

    def test_paper_default_b_min(self):
        cfg = continual.TrainConfig()  # (19,14), (12,2), t_chunk=10
        b_min = predicted_b_min(cfg)
        assert abs(b_min - 0.156) <= 0.01

    def test_paper_default_online_params(self):
        cfg = continual.TrainConfig()
        online = (cfg.aux_spatial_param_count() + cfg.temporal_param_count()
                  + cfg.mlp_param_count())
        assert abs(online - 0.39e6) / 0.39e6 < 0.08
