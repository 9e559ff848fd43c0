"""Exact parameter counting, model-size reporting, and streaming-bandwidth
metrics.

Conventions: parameters are stored in float32 (4 bytes), the occupancy-grid
density cache in 16-bit precision (2 bytes). Size reports quote MB as 2**20
bytes; bandwidth reports quote MB as 10**6 bytes (decimal MB per frame).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .encoders import level_entry_counts
from .errors import ConfigurationError

PARAM_BYTES = 4
GRID_BYTES = 2
MIB = float(1 << 20)
MB = 1e6


def param_count(config):
    """Total table parameters: sum_l min((N_l + 1)**dims, 2**P) * features."""
    return sum(level_entry_counts(config)) * config.features


def mlp_param_count(sizes):
    """Dense parameter count for layer widths [in, h..., out]."""
    return sum(fi * fo + fo for fi, fo in zip(sizes[:-1], sizes[1:]))


@dataclass
class SizeReport:
    """Per-component parameter counts and byte totals for a trained repo."""

    n_branches: int
    base_params_3d: int
    base_params_2d: int
    aux_params_3d: int        # one auxiliary branch
    aux_params_2d: int
    temporal_params: int      # one branch
    mlp_params: int           # one branch (both heads)
    grid_cells: int
    total_params: int
    param_bytes: int
    grid_bytes: int
    total_bytes: int
    aux_base_hashed_ratio: float  # 2**(P2 - P1) for fully-hashed levels

    @property
    def size_mib(self):
        return self.total_bytes / MIB

    def to_json(self):
        d = asdict(self)
        d["size_MB_base2"] = self.size_mib
        return d

    def table(self):
        rows = [
            ("branches", self.n_branches),
            ("base 3-D encoder params", self.base_params_3d),
            ("base 2-D encoder params", self.base_params_2d),
            ("aux 3-D encoder params (per branch)", self.aux_params_3d),
            ("aux 2-D encoder params (per branch)", self.aux_params_2d),
            ("temporal params (per branch)", self.temporal_params),
            ("MLP params (per branch)", self.mlp_params),
            ("occupancy grid cells", self.grid_cells),
            ("total params", self.total_params),
            ("total bytes", self.total_bytes),
            ("size (MB, 2^20)", f"{self.size_mib:.2f}"),
            ("aux/base fully-hashed ratio", f"{self.aux_base_hashed_ratio:.6g}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


@dataclass
class BandwidthReport:
    """Streaming costs in decimal MB per frame."""

    b_min: float
    b_avg: float
    online_params: int           # one auxiliary branch (or the base branch if single)
    per_branch_online_bytes: list
    t_chunk: int
    n_frames: int

    def to_json(self):
        return asdict(self)

    def table(self):
        rows = [
            ("B_min (MB/frame)", f"{self.b_min:.4f}"),
            ("B_avg (MB/frame)", f"{self.b_avg:.4f}"),
            ("online params (one branch)", self.online_params),
            ("T_chunk", self.t_chunk),
            ("frames", self.n_frames),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _split_spatial(spatial):
    """(3-D params, 2-D params) of one SpatialTables bundle."""
    p3 = p2 = 0
    for tab in spatial.sets.values():
        n = tab.n_params()
        if tab.config.dims >= 3:
            p3 += n
        else:
            p2 += n
    return p3, p2


def size_report(repo):
    """Measure an actual repo; totals equal the serialized parameter bytes."""
    base3, base2 = _split_spatial(repo.base_spatial)
    aux3 = aux2 = temporal = mlps = 0
    total = base3 + base2
    for br in repo.branches:
        total += br.n_params()
    for br in repo.branches:
        if br.aux_spatial is not None:
            a3, a2 = _split_spatial(br.aux_spatial)
            aux3, aux2 = a3, a2
            temporal = br.temporal.n_params()
            mlps = br.theta1.n_params() + br.theta2.n_params()
            break
    else:
        if repo.branches:
            br = repo.branches[0]
            temporal = br.temporal.n_params()
            mlps = br.theta1.n_params() + br.theta2.n_params()
    cells = repo.grid.n_cells
    param_bytes = PARAM_BYTES * total
    grid_bytes = GRID_BYTES * cells if repo.branches else 0
    cfg = repo.config
    ratio = 2.0 ** (cfg.p2 - cfg.p1)
    if not repo.branches:
        return SizeReport(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, ratio)
    return SizeReport(len(repo.branches), base3, base2, aux3, aux2, temporal,
                      mlps, cells, total, param_bytes, grid_bytes,
                      param_bytes + grid_bytes, ratio)


def bandwidth_report(repo):
    """B_min streams one auxiliary branch per chunk (base and grid are sent
    once up front); B_avg amortizes the whole repo over all frames. A
    single-branch repo degenerates to B_min = B_avg."""
    if not repo.branches:
        raise ConfigurationError("bandwidth_report needs a trained repo")
    t_chunk = repo.schedule.t_chunk
    n_frames = repo.schedule.n_frames
    rep = size_report(repo)
    per_branch = [PARAM_BYTES * br.n_params() for br in repo.branches]
    if len(repo.branches) == 1:
        online = repo.branches[0].n_params()
        b_min_bytes = rep.total_bytes / t_chunk
    else:
        aux = next(br for br in repo.branches if br.aux_spatial is not None)
        online = aux.n_params()
        b_min_bytes = PARAM_BYTES * online / t_chunk
    b_avg = rep.total_bytes / n_frames / MB
    b_min = b_min_bytes / MB
    return BandwidthReport(b_min, b_avg, online, per_branch, t_chunk, n_frames)


def predicted_branch_params(config, k):
    """Closed-form parameter count of branch k from the config alone."""
    spatial = 0 if k == 0 else config.aux_spatial_param_count()
    return spatial + config.temporal_param_count() + config.mlp_param_count()


def predicted_total_params(config, n_chunks):
    """Closed-form total parameter count for an n-chunk repo."""
    total = config.base_spatial_param_count()
    for k in range(n_chunks):
        total += predicted_branch_params(config, k)
    return total


def predicted_total_bytes(config, n_chunks):
    return PARAM_BYTES * predicted_total_params(config, n_chunks) \
        + GRID_BYTES * config.occ_resolution ** 3


def predicted_b_min(config):
    """Closed-form B_min (MB/frame) at the configured chunk length."""
    online = config.aux_spatial_param_count() + config.temporal_param_count() \
        + config.mlp_param_count()
    return PARAM_BYTES * online / config.t_chunk / MB
