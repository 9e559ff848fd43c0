"""Multiresolution hash encoders for 1-D (time), 2-D (planes), 3-D (voxels) and
4-D (spacetime) coordinates, with multilinear interpolation and an exact
scatter-add adjoint.

Levels run coarse to fine on a geometric resolution schedule. A level with at
most 2**log2_table_len vertices stores them densely (row-major, no hashing);
finer levels hash vertex coordinates into a fixed-length table with the usual
XOR-of-primes scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .stats import STATS

# Per-axis hash primes; the leading 1 leaves the fastest axis unmixed.
HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)

TABLE_INIT_SCALE = 1e-4


@dataclass(frozen=True)
class EncoderConfig:
    """Layout of one multiresolution table stack."""

    dims: int
    levels: int
    features: int
    log2_table_len: int
    n_min: int
    n_max: int

    def __post_init__(self):
        if self.dims not in (1, 2, 3, 4):
            raise ConfigurationError(f"dims must be 1..4, got {self.dims}")
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.features < 1:
            raise ConfigurationError("features must be >= 1")
        if not 4 <= self.log2_table_len <= 24:
            raise ConfigurationError(
                f"log2_table_len must be in [4, 24], got {self.log2_table_len}")
        if self.n_min > self.n_max:
            raise ConfigurationError("n_min must not exceed n_max")
        if self.n_min != self.n_max and self.levels < 2:
            raise ConfigurationError("levels must be >= 2 when n_min != n_max")

    @property
    def table_len(self):
        return 1 << self.log2_table_len

    @property
    def out_dim(self):
        return self.levels * self.features


def level_resolutions(config):
    """Geometric resolution schedule N_l = floor(n_min * b**l) with exact endpoints."""
    L = config.levels
    if L == 1 or config.n_min == config.n_max:
        return np.full(L, config.n_min, dtype=np.int64)
    b = np.exp((np.log(config.n_max) - np.log(config.n_min)) / (L - 1))
    res = np.floor(config.n_min * b ** np.arange(L)).astype(np.int64)
    res[0] = config.n_min
    res[-1] = config.n_max
    return res


def level_entry_counts(config):
    """Rows per level: min((N_l + 1)**dims, 2**log2_table_len)."""
    cap = config.table_len
    return [min((int(n) + 1) ** config.dims, cap) for n in level_resolutions(config)]


def hash_index(grid_coords, resolution, log2_table_len, dims):
    """Map integer vertex coordinates to table rows.

    Dense row-major indexing (stride N+1 per axis, first axis fastest) when the
    level fits the table; XOR-of-primes hashing modulo 2**log2_table_len
    otherwise. Coordinates must lie in [0, resolution] componentwise.
    """
    coords = np.asarray(grid_coords)
    if coords.ndim == 1:
        coords = coords[None, :]
    if coords.shape[-1] != dims:
        raise ConfigurationError(f"expected {dims} coordinates, got {coords.shape[-1]}")
    if coords.min() < 0 or coords.max() > resolution:
        raise ContractViolation(
            f"grid coordinates outside [0, {resolution}]")
    n_vertices = (int(resolution) + 1) ** dims
    if n_vertices <= (1 << log2_table_len):
        return _dense_index(coords, resolution)
    return _hashed_index(coords, log2_table_len, dims)


def _dense_index(coords, resolution):
    stride = 1
    idx = np.zeros(coords.shape[:-1], dtype=np.int64)
    for axis in range(coords.shape[-1]):
        idx += coords[..., axis].astype(np.int64) * stride
        stride *= int(resolution) + 1
    return idx


def _hashed_index(coords, log2_table_len, dims):
    acc = coords[..., 0].astype(np.uint32) * np.uint32(HASH_PRIMES[0])
    for axis in range(1, dims):
        acc = acc ^ (coords[..., axis].astype(np.uint32) * np.uint32(HASH_PRIMES[axis]))
    mask = np.uint32((1 << log2_table_len) - 1)
    return (acc & mask).astype(np.int64)


def _corner_offsets(dims):
    # [2**dims, dims] binary corner pattern, axis 0 fastest.
    c = 1 << dims
    offs = np.zeros((c, dims), dtype=np.int64)
    for j in range(c):
        for axis in range(dims):
            offs[j, axis] = (j >> axis) & 1
    return offs


_OFFSETS = {d: _corner_offsets(d) for d in (1, 2, 3, 4)}


@dataclass
class EncoderTables:
    """Per-level parameter tables for one encoder."""

    config: EncoderConfig
    levels: list  # each [entries, features]

    @classmethod
    def create(cls, config, rng, dtype=np.float32, init_scale=TABLE_INIT_SCALE):
        """Uniform init in [-init_scale, init_scale]; small enough not to bias sigma."""
        levels = [
            rng.uniform(-init_scale, init_scale, size=(n, config.features)).astype(dtype)
            for n in level_entry_counts(config)
        ]
        return cls(config, levels)

    @classmethod
    def zeros(cls, config, dtype=np.float32):
        return cls(config, [np.zeros((n, config.features), dtype=dtype)
                            for n in level_entry_counts(config)])

    def n_params(self):
        return sum(t.size for t in self.levels)

    def copy(self):
        return EncoderTables(self.config, [t.copy() for t in self.levels])

    def astype(self, dtype):
        return EncoderTables(self.config, [t.astype(dtype) for t in self.levels])

    def named_arrays(self, prefix=""):
        return {f"{prefix}level{i:02d}": t for i, t in enumerate(self.levels)}


def _clamp_points(points, dims):
    points = np.asarray(points)
    if points.ndim == 1:
        points = points[:, None] if dims == 1 else points[None, :]
    if points.shape[-1] != dims:
        raise ConfigurationError(f"expected {dims}-D points, got shape {points.shape}")
    lo, hi = points.min(initial=0.0), points.max(initial=1.0)
    if lo < 0.0 or hi > 1.0:
        STATS["encoder_points_clamped"] += int(((points < 0) | (points > 1)).any(axis=-1).sum())
        points = np.clip(points, 0.0, 1.0)
    return points


def _level_corners(points, resolution, config):
    """Corner table indices and interpolation weights for one level.

    Returns (idx [n, 2**dims], w [n, 2**dims]); weights are non-negative and
    sum to 1 per point.
    """
    dims = config.dims
    offs = _OFFSETS[dims]
    x = points * resolution
    c0 = np.floor(x).astype(np.int64)
    np.clip(c0, 0, max(int(resolution) - 1, 0), out=c0)
    frac = x - c0
    corners = c0[:, None, :] + offs[None, :, :]
    n_vertices = (int(resolution) + 1) ** dims
    if n_vertices <= config.table_len:
        idx = _dense_index(corners, resolution)
    else:
        idx = _hashed_index(corners, config.log2_table_len, dims)
    # Multilinear weights: prod over axes of frac (offset=1) or 1-frac (offset=0).
    w = np.ones(corners.shape[:2], dtype=frac.dtype)
    for axis in range(dims):
        fa = frac[:, None, axis]
        w = w * np.where(offs[None, :, axis] == 1, fa, 1.0 - fa)
    return idx, w


def encode_cached(tables, points):
    """Multiresolution encode with a reusable interpolation cache.

    Returns (features [n, L*F], cache); cache holds (idx, w) per level.
    """
    config = tables.config
    points = _clamp_points(points, config.dims)
    res = level_resolutions(config)
    feats = []
    cache = []
    for l in range(config.levels):
        idx, w = _level_corners(points, res[l], config)
        gathered = tables.levels[l][idx]                   # [n, C, F]
        feats.append(np.einsum("ncf,nc->nf", gathered, w))
        cache.append((idx, w))
    return np.concatenate(feats, axis=1), cache


def encode(tables, points):
    """Concatenated coarse-to-fine multilinear features at normalized points."""
    return encode_cached(tables, points)[0]


def encoder_backward(tables, points, grad_features, cache=None):
    """Exact adjoint of `encode`: scatter-add interpolation-weighted gradients.

    Returns one dense gradient array per level. Accumulation uses bincount per
    feature channel, which is a deterministic sequential reduction.
    """
    config = tables.config
    F = config.features
    grad_features = np.asarray(grad_features)
    if grad_features.ndim == 1:
        grad_features = grad_features[None, :]
    if grad_features.shape[-1] != config.out_dim:
        raise ConfigurationError(
            f"grad width {grad_features.shape[-1]} != L*F = {config.out_dim}")
    if cache is None:
        points = _clamp_points(points, config.dims)
        res = level_resolutions(config)
        cache = [_level_corners(points, res[l], config) for l in range(config.levels)]
    grads = []
    for l, (idx, w) in enumerate(cache):
        g = grad_features[:, l * F:(l + 1) * F]            # [n, F]
        contrib = w[:, :, None] * g[:, None, :]            # [n, C, F]
        flat_idx = idx.reshape(-1)
        flat = contrib.reshape(-1, F)
        entries = tables.levels[l].shape[0]
        out = np.empty((entries, F), dtype=tables.levels[l].dtype)
        for f in range(F):
            out[:, f] = np.bincount(flat_idx, weights=flat[:, f], minlength=entries)
        grads.append(out)
    return grads


def encode_plane(tables_xy, tables_yz, tables_zx, points3d):
    """Per-level sum of three axis-aligned bilinear plane features."""
    points3d = np.atleast_2d(np.asarray(points3d))
    return (encode(tables_xy, points3d[:, (0, 1)])
            + encode(tables_yz, points3d[:, (1, 2)])
            + encode(tables_zx, points3d[:, (2, 0)]))


def encode_merf(voxel_tables, plane_tables, points3d):
    """Hybrid voxel + tri-plane features: per-level sum of the 3-D term and the
    three 2-D plane terms, levels concatenated."""
    xy, yz, zx = plane_tables
    return encode(voxel_tables, points3d) + encode_plane(xy, yz, zx, points3d)


def encode_temporal(tables, t):
    """1-D multiresolution encode of normalized time."""
    t = np.asarray(t)
    return encode(tables, t.reshape(-1, 1))


def encode_4d(tables, points3d, t):
    """4-D spacetime encode (16-corner interpolation per level)."""
    points3d = np.atleast_2d(np.asarray(points3d))
    t = np.asarray(t).reshape(-1, 1)
    if t.shape[0] == 1 and points3d.shape[0] > 1:
        t = np.broadcast_to(t, (points3d.shape[0], 1))
    return encode(tables, np.concatenate([points3d, t], axis=1))
