"""The per-branch radiance field: fused base/auxiliary spatial hash features
concatenated with temporal features, a density head and a view-conditioned
color head, plus the layout and fusion variants and the explicit
field-composition ablations.

All queries are batched over sample points and differentiable with respect to
every parameter block (tables and MLP weights); geometry inputs (positions,
times, directions) are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoders
from .encoders import EncoderConfig, EncoderTables, encode_cached, encoder_backward
from .errors import ConfigurationError, NumericalError
from .numerics import Mlp, sigmoid
from .stats import STATS

SIGMA_MAX = 1e4
_LOG_SIGMA_MAX = math.log(SIGMA_MAX)

FUSION_MODES = ("sum", "concat")
SPATIAL_LAYOUTS = ("voxel", "plane", "merf", "4d")
TEMPORAL_KINDS = ("hash", "freq", "mlp", "grid4d")

DIRECTION_DIM = 16  # real spherical harmonics, bands 0..3


def fuse_features(base_feat, aux_feat, mode):
    """Fuse base-branch and current-branch spatial features.

    sum: elementwise sum (equal widths required); concat: base then aux.
    """
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}")
    base_feat = np.asarray(base_feat)
    aux_feat = np.asarray(aux_feat)
    if mode == "sum":
        if base_feat.shape != aux_feat.shape:
            raise ConfigurationError(
                f"sum fusion needs equal widths, got {base_feat.shape} and {aux_feat.shape}")
        return base_feat + aux_feat
    return np.concatenate([base_feat, aux_feat], axis=-1)


def encode_direction(d):
    """Real spherical-harmonics basis up to band 3 (16 values, fixed order).

    Non-unit inputs are normalized and counted in STATS.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    if d.shape[-1] != 3:
        raise ConfigurationError(f"directions must be 3-vectors, got shape {d.shape}")
    norms = np.linalg.norm(d, axis=-1)
    bad = np.abs(norms - 1.0) > 1e-6
    if bad.any():
        STATS["directions_normalized"] += int(bad.sum())
        d = d / np.maximum(norms, 1e-12)[:, None]
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((d.shape[0], 16), dtype=d.dtype)
    out[:, 0] = 0.28209479177387814
    out[:, 1] = -0.48860251190291987 * y
    out[:, 2] = 0.48860251190291987 * z
    out[:, 3] = -0.48860251190291987 * x
    out[:, 4] = 1.0925484305920792 * x * y
    out[:, 5] = -1.0925484305920792 * y * z
    out[:, 6] = 0.31539156525252005 * (3.0 * zz - 1.0)
    out[:, 7] = -1.0925484305920792 * x * z
    out[:, 8] = 0.5462742152960396 * (xx - yy)
    out[:, 9] = -0.5900435899266435 * y * (3.0 * xx - yy)
    out[:, 10] = 2.890611442640554 * x * y * z
    out[:, 11] = -0.4570457994644658 * y * (5.0 * zz - 1.0)
    out[:, 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[:, 13] = -0.4570457994644658 * x * (5.0 * zz - 1.0)
    out[:, 14] = 1.445305721320277 * z * (xx - yy)
    out[:, 15] = -0.5900435899266435 * x * (xx - 3.0 * yy)
    return out


def sigma_activation(raw):
    """exp density activation, clamped at SIGMA_MAX for stability."""
    if np.iscomplexobj(raw):
        return np.exp(raw)  # complex-step path; clamp is inactive near init
    return np.exp(np.minimum(raw, _LOG_SIGMA_MAX))


def sigma_activation_grad(raw, sigma):
    return np.where(raw < _LOG_SIGMA_MAX, sigma, 0.0)


def spatial_encoder_configs(layout, levels, features, log2_table_len, n_min, n_max):
    """Encoder configs per table set for a spatial layout.

    Relative to the pure-voxel table length 2**P: merf shrinks the voxel stack
    to 2**(P-3) and each plane to 2**(P-4); the plane layout uses 2**(P-2) per
    plane. The spacetime stack of the 3D+4D layout lives in the temporal
    encoder, so layout "4d" maps to a plain voxel spatial stack here.
    """
    if layout not in SPATIAL_LAYOUTS:
        raise ConfigurationError(f"unknown spatial layout {layout!r}")

    def cfg(dims, p):
        return EncoderConfig(dims=dims, levels=levels, features=features,
                             log2_table_len=p, n_min=n_min, n_max=n_max)

    if layout in ("voxel", "4d"):
        return {"voxel": cfg(3, log2_table_len)}
    if layout == "plane":
        return {name: cfg(2, log2_table_len - 2) for name in ("xy", "yz", "zx")}
    return {"voxel": cfg(3, log2_table_len - 3),
            **{name: cfg(2, log2_table_len - 4) for name in ("xy", "yz", "zx")}}


class SpatialTables:
    """Bundle of encoder table stacks realizing one spatial layout.

    voxel: one 3-D stack. plane: three 2-D stacks (xy, yz, zx), per-level
    summed. merf: a 3-D stack plus the three planes, all summed per level.
    The output width is levels*features for every layout.
    """

    PLANE_AXES = {"xy": (0, 1), "yz": (1, 2), "zx": (2, 0)}

    def __init__(self, layout, sets):
        if layout not in ("voxel", "plane", "merf"):
            raise ConfigurationError(f"unknown spatial layout {layout!r}")
        self.layout = layout
        self.sets = sets  # dict name -> EncoderTables

    @classmethod
    def create(cls, layout, levels, features, log2_table_len, n_min, n_max, rng,
               dtype=np.float32):
        configs = spatial_encoder_configs(layout, levels, features,
                                          log2_table_len, n_min, n_max)
        sets = {name: EncoderTables.create(cfg, rng, dtype)
                for name, cfg in configs.items()}
        layout = "voxel" if layout == "4d" else layout
        return cls(layout, sets)

    @property
    def out_dim(self):
        return next(iter(self.sets.values())).config.out_dim

    def n_params(self):
        return sum(t.n_params() for t in self.sets.values())

    def copy(self):
        return SpatialTables(self.layout, {k: t.copy() for k, t in self.sets.items()})

    def astype(self, dtype):
        return SpatialTables(self.layout, {k: t.astype(dtype) for k, t in self.sets.items()})

    def named_arrays(self, prefix=""):
        out = {}
        for name, tab in self.sets.items():
            out.update(tab.named_arrays(f"{prefix}{name}/"))
        return out

    def _set_points(self, name, x):
        if name == "voxel":
            return x
        return x[:, self.PLANE_AXES[name]]

    def encode_cached(self, x):
        feat = None
        caches = {}
        for name, tab in self.sets.items():
            f, c = encode_cached(tab, self._set_points(name, x))
            caches[name] = c
            feat = f if feat is None else feat + f
        return feat, caches

    def backward(self, x, caches, grad_feat):
        """Per-level sums distribute the feature gradient unchanged to each set."""
        return {name: encoder_backward(tab, None, grad_feat, cache=caches[name])
                for name, tab in self.sets.items()}


class TemporalEncoder:
    """Per-branch temporal feature: 1-D hash tables (default), sinusoidal
    frequencies, a frequency+linear time MLP, or a 4-D spacetime hash stack."""

    def __init__(self, kind, tables=None, mlp=None, n_freq=8):
        if kind not in TEMPORAL_KINDS:
            raise ConfigurationError(f"unknown temporal kind {kind!r}")
        self.kind = kind
        self.tables = tables
        self.mlp = mlp
        self.n_freq = n_freq

    @classmethod
    def create(cls, kind, rng, dtype=np.float32, *, levels=2, features=20,
               log2_table_len=7, n_min=2, n_max=10, n_freq=8, mlp_width=64):
        if kind in ("hash", "grid4d"):
            dims = 1 if kind == "hash" else 4
            cfg = EncoderConfig(dims, levels, features, log2_table_len, n_min, n_max)
            return cls(kind, tables=EncoderTables.create(cfg, rng, dtype))
        if kind == "freq":
            return cls(kind, n_freq=n_freq)
        if kind == "mlp":
            mlp = Mlp.create([2 * n_freq, mlp_width], rng, dtype)
            return cls(kind, mlp=mlp, n_freq=n_freq)
        raise ConfigurationError(f"unknown temporal kind {kind!r}")

    @property
    def out_dim(self):
        if self.kind in ("hash", "grid4d"):
            return self.tables.config.out_dim
        if self.kind == "freq":
            return 2 * self.n_freq
        return self.mlp.out_dim

    def n_params(self):
        if self.kind in ("hash", "grid4d"):
            return self.tables.n_params()
        if self.kind == "mlp":
            return self.mlp.n_params()
        return 0

    def copy(self):
        return TemporalEncoder(self.kind,
                               tables=self.tables.copy() if self.tables else None,
                               mlp=self.mlp.copy() if self.mlp else None,
                               n_freq=self.n_freq)

    def astype(self, dtype):
        return TemporalEncoder(self.kind,
                               tables=self.tables.astype(dtype) if self.tables else None,
                               mlp=self.mlp.astype(dtype) if self.mlp else None,
                               n_freq=self.n_freq)

    def named_arrays(self, prefix=""):
        if self.kind in ("hash", "grid4d"):
            return self.tables.named_arrays(prefix)
        if self.kind == "mlp":
            return self.mlp.named_arrays(prefix)
        return {}

    def _fourier(self, t):
        # 8-frequency sinusoidal features of normalized time.
        freqs = (2.0 ** np.arange(self.n_freq)) * np.pi
        ang = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward_cached(self, t, x=None):
        t = np.asarray(t).reshape(-1)
        if self.kind == "hash":
            return encode_cached(self.tables, t.reshape(-1, 1))
        if self.kind == "grid4d":
            pts = np.concatenate([x, t[:, None].astype(x.dtype)], axis=1)
            return encode_cached(self.tables, pts)
        if self.kind == "freq":
            return self._fourier(t), None
        feats = self._fourier(t)
        out, cache = self.mlp.forward(feats)
        return out, (feats, cache)

    def backward(self, t, cache, grad_feat):
        """Returns a dict of gradient arrays matching named_arrays keys, or {}."""
        if self.kind in ("hash", "grid4d"):
            grads = encoder_backward(self.tables, None, grad_feat, cache=cache)
            return {f"level{i:02d}": g for i, g in enumerate(grads)}
        if self.kind == "mlp":
            _, mlp_cache = cache
            (dws, dbs), _ = self.mlp.backward(mlp_cache, grad_feat)
            out = {}
            for i, (dw, db) in enumerate(zip(dws, dbs)):
                out[f"W{i}"] = dw
                out[f"b{i}"] = db
            return out
        return {}


@dataclass
class Branch:
    """One continual-learning branch: auxiliary spatial tables, temporal
    encoder, and the two MLP heads. Branch 0 owns no auxiliary tables (it
    trains the base spatial stack directly)."""

    index: int
    aux_spatial: SpatialTables | None
    temporal: TemporalEncoder
    theta1: Mlp
    theta2: Mlp
    frame_start: int = 0
    frame_stop: int = 0
    eta: int = 0
    fusion: str = "sum"

    @property
    def latent_dim(self):
        return self.theta1.out_dim - 1

    def n_params(self):
        n = self.theta1.n_params() + self.theta2.n_params() + self.temporal.n_params()
        if self.aux_spatial is not None:
            n += self.aux_spatial.n_params()
        return n

    def named_arrays(self, prefix=""):
        out = {}
        if self.aux_spatial is not None:
            out.update(self.aux_spatial.named_arrays(f"{prefix}aux/"))
        out.update(self.temporal.named_arrays(f"{prefix}temporal/"))
        out.update(self.theta1.named_arrays(f"{prefix}theta1/"))
        out.update(self.theta2.named_arrays(f"{prefix}theta2/"))
        return out

    def normalize_time(self, frame):
        """Map absolute frame indices to the branch-local [0, 1] timeline."""
        span = max(self.frame_stop - self.frame_start - 1, 1)
        return (np.asarray(frame, dtype=np.float64) - self.frame_start) / span


@dataclass
class FieldCache:
    x: np.ndarray
    fusion: str
    base_feat: np.ndarray
    base_caches: dict
    aux_feat: np.ndarray | None
    aux_caches: dict | None
    tfeat: np.ndarray | None
    temporal_cache: object
    t: np.ndarray | None
    mlp1_cache: list
    sigma_raw: np.ndarray
    sigma: np.ndarray
    latent: np.ndarray
    mlp2_cache: list | None
    rgb_raw: np.ndarray | None
    rgb: np.ndarray | None


@dataclass
class FieldGrads:
    base: dict | None      # set name -> list of per-level arrays
    aux: dict | None
    temporal: dict         # array name -> gradient
    theta1: tuple          # (dweights, dbiases)
    theta2: tuple | None


def _fused_and_split(base_feat, aux_feat, fusion):
    if aux_feat is None:
        if fusion == "sum":
            return base_feat
        zeros = np.zeros_like(base_feat)
        return np.concatenate([base_feat, zeros], axis=-1)
    return fuse_features(base_feat, aux_feat, fusion)


def field_forward(base_spatial, branch, x, t, d=None, *, sigma_only=False,
                  temporal_off=False, check=False):
    """Full field evaluation. Returns (sigma, rgb, latent, cache); rgb and the
    color-side cache entries are None when sigma_only.

    `t` is branch-local normalized time (scalar or per-point).
    """
    x = np.atleast_2d(np.asarray(x))
    n = x.shape[0]
    base_feat, base_caches = base_spatial.encode_cached(x)
    if branch.aux_spatial is not None:
        aux_feat, aux_caches = branch.aux_spatial.encode_cached(x)
    else:
        aux_feat, aux_caches = None, None
    fused = _fused_and_split(base_feat, aux_feat, branch.fusion)
    t_arr = None
    if temporal_off:
        tfeat = np.zeros((n, branch.temporal.out_dim), dtype=fused.dtype)
        tcache = None
    else:
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        tfeat, tcache = branch.temporal.forward_cached(t_arr, x)
    mlp1_in = np.concatenate([fused, tfeat], axis=1)
    y1, mlp1_cache = branch.theta1.forward(mlp1_in, check=check)
    sigma_raw = y1[:, 0]
    latent = y1[:, 1:]
    sigma = sigma_activation(sigma_raw)
    if not np.iscomplexobj(sigma) and not np.isfinite(sigma).all():
        raise NumericalError("non-finite output at the density head")
    if sigma_only:
        cache = FieldCache(x, branch.fusion, base_feat, base_caches, aux_feat,
                           aux_caches, tfeat, tcache, t_arr, mlp1_cache,
                           sigma_raw, sigma, latent, None, None, None)
        return sigma, None, latent, cache
    dir_feat = encode_direction(d).astype(latent.dtype, copy=False)
    mlp2_in = np.concatenate([latent, dir_feat], axis=1)
    y2, mlp2_cache = branch.theta2.forward(mlp2_in, check=check)
    rgb = sigmoid(y2)
    if not np.iscomplexobj(rgb) and not np.isfinite(rgb).all():
        raise NumericalError("non-finite output at the color head")
    cache = FieldCache(x, branch.fusion, base_feat, base_caches, aux_feat,
                       aux_caches, tfeat, tcache, t_arr, mlp1_cache,
                       sigma_raw, sigma, latent, mlp2_cache, y2, rgb)
    return sigma, rgb, latent, cache


def field_backward(base_spatial, branch, cache, dsigma, drgb=None,
                   daux_feat_extra=None, *, need_base=True):
    """Reverse-mode gradients for every parameter block of the field.

    `daux_feat_extra` injects an additional gradient on the auxiliary spatial
    features (the L1 regularizer path). Base-table gradients are skipped when
    `need_base` is False (frozen base).
    """
    if drgb is not None:
        rgb = cache.rgb
        dy2 = drgb * rgb * (1.0 - rgb)
        theta2_grads, dmlp2_in = branch.theta2.backward(cache.mlp2_cache, dy2)
        dlatent = dmlp2_in[:, :branch.latent_dim]
    else:
        theta2_grads = None
        dlatent = np.zeros_like(cache.latent)
    dsigma_raw = dsigma * sigma_activation_grad(cache.sigma_raw, cache.sigma)
    dy1 = np.concatenate([dsigma_raw[:, None], dlatent], axis=1)
    theta1_grads, dmlp1_in = branch.theta1.backward(cache.mlp1_cache, dy1)
    width = cache.base_feat.shape[1]
    fused_width = width * (2 if branch.fusion == "concat" else 1)
    dfused = dmlp1_in[:, :fused_width]
    dtfeat = dmlp1_in[:, fused_width:]
    if cache.temporal_cache is not None or branch.temporal.kind == "freq":
        temporal_grads = branch.temporal.backward(cache.t, cache.temporal_cache, dtfeat)
    else:
        temporal_grads = {}
    if branch.fusion == "sum":
        dbase_feat = dfused
        daux_feat = dfused if cache.aux_feat is not None else None
    else:
        dbase_feat = dfused[:, :width]
        daux_feat = dfused[:, width:] if cache.aux_feat is not None else None
    aux_grads = None
    if cache.aux_feat is not None:
        if daux_feat_extra is not None:
            daux_feat = daux_feat + daux_feat_extra
        aux_grads = branch.aux_spatial.backward(cache.x, cache.aux_caches, daux_feat)
    elif daux_feat_extra is not None and need_base:
        # Branch 0 trains the base stack; the regularizer path (if any) lands there.
        dbase_feat = dbase_feat + daux_feat_extra
    base_grads = base_spatial.backward(cache.x, cache.base_caches, dbase_feat) \
        if need_base else None
    return FieldGrads(base_grads, aux_grads, temporal_grads, theta1_grads, theta2_grads)


def query_field(base_spatial, branch, x, t, d, *, temporal_off=False):
    """(sigma, rgb, latent) at normalized positions/time/directions; deterministic."""
    sigma, rgb, latent, _ = field_forward(base_spatial, branch, x, t, d,
                                          temporal_off=temporal_off, check=True)
    return sigma, rgb, latent


def field_sigma(base_spatial, branch, x, t):
    """Density-only fast path (occupancy maintenance)."""
    sigma, _, _, _ = field_forward(base_spatial, branch, x, t, sigma_only=True)
    return sigma


def compose_fields(field_a, field_b, x, t, d):
    """Explicit composition of two fields: summed densities, summed colors
    clamped to [0, 1]. Each field maps (x, t, d) -> (sigma, rgb)."""
    sigma_a, rgb_a = field_a(x, t, d)
    sigma_b, rgb_b = field_b(x, t, d)
    return sigma_a + sigma_b, np.clip(rgb_a + rgb_b, 0.0, 1.0)
