"""Chunk-by-chunk continual training: schedules and episodes, branch lifecycle
(fresh init at episode starts, warm start otherwise), asymmetric hash sizing,
importance-sampled ray batches, the training loop, and parameter-isolation
enforcement (completed branches are frozen read-only).

Only the frames of the current chunk are ever decoded; the dataset's residency
counter is asserted against the chunk length after every chunk.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import accounting, losses, numerics, renderer
from .errors import (ConfigurationError, ContractViolation, NumericalError,
                     OutOfRangeError)
from .field import (Branch, SpatialTables, TemporalEncoder, field_backward,
                    field_forward, field_sigma, spatial_encoder_configs)
from .losses import LossWeights
from .numerics import AdamState, adam_step, cosine_lr
from .renderer import OccupancyGrid, march_rays, volume_render, volume_render_backward


@dataclass(frozen=True)
class ChunkSpec:
    index: int
    start: int
    stop: int
    episode_start: bool
    eta: int

    @property
    def n_frames(self):
        return self.stop - self.start


@dataclass
class ChunkSchedule:
    n_frames: int
    t_chunk: int
    t_episode: int
    eta_init: int
    eta_aux: int
    chunks: list

    @property
    def n_chunks(self):
        return len(self.chunks)

    def branch_for_frame(self, frame):
        if not 0 <= frame < self.n_frames:
            raise OutOfRangeError(
                f"frame {frame} outside trained range [0, {self.n_frames})")
        return min(int(frame) // self.t_chunk, self.n_chunks - 1)

    def to_json(self):
        return {"n_frames": self.n_frames, "t_chunk": self.t_chunk,
                "t_episode": self.t_episode, "eta_init": self.eta_init,
                "eta_aux": self.eta_aux}

    @classmethod
    def from_json(cls, d):
        return plan_chunks(d["n_frames"], d["t_chunk"], d["t_episode"],
                           d["eta_init"], d["eta_aux"])


def plan_chunks(n_frames, t_chunk, t_episode, eta_init, eta_aux):
    """Partition frames into even chunks (the last may be short); chunk k
    starts an episode when k % t_episode == 0."""
    if t_chunk < 1 or t_episode < 1:
        raise ConfigurationError("t_chunk and t_episode must be >= 1")
    if n_frames < 1:
        raise ConfigurationError("need at least one frame")
    if t_chunk > n_frames:
        warnings.warn(f"t_chunk={t_chunk} exceeds {n_frames} frames; "
                      "training one offline chunk")
    chunks = []
    k = 0
    for start in range(0, n_frames, t_chunk):
        episode = (k % t_episode == 0)
        chunks.append(ChunkSpec(k, start, min(start + t_chunk, n_frames),
                                episode, eta_init if episode else eta_aux))
        k += 1
    return ChunkSchedule(n_frames, t_chunk, t_episode, eta_init, eta_aux, chunks)


_LAYOUT_DEFAULTS = {
    "voxel": {},
    "plane": {"levels": 6, "features": 4, "n_min": 64},
    "merf": {},
    "4d": {"p1": 14, "p2": 14},
}


@dataclass
class TrainConfig:
    """Full training configuration; flat and JSON-serializable."""

    layout: str = "voxel"          # voxel | plane | merf | 4d
    fusion: str = "sum"            # sum | concat
    p1: int = 19                   # log2 base-branch table length
    p2: int = 14                   # log2 auxiliary-branch table length
    levels: int = 12
    features: int = 2
    n_min: int = 16
    n_max: int = 2048
    temporal_kind: str = "hash"    # hash | freq | mlp (4d layout overrides)
    temporal_levels: int = 2
    temporal_features: int = 20
    temporal_p: int = 7
    temporal_n_min: int = 2
    temporal_n_max: int = 0        # 0 -> t_chunk
    temporal_n_freq: int = 8
    temporal_mlp_width: int = 64
    hidden_sigma: int = 128
    hidden_color: int = 64
    latent_dim: int = 48
    sigma_bias_init: float = -2.5
    t_chunk: int = 10
    t_episode: int = 30
    eta_init: int = 18000
    eta_aux: int = 3000
    batch_rays: int = 1024
    lr: float = 1e-3
    lambda_dist: float = 0.005
    lambda_opacity: float = 0.005
    lambda_spatial: float = 0.001
    occ_resolution: int = 128
    occ_decay: float = 0.95
    occ_threshold: float = 0.01
    occ_update_every: int = 16
    occ_warmup_steps: int = 256
    march_step_divisor: int = 1024
    render_step_divisor: int = 1024
    sampling_floor: float = 0.05
    white_background: bool = False
    snapshot_grids: bool = False
    max_samples_per_pass: int = 1 << 20
    seed: int = 0

    def __post_init__(self):
        if self.p1 < self.p2:
            raise ConfigurationError("p1 must be >= p2 (asymmetric hash sizes)")
        # Constructing the encoder configs validates layout and table params.
        spatial_encoder_configs(self.layout, self.levels, self.features,
                                self.p2, self.n_min, self.n_max)
        if self.fusion not in ("sum", "concat"):
            raise ConfigurationError(f"unknown fusion mode {self.fusion!r}")
        if self.temporal_kind not in ("hash", "freq", "mlp"):
            raise ConfigurationError(f"unknown temporal kind {self.temporal_kind!r}")

    @classmethod
    def for_layout(cls, layout, **overrides):
        """Layout-specific structural defaults, then explicit overrides."""
        kw = dict(_LAYOUT_DEFAULTS.get(layout, {}))
        kw.update(overrides)
        return cls(layout=layout, **kw)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_dist, self.lambda_opacity, self.lambda_spatial)

    @property
    def effective_temporal_n_max(self):
        return self.temporal_n_max if self.temporal_n_max > 0 else max(self.t_chunk, 2)

    @property
    def spatial_width(self):
        return self.levels * self.features

    @property
    def fused_width(self):
        return self.spatial_width * (2 if self.fusion == "concat" else 1)

    @property
    def temporal_width(self):
        if self.layout == "4d":
            return self.spatial_width
        if self.temporal_kind == "hash":
            return self.temporal_levels * self.temporal_features
        if self.temporal_kind == "freq":
            return 2 * self.temporal_n_freq
        return self.temporal_mlp_width

    def theta1_sizes(self):
        return [self.fused_width + self.temporal_width,
                self.hidden_sigma, self.hidden_sigma, 1 + self.latent_dim]

    def theta2_sizes(self):
        return [self.latent_dim + 16, self.hidden_color, self.hidden_color, 3]

    def _spatial_param_count(self, p):
        configs = spatial_encoder_configs(self.layout, self.levels, self.features,
                                          p, self.n_min, self.n_max)
        return sum(accounting.param_count(c) for c in configs.values())

    def base_spatial_param_count(self):
        return self._spatial_param_count(self.p1)

    def aux_spatial_param_count(self):
        return self._spatial_param_count(self.p2)

    def temporal_param_count(self, base=False):
        if self.layout == "4d":
            from .encoders import EncoderConfig
            cfg = EncoderConfig(4, self.levels, self.features,
                                self.p1 if base else self.p2, self.n_min, self.n_max)
            return accounting.param_count(cfg)
        if self.temporal_kind == "hash":
            from .encoders import EncoderConfig
            cfg = EncoderConfig(1, self.temporal_levels, self.temporal_features,
                                self.temporal_p, self.temporal_n_min,
                                self.effective_temporal_n_max)
            return accounting.param_count(cfg)
        if self.temporal_kind == "mlp":
            return accounting.mlp_param_count([2 * self.temporal_n_freq,
                                               self.temporal_mlp_width])
        return 0

    def mlp_param_count(self):
        return accounting.mlp_param_count(self.theta1_sizes()) \
            + accounting.mlp_param_count(self.theta2_sizes())


def build_base_spatial(config, rng, dtype=np.float32):
    return SpatialTables.create(config.layout, config.levels, config.features,
                                config.p1, config.n_min, config.n_max, rng, dtype)


def _build_temporal(config, k, rng, dtype=np.float32):
    if config.layout == "4d":
        return TemporalEncoder.create(
            "grid4d", rng, dtype, levels=config.levels, features=config.features,
            log2_table_len=config.p1 if k == 0 else config.p2,
            n_min=config.n_min, n_max=config.n_max)
    return TemporalEncoder.create(
        config.temporal_kind, rng, dtype,
        levels=config.temporal_levels, features=config.temporal_features,
        log2_table_len=config.temporal_p, n_min=config.temporal_n_min,
        n_max=config.effective_temporal_n_max, n_freq=config.temporal_n_freq,
        mlp_width=config.temporal_mlp_width)


def _fresh_heads(config, k, rng, dtype=np.float32):
    theta1 = numerics.Mlp.create(config.theta1_sizes(), rng, dtype)
    theta2 = numerics.Mlp.create(config.theta2_sizes(), rng, dtype)
    # Bias the density head low so early marching carves free space quickly.
    theta1.biases[-1][0] = config.sigma_bias_init
    temporal = _build_temporal(config, k, rng, dtype)
    return temporal, theta1, theta2


def init_branch(k, schedule, previous, config, rng=None, *, force_fresh=False):
    """Branch lifecycle per the continual pipeline: auxiliary spatial tables
    are always freshly initialized (branch 0 owns none and trains the base
    stack); MLPs and temporal tables warm-start from the previous branch
    except at episode starts."""
    chunk = schedule.chunks[k]
    if rng is None:
        rng = np.random.default_rng([config.seed, 1000 + k])
    aux = None
    if k > 0:
        aux = SpatialTables.create(config.layout, config.levels, config.features,
                                   config.p2, config.n_min, config.n_max, rng)
    fresh = chunk.episode_start or force_fresh
    if fresh:
        temporal, theta1, theta2 = _fresh_heads(config, k, rng)
    else:
        if previous is None:
            raise ContractViolation(
                f"branch {k} warm-start requires the previous branch")
        temporal = previous.temporal.copy()
        theta1 = previous.theta1.copy()
        theta2 = previous.theta2.copy()
    eta = config.eta_init if fresh else config.eta_aux
    return Branch(index=k, aux_spatial=aux, temporal=temporal, theta1=theta1,
                  theta2=theta2, frame_start=chunk.start, frame_stop=chunk.stop,
                  eta=eta, fusion=config.fusion)


class RaySampler:
    """DyNeRF-style importance sampling over training-view pixels.

    Per-pixel weight = max(floor, max over chunk frames of the channel-max
    absolute difference to the per-view median image); rays are drawn with
    replacement proportionally to the weights, each paired with a uniformly
    random frame of the chunk.
    """

    def __init__(self, dataset, chunk, chunk_frames, median_images, floor=0.05):
        self.dataset = dataset
        self.chunk = chunk
        self.images = chunk_frames.images  # [T, V, H, W, 3] train views
        self.views = list(chunk_frames.views)
        diff = np.abs(self.images - median_images[None])
        w = diff.max(axis=(0, 4)) if diff.shape[0] else np.zeros(diff.shape[1:4])
        self.weights = np.maximum(w, floor)          # [V, H, W]
        self.cdf = np.cumsum(self.weights.reshape(-1))
        rays = [dataset.view_rays(v) for v in self.views]
        self.origins = np.stack([r.origins for r in rays])
        self.dirs = np.stack([r.dirs for r in rays])
        self.t_near = np.stack([r.t_near for r in rays])
        self.t_far = np.stack([r.t_far for r in rays])
        self.hw = self.weights.shape[1] * self.weights.shape[2]

    def sample(self, batch, rng):
        """Returns (RayBatch, absolute frame indices, target colors, view ids)."""
        if self.images.shape[0] == 0:
            raise ContractViolation("cannot sample rays from an empty chunk")
        u = rng.random(batch) * self.cdf[-1]
        flat = np.searchsorted(self.cdf, u, side="right")
        flat = np.minimum(flat, self.cdf.shape[0] - 1)
        v_idx, pix = np.divmod(flat, self.hw)
        frames_rel = rng.integers(0, self.images.shape[0], size=batch)
        W = self.weights.shape[2]
        py, px = np.divmod(pix, W)
        targets = self.images[frames_rel, v_idx, py, px]
        rays = renderer.RayBatch(self.origins[v_idx, pix], self.dirs[v_idx, pix],
                                 self.t_near[v_idx, pix], self.t_far[v_idx, pix])
        frames_abs = self.chunk.start + frames_rel
        view_ids = np.asarray(self.views)[v_idx]
        return rays, frames_abs, targets, view_ids


def importance_sample_rays(dataset, chunk, chunk_frames, median_images, batch,
                           rng, floor=0.05):
    """One importance-sampled ray batch (convenience wrapper over RaySampler)."""
    sampler = RaySampler(dataset, chunk, chunk_frames, median_images, floor)
    return sampler.sample(batch, rng)


class ModelRepo:
    """The unit of checkpointing: base spatial stack, ordered branches, the
    shared occupancy grid, and the chunk schedule."""

    def __init__(self, config, schedule, base_spatial, grid, aabb, seed,
                 median_images=None, train_views=None):
        self.config = config
        self.schedule = schedule
        self.base_spatial = base_spatial
        self.grid = grid
        self.aabb = np.asarray(aabb, dtype=np.float64)
        self.seed = seed
        self.branches = []
        self.grid_snapshots = {}
        self.median_images = median_images
        self.train_views = train_views
        self.provenance = {"seed": seed,
                           "importance_sampling":
                               "max-over-chunk channel-max |frame - view median|, "
                               "floor 0.05, frame uniform per ray",
                           "loss_reduction": "per-ray mean (spatial term per-sample mean)"}

    @property
    def n_trained(self):
        return sum(1 for b in self.branches if b is not None)

    def missing_branches(self):
        out = []
        for k, b in enumerate(self.branches):
            if b is None:
                c = self.schedule.chunks[k]
                out.append((k, c.start, c.stop))
        return out

    def named_arrays(self):
        """Every parameter array, keyed hierarchically (checkpoint layout)."""
        out = dict(self.base_spatial.named_arrays("base/"))
        for k, br in enumerate(self.branches):
            if br is not None:
                out.update(br.named_arrays(f"branch{k:04d}/"))
        return out

    def serialized_blocks(self):
        """Byte serialization per parameter block (bit-exact isolation probe)."""
        return {name: arr.tobytes() for name, arr in self.named_arrays().items()}

    def _normalize(self, points):
        extent = self.aabb[1] - self.aabb[0]
        return ((points - self.aabb[0]) / extent).astype(np.float32)

    def scene_diagonal(self):
        return float(np.linalg.norm(self.aabb[1] - self.aabb[0]))

    def branch_for_frame(self, frame):
        k = self.schedule.branch_for_frame(frame)
        if k >= len(self.branches):
            raise OutOfRangeError(f"frame {frame}: chunk {k} is not trained yet")
        if self.branches[k] is None:
            c = self.schedule.chunks[k]
            raise OutOfRangeError(
                f"chunk {k} (frames {c.start}..{c.stop - 1}) is unrenderable: "
                "branch files missing from the checkpoint")
        return self.branches[k]

    def field_fn(self, frame):
        """(positions, dirs) -> (sigma, rgb) bound to the branch owning `frame`."""
        branch = self.branch_for_frame(frame)
        t_local = float(branch.normalize_time(frame))

        def fn(positions, dirs):
            x = self._normalize(positions)
            sigma, rgb, _, _ = field_forward(self.base_spatial, branch, x,
                                             t_local, dirs)
            return sigma, rgb

        return fn

    def render_frame(self, camera, frame, *, use_snapshot=False, early_stop=True,
                     step_divisor=None, white_background=None):
        """Deterministic render of one frame through the branch that owns it."""
        branch = self.branch_for_frame(frame)
        bits = None
        if use_snapshot:
            if branch.index not in self.grid_snapshots:
                raise ConfigurationError(
                    f"no occupancy snapshot recorded for chunk {branch.index}")
            bits = self.grid_snapshots[branch.index]
        divisor = step_divisor or self.config.render_step_divisor
        wb = self.config.white_background if white_background is None else white_background
        return renderer.render_image(self.field_fn(frame), self.grid, camera,
                                     self.aabb, self.scene_diagonal() / divisor,
                                     early_stop=early_stop, bits=bits,
                                     white_background=wb)


def new_repo(dataset, config):
    """Plan the schedule and build the empty repo (base tables, shared grid)."""
    schedule = plan_chunks(dataset.n_frames, config.t_chunk, config.t_episode,
                           config.eta_init, config.eta_aux)
    rng = np.random.default_rng([config.seed, 7])
    base = build_base_spatial(config, rng)
    grid = OccupancyGrid.create(config.occ_resolution, dataset.aabb,
                                config.occ_decay, config.occ_threshold)
    medians = dataset.median_images(dataset.train_views,
                                    max_frames=config.t_chunk)
    return ModelRepo(config, schedule, base, grid, dataset.aabb, config.seed,
                     median_images=medians, train_views=dataset.train_views)


def _training_blocks(repo, branch):
    """name -> parameter array for every block trained with this branch."""
    params = {}
    if branch.index == 0:
        params.update(repo.base_spatial.named_arrays("base/"))
    params.update(branch.named_arrays(""))
    return params


def _gradient_map(field_grads, branch):
    grads = {}
    if field_grads.base is not None:
        for name, per_level in field_grads.base.items():
            for i, g in enumerate(per_level):
                grads[f"base/{name}/level{i:02d}"] = g
    if field_grads.aux is not None:
        for name, per_level in field_grads.aux.items():
            for i, g in enumerate(per_level):
                grads[f"aux/{name}/level{i:02d}"] = g
    for name, g in field_grads.temporal.items():
        grads[f"temporal/{name}"] = g
    for i, (dw, db) in enumerate(zip(*field_grads.theta1)):
        grads[f"theta1/W{i}"] = dw
        grads[f"theta1/b{i}"] = db
    if field_grads.theta2 is not None:
        for i, (dw, db) in enumerate(zip(*field_grads.theta2)):
            grads[f"theta2/W{i}"] = dw
            grads[f"theta2/b{i}"] = db
    return grads


def _loss_and_grads(repo, branch, rays, frames_abs, targets, rng, *, train=True):
    """One batch: march, query, composite, all four loss terms, and (when
    training) gradients for every trainable block."""
    config = repo.config
    weights = config.loss_weights
    step = repo.scene_diagonal() / config.march_step_divisor
    samples = march_rays(rays, repo.grid, step, rng=rng if train else None)
    n_rays = len(rays)
    targets = targets.astype(np.float32)
    bg = 1.0 if config.white_background else 0.0
    if samples.n_samples == 0:
        pred = np.full((n_rays, 3), bg, dtype=np.float32)
        photo = losses.photometric_loss(pred, targets)
        total = losses.total_loss(photo, 0.0, 0.0, 0.0, weights)
        return total, {"photometric": float(photo), "distortion": 0.0,
                       "opacity_entropy": 0.0, "spatial_l1": 0.0}, None, 0
    t_local = branch.normalize_time(frames_abs).astype(np.float32)
    x = repo._normalize(samples.positions)
    dirs = rays.dirs[samples.ray_ids].astype(np.float32)
    t_per_sample = t_local[samples.ray_ids]
    sigma, rgb, _, fcache = field_forward(repo.base_spatial, branch, x,
                                          t_per_sample, dirs)
    deltas = samples.deltas.astype(np.float32)
    s_lo = samples.s_lo.astype(np.float32)
    s_hi = samples.s_hi.astype(np.float32)
    out, rcache = volume_render(sigma, rgb, deltas, samples.ray_ids, n_rays,
                                s_lo, s_hi, return_cache=True)
    pred = out.color + out.trans_final[:, None] * bg
    photo = losses.photometric_loss(pred, targets)
    l_d, dw_dist = losses.distortion_loss_batch(out.weights, s_lo, s_hi,
                                                samples.ray_ids, n_rays)
    l_o, do = losses.opacity_entropy_batch(out.opacity)
    aux_feat = fcache.aux_feat
    l_r = losses.spatial_l1(aux_feat) if aux_feat is not None else 0.0
    total = losses.total_loss(photo, l_d, l_o, l_r, weights)
    parts = {"photometric": float(photo), "distortion": float(l_d),
             "opacity_entropy": float(l_o), "spatial_l1": float(l_r)}
    if not train:
        return total, parts, None, samples.n_samples
    dpred = losses.photometric_loss_grad(pred, targets)
    d_trans = dpred.sum(axis=1) * bg if bg else None
    dsigma, drgb = volume_render_backward(
        rcache, grad_color=dpred, grad_opacity=weights.lambda_o * do,
        grad_weights=weights.lambda_d * dw_dist, grad_trans_final=d_trans)
    daux_extra = None
    if aux_feat is not None and weights.lambda_r > 0:
        daux_extra = weights.lambda_r * losses.spatial_l1_grad(aux_feat)
    fg = field_backward(repo.base_spatial, branch, fcache, dsigma, drgb,
                        daux_feat_extra=daux_extra, need_base=branch.index == 0)
    return total, parts, _gradient_map(fg, branch), samples.n_samples


def train_branch(repo, k, dataset, *, log_rows=None, progress=None):
    """Train branch k for its assigned iterations on importance-sampled
    batches; freeze it (and the base stack after chunk 0) afterwards.

    Deterministic for a fixed seed and BLAS thread count. Returns metrics.
    """
    config = repo.config
    branch = repo.branches[k]
    if branch is None:
        raise ContractViolation(f"branch {k} has not been initialized")
    if k > 0:
        base_arr = next(iter(repo.base_spatial.named_arrays().values()))
        if base_arr.flags.writeable:
            raise ContractViolation("base stack must be frozen before auxiliary training")
    chunk = repo.schedule.chunks[k]
    rng = np.random.default_rng([config.seed, 2000 + k])
    chunk_frames = dataset.load_chunk(range(chunk.start, chunk.stop))
    try:
        sampler = RaySampler(dataset, chunk, chunk_frames, repo.median_images,
                             config.sampling_floor)
        params = _training_blocks(repo, branch)
        adam = {name: AdamState.zeros_like(arr) for name, arr in params.items()}
        first_loss = last_loss = None
        for step in range(branch.eta):
            lr = cosine_lr(step, branch.eta, config.lr)
            if step % config.occ_update_every == 0:
                t_occ = rng.random()
                warm = k == 0 and step < config.occ_warmup_steps

                def occ_sigma(pts):
                    return field_sigma(repo.base_spatial, branch,
                                       repo._normalize(pts), t_occ)

                renderer.update_occupancy(repo.grid, occ_sigma, rng,
                                          all_cells=warm)
            rays, frames_abs, targets, _ = sampler.sample(config.batch_rays, rng)
            total, parts, grads, _ = _loss_and_grads(repo, branch, rays,
                                                     frames_abs, targets, rng)
            if np.isnan(total):
                raise NumericalError(
                    f"training loss NaN at chunk {k} step {step}: {parts}")
            if first_loss is None:
                first_loss = float(total)
            last_loss = float(total)
            if grads is not None:
                for name, g in grads.items():
                    adam_step(adam[name], params[name], g, lr)
            if log_rows is not None:
                log_rows.append((k, step, lr, float(total), parts["photometric"],
                                 parts["distortion"], parts["opacity_entropy"],
                                 parts["spatial_l1"]))
            if progress is not None and step % 500 == 0:
                progress(k, step, branch.eta, float(total))
        # Fixed held-out-of-schedule batch: a comparable post-training loss.
        rng_eval = np.random.default_rng([config.seed, 4000 + k])
        rays, frames_abs, targets, _ = sampler.sample(config.batch_rays, rng_eval)
        eval_loss, eval_parts, _, _ = _loss_and_grads(repo, branch, rays,
                                                      frames_abs, targets,
                                                      rng_eval, train=False)
    finally:
        chunk_frames.close()
    if dataset.residency.peak > max(config.t_chunk, 1):
        raise ContractViolation(
            f"residency budget exceeded: peak {dataset.residency.peak} frames "
            f"resident, t_chunk={config.t_chunk}")
    _freeze_branch(repo, branch)
    if config.snapshot_grids:
        repo.grid_snapshots[k] = repo.grid.snapshot_bits()
    return {"chunk": k, "steps": branch.eta, "first_loss": first_loss,
            "last_loss": last_loss, "eval_loss": float(eval_loss),
            "eval_parts": eval_parts}


def _freeze_branch(repo, branch):
    for arr in branch.named_arrays().values():
        arr.flags.writeable = False
    if branch.index == 0:
        for arr in repo.base_spatial.named_arrays().values():
            arr.flags.writeable = False


def train_next_chunk(repo, dataset, *, log_rows=None, progress=None,
                     force_fresh=False):
    """Initialize and train the next unfinished chunk."""
    k = len(repo.branches)
    if k >= repo.schedule.n_chunks:
        raise ConfigurationError("all chunks are already trained")
    previous = repo.branches[k - 1] if k > 0 else None
    branch = init_branch(k, repo.schedule, previous, repo.config,
                         force_fresh=force_fresh)
    repo.branches.append(branch)
    return train_branch(repo, k, dataset, log_rows=log_rows, progress=progress)


def run_continual(dataset, config, *, out_dir=None, resume=False,
                  log_rows=None, progress=None):
    """The full continual pipeline: plan, then init + train chunk by chunk,
    holding at most t_chunk frames resident. Returns the complete ModelRepo.

    With out_dir set, an incremental checkpoint is written after every chunk;
    resume=True continues from the last complete chunk found there.
    """
    from . import checkpoint
    repo = None
    if resume and out_dir is not None:
        try:
            repo = checkpoint.load_checkpoint(out_dir)
        except Exception:
            repo = None
        if repo is not None:
            if repo.missing_branches():
                raise ConfigurationError(
                    "cannot resume: checkpoint has gaps "
                    f"{repo.missing_branches()}")
            repo.median_images = dataset.median_images(
                dataset.train_views, max_frames=repo.config.t_chunk)
            repo.train_views = dataset.train_views
    if repo is None:
        repo = new_repo(dataset, config)
    metrics = []
    while len(repo.branches) < repo.schedule.n_chunks:
        metrics.append(train_next_chunk(repo, dataset, log_rows=log_rows,
                                        progress=progress))
        if out_dir is not None:
            checkpoint.save_checkpoint(repo, out_dir)
    repo.provenance["chunk_metrics"] = metrics
    return repo
