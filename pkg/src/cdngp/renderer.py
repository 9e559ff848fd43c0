"""Ray generation, occupancy-grid-accelerated marching, volume rendering with
an exact backward pass, image rendering, and occupancy-grid maintenance.

Samples from a batch of rays are packed: flat arrays plus a sorted ray-id
vector. Segment reductions use bincount (a deterministic sequential sum), so
results are reproducible for any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .stats import STATS

TRANSMITTANCE_EPS = 1e-4  # marching/compositing stops below this remaining transmittance


def _segment_sum(values, ids, n):
    """Deterministic per-ray sum of a flat per-sample vector (complex-safe)."""
    if np.iscomplexobj(values):
        out = np.zeros(n, dtype=values.dtype)
        np.add.at(out, ids, values)
        return out
    return np.bincount(ids, weights=values, minlength=n)


@dataclass
class RayBatch:
    """Rays o + u*d with per-ray march bounds; directions are unit length."""

    origins: np.ndarray    # [n, 3]
    dirs: np.ndarray       # [n, 3]
    t_near: np.ndarray     # [n]
    t_far: np.ndarray      # [n]

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, sel):
        return RayBatch(self.origins[sel], self.dirs[sel],
                        self.t_near[sel], self.t_far[sel])


@dataclass
class PackedSamples:
    """Flat per-sample arrays for a ray batch, ray-major order."""

    positions: np.ndarray  # [S, 3] world coordinates
    deltas: np.ndarray     # [S] interval lengths
    s_lo: np.ndarray       # [S] normalized bin start in [0, 1]
    s_hi: np.ndarray       # [S] normalized bin end
    ray_ids: np.ndarray    # [S] int32, sorted ascending
    n_rays: int

    @property
    def n_samples(self):
        return self.positions.shape[0]


@dataclass
class RenderOutput:
    """Composited colors plus the per-sample quantities the losses need."""

    color: np.ndarray         # [R, 3]
    opacity: np.ndarray       # [R]
    weights: np.ndarray       # [S]
    trans_final: np.ndarray   # [R] transmittance left after the last sample
    s_mid: np.ndarray         # [S] normalized bin midpoints
    ray_ids: np.ndarray       # [S]
    n_rays: int
    sample_counts: np.ndarray  # [R]


@dataclass
class OccupancyGrid:
    """Coarse density cache with occupancy bits; one grid is shared by all
    branches. bit set <=> cached density > threshold."""

    resolution: int
    aabb: np.ndarray            # [2, 3] world-space bounds
    density: np.ndarray         # [res, res, res] cached densities
    bits: np.ndarray            # [res, res, res] bool
    decay: float = 0.95
    threshold: float = 0.01

    @classmethod
    def create(cls, resolution=128, aabb=None, decay=0.95, threshold=0.01,
               dtype=np.float32):
        if aabb is None:
            aabb = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        aabb = np.asarray(aabb, dtype=np.float64)
        shape = (resolution,) * 3
        return cls(resolution, aabb, np.zeros(shape, dtype=dtype),
                   np.zeros(shape, dtype=bool), decay, threshold)

    @property
    def n_cells(self):
        return self.resolution ** 3

    @property
    def cell_size(self):
        return (self.aabb[1] - self.aabb[0]) / self.resolution

    def cell_indices(self, points):
        rel = (points - self.aabb[0]) / (self.aabb[1] - self.aabb[0])
        idx = np.floor(rel * self.resolution).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def occupied(self, points, bits=None):
        b = self.bits if bits is None else bits
        i = self.cell_indices(points)
        return b[i[..., 0], i[..., 1], i[..., 2]]

    def with_bits(self, bits):
        """Shallow view over a bit snapshot (replayable rendering)."""
        return replace(self, bits=bits)

    def snapshot_bits(self):
        return self.bits.copy()

    def refresh_bits(self):
        self.bits = self.density > self.threshold


def ray_aabb(origins, dirs, aabb):
    """Slab intersection. Returns (t_near, t_far) with t_near >= 0; misses give
    t_near == t_far == 0."""
    lo = np.asarray(aabb, dtype=np.float64)[0]
    hi = np.asarray(aabb, dtype=np.float64)[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    tn = np.where(hit, tmin, 0.0)
    tf = np.where(hit, tmax, 0.0)
    return tn, tf


def generate_rays(camera, pixels, aabb=None):
    """One ray per pixel index through the pixel center, unit directions.

    `pixels` is [n, 2] (column, row) indices; pixel (u, v) maps to image-plane
    point (u + 0.5, v + 0.5). Camera looks along +z in camera space.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if (pixels[:, 0].min() < 0 or pixels[:, 0].max() >= camera.width
            or pixels[:, 1].min() < 0 or pixels[:, 1].max() >= camera.height):
        raise ConfigurationError("pixel indices outside image bounds")
    rot = np.asarray(camera.c2w, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-9:
        raise ConfigurationError("degenerate camera pose (singular rotation)")
    u = pixels[:, 0] + 0.5
    v = pixels[:, 1] + 0.5
    dirs_cam = np.stack([(u - camera.cx) / camera.fx,
                         (v - camera.cy) / camera.fy,
                         np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(np.asarray(camera.c2w, dtype=np.float64)[:3, 3],
                              dirs.shape).copy()
    if aabb is None:
        tn = np.zeros(len(dirs))
        tf = np.zeros(len(dirs))
    else:
        tn, tf = ray_aabb(origins, dirs, aabb)
    return RayBatch(origins, dirs, tn, tf)


def march_rays(rays, grid, step, rng=None, bits=None):
    """Uniform stepping in [t_near, t_far] skipping unoccupied cells.

    Each ray is cut into ceil(span / step) bins; samples sit at bin centers,
    or jittered uniformly inside the bin when `rng` is given (training). The
    last bin may be shorter. Returns PackedSamples (possibly empty).
    """
    if step <= 0:
        raise ConfigurationError(f"march step must be positive, got {step}")
    n_rays = len(rays)
    spans = rays.t_far - rays.t_near
    n_bins = np.ceil(spans / step - 1e-12).astype(np.int64)
    n_bins = np.maximum(n_bins, 0)
    max_bins = int(n_bins.max(initial=0))
    if max_bins == 0:
        return _empty_samples(n_rays)
    i = np.arange(max_bins, dtype=np.float64)
    lo = np.minimum(i[None, :] * step, spans[:, None])
    hi = np.minimum(lo + step, spans[:, None])
    valid = i[None, :] < n_bins[:, None]
    if rng is not None:
        frac = rng.random((n_rays, max_bins))
    else:
        frac = 0.5
    t = rays.t_near[:, None] + lo + frac * (hi - lo)
    pos = rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
    occ = grid.occupied(pos.reshape(-1, 3), bits=bits).reshape(n_rays, max_bins)
    keep = occ & valid
    ray_ids, bin_ids = np.nonzero(keep)
    if ray_ids.size == 0:
        return _empty_samples(n_rays)
    spans_safe = np.maximum(spans, 1e-12)
    return PackedSamples(
        positions=pos[ray_ids, bin_ids].astype(np.float64),
        deltas=(hi - lo)[ray_ids, bin_ids],
        s_lo=lo[ray_ids, bin_ids] / spans_safe[ray_ids],
        s_hi=hi[ray_ids, bin_ids] / spans_safe[ray_ids],
        ray_ids=ray_ids.astype(np.int32),
        n_rays=n_rays,
    )


def march_ray(ray_origin, ray_dir, t_near, t_far, grid, step, rng=None):
    """Single-ray convenience wrapper around march_rays."""
    rays = RayBatch(np.atleast_2d(np.asarray(ray_origin, dtype=np.float64)),
                    np.atleast_2d(np.asarray(ray_dir, dtype=np.float64)),
                    np.atleast_1d(np.asarray(t_near, dtype=np.float64)),
                    np.atleast_1d(np.asarray(t_far, dtype=np.float64)))
    return march_rays(rays, grid, step, rng=rng)


def _empty_samples(n_rays):
    z = np.zeros(0)
    return PackedSamples(np.zeros((0, 3)), z, z, z, np.zeros(0, dtype=np.int32), n_rays)


def _segment_starts(ray_ids, n_rays, n_samples):
    counts = np.bincount(ray_ids, minlength=n_rays)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return counts, offsets[:-1]


def volume_render(sigmas, colors, deltas, ray_ids=None, n_rays=None,
                  s_lo=None, s_hi=None, return_cache=False):
    """Alpha compositing: alpha_i = 1 - exp(-sigma_i * delta_i), weights
    w_i = T_i * alpha_i with exclusive transmittance T_i, per ray.

    Single-ray inputs may omit ray_ids/n_rays. Returns RenderOutput (and a
    cache for the backward pass when requested).
    """
    sigmas = np.asarray(sigmas)
    colors = np.atleast_2d(np.asarray(colors))
    deltas = np.asarray(deltas)
    S = sigmas.shape[0]
    if colors.shape[0] != S or deltas.shape[0] != S:
        raise ConfigurationError("sigmas, colors, deltas must have equal length")
    if S and not np.iscomplexobj(sigmas):
        if sigmas.real.min() < 0:
            raise ContractViolation("negative density passed to volume_render")
        if deltas.min() <= 0:
            raise ContractViolation("non-positive interval passed to volume_render")
    if ray_ids is None:
        ray_ids = np.zeros(S, dtype=np.int32)
        n_rays = 1
    if s_lo is None:
        edges = np.concatenate([[0.0], np.cumsum(deltas)])
        total = max(edges[-1], 1e-12)
        s_lo, s_hi = edges[:-1] / total, edges[1:] / total

    q = sigmas * deltas
    cumq = np.cumsum(q)
    a_excl = cumq - q
    counts, starts = _segment_starts(ray_ids, n_rays, S)
    a_ext = np.concatenate([a_excl, np.zeros(1, dtype=a_excl.dtype)])
    seg_base = a_ext[starts]
    a_local = a_excl - seg_base[ray_ids]
    trans = np.exp(-a_local)
    alpha = -np.expm1(-q) if not np.iscomplexobj(q) else 1.0 - np.exp(-q)
    weights = trans * alpha
    color = np.stack([_segment_sum(weights * colors[:, c], ray_ids, n_rays)
                      for c in range(colors.shape[1])], axis=1)
    opacity = _segment_sum(weights, ray_ids, n_rays)
    optical_depth = _segment_sum(q, ray_ids, n_rays)
    trans_final = np.exp(-optical_depth)
    out = RenderOutput(color=color, opacity=opacity, weights=weights,
                       trans_final=trans_final, s_mid=0.5 * (s_lo + s_hi),
                       ray_ids=ray_ids, n_rays=n_rays, sample_counts=counts)
    if not return_cache:
        return out
    cache = {"q": q, "trans": trans, "alpha": alpha, "weights": weights,
             "deltas": deltas, "colors": colors, "ray_ids": ray_ids,
             "n_rays": n_rays, "starts": starts, "sigmas": sigmas}
    return out, cache


def volume_render_backward(cache, grad_color=None, grad_opacity=None,
                           grad_weights=None, grad_trans_final=None):
    """Gradients of (color, opacity, weights, trans_final) outputs w.r.t.
    (sigmas, colors)."""
    q = cache["q"]
    trans = cache["trans"]
    w = cache["weights"]
    colors = cache["colors"]
    ids = cache["ray_ids"]
    n_rays = cache["n_rays"]
    S = q.shape[0]
    g = np.zeros(S, dtype=q.dtype)
    dcolors = np.zeros_like(colors)
    if grad_color is not None:
        g += np.einsum("sc,sc->s", grad_color[ids], colors)
        dcolors = w[:, None] * grad_color[ids]
    if grad_opacity is not None:
        g += grad_opacity[ids]
    if grad_weights is not None:
        g += grad_weights
    gw = g * w
    total_gw = _segment_sum(gw, ids, n_rays)
    cum = np.cumsum(gw)
    excl = cum - gw
    ext = np.concatenate([excl, np.zeros(1, dtype=excl.dtype)])
    seg_base = ext[cache["starts"]]
    prefix_excl = excl - seg_base[ids]
    suffix_after = total_gw[ids] - prefix_excl - gw
    trans_next = trans * np.exp(-q)
    dq = g * trans_next - suffix_after
    if grad_trans_final is not None:
        # T_final = exp(-sum q): every sample on the ray sees -T_final.
        optical = _segment_sum(q, ids, n_rays)
        dq = dq - (grad_trans_final * np.exp(-optical))[ids]
    dsigmas = dq * cache["deltas"]
    return dsigmas, dcolors


def truncate_transmittance(samples, sigmas, threshold=TRANSMITTANCE_EPS):
    """Mask of samples reached before remaining transmittance drops below
    `threshold` (early termination applied at compositing)."""
    q = sigmas * samples.deltas
    cumq = np.cumsum(q)
    excl = cumq - q
    counts, starts = _segment_starts(samples.ray_ids, samples.n_rays,
                                     samples.n_samples)
    ext = np.concatenate([excl, np.zeros(1)])
    a_local = excl - ext[starts][samples.ray_ids]
    return np.exp(-a_local) >= threshold


def render_rays(field_fn, grid, rays, step, *, early_stop=True, bits=None,
                background=0.0, rng=None):
    """March, query, composite one ray batch. `field_fn(positions, dirs)`
    returns (sigmas, colors) for per-sample positions and unit view directions.
    Deterministic when rng is None."""
    samples = march_rays(rays, grid, step, rng=rng, bits=bits)
    if samples.n_samples == 0:
        color = np.full((len(rays), 3), background, dtype=np.float64)
        return color, np.zeros(len(rays)), samples, None
    sigmas, colors = field_fn(samples.positions, rays.dirs[samples.ray_ids])
    if early_stop:
        keep = truncate_transmittance(samples, sigmas)
        if not keep.all():
            samples = PackedSamples(samples.positions[keep], samples.deltas[keep],
                                    samples.s_lo[keep], samples.s_hi[keep],
                                    samples.ray_ids[keep], samples.n_rays)
            sigmas, colors = sigmas[keep], colors[keep]
    out = volume_render(sigmas, colors, samples.deltas, samples.ray_ids,
                        samples.n_rays, samples.s_lo, samples.s_hi)
    color = out.color + out.trans_final[:, None] * background
    return color, out.opacity, samples, out


def render_image(field_fn, grid, camera, aabb, step, *, early_stop=True,
                 bits=None, white_background=False, chunk_rays=8192):
    """Render a full camera view. Returns (image [H, W, 3] in [0, 1],
    opacity [H, W]). Deterministic for fixed inputs."""
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W), np.arange(H))
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    bg = 1.0 if white_background else 0.0
    img = np.empty((H * W, 3), dtype=np.float64)
    opa = np.empty(H * W, dtype=np.float64)
    for lo in range(0, H * W, chunk_rays):
        hi = min(lo + chunk_rays, H * W)
        rays = generate_rays(camera, pixels[lo:hi], aabb=aabb)
        color, opacity, _, _ = render_rays(field_fn, grid, rays, step,
                                           early_stop=early_stop, bits=bits,
                                           background=bg)
        img[lo:hi] = color
        opa[lo:hi] = opacity
    return np.clip(img, 0.0, 1.0).reshape(H, W, 3), opa.reshape(H, W)


def update_occupancy(grid, sigma_fn, rng, *, all_cells=False):
    """Refresh the density cache: sampled cells get cache <- max(decay * old,
    sigma at a jittered in-cell point); bits <- cache > threshold.

    Warmup (all_cells=True) touches every cell; afterwards a uniform random
    half plus the currently occupied cells (capped at half) are sampled.
    """
    res = grid.resolution
    n = grid.n_cells
    if all_cells:
        cells = np.arange(n)
    else:
        uniform = rng.integers(0, n, size=n // 2)
        occ_flat = np.flatnonzero(grid.bits.reshape(-1))
        if occ_flat.size > n // 2:
            occ_flat = rng.choice(occ_flat, size=n // 2, replace=False)
        cells = np.unique(np.concatenate([uniform, occ_flat]))
    ijk = np.stack(np.unravel_index(cells, (res, res, res)), axis=1)
    jitter = rng.random((cells.size, 3))
    pts = grid.aabb[0] + (ijk + jitter) * grid.cell_size
    sigma = np.asarray(sigma_fn(pts), dtype=grid.density.dtype)
    flat = grid.density.reshape(-1)
    flat[cells] = np.maximum(grid.decay * flat[cells], sigma)
    grid.refresh_bits()
    STATS["occupancy_updates"] += 1
    return grid
