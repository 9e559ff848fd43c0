"""The training objective: photometric L2 plus distortion, opacity-entropy and
spatial-L1 regularizers.

Reduction convention: every term is averaged over the ray batch before
weighting, matching the photometric term's per-ray mean (the spatial term is
averaged over sample points). Natural log throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

OPACITY_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.005
    lambda_o: float = 0.005
    lambda_r: float = 0.001

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_o, self.lambda_r) < 0:
            raise ConfigurationError("loss weights must be non-negative")


def photometric_loss(pred, target):
    """Mean over rays of the squared L2 color error."""
    pred = np.atleast_2d(np.asarray(pred))
    target = np.atleast_2d(np.asarray(target))
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).sum(axis=-1).mean()


def photometric_loss_grad(pred, target):
    """d(loss)/d(pred) for the per-ray mean convention."""
    n = pred.shape[0]
    return 2.0 * (pred - target) / n


def distortion_loss_bruteforce(weights, edges):
    """O(N^2) double-sum reference for one ray: sum_ij w_i w_j |mid_i - mid_j|
    + (1/3) sum_i w_i^2 (s_{i+1} - s_i)."""
    w = np.asarray(weights, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    mid = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1:] - edges[:-1]
    cross = (w[:, None] * w[None, :] * np.abs(mid[:, None] - mid[None, :])).sum()
    return cross + (w * w * width).sum() / 3.0


def distortion_loss(weights, edges):
    """O(N) prefix-sum form of the single-ray distortion loss; bin edges must
    be non-decreasing."""
    w = np.asarray(weights)
    edges = np.asarray(edges)
    if edges.shape[0] != w.shape[0] + 1:
        raise ConfigurationError("need N+1 edges for N weights")
    if w.size and not np.iscomplexobj(w) and w.min() < 0:
        raise ConfigurationError("weights must be non-negative")
    if np.any(np.diff(edges) < 0):
        raise ConfigurationError("bin edges must be non-decreasing")
    loss, _ = _distortion_sorted(w, edges[:-1], edges[1:],
                                 np.zeros(w.shape[0], dtype=np.int32), 1)
    return float(loss[0].real) if np.iscomplexobj(w) else float(loss[0])


def _distortion_sorted(w, s_lo, s_hi, ray_ids, n_rays):
    """Per-ray distortion loss and d/dw, prefix form. Midpoints must be
    ascending within each ray (marching order guarantees this)."""
    mid = 0.5 * (s_lo + s_hi)
    width = s_hi - s_lo
    wm = w * mid
    counts = np.bincount(ray_ids, minlength=n_rays)
    starts = np.concatenate([[0], np.cumsum(counts)])[:-1]

    def excl_prefix(x):
        c = np.cumsum(x)
        e = c - x
        ext = np.concatenate([e, np.zeros(1, dtype=e.dtype)])
        return e - ext[starts][ray_ids]

    def seg_total(x):
        if np.iscomplexobj(x):
            out = np.zeros(n_rays, dtype=x.dtype)
            np.add.at(out, ray_ids, x)
            return out
        return np.bincount(ray_ids, weights=x, minlength=n_rays)

    W_lt = excl_prefix(w)
    M_lt = excl_prefix(wm)
    totW = seg_total(w)
    totM = seg_total(wm)
    cross_terms = w * (mid * W_lt - M_lt)
    self_terms = w * w * width
    loss = 2.0 * seg_total(cross_terms) + seg_total(self_terms) / 3.0
    W_gt = totW[ray_ids] - W_lt - w
    M_gt = totM[ray_ids] - M_lt - wm
    grad = 2.0 * (mid * W_lt - M_lt + M_gt - mid * W_gt) + (2.0 / 3.0) * w * width
    return loss, grad


def distortion_loss_batch(weights, s_lo, s_hi, ray_ids, n_rays):
    """Mean-over-rays distortion loss and gradient w.r.t. weights."""
    if weights.shape[0] == 0:
        return 0.0, np.zeros_like(weights)
    per_ray, grad = _distortion_sorted(weights, s_lo, s_hi, ray_ids, n_rays)
    return per_ray.sum() / n_rays, grad / n_rays


def opacity_entropy(o):
    """-o * ln(o) with o clamped to [1e-6, 1] before the log. Accepts scalars
    or arrays; returns the same shape."""
    o = np.asarray(o)
    if np.iscomplexobj(o):
        oc = np.where(o.real < OPACITY_FLOOR, OPACITY_FLOOR + 0j,
                      np.where(o.real > 1.0, 1.0 + 0j, o))
    else:
        oc = np.clip(o, OPACITY_FLOOR, 1.0)
    return -oc * np.log(oc)


def opacity_entropy_batch(o):
    """Mean-over-rays entropy and gradient w.r.t. o."""
    o = np.asarray(o)
    n = max(o.shape[0], 1)
    loss = opacity_entropy(o).sum() / n
    inside = (o > OPACITY_FLOOR) & (o < 1.0)
    grad = np.where(inside, -(np.log(np.clip(o, OPACITY_FLOOR, 1.0)) + 1.0), 0.0) / n
    return loss, grad


def spatial_l1(features):
    """Mean over sampled points of the L1 norm of current-branch features."""
    f = np.atleast_2d(np.asarray(features))
    if f.shape[0] == 0:
        return 0.0
    if np.iscomplexobj(f):
        absf = np.where(f.real >= 0, f, -f)
    else:
        absf = np.abs(f)
    return absf.sum(axis=1).mean()


def spatial_l1_grad(features):
    f = np.atleast_2d(np.asarray(features))
    if f.shape[0] == 0:
        return np.zeros_like(f)
    return np.sign(f) / f.shape[0]


def total_loss(photometric, l_d, l_o, l_r, weights):
    """Weighted sum of the four objective terms."""
    return photometric + weights.lambda_d * l_d + weights.lambda_o * l_o \
        + weights.lambda_r * l_r
