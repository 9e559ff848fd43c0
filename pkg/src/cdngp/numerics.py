"""Minimal dense numerics: linear layers, LeakyReLU MLPs with exact reverse-mode
gradients, the Adam optimizer, a cosine learning-rate schedule, and gradient
checking utilities (central finite differences and complex-step directional
derivatives).

Training runs in float32 by default; verification paths pass float64 (or
complex) arrays and every function follows the dtype of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError

LEAKY_SLOPE = 0.01

# Adam defaults chosen for stability of hash-table training.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.96
ADAM_EPSILON = 1e-15


def leaky_relu(x, slope=LEAKY_SLOPE):
    """Elementwise y = x for x >= 0 else slope * x. Complex-safe (sign of real part)."""
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must be in (0, 1), got {slope}")
    x = np.asarray(x)
    mask = (x.real >= 0) if np.iscomplexobj(x) else (x >= 0)
    return np.where(mask, x, slope * x)


def leaky_relu_grad(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, np.asarray(1.0, dtype=x.dtype), np.asarray(slope, dtype=x.dtype))


def sigmoid(x):
    """Numerically stable logistic function; complex-safe for complex-step tests."""
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return 1.0 / (1.0 + np.exp(-x))
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        neg = ex / (1.0 + ex)
    return np.where(x >= 0, pos, neg)


def linear_forward(x, weights, bias):
    """Affine map y[i] = sum_j weights[i, j] * x[..., j] + bias[i].

    `weights` is [out, in] row-major; `x` may be a single vector or a batch
    with the feature axis last.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2:
        raise ConfigurationError(f"weights must be 2-D, got shape {weights.shape}")
    out_dim, in_dim = weights.shape
    if x.shape[-1] != in_dim:
        raise ConfigurationError(
            f"input width {x.shape[-1]} does not match weight cols {in_dim}")
    if bias.shape != (out_dim,):
        raise ConfigurationError(
            f"bias length {bias.shape} does not match weight rows {out_dim}")
    return x @ weights.T + bias


@dataclass
class Mlp:
    """A LeakyReLU MLP with a linear output layer and hand-written backprop.

    weights[i] has shape [out, in]; biases[i] has shape [out].
    """

    weights: list
    biases: list
    slope: float = LEAKY_SLOPE

    @classmethod
    def create(cls, sizes, rng, dtype=np.float32, slope=LEAKY_SLOPE):
        """Kaiming-uniform init for layer widths `sizes` = [in, h1, ..., out]."""
        if len(sizes) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        return cls(ws, bs, slope)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def named_arrays(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope)

    def astype(self, dtype):
        return Mlp([w.astype(dtype) for w in self.weights],
                   [b.astype(dtype) for b in self.biases], self.slope)

    def forward(self, x, check=False):
        """Returns (output, cache). Hidden layers use LeakyReLU, output is linear."""
        a = x
        cache = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if check:
                with np.errstate(over="ignore", invalid="ignore"):
                    z = linear_forward(a, w, b)
                if not np.isfinite(z).all():
                    raise NumericalError(f"non-finite activation in MLP layer {i}")
            else:
                z = linear_forward(a, w, b)
            cache.append((a, z))
            a = leaky_relu(z, self.slope) if i < last else z
        return a, cache

    def backward(self, cache, grad_output):
        """Exact reverse-mode gradients. Returns ((dweights, dbiases), grad_input)."""
        dws = [None] * self.n_layers
        dbs = [None] * self.n_layers
        dz = grad_output
        for i in range(self.n_layers - 1, -1, -1):
            a_in, z = cache[i]
            dws[i] = dz.T @ a_in
            dbs[i] = dz.sum(axis=0) if dz.ndim > 1 else dz
            da = dz @ self.weights[i]
            dz = da * leaky_relu_grad(cache[i - 1][1], self.slope) if i > 0 else da
        return (dws, dbs), dz


def mlp_forward_backward(mlp, x, grad_output):
    """Composed forward pass plus exact reverse-mode derivatives.

    Returns (output, (dweights, dbiases), grad_input). Raises NumericalError
    naming the layer if an intermediate goes non-finite.
    """
    x = np.atleast_2d(np.asarray(x))
    grad_output = np.atleast_2d(np.asarray(grad_output))
    y, cache = mlp.forward(x, check=True)
    grads, dx = mlp.backward(cache, grad_output)
    return y, grads, dx


@dataclass
class AdamState:
    """First/second moment state for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, epsilon=ADAM_EPSILON):
        dt = np.asarray(params).dtype
        return cls(np.zeros(params.shape, dt), np.zeros(params.shape, dt),
                   0, beta1, beta2, epsilon)


def adam_step(state, params, grads, lr):
    """One in-place Adam update with bias correction. Returns (params, state).

    A NaN gradient aborts, naming the first offending flat index.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    grads = np.asarray(grads)
    if grads.shape != params.shape:
        raise ConfigurationError(
            f"gradient shape {grads.shape} does not match params {params.shape}")
    if np.isnan(grads).any():
        idx = int(np.flatnonzero(np.isnan(grads))[0])
        raise NumericalError(f"NaN gradient at parameter index {idx}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grads)
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    params -= lr * mhat / (np.sqrt(vhat) + state.epsilon)
    return params, state


def cosine_lr(step, total_steps, lr0):
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        raise ConfigurationError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def finite_diff_check(loss_fn, params, h=1e-4, max_coords_per_block=512, rng=None):
    """Compare analytic gradients against central finite differences.

    `loss_fn(params) -> (loss, grads)` where params/grads are dicts of arrays
    keyed by block name. Perturbs at most `max_coords_per_block` randomly
    sampled coordinates per block (in place, restoring afterwards) and returns
    the max of |analytic - fd| / max(1, |analytic|) over all sampled coords.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ConfigurationError(f"finite-difference step h={h} outside [1e-6, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericalError(f"loss is non-finite: {loss0}")
    worst = 0.0
    for name, arr in params.items():
        g = np.asarray(grads[name])
        flat = arr.reshape(-1)
        n = flat.size
        if n <= max_coords_per_block:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_block, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + h
            lp, _ = loss_fn(params)
            flat[c] = old - h
            lm, _ = loss_fn(params)
            flat[c] = old
            fd = (lp - lm) / (2.0 * h)
            analytic = g.reshape(-1)[c]
            err = abs(analytic - fd) / max(1.0, abs(analytic))
            if err > worst:
                worst = float(err)
    return worst


def complex_step_directional(fn, params, direction, h=1e-30):
    """Directional derivative of `fn(params) -> array` along `direction` via the
    complex-step method (no subtractive cancellation; accurate to ~1e-14).

    Both params and direction are dicts of float arrays keyed identically.
    """
    shifted = {}
    for name, arr in params.items():
        d = direction.get(name)
        c = arr.astype(np.complex128)
        if d is not None:
            c = c + 1j * h * d
        shifted[name] = c
    out = fn(shifted)
    return np.asarray(out).imag / h
