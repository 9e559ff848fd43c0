"""Shared fixtures and the tiny finite-difference problem used across tests."""

import numpy as np
import pytest

from cdngp import continual, losses, renderer, scene_io
from cdngp.field import Branch, SpatialTables, TemporalEncoder, field_backward, field_forward
from cdngp.numerics import Mlp


def build_tiny_problem(seed, layout="voxel", fusion="sum"):
    """A tiny full-loss training problem in float64: L=2, F=2, P=6 tables,
    hidden widths 16/8, 3 rays x 8 samples, all four loss terms.

    Returns (params dict, loss_and_grad fn) for gradient checking.
    """
    rng = np.random.default_rng(seed)
    L, F, P = 2, 2, 6
    base = SpatialTables.create(layout, L, F, P, 4, 8, rng, dtype=np.float64)
    aux = SpatialTables.create(layout, L, F, P, 4, 8, rng, dtype=np.float64)
    temporal = TemporalEncoder.create("hash", rng, np.float64, levels=2, features=4,
                                      log2_table_len=5, n_min=2, n_max=6)
    # Re-draw tables at a non-trivial scale so every path carries signal.
    for tab in (*base.sets.values(), *aux.sets.values(), temporal.tables):
        for lev in tab.levels:
            lev[...] = rng.uniform(-0.3, 0.3, size=lev.shape)
    width = L * F * (2 if fusion == "concat" else 1)
    theta1 = Mlp.create([width + temporal.out_dim, 16, 16, 1 + 6], rng, np.float64)
    theta2 = Mlp.create([6 + 16, 8, 8, 3], rng, np.float64)
    branch = Branch(1, aux, temporal, theta1, theta2, 0, 4, 10, fusion)

    n_rays, n_samp = 3, 8
    S = n_rays * n_samp
    x = rng.random((S, 3))
    t = rng.random(S)
    d = rng.standard_normal((n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ray_ids = np.repeat(np.arange(n_rays, dtype=np.int32), n_samp)
    deltas = rng.uniform(0.05, 0.2, S)
    lo = np.concatenate([np.sort(rng.random(n_samp)) for _ in range(n_rays)])
    hi = np.minimum(lo + rng.uniform(0.01, 0.1, S), 1.0)
    targets = rng.random((n_rays, 3))
    weights = losses.LossWeights()

    params = {}
    params.update(base.named_arrays("base/"))
    params.update(branch.named_arrays(""))

    def loss_and_grad(_params):
        sigma, rgb, _, fc = field_forward(base, branch, x, t, d[ray_ids])
        out, rc = renderer.volume_render(sigma, rgb, deltas, ray_ids, n_rays,
                                         lo, hi, return_cache=True)
        photo = losses.photometric_loss(out.color, targets)
        l_d, dw = losses.distortion_loss_batch(out.weights, lo, hi, ray_ids, n_rays)
        l_o, do = losses.opacity_entropy_batch(out.opacity)
        l_r = losses.spatial_l1(fc.aux_feat)
        total = losses.total_loss(photo, l_d, l_o, l_r, weights)
        dpred = losses.photometric_loss_grad(out.color, targets)
        dsig, drgb = renderer.volume_render_backward(
            rc, grad_color=dpred, grad_opacity=weights.lambda_o * do,
            grad_weights=weights.lambda_d * dw)
        daux = weights.lambda_r * losses.spatial_l1_grad(fc.aux_feat)
        fg = field_backward(base, branch, fc, dsig, drgb,
                            daux_feat_extra=daux, need_base=True)
        return float(total), continual._gradient_map(fg, branch)

    return params, loss_and_grad


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """3 views x 8 frames at 32x32: fast dataset for functional tests."""
    out = tmp_path_factory.mktemp("microds")
    spec = scene_io.default_scene_spec(seed=11)
    scene_io.generate_dataset(spec, 3, 8, 32, seed=11, out_dir=out, substeps=512)
    return out


@pytest.fixture(scope="session")
def micro_config():
    return continual.TrainConfig(
        p1=10, p2=6, levels=4, features=2, n_min=8, n_max=32,
        hidden_sigma=32, hidden_color=16, latent_dim=8,
        t_chunk=4, eta_init=60, eta_aux=40, batch_rays=128,
        occ_resolution=16, march_step_divisor=64, render_step_divisor=96,
        occ_warmup_steps=20, snapshot_grids=True, seed=5)


@pytest.fixture(scope="session")
def micro_repo(micro_dataset, micro_config):
    ds = scene_io.load_dataset(micro_dataset)
    return continual.run_continual(ds, micro_config), ds
