"""Analytic gradients of each loss path through the full model against
central finite differences on the 16x16 architecture."""

import numpy as np
import pytest

from xraymtl.model import init_params
from xraymtl.train import TrainConfig, compute_grads

from conftest import make_dataset
from oracles import finite_diff_grads, max_rel_error


def gradient_check(arch, seed, active, keys=None, h=1e-5):
    params = init_params(arch, seed=seed)
    ds = make_dataset(image_size=arch.input_size, n=3, seed=seed + 50,
                      positive_fraction=1.0)
    batch = ds.batch(np.arange(3))
    cfg = TrainConfig(seed=seed)
    _, analytic = compute_grads(params, batch, active, cfg)
    analytic = {key: g for key, g in analytic.items()}
    numeric = finite_diff_grads(params, batch, active, cfg, h=h, keys=keys)
    return max_rel_error(analytic, numeric)


@pytest.mark.parametrize("active", ["cls", "det", "seg"])
def test_full_path_gradients_single_seed(tiny_arch, active):
    err = gradient_check(tiny_arch, seed=0, active=active)
    assert err < 1e-3, f"{active}: max rel error {err:.2e}"


def test_det_head_touches_enc_and_det_only(tiny_arch):
    params = init_params(tiny_arch, seed=1)
    ds = make_dataset(image_size=tiny_arch.input_size, n=2, seed=9, positive_fraction=1.0)
    _, grads = compute_grads(params, ds.batch([0, 1]), "det", TrainConfig())
    groups = {g for g, _ in grads}
    assert groups == {"enc", "det"}


def test_joint_grads_are_weighted_sums(tiny_arch):
    params = init_params(tiny_arch, seed=2)
    ds = make_dataset(image_size=tiny_arch.input_size, n=2, seed=10, positive_fraction=1.0)
    batch = ds.batch([0, 1])
    cfg = TrainConfig(loss_weights=(1.0, 2.0, 0.5))
    _, joint = compute_grads(params, batch, "joint", cfg)
    parts = {}
    for task, w in zip(("cls", "det", "seg"), cfg.loss_weights):
        _, g = compute_grads(params, batch, task, cfg)
        for key, arr in g.items():
            parts[key] = parts.get(key, 0) + w * arr
    for key, arr in parts.items():
        np.testing.assert_allclose(joint[key], arr, rtol=1e-10, atol=1e-12)
