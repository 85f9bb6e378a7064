"""Schedule construction and the noising / v-parameterization algebra."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ffdepth.schedule import (
    add_noise,
    make_linear_schedule,
    noise_from_v,
    recover_b0,
    v_target,
)

# Frozen from an independent running-product evaluation (see oracle below).
ALPHA_BAR_FINAL_T1000 = 4.0358297653756754e-05


def _running_product_oracle(T, start, end):
    """Plain-python accumulation, no shared code with the package."""
    if T == 1:
        betas = [start]
    else:
        step = (end - start) / (T - 1)
        betas = [start + step * i for i in range(T)]
    abars, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        abars.append(acc)
    return betas, abars


def test_alpha_bar_matches_running_product_oracle():
    sched = make_linear_schedule(1000)
    _, abars = _running_product_oracle(1000, 1e-4, 0.02)
    got = np.array([sched.alpha_bar(t) for t in range(1, 1001)])
    assert np.allclose(got, abars, rtol=0, atol=1e-15)
    assert got[-1] == pytest.approx(ALPHA_BAR_FINAL_T1000, rel=1e-12)


@pytest.mark.parametrize("T", [1, 10, 1000])
def test_schedule_invariants(T):
    sched = make_linear_schedule(T)
    betas = np.array([sched.beta(t) for t in range(1, T + 1)])
    abars = np.array([sched.alpha_bar(t) for t in range(1, T + 1)])
    assert np.all(betas > 0) and np.all(betas < 1)
    assert np.all(np.diff(betas) >= 0)
    assert np.all(abars > 0) and np.all(abars <= 1)
    assert np.all(np.diff(abars) < 0) or T == 1
    # recursion: abar_t = abar_{t-1} * (1 - beta_t)
    for t in range(2, T + 1):
        assert sched.alpha_bar(t) == pytest.approx(
            sched.alpha_bar(t - 1) * (1 - sched.beta(t)), rel=1e-14
        )
    assert sched.alpha_bar(1) == pytest.approx(1 - sched.beta(1), rel=1e-14)


def test_timestep_range_is_checked():
    sched = make_linear_schedule(10)
    for bad in (0, -1, 11):
        with pytest.raises(ValueError):
            sched.alpha_bar(bad)
        with pytest.raises(ValueError):
            sched.beta(bad)


def test_construction_validation():
    with pytest.raises(ValueError):
        make_linear_schedule(0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, beta_start=0.0)
    with pytest.raises(ValueError):
        make_linear_schedule(10, beta_start=0.02, beta_end=0.01)
    with pytest.raises(ValueError):
        make_linear_schedule(10, beta_end=1.0)


def test_add_noise_hand_case():
    # abar chosen as 0.25 by picking a one-step schedule with beta = 0.75
    sched = make_linear_schedule(1, beta_start=0.75, beta_end=0.75)
    x = add_noise(np.array([1.0]), np.array([1.0]), 1, sched)
    assert x[0] == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)


def test_v_target_hand_case():
    sched = make_linear_schedule(1, beta_start=0.75, beta_end=0.75)
    v = v_target(np.array([1.0]), np.array([1.0]), 1, sched)
    assert v[0] == pytest.approx(0.5 - math.sqrt(0.75), abs=1e-12)


@given(
    t=st.integers(min_value=1, max_value=1000),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_recovery_identities(t, seed):
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(seed)
    b0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    x_t = add_noise(b0, eps, t, sched)
    v = v_target(b0, eps, t, sched)
    assert np.max(np.abs(recover_b0(x_t, v, t, sched) - b0)) < 1e-10
    assert np.max(np.abs(noise_from_v(x_t, v, t, sched) - eps)) < 1e-10


def test_ops_work_on_torch_tensors_and_keep_grad():
    sched = make_linear_schedule(50)
    b0 = torch.randn(3, 8, 8, dtype=torch.float64, requires_grad=True)
    eps = torch.randn(3, 8, 8, dtype=torch.float64)
    x_t = add_noise(b0, eps, 7, sched)
    assert x_t.requires_grad
    v = v_target(b0, eps, 7, sched)
    rec = recover_b0(x_t, v, 7, sched)
    assert torch.max(torch.abs(rec - b0)).item() < 1e-12
    rec.sum().backward()
    assert b0.grad is not None


def test_shape_mismatch_rejected():
    sched = make_linear_schedule(10)
    with pytest.raises(ValueError):
        add_noise(np.zeros((2, 2)), np.zeros((3, 2)), 1, sched)
