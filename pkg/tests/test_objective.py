"""Loss definitions: loop oracles, hand cases, flag semantics, gradients."""

import math

import numpy as np
import pytest
import torch

from ffdepth.denoiser import ArchDescriptor, init_params
from ffdepth.objective import (
    LossBreakdown,
    LossWeights,
    TrainBatch,
    blend_latent,
    final_loss,
    gm_loss,
    mae_loss,
    predict_d0,
    predict_d_minus1,
    recompute_final,
    simple_loss,
    trajectory_keep_loss,
)
from ffdepth.schedule import make_linear_schedule


def _mae_oracle(d, ds):
    total, n = 0.0, 0
    for a, b in zip(d.ravel(), ds.ravel()):
        total += abs(float(a) - float(b))
        n += 1
    return total / n


def _gm_oracle(d, ds):
    # scalar loop over every forward difference of the residual
    r = (np.asarray(d) - np.asarray(ds)).reshape(-1, d.shape[-2], d.shape[-1])
    total, count = 0.0, 0
    for c in range(r.shape[0]):
        for y in range(r.shape[1]):
            for x in range(r.shape[2] - 1):
                total += abs(r[c, y, x + 1] - r[c, y, x])
                count += 1
        for y in range(r.shape[1] - 1):
            for x in range(r.shape[2]):
                total += abs(r[c, y + 1, x] - r[c, y, x])
                count += 1
    return total / count


def test_mae_matches_loop_oracle(rng):
    for _ in range(20):
        shape = tuple(rng.integers(2, 6, size=int(rng.integers(2, 5))))
        d = rng.standard_normal(shape)
        ds = rng.standard_normal(shape)
        got = float(mae_loss(torch.from_numpy(d), torch.from_numpy(ds)))
        assert abs(got - _mae_oracle(d, ds)) < 1e-12


def test_gm_matches_loop_oracle(rng):
    for _ in range(20):
        lead = tuple(rng.integers(1, 4, size=int(rng.integers(0, 3))))
        shape = lead + (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        d = rng.standard_normal(shape)
        ds = rng.standard_normal(shape)
        got = float(gm_loss(torch.from_numpy(d), torch.from_numpy(ds)))
        assert abs(got - _gm_oracle(d, ds)) < 1e-12


def test_gm_two_by_two_hand_case():
    # residual [[0,1],[0,1]]: row differences are 1 and 1, column differences
    # are 0 and 0, four terms total -> (1+1+0+0)/4
    d = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    assert float(gm_loss(d, torch.zeros(2, 2))) == pytest.approx(0.5, abs=1e-12)


def test_gm_constant_shift_invariant(rng):
    d = torch.from_numpy(rng.standard_normal((3, 8, 8)))
    ds = torch.from_numpy(rng.standard_normal((3, 8, 8)))
    base = float(gm_loss(d, ds))
    assert float(gm_loss(d + 3.7, ds)) == pytest.approx(base, abs=1e-12)
    assert float(gm_loss(d, ds - 0.9)) == pytest.approx(base, abs=1e-12)


def test_loss_input_validation(rng):
    with pytest.raises(ValueError):
        mae_loss(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(ValueError):
        gm_loss(torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(ValueError):
        gm_loss(torch.zeros(4, 1), torch.zeros(4, 1))  # width 1: no x-differences


def test_blend_latent():
    x = torch.full((2, 2), 2.0)
    d = torch.full((2, 2), -2.0)
    assert torch.equal(blend_latent(x, d, 1.0), x)
    assert torch.equal(blend_latent(x, d, 0.0), d)
    assert torch.equal(blend_latent(x, d, 0.5), torch.zeros(2, 2))
    with pytest.raises(ValueError):
        blend_latent(x, d, 1.5)
    with pytest.raises(ValueError):
        blend_latent(x, torch.zeros(3, 3), 0.5)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma=-0.1)
    with pytest.raises(ValueError):
        LossWeights(lambda_mae=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_k=float("nan"))


def test_simple_loss_closed_form_with_zero_model(rng):
    # a model that always predicts zero reduces the loss to mean(eps^2)
    sched = make_linear_schedule(100)
    x0 = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    zero_model = lambda z, t: torch.zeros_like(z)
    got = float(simple_loss(zero_model, x0, eps, 10, sched))
    assert got == pytest.approx(float((eps**2).mean()), abs=1e-12)


def test_trajectory_keep_closed_form_with_zero_model(rng):
    from ffdepth.schedule import v_target

    sched = make_linear_schedule(100)
    x0 = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    d0 = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    eps = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
    zero_model = lambda z, t: torch.zeros_like(z)
    got = float(trajectory_keep_loss(zero_model, x0, d0, 0.5, 10, eps, sched))
    b0 = 0.5 * x0 + 0.5 * d0
    v = v_target(b0, eps, 10, sched)
    assert got == pytest.approx(float((v**2).mean()), abs=1e-12)


def test_predict_steps_use_reserved_timesteps():
    seen = []

    def spy(z, t):
        seen.append(t)
        return z

    x = torch.zeros(1, 3, 4, 4)
    predict_d0(spy, x)
    predict_d_minus1(spy, x)
    assert seen == [0, -1]


def test_train_batch_validation(rng):
    z = torch.zeros(2, 3, 8, 8)
    with pytest.raises(ValueError):
        TrainBatch(torch.zeros(0, 3, 8, 8), torch.zeros(0, 3, 8, 8), z, z)
    with pytest.raises(ValueError):
        TrainBatch(z, torch.zeros(2, 3, 4, 4), z, z)
    with pytest.raises(ValueError):
        TrainBatch(z, z, z, torch.zeros(2, 3, 4, 4))
    # empty real half is allowed
    TrainBatch(z, z, torch.zeros(0, 3, 8, 8), torch.zeros(0, 3, 8, 8))


# -- final_loss ---------------------------------------------------------------

def _toy_setup(rng, *, perturb=0.05, dtype=torch.float64, size=16):
    arch = ArchDescriptor(widths=(8, 16), time_dim=8)
    model = init_params(arch, 0).to(dtype)
    with torch.no_grad():
        for p in model.parameters():
            p += perturb * torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(dtype)
    mk = lambda: torch.from_numpy(rng.standard_normal((2, 3, size, size))).to(dtype)
    batch = TrainBatch(mk(), mk(), mk(), mk())
    sched = make_linear_schedule(50)
    return model, batch, sched


def test_final_loss_breakdown_identity(rng):
    model, batch, sched = _toy_setup(rng)
    w = LossWeights()
    loss, b = final_loss(model, batch, w, sched, np.random.default_rng(0))
    assert b.l_final == pytest.approx(recompute_final(b, w), abs=1e-15)
    assert loss.item() == pytest.approx(b.l_final, rel=1e-9)
    assert all(v > 0 for v in (b.l_mae_t0, b.l_gm_t0, b.l_mae_tm1, b.l_gm_tm1, b.l_k))


def test_final_loss_is_deterministic_given_rng(rng):
    model, batch, sched = _toy_setup(rng)
    w = LossWeights()
    l1, b1 = final_loss(model, batch, w, sched, np.random.default_rng(5))
    l2, b2 = final_loss(model, batch, w, sched, np.random.default_rng(5))
    assert l1.item() == l2.item()
    assert b1 == b2


def test_traj_keep_flag_equals_zero_lambda(rng):
    model, batch, sched = _toy_setup(rng)
    l1, b1 = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(3),
                        use_traj_keep=False)
    l2, b2 = final_loss(model, batch, LossWeights(lambda_k=0.0), sched,
                        np.random.default_rng(3))
    assert l1.item() == l2.item()
    assert b1 == b2
    assert b1.l_k == 0.0


def test_no_teacher_flag_equals_empty_real_half(rng):
    model, batch, sched = _toy_setup(rng)
    empty = TrainBatch(
        batch.syn_rgb, batch.syn_depth,
        batch.real_rgb[:0], batch.real_teacher[:0],
    )
    l1, b1 = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(3),
                        use_teacher=False)
    l2, b2 = final_loss(model, empty, LossWeights(), sched, np.random.default_rng(3))
    assert l1.item() == l2.item()
    assert b1 == b2
    assert b1.l_mae_tm1 == 0.0 and b1.l_gm_tm1 == 0.0


def test_ablations_share_the_rng_stream(rng):
    # toggling terms must not shift the randomness of the remaining terms
    model, batch, sched = _toy_setup(rng)
    _, full = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(9))
    _, no_k = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(9),
                         use_traj_keep=False)
    _, no_t = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(9),
                         use_teacher=False)
    assert no_k.l_mae_t0 == full.l_mae_t0
    assert no_k.l_mae_tm1 == full.l_mae_tm1
    assert no_t.l_mae_t0 == full.l_mae_t0
    assert no_t.l_k == full.l_k


def test_teacher_at_d0_changes_real_terms_only(rng):
    model, batch, sched = _toy_setup(rng)
    _, chain = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(4))
    _, direct = final_loss(model, batch, LossWeights(), sched, np.random.default_rng(4),
                           teacher_step="d0")
    assert direct.l_mae_t0 == chain.l_mae_t0
    assert direct.l_k == chain.l_k
    assert direct.l_mae_tm1 != chain.l_mae_tm1
    with pytest.raises(ValueError):
        final_loss(model, batch, LossWeights(), sched, np.random.default_rng(4),
                   teacher_step="d_plus1")


def test_zero_weight_terms_are_skipped_and_logged_zero(rng):
    model, batch, sched = _toy_setup(rng)
    w = LossWeights(lambda_mae=0.0, lambda_gm=0.0, lambda_k=0.2)
    loss, b = final_loss(model, batch, w, sched, np.random.default_rng(2))
    assert b.l_mae_t0 == 0.0 and b.l_gm_t0 == 0.0
    assert b.l_mae_tm1 == 0.0 and b.l_gm_tm1 == 0.0
    assert b.l_k > 0.0
    assert loss.item() == pytest.approx(0.2 * b.l_k, rel=1e-9)


def test_all_zero_weights_give_constant_zero_loss(rng):
    model, batch, sched = _toy_setup(rng)
    w = LossWeights(lambda_mae=0.0, lambda_gm=0.0, lambda_k=0.0)
    loss, b = final_loss(model, batch, w, sched, np.random.default_rng(2))
    assert loss.item() == 0.0
    assert not loss.requires_grad
    assert b == LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def test_detach_d0_blocks_gradient_through_first_step(rng):
    model, batch, sched = _toy_setup(rng)
    w = LossWeights(lambda_k=0.0)

    def real_only_grads(detach):
        loss, _ = final_loss(model, batch, w, sched, np.random.default_rng(1),
                             detach_d0=detach)
        grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
        return grads

    g_chain = real_only_grads(False)
    g_detach = real_only_grads(True)
    assert any(
        a is not None and b is not None and not torch.allclose(a, b)
        for a, b in zip(g_chain, g_detach)
    )


# -- gradient spot checks (full sweep lives in the acceptance suite) ----------

def _fd_check(loss_fn, model, rng, coords=8, step=1e-5, tol=1e-4):
    params = list(model.parameters())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, params)
    ])
    mags = flat.abs().numpy()
    eligible = np.nonzero(mags > 1e-6)[0]
    picks = rng.choice(eligible, size=min(coords, len(eligible)), replace=False)
    offsets = np.cumsum([0] + [p.numel() for p in params])
    for idx in picks:
        pi = int(np.searchsorted(offsets, idx, side="right") - 1)
        local = int(idx - offsets[pi])
        p = params[pi]
        with torch.no_grad():
            orig = p.reshape(-1)[local].item()
            p.reshape(-1)[local] = orig + step
            lp = loss_fn().item()
            p.reshape(-1)[local] = orig - step
            lm = loss_fn().item()
            p.reshape(-1)[local] = orig
        fd = (lp - lm) / (2 * step)
        an = float(flat[idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        assert rel < tol, f"coord {idx}: analytic {an} vs fd {fd} (rel {rel})"


def test_final_loss_gradient_spot_check(rng):
    model, batch, sched = _toy_setup(rng, size=8)
    fn = lambda: final_loss(model, batch, LossWeights(), sched,
                            np.random.default_rng(0))[0]
    _fd_check(fn, model, rng)


def test_simple_loss_gradient_spot_check(rng):
    model, batch, sched = _toy_setup(rng, size=8)
    eps = torch.from_numpy(rng.standard_normal(tuple(batch.syn_rgb.shape)))
    fn = lambda: simple_loss(model, batch.syn_rgb, eps, 25, sched)
    _fd_check(fn, model, rng)
