import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdl.distill import (
    DistillOptions,
    auxiliary_objective,
    group_losses,
    master_objective,
    mle_loss,
    nd_hidden_loss,
    nd_pred_loss,
    orthogonal_reject,
    pd_loss,
    soften,
)
from oracles import central_difference

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def full_mask(*shape):
    return torch.ones(shape, dtype=torch.bool)


# soften


def test_soften_examples():
    assert torch.allclose(soften(t([0.0, 0.0])), t([0.5, 0.5]))
    assert torch.allclose(soften(t([math.log(3), 0.0])), t([0.75, 0.25]), atol=1e-12)
    wide = soften(t([3.0, -2.0, 1.0, 0.0]), 1e6)
    assert torch.allclose(wide, torch.full((4,), 0.25, dtype=D), atol=1e-6)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_soften_rejects_nonpositive_temperature(temp):
    with pytest.raises(ValueError):
        soften(t([1.0]), temp)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(0.1, 10))
def test_soften_rows_are_distributions(z, temp):
    p = soften(torch.from_numpy(z), temp)
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=D), atol=1e-6)
    assert bool((p >= 0).all())


# mle


def test_mle_examples():
    targets = torch.tensor([[0, 1]])
    sure = t([[[0.0, -1e9], [-1e9, 0.0]]])
    assert mle_loss(sure, targets, full_mask(1, 2)).item() == pytest.approx(0.0, abs=1e-9)
    uniform = torch.zeros(1, 2, 4, dtype=D)
    assert mle_loss(uniform, targets, full_mask(1, 2)).item() == pytest.approx(math.log(4))
    logits = torch.log(t([[[0.5, 0.5, 0.0, 0.0], [0.75, 0.25, 0.0, 0.0]]]) + 1e-300)
    assert mle_loss(logits, targets, full_mask(1, 2)).item() == pytest.approx((math.log(2) + math.log(4)) / 2)


def test_mle_ignores_masked_positions_and_rejects_all_masked():
    logits = torch.zeros(1, 2, 4, dtype=D)
    logits[0, 1, 0] = 50.0
    mask = torch.tensor([[True, False]])
    assert mle_loss(logits, torch.tensor([[0, 1]]), mask).item() == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        mle_loss(logits, torch.tensor([[0, 1]]), torch.zeros(1, 2, dtype=torch.bool))


# pd


def test_pd_examples():
    q = t([[[0.5, 0.5]]])
    assert pd_loss(q, torch.zeros(1, 1, 2, dtype=D), full_mask(1, 1)).item() == pytest.approx(math.log(2))
    one_hot = t([[[1.0, 0.0]]])
    assert pd_loss(one_hot, torch.zeros(1, 1, 2, dtype=D), full_mask(1, 1)).item() == pytest.approx(math.log(2))


def test_pd_shape_mismatch():
    with pytest.raises(ValueError):
        pd_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), full_mask(1, 2))


def test_pd_gradient_is_student_minus_teacher():
    gen = torch.Generator().manual_seed(0)
    teacher = torch.softmax(torch.randn(1, 1, 6, generator=gen, dtype=D), -1)
    z = torch.randn(1, 1, 6, generator=gen, dtype=D, requires_grad=True)
    pd_loss(teacher, z, full_mask(1, 1)).backward()
    assert torch.allclose(z.grad, torch.softmax(z.detach(), -1) - teacher, atol=1e-12)


@given(arrays(np.float64, (2, 4), elements=st.floats(-5, 5)), arrays(np.float64, (2, 4), elements=st.floats(-5, 5)))
def test_pd_is_bounded_below_by_teacher_entropy(zt, zs):
    teacher = torch.softmax(torch.from_numpy(zt), -1)[None]
    entropy = -(teacher * torch.log(teacher)).sum(-1).mean()
    mask = full_mask(1, 2)
    assert pd_loss(teacher, torch.from_numpy(zs)[None], mask).item() >= entropy.item() - 1e-12
    assert pd_loss(teacher, torch.from_numpy(zt)[None], mask).item() == pytest.approx(entropy.item(), abs=1e-12)


# nd_pred


def test_nd_pred_examples():
    half = t([[[0.5, 0.5]]])
    assert nd_pred_loss(half, half, full_mask(1, 1)).item() == pytest.approx(math.log(2))
    teacher = t([[[1.0, 0.0]]])
    away = t([[[0.0, 1.0]]])
    assert nd_pred_loss(teacher, away, full_mask(1, 1)).item() == pytest.approx(0.0, abs=1e-12)
    saturated = t([[[1 - 1e-7, 1e-7]]])
    assert nd_pred_loss(teacher, saturated, full_mask(1, 1)).item() == pytest.approx(math.log(1e7), rel=1e-6)
    total = t([[[1.0, 0.0]]])
    assert math.isfinite(nd_pred_loss(teacher, total, full_mask(1, 1)).item())


def test_nd_pred_step_reduces_overlap():
    gen = torch.Generator().manual_seed(3)
    teacher = torch.softmax(torch.randn(2, 3, 7, generator=gen, dtype=D) * 2, -1)
    z = torch.randn(2, 3, 7, generator=gen, dtype=D, requires_grad=True)
    mask = full_mask(2, 3)
    before = (teacher * torch.softmax(z, -1)).sum().item()
    nd_pred_loss(teacher, torch.softmax(z, -1), mask).backward()
    with torch.no_grad():
        z -= 0.01 * z.grad
    after = (teacher * torch.softmax(z, -1)).sum().item()
    assert after < before


# orthogonal projection


def test_orthogonal_examples():
    assert torch.allclose(orthogonal_reject(t([0.0, 2.0]), t([3.0, 0.0])), t([0.0, 2.0]))
    assert torch.allclose(orthogonal_reject(t([2.0, 4.0]), t([1.0, 2.0])), t([0.0, 0.0]), atol=1e-12)
    assert torch.allclose(orthogonal_reject(t([1.0, 1.0]), t([1.0, 0.0])), t([0.0, 1.0]))


def test_orthogonal_zero_guard():
    a = t([1.0, 2.0, 3.0])
    assert torch.equal(orthogonal_reject(a, torch.zeros(3, dtype=D)), a)


vectors = arrays(np.float64, 6, elements=st.floats(-10, 10))


def _usable(b):
    return np.linalg.norm(b) > 1e-3


@given(vectors, vectors)
def test_rejection_is_orthogonal(a, b):
    if not _usable(b):
        return
    out = orthogonal_reject(torch.from_numpy(a), torch.from_numpy(b))
    assert abs(float(out @ torch.from_numpy(b))) <= 1e-9 * max(1.0, np.linalg.norm(a) * np.linalg.norm(b))


@given(vectors, vectors)
def test_rejection_is_idempotent(a, b):
    if not _usable(b):
        return
    a_, b_ = torch.from_numpy(a), torch.from_numpy(b)
    once = orthogonal_reject(a_, b_)
    assert torch.allclose(orthogonal_reject(once, b_), once, atol=1e-9)


@given(vectors, vectors, st.floats(0.01, 100), st.booleans())
def test_rejection_is_scale_invariant(a, b, c, neg):
    if not _usable(b):
        return
    c = -c if neg else c
    a_, b_ = torch.from_numpy(a), torch.from_numpy(b)
    assert torch.allclose(orthogonal_reject(a_, c * b_), orthogonal_reject(a_, b_), atol=1e-9)


# nd_hidden


def test_nd_hidden_examples():
    h = torch.randn(2, 3, 4, dtype=D)
    assert nd_hidden_loss(h, h, full_mask(2, 3)).item() == pytest.approx(1.0)
    d = 4
    shift = torch.full((d,), math.sqrt(math.log(2)), dtype=D)
    assert nd_hidden_loss(h + shift, h, full_mask(2, 3)).item() == pytest.approx(0.5)


@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-100, 100)), arrays(np.float64, (2, 3, 4), elements=st.floats(-100, 100)))
def test_nd_hidden_in_unit_interval(a, b):
    val = nd_hidden_loss(torch.from_numpy(a), torch.from_numpy(b), full_mask(2, 3)).item()
    assert 0.0 <= val <= 1.0


# finite-difference gradient checks


def _check_grad(fn, x):
    xt = torch.from_numpy(x.copy()).requires_grad_(True)
    fn(xt).backward()
    numeric = central_difference(lambda arr: fn(torch.from_numpy(arr)).item(), x.copy())
    analytic = xt.grad.numpy()
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel < 1e-4


RNG = np.random.default_rng(42)
SHAPE = (2, 3, 8)
MASK = torch.tensor([[True, True, False], [True, True, True]])
TARGETS = torch.tensor([[1, 5, 0], [7, 2, 3]])
TEACHER = torch.softmax(torch.from_numpy(RNG.normal(size=SHAPE)), -1)
H_B = torch.from_numpy(RNG.normal(size=SHAPE))


def test_grad_mle():
    _check_grad(lambda z: mle_loss(z, TARGETS, MASK), RNG.normal(size=SHAPE))


def test_grad_pd():
    _check_grad(lambda z: pd_loss(TEACHER, z, MASK, 2.0), RNG.normal(size=SHAPE))


def test_grad_nd_pred():
    _check_grad(lambda z: nd_pred_loss(TEACHER, torch.softmax(z, -1), MASK), RNG.normal(size=SHAPE))


def test_grad_nd_hidden_through_projection():
    _check_grad(lambda h: nd_hidden_loss(orthogonal_reject(h, H_B), H_B, MASK), RNG.normal(size=SHAPE) * 0.3)


def test_grad_nd_hidden_small():
    hb = torch.from_numpy(RNG.normal(size=(3, 4)))
    _check_grad(lambda h: nd_hidden_loss(h, hb, full_mask(3)), RNG.normal(size=(3, 4)))


# objectives


def test_objective_arithmetic():
    assert master_objective(1.0, [0.4, 0.8]) == pytest.approx(1.6)
    assert master_objective(1.0, [0.4]) == pytest.approx(1.4)
    with pytest.raises(ValueError):
        master_objective(1.0, [])
    assert auxiliary_objective(1.0, 0.5, [0.2, 0.4]) == pytest.approx(1.8)
    assert auxiliary_objective(1.0, 0.5, [0.2], [0.7]) == pytest.approx(2.4)


def _group_inputs(n_branches, identical=False, seed=0):
    gen = torch.Generator().manual_seed(seed)
    base = torch.randn(2, 3, 6, generator=gen, dtype=D)
    logits = [base.clone() if identical else torch.randn(2, 3, 6, generator=gen, dtype=D) for _ in range(n_branches)]
    hidden = [torch.randn(2, 3, 4, generator=gen, dtype=D) for _ in range(n_branches)]
    targets = torch.tensor([[1, 2, 3], [4, 5, 0]])
    mask = torch.tensor([[True, True, True], [True, True, False]])
    return logits, hidden, targets, mask


def test_identical_branches_give_mle_plus_entropy():
    logits, hidden, targets, mask = _group_inputs(3, identical=True)
    bundles = group_losses(logits, hidden, targets, mask, None)
    p = torch.softmax(logits[0], -1)
    entropy = (-(p * torch.log(p)).sum(-1) * mask).sum() / mask.sum()
    assert bundles[0].total.item() == pytest.approx(bundles[0].mle.item() + entropy.item())


def test_bundles_recombine():
    logits, hidden, targets, mask = _group_inputs(4)
    member = [torch.tensor([True, False]), torch.tensor([False, True]), torch.tensor([True, True])]
    for b in group_losses(logits, hidden, targets, mask, member):
        f = b.as_floats()
        assert f["total"] == pytest.approx(f["mle"] + f["pd"] + f["nd_pred"] + f["nd_hidden"])


def test_membership_mask_restricts_auxiliary_mle():
    logits, hidden, targets, mask = _group_inputs(3)
    member = [torch.tensor([True, False]), torch.tensor([False, False])]
    bundles = group_losses(logits, hidden, targets, mask, member)
    row0 = mask & torch.tensor([[True], [False]])
    assert bundles[1].mle.item() == pytest.approx(mle_loss(logits[1], targets, row0).item())
    assert bundles[2].mle.item() == 0.0
    assert bundles[2].pd.item() > 0 and bundles[2].nd_pred.item() > 0


def test_single_auxiliary_disables_nd():
    logits, hidden, targets, mask = _group_inputs(2)
    bundles = group_losses(logits, hidden, targets, mask, [torch.tensor([True, True])])
    assert bundles[1].nd_pred.item() == 0.0 and bundles[1].nd_hidden.item() == 0.0
    assert bundles[0].total.item() == pytest.approx(bundles[0].mle.item() + bundles[0].pd.item())


def test_no_auxiliaries_is_plain_mle():
    logits, hidden, targets, mask = _group_inputs(1)
    (bundle,) = group_losses(logits, hidden, targets, mask, [])
    assert bundle.total.item() == pytest.approx(mle_loss(logits[0], targets, mask).item())


def test_ablation_flags():
    logits, hidden, targets, mask = _group_inputs(3)
    member = [torch.tensor([True, False]), torch.tensor([False, True])]
    off = group_losses(logits, hidden, targets, mask, member, DistillOptions(no_nd=True))
    assert all(b.nd_pred.item() == 0 and b.nd_hidden.item() == 0 for b in off)
    no_hidden = group_losses(logits, hidden, targets, mask, member, DistillOptions(no_nd_hidden=True))
    assert no_hidden[1].nd_hidden.item() == 0 and no_hidden[1].nd_pred.item() > 0
    raw = group_losses(logits, hidden, targets, mask, member, DistillOptions(no_orthogonal=True))
    expected = nd_hidden_loss(hidden[1], hidden[2], mask).item()
    assert raw[1].nd_hidden.item() == pytest.approx(expected)
    full = group_losses(logits, hidden, targets, mask, member, DistillOptions(no_attributes=True))
    assert full[1].mle.item() == pytest.approx(mle_loss(logits[1], targets, mask).item())


def test_gradients_stay_within_each_branch():
    logits, hidden, targets, mask = _group_inputs(3)
    logits = [z.requires_grad_(True) for z in logits]
    hidden = [h.requires_grad_(True) for h in hidden]
    member = [torch.tensor([True, True]), torch.tensor([True, True])]
    bundles = group_losses(logits, hidden, targets, mask, member)
    grads = torch.autograd.grad(bundles[1].total, logits + hidden, allow_unused=True)
    for i, g in enumerate(grads):
        owner = i % 3
        if owner != 1:
            assert g is None or torch.count_nonzero(g) == 0


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_all_terms_finite(seed):
    logits, hidden, targets, mask = _group_inputs(3, seed=seed)
    logits = [z * 30 for z in logits]
    member = [torch.tensor([True, False]), torch.tensor([True, True])]
    for b in group_losses(logits, hidden, targets, mask, member):
        assert all(math.isfinite(v) for v in b.as_floats().values())
