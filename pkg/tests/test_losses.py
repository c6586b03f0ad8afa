import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskocr.losses import (LossInputError, ctc_loss, ctc_min_frames, masked_char_loss, mim_loss,
                            patch_pixel_target, recognition_loss, uniform_ce)

from oracles import central_diff, ctc_brute_force, rel_error


def _grad_check(fn, x):
    """Compare autograd against central differences of ``fn`` (float64)."""
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    num = central_diff(lambda a: float(fn(torch.tensor(a, dtype=torch.float64))), x, h=1e-5)
    return rel_error(t.grad.numpy(), num)


def test_recognition_loss_gradient(rng):
    ids = torch.tensor([[1, 0, 4, 4, 4], [2, 3, 1, 4, 4]])
    x = rng.normal(size=(2, 5, 5))
    assert _grad_check(lambda t: recognition_loss(t, ids, torch.tensor([1, 3])).total, x) < 1e-4


def test_mim_loss_gradient(rng):
    tp = torch.tensor(rng.normal(size=(2, 3, 6)))
    tl = torch.tensor(rng.normal(size=(2, 3, 4)))
    x = rng.normal(size=(2, 3, 10))

    def f(t):
        return mim_loss(t[..., :6], tp, t[..., 6:], tl, lam=0.05).total

    assert _grad_check(f, x) < 1e-4


def test_masked_char_loss_gradient(rng):
    ids = torch.tensor([[1, 0, 2, 3], [0, 0, 1, 4]])
    masked = torch.tensor([[True, False, True, False], [False, True, False, False]])
    x = rng.normal(size=(2, 4, 5))
    assert _grad_check(lambda t: masked_char_loss(t, ids, masked).total, x) < 1e-4


def test_ctc_loss_gradient(rng):
    x = rng.normal(size=(6, 4))
    assert _grad_check(lambda t: ctc_loss(t, [0, 1, 1], blank=3), x) < 1e-4


def test_ctc_batched_gradient(rng):
    x = rng.normal(size=(2, 5, 4))
    targets = torch.tensor([[0, 2], [1, 0]])
    assert _grad_check(lambda t: ctc_loss(t, targets, blank=3, target_lengths=[2, 1]), x) < 1e-4


def test_recognition_loss_worked_example():
    logits = torch.zeros(4, 3)
    logits[0, 0] = 10.0
    logits[1, 0] = 10.0
    rep = recognition_loss(logits, torch.tensor([0, 2, 1, 1]), 1)
    # row 0 confident and right, row 1 (EOS=2) confident and wrong: (~0 + ~10) / 2
    assert rep.total.item() == pytest.approx(5.0, abs=1e-3)
    assert rep.counted_positions == 2


def test_recognition_loss_uniform_logits():
    rep = recognition_loss(torch.zeros(2, 6, 5), torch.zeros(2, 6, dtype=torch.long), torch.tensor([2, 4]))
    assert rep.total.item() == pytest.approx(uniform_ce(5))


def test_recognition_loss_requires_eos_slot():
    with pytest.raises(LossInputError):
        recognition_loss(torch.zeros(3, 4), torch.zeros(3, dtype=torch.long), 3)


def test_recognition_loss_no_grad_after_first_eos(rng):
    ids = torch.tensor([2, 0, 3, 3, 3, 3])
    x = rng.normal(size=(6, 4))
    num = central_diff(lambda a: float(recognition_loss(torch.tensor(a), ids, 2).total), x)
    assert np.all(num[3:] == 0.0)
    assert np.abs(num[:3]).min(axis=1).max() > 0


def test_masked_char_loss_no_grad_at_visible(rng):
    ids = torch.tensor([0, 1, 2, 0, 3])
    x = rng.normal(size=(5, 4))
    masked = {1, 3}
    num = central_diff(lambda a: float(masked_char_loss(torch.tensor(a), ids, masked).total), x)
    for p in range(5):
        if p in masked:
            assert np.abs(num[p]).max() > 0
        else:
            assert np.all(num[p] == 0.0)


def test_masked_char_loss_needs_a_mask():
    with pytest.raises(LossInputError):
        masked_char_loss(torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 3, dtype=bool))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_ctc_matches_enumeration(M, L, V, seed):
    rng = np.random.default_rng(seed)
    blank = V
    target = rng.integers(0, V, size=L).tolist()
    x = rng.normal(size=(M, V + 1)) * 2
    if ctc_min_frames(target) > M:
        with pytest.raises(LossInputError):
            ctc_loss(torch.tensor(x), target, blank)
        return
    got = ctc_loss(torch.tensor(x), target, blank).item()
    assert got == pytest.approx(ctc_brute_force(x, target, blank), abs=1e-6)


def test_ctc_rejects_blank_in_target():
    with pytest.raises(LossInputError):
        ctc_loss(torch.zeros(4, 3), [0, 2], blank=2)


def test_ctc_infeasible_repeat():
    assert ctc_min_frames([1, 1]) == 3
    with pytest.raises(LossInputError):
        ctc_loss(torch.zeros(2, 3), [1, 1], blank=2)


def test_ctc_empty_target():
    x = torch.randn(3, 3, dtype=torch.float64)
    want = -x.log_softmax(-1)[:, 2].sum()
    assert ctc_loss(x, [], blank=2).item() == pytest.approx(want.item())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(4, 16), (8, 96), (2, 3)]))
def test_patch_target_normalized(seed, shape):
    x = torch.tensor(np.random.default_rng(seed).uniform(0, 1, size=shape), dtype=torch.float64)
    y = patch_pixel_target(x)
    assert y.mean(-1).abs().max() < 1e-6
    std = y.std(-1, unbiased=False)
    assert torch.all((std >= 0.999) & (std <= 1.001))


def test_patch_target_constant_patch_is_zero():
    y = patch_pixel_target(torch.full((1, 8), 0.7))
    assert torch.all(y.abs() < 1e-5)


def test_mim_target_latent_detached():
    pl = torch.zeros(1, 2, 3, requires_grad=True)
    tl = torch.ones(1, 2, 3, requires_grad=True)
    mim_loss(torch.zeros(1, 2, 4), torch.zeros(1, 2, 4), pl, tl).total.backward()
    assert tl.grad is None and pl.grad is not None


def test_mim_loss_components():
    rep = mim_loss(torch.ones(1, 2, 4), torch.zeros(1, 2, 4), torch.zeros(1, 2, 3), torch.full((1, 2, 3), 2.0),
                   lam=0.5)
    assert rep.components["loss_pixel"] == pytest.approx(1.0)
    assert rep.components["loss_align"] == pytest.approx(4.0)
    assert rep.total.item() == pytest.approx(3.0)
