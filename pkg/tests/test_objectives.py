import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gaitssl.errors import ConfigError, NoSignalError
from gaitssl.masking import build_tc_mask
from gaitssl.objectives import LossWeights, joint_loss, lc_loss, masked_mse, tc_loss, uicd_loss


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def brute_masked_mse(target, pred, mask):
    """Double loop over masked steps and features."""
    num, count = 0.0, 0
    for i in range(len(mask)):
        if mask[i]:
            for d in range(len(target[i])):
                num += (target[i][d] - pred[i][d]) ** 2
            count += len(target[i])
    return num / count


def test_lc_examples():
    x = t([[1.0], [2.0], [3.0]])
    assert lc_loss(x, x.clone(), np.array([1, 1, 0], bool)) == 0
    pred = t([[1.0], [4.0], [3.0]])
    assert lc_loss(x, pred, np.array([0, 1, 0], bool)).item() == 4.0
    x2 = torch.zeros(2, 2, dtype=torch.float64)
    p2 = t([[1.0, 1.0], [2.0, 2.0]])
    assert lc_loss(x2, p2, np.array([1, 1], bool)).item() == 2.5


def test_tc_examples():
    target = torch.zeros(3, 1, dtype=torch.float64)
    pred = t([[100.0], [3.0], [1.0]])
    mask = build_tc_mask(1, 2, 1.0, 0)
    assert tc_loss(target, pred, mask).item() == 5.0
    assert tc_loss(target, target.clone(), mask).item() == 0.0


def test_tc_ignores_past_predictions_even_if_flagged():
    target = torch.zeros(4, 1, dtype=torch.float64)
    pred = t([[7.0], [9.0], [1.0], [1.0]])
    dense = torch.ones(4, dtype=torch.bool)
    assert tc_loss(target, pred, dense, past_len=2).item() == 1.0


def test_uicd_example_and_support_rows_ignored():
    target = torch.zeros(2, 2, 1, dtype=torch.float64)
    pred = t([[[1.0], [2.0]], [[50.0], [60.0]]])
    qmask = torch.tensor([[True, True], [False, False]])
    assert uicd_loss(target, pred, qmask, (0,)).item() == 2.5
    pred[1] = -99.0
    target[1] = 13.0
    assert uicd_loss(target, pred, qmask, (0,)).item() == 2.5


def test_uicd_rows_outside_queries_dropped_even_if_masked():
    target = torch.zeros(2, 1, 1, dtype=torch.float64)
    pred = t([[[1.0]], [[10.0]]])
    assert uicd_loss(target, pred, torch.ones(2, 1, dtype=torch.bool), (0,)).item() == 1.0


def test_empty_mask_is_absent():
    x = torch.zeros(4, 2)
    assert lc_loss(x, x + 1, np.zeros(4, bool)) is None
    assert masked_mse(x, x, torch.zeros(4, dtype=torch.bool)) == (None, 0)


def test_batch_skips_empty_samples():
    target = torch.zeros(2, 3, 1, dtype=torch.float64)
    pred = t([[[2.0], [0.0], [0.0]], [[5.0], [5.0], [5.0]]])
    mask = torch.tensor([[True, False, False], [False, False, False]])
    loss, n = masked_mse(target, pred, mask)
    assert loss.item() == 4.0 and n == 1


def test_shape_mismatch():
    with pytest.raises(ValueError):
        masked_mse(torch.zeros(3, 2), torch.zeros(3, 1), torch.ones(3, dtype=torch.bool))


@settings(max_examples=100, deadline=None)
@given(T=st.integers(1, 8), D=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_lc_matches_brute_force(T, D, seed):
    rng = np.random.default_rng(seed)
    x, p = rng.normal(size=(T, D)), rng.normal(size=(T, D))
    m = rng.random(T) < 0.5
    m[rng.integers(T)] = True
    got = lc_loss(t(x), t(p), m).item()
    assert got == pytest.approx(brute_masked_mse(x, p, m), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_loss_nonnegative_zero_iff_masked_equal(T, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, 2))
    m = np.zeros(T, bool)
    m[rng.integers(T)] = True
    p = x.copy()
    p[~m] += rng.normal(size=((~m).sum(), 2))
    assert lc_loss(t(x), t(p), m).item() == 0.0
    p[m] += 0.1
    assert lc_loss(t(x), t(p), m).item() > 0.0


def test_joint_examples():
    terms = {"lc": t(0.2), "tc": t(0.3), "uicd": t(0.5)}
    assert joint_loss(terms, LossWeights()).joint == pytest.approx(1.0)
    assert joint_loss(terms, LossWeights(1, 0, 0)).joint == pytest.approx(0.2)
    eq = {k: t(0.1) for k in ("lc", "tc", "uicd")}
    assert joint_loss(eq, LossWeights(2, 1, 1)).joint == pytest.approx(0.4)


def test_joint_absent_terms():
    rep = joint_loss({"lc": t(0.2), "tc": t(0.3), "uicd": None}, LossWeights())
    assert rep.joint == pytest.approx(0.5)
    assert not rep.present("uicd") and rep.present("lc")
    with pytest.raises(NoSignalError):
        joint_loss({"lc": None, "tc": None, "uicd": None}, LossWeights())
    with pytest.raises(NoSignalError):
        joint_loss({"lc": t(1.0)}, LossWeights(0, 1, 1))


def test_joint_scaling_scales_gradient():
    w = torch.tensor([0.5, -1.0], dtype=torch.float64, requires_grad=True)
    grads = []
    for c in (1.0, 3.0):
        terms = {"lc": (w ** 2).sum(), "tc": (w ** 3).sum(), "uicd": w.sum() ** 2}
        rep = joint_loss(terms, LossWeights(c * 1.0, c * 0.5, c * 2.0))
        (g,) = torch.autograd.grad(rep.total, w)
        grads.append(g)
    assert torch.allclose(grads[1], 3.0 * grads[0], rtol=1e-14)


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(-1, 1, 1)
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0)
