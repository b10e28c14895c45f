import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierage import autodiff as ad
from hierage.autodiff import NumericError, ShapeError, Tape, Tensor
from hierage.head import AgeBins
from hierage.losses import (LossWeights, cross_entropy, ensemble_l2, mean_loss, total_loss,
                            variance_loss)

BINS3 = AgeBins(np.array([1.0, 2.0, 3.0]))
POST = Tensor([[0.5, 0.25, 0.25]])


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_mean_loss_worked_example():
    # E = 1.75, (1.75 - 2)^2 / 2
    assert abs(mean_loss(POST, BINS3, [2.0]).item() - 0.03125) < 1e-12


def test_variance_loss_worked_example():
    assert abs(variance_loss(POST, BINS3).item() - 0.6875) < 1e-12


def test_mean_loss_zero_on_exact_one_hot():
    assert mean_loss(T([[0, 1, 0], [0, 0, 1]]), BINS3, [2.0, 3.0]).item() == 0.0


def test_variance_loss_zero_on_one_hot():
    assert variance_loss(T(np.eye(3)), BINS3).item() == 0.0


def test_ensemble_l2_worked_example():
    bins = AgeBins(np.array([10.0, 20.0]))
    assert ensemble_l2(T([[0.5, 0.5]]), T([[0.0, 0.0]]), bins, [15.0]).item() == 25.0


def test_ensemble_l2_exact_local_fit():
    bins = AgeBins(np.array([10.0, 20.0, 30.0]))
    p = T([[0, 1, 0]])
    r = T([[0.0, 1.5, 0.0]])
    assert ensemble_l2(p, r, bins, [21.5]).item() == 0.0
    assert ensemble_l2(p, r, bins, [21.5], mode="hard").item() == 0.0


def test_ensemble_l2_gradient_sparsity():
    rng = np.random.default_rng(0)
    bins = AgeBins.arange(20, 40, 5)
    p = Tensor(rng.dirichlet(np.ones(5), size=2))
    ages = [24.0, 31.0]
    for mode, nonzero in (("soft", 5), ("hard", 1)):
        r = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        with Tape() as tape:
            loss = ensemble_l2(p, r, bins, ages, mode=mode)
        ad.backward(loss, tape)
        assert list((r.grad != 0).sum(axis=1)) == [nonzero, nonzero]


def test_ensemble_l2_unknown_mode():
    with pytest.raises(ValueError):
        ensemble_l2(POST, T([[0, 0, 0]]), BINS3, [2.0], mode="median")


def test_cross_entropy_uniform_is_log_c():
    assert cross_entropy(T(np.zeros((2, 3))), [0, 2]).item() == pytest.approx(math.log(3), abs=1e-15)


def test_cross_entropy_saturates():
    logits = np.zeros((1, 4))
    logits[0, 1] = 50.0
    assert cross_entropy(T(logits), [1]).item() < 1e-20


def test_cross_entropy_matches_per_sample_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 5))
    y = [0, 3, 4, 1]
    per_sample = [math.log(sum(math.exp(v) for v in z[i])) - z[i, y[i]] for i in range(4)]
    assert abs(cross_entropy(T(z), y).item() - sum(per_sample) / 4) < 1e-12


@pytest.mark.parametrize("targets", [[5], [-1]])
def test_cross_entropy_index_out_of_range(targets):
    with pytest.raises(IndexError):
        cross_entropy(T(np.zeros((1, 5))), targets)


def test_length_mismatch_errors():
    with pytest.raises(ShapeError):
        mean_loss(POST, BINS3, [1.0, 2.0])
    with pytest.raises(ShapeError):
        variance_loss(T([[0.5, 0.5]]), BINS3)
    with pytest.raises(ShapeError):
        ensemble_l2(POST, T([[0.0, 0.0]]), BINS3, [2.0])


def test_total_loss_paper_weights():
    one = T(1.0)
    assert total_loss(one, one, one, one, LossWeights()).item() == pytest.approx(2.25, abs=1e-15)
    zero = T(0.0)
    assert total_loss(zero, zero, zero, zero, LossWeights()).item() == 0.0


def test_total_loss_linear_in_l2_weight():
    ce, lm, lv, l2 = T(0.7), T(1.3), T(0.4), T(2.5)
    base = total_loss(ce, lm, lv, l2, LossWeights(l2=0.0)).item()
    one = total_loss(ce, lm, lv, l2, LossWeights(l2=1.0)).item() - base
    two = total_loss(ce, lm, lv, l2, LossWeights(l2=2.0)).item() - base
    assert two == pytest.approx(2 * one, rel=1e-15)


def test_total_loss_names_non_finite_term():
    with pytest.raises(NumericError, match="variance"):
        total_loss(T(1.0), T(1.0), T(np.nan), T(1.0), LossWeights())


@pytest.mark.parametrize("bad", [-0.1, float("inf"), float("nan")])
def test_loss_weights_validate(bad):
    with pytest.raises(ValueError):
        LossWeights(ce=bad)


def _rand_problem(seed):
    rng = np.random.default_rng(seed)
    bins = AgeBins.arange(10, 30, 5)
    z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    r = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    ages = rng.uniform(10, 30, size=4)
    return bins, z, r, ages


@pytest.mark.parametrize("term", ["mean", "variance", "l2_soft", "l2_hard", "ce"])
def test_loss_gradients(term):
    bins, z, r, ages = _rand_problem(2)
    fns = {
        "mean": lambda: mean_loss(ad.softmax(z), bins, ages),
        "variance": lambda: variance_loss(ad.softmax(z), bins),
        "l2_soft": lambda: ensemble_l2(ad.softmax(z), r, bins, ages),
        "l2_hard": lambda: ensemble_l2(ad.softmax(z), r, bins, ages, mode="hard"),
        "ce": lambda: cross_entropy(z, bins.nearest(ages)),
    }
    assert ad.grad_check(fns[term], [z, r], eps=1e-5) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2 ** 32 - 1))
def test_variance_zero_iff_one_hot(c, seed):
    rng = np.random.default_rng(seed)
    bins = AgeBins.arange(0, c - 1)
    one_hot = np.eye(c)[rng.integers(c)][None]
    assert variance_loss(T(one_hot), bins).item() < 1e-9
    spread = rng.dirichlet(np.ones(c))[None]
    # any posterior with mass on two or more bins has positive variance
    assert variance_loss(T(spread), bins).item() > 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_losses_non_negative(seed):
    bins, z, r, ages = _rand_problem(seed)
    p = ad.softmax(z)
    for value in (mean_loss(p, bins, ages), variance_loss(p, bins),
                  ensemble_l2(p, r, bins, ages), cross_entropy(z, bins.nearest(ages))):
        assert value.item() >= 0.0
