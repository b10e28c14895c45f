import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierage import autodiff as ad
from hierage.autodiff import ContractError, NumericError, ShapeError, Tape, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=64)


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_add_mul_gradients():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    with Tape() as tape:
        loss = ad.sum_(a * b + a)
    ad.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [4.0, 5.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_broadcast_grad_is_reduced():
    a, b = leaf(np.ones((3, 2))), leaf([10.0, 20.0])
    with Tape() as tape:
        loss = ad.sum_(a * b)
    ad.backward(loss, tape)
    np.testing.assert_array_equal(b.grad, [3.0, 3.0])
    np.testing.assert_array_equal(a.grad, np.tile([10.0, 20.0], (3, 1)))


def test_shared_subexpression_accumulates():
    x = leaf(3.0)
    with Tape() as tape:
        y = x * x
        loss = y + y
    ad.backward(loss, tape)
    assert x.grad == pytest.approx(12.0)


def test_grads_accumulate_across_backward_calls():
    x = leaf([1.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum_(x * 2.0)
        ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None


def test_softmax_values():
    # oracle: math.exp over [1, 2, 3], normalised
    p = ad.softmax(Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(p.data, [0.09003057317038046, 0.24472847105479767,
                                        0.6652409557748219], rtol=0, atol=1e-15)


def test_softmax_is_shift_stable():
    p = ad.softmax(Tensor([1000.0, 1001.0, 1002.0]))
    np.testing.assert_allclose(p.data, ad.softmax(Tensor([0.0, 1.0, 2.0])).data, atol=1e-15)


def test_log_softmax_uniform():
    # three equal logits: each log-probability is -ln 3
    out = ad.log_softmax(Tensor([[0.5, 0.5, 0.5]]))
    np.testing.assert_allclose(out.data, -1.0986122886681098, atol=1e-15)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_incompatible_shapes():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        ad.scale(Tensor([1e308]), 10.0)


def test_backward_rejects_non_scalar():
    a = leaf([1.0, 2.0])
    with Tape() as tape:
        y = a * 2.0
    with pytest.raises(ContractError):
        ad.backward(y, tape)


def test_backward_rejects_off_tape_loss():
    a = leaf([1.0])
    with Tape():
        pass
    with pytest.raises(ContractError):
        ad.backward(ad.sum_(a), Tape())


def test_no_tape_records_nothing():
    a = leaf([1.0])
    with Tape() as tape:
        with ad.no_tape():
            ad.sum_(a * 3.0)
    assert len(tape) == 0


def test_dropout_eval_is_identity_and_train_needs_rng():
    x = Tensor(np.ones(5))
    assert ad.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ContractError):
        ad.dropout(x, 0.5, None, training=True)


def test_dropout_is_inverted():
    rng = np.random.default_rng(0)
    y = ad.dropout(Tensor(np.ones(200_000)), 0.1, rng, training=True)
    assert set(np.unique(y.data)) <= {0.0, 1.0 / 0.9}
    assert y.data.mean() == pytest.approx(1.0, abs=0.01)


def test_index_gradient_scatters_repeats():
    a = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ad.sum_(a[np.array([0, 0, 2])])
    ad.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0])


def test_grad_check_rejects_bad_eps():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        ad.grad_check(lambda: ad.sum_(x), [x], eps=1e-2)


def test_grad_check_rejects_nondeterministic():
    x = leaf([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        ad.grad_check(lambda: ad.sum_(ad.dropout(x, 0.5, rng, True) + x), [x])


def _rand(rng, *shape):
    return leaf(rng.normal(size=shape))


OPS = {
    "gelu": lambda rng: ((p := _rand(rng, 3, 4)),
                         lambda: ad.sum_(ad.gelu(p[0]) * ad.gelu(p[0]))),
    "matmul_batched": lambda rng: ((a := _rand(rng, 2, 3, 4)), (b := _rand(rng, 4, 5)),
                                   lambda: ad.sum_(ad.square(a @ b))),
    "matmul_both_batched": lambda rng: ((a := _rand(rng, 2, 3, 4)), (b := _rand(rng, 2, 4, 2)),
                                        lambda: ad.sum_(ad.square(a @ b))),
    "layer_norm": lambda rng: ((x := _rand(rng, 3, 6)), (g := _rand(rng, 6)), (b := _rand(rng, 6)),
                               lambda: ad.sum_(ad.square(ad.layer_norm(x, g, b)) * x)),
    "softmax": lambda rng: ((x := _rand(rng, 2, 5)),
                            lambda: ad.sum_(ad.softmax(x) * Tensor(np.arange(10.0).reshape(2, 5)))),
    "log_softmax": lambda rng: ((x := _rand(rng, 2, 5)),
                                lambda: ad.sum_(ad.log_softmax(x)[:, 1])),
    "reshape_transpose": lambda rng: ((x := _rand(rng, 2, 3, 4)),
                                      lambda: ad.sum_(ad.square(ad.transpose(
                                          ad.reshape(x, (6, 4)), (1, 0)) @ Tensor(np.ones((6, 1)))))),
    "concat_mean": lambda rng: ((a := _rand(rng, 2, 3)), (b := _rand(rng, 1, 3)),
                                lambda: ad.mean(ad.square(ad.concat([a, b], axis=0)), axis=0)[1]),
    "sub_neg_squared_error": lambda rng: ((a := _rand(rng, 4)), (b := _rand(rng, 4)),
                                          lambda: ad.sum_(ad.squared_error(-a, b + a * 2.0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    *params, f = OPS[name](np.random.default_rng(7))
    assert ad.grad_check(f, params, eps=1e-5) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_normalised_property(z):
    p = ad.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_sum_of_product_gradient_property(a, b):
    ta, tb = leaf(a), leaf(b)
    with Tape() as tape:
        loss = ad.sum_(ta * tb)
    ad.backward(loss, tape)
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))
