"""Tensor arithmetic and reverse-mode gradient tests.

Hand-derived oracle values are frozen as literals; gradient correctness is
checked against central finite differences.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finfusion import autodiff as ad
from finfusion.autodiff import (
    Tape,
    Tensor,
    backward,
    concat,
    cross_entropy,
    grad_check,
    layer_norm,
    logsumexp,
    masked_fill_logits,
    matmul,
    reduce_mean,
    reduce_sum,
    reshape,
    slice_axis,
    softmax,
    stack,
    take_rows,
    transpose,
)
from finfusion.errors import ContractError, DimensionError, NumericalError


# ---------------------------------------------------------------------------
# construction and invariants

def test_tensor_shape_times_values():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.values.shape == (4,)
    assert np.prod(t.shape) == len(t.values)


def test_leaf_allocates_grad_buffer():
    t = Tensor([1.0, 2.0], requires_grad=True)
    assert t.grad is not None
    assert t.grad.shape == t.data.shape
    assert np.all(t.grad == 0.0)


def test_non_leaf_has_no_grad_buffer():
    t = Tensor([1.0, 2.0])
    assert t.grad is None


def test_nan_input_rejected():
    with pytest.raises(NumericalError):
        Tensor([1.0, float("nan")])


def test_inf_produced_by_op_rejected():
    x = Tensor([1000.0])
    with pytest.raises(NumericalError):
        ad.exp(x)


def test_log_of_negative_rejected():
    with pytest.raises(NumericalError):
        ad.log(Tensor([-1.0]))


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(eye, m)
    assert np.array_equal(out.data, m.data)


def test_matmul_hand_value():
    # 1*3 + 2*4 = 11
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.shape == (1, 1)
    assert out.item() == 11.0


def test_matmul_zero():
    z = Tensor(np.zeros((2, 3)))
    m = Tensor(np.arange(12.0).reshape(3, 4))
    assert np.all(matmul(z, m).data == 0.0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3, 5))
    b = rng.normal(size=(4, 5, 2))
    out = matmul(Tensor(a), Tensor(b))
    for i in range(4):
        assert np.allclose(out.data[i], a[i] @ b[i])


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_stability():
    out = softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] > 0.999999
    assert out.data[1] < 1e-6


def test_softmax_ln2():
    out = softmax(Tensor([math.log(2.0), 0.0]))
    assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_slices_sum_to_one():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 9)))
    out = softmax(x, axis=-1)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 6))
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + 123.456)).data
    assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# layer_norm

def _ln(x, gain=None, bias=None):
    d = np.shape(x)[-1]
    g = Tensor(np.ones(d)) if gain is None else Tensor(gain)
    b = Tensor(np.zeros(d)) if bias is None else Tensor(bias)
    return layer_norm(Tensor(x), g, b)


def test_layer_norm_constant_vector():
    out = _ln([5.0, 5.0, 5.0])
    assert np.allclose(out.data, 0.0, atol=1e-2)


def test_layer_norm_already_normalized():
    out = _ln([1.0, -1.0])
    assert np.allclose(out.data, [1.0, -1.0], atol=1e-4)


def test_layer_norm_gain_zero_gives_bias():
    out = _ln([3.0, 1.0, 4.0], gain=[0.0, 0.0, 0.0], bias=[7.0, 7.0, 7.0])
    assert np.allclose(out.data, 7.0)


def test_layer_norm_output_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 16)) * 4 + 2
    out = _ln(x)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)


# ---------------------------------------------------------------------------
# cross_entropy

def test_cross_entropy_confident_correct():
    logits = Tensor([[100.0, 0.0, 0.0]])
    out = cross_entropy(logits, [0])
    assert out.item() < 1e-6


def test_cross_entropy_uniform_four_classes():
    logits = Tensor([[0.0, 0.0, 0.0, 0.0]])
    out = cross_entropy(logits, [2])
    assert abs(out.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_two_zeros():
    out = cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert abs(out.item() - math.log(2.0)) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_is_mean_over_rows():
    logits = Tensor([[100.0, 0.0], [0.0, 0.0]])
    out = cross_entropy(logits, [0, 0])
    assert abs(out.item() - math.log(2.0) / 2.0) < 1e-9


# ---------------------------------------------------------------------------
# backward

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    backward(loss, tape)
    assert x.grad == pytest.approx(6.0)


def test_backward_matmul_matches_fd():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)))

    def f(t):
        return reduce_sum(matmul(t, b))

    assert grad_check(f, a, eps=1e-4) < 1e-6


def test_backward_detached_leaf_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(y * y)
    backward(loss, tape)
    assert np.all(x.grad == 0.0)
    assert y.grad[0] == pytest.approx(6.0)


def test_backward_accumulates_across_calls():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    backward(loss, tape)
    backward(loss, tape)
    assert x.grad == pytest.approx(8.0)


def test_backward_rejects_vector_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = x * x
    with pytest.raises(ContractError):
        backward(loss, tape)


def test_backward_fanout_sums_adjoints():
    # loss = x*x + 3x => grad 2x + 3
    x = Tensor(5.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x + x * 3.0
    backward(loss, tape)
    assert x.grad == pytest.approx(13.0)


def test_chain_rule_composition():
    # d/dx tanh(x^2) = (1 - tanh^2(x^2)) * 2x at x = 0.7
    x = Tensor(0.7, requires_grad=True)
    with Tape() as tape:
        loss = ad.tanh(x * x)
    backward(loss, tape)
    expected = (1.0 - math.tanh(0.49) ** 2) * 1.4
    assert x.grad == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# grad_check harness

def test_grad_check_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    err = grad_check(lambda t: reduce_sum(t * t), x, eps=1e-4)
    assert err < 1e-6


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    err = grad_check(lambda t: cross_entropy(t, [0, 3, 1, 4]), x, eps=1e-4)
    assert err < 1e-4


def test_grad_check_restores_grad_state():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.grad[...] = [9.0, 9.0]
    grad_check(lambda t: reduce_sum(t * t), x)
    assert np.all(x.grad == 9.0)


# ---------------------------------------------------------------------------
# per-op finite-difference sweep

_UNARY_OPS = [
    ("exp", ad.exp, (-1.0, 1.0)),
    ("log", ad.log, (0.2, 3.0)),
    ("sqrt", ad.sqrt, (0.2, 3.0)),
    ("tanh", ad.tanh, (-2.0, 2.0)),
    ("sigmoid", ad.sigmoid, (-3.0, 3.0)),
    ("relu", ad.relu, (0.3, 2.0)),
    ("leaky_relu", ad.leaky_relu, (-2.0, -0.3)),
    ("elu", ad.elu, (-2.0, 2.0)),
]


@pytest.mark.parametrize("name,op,box", _UNARY_OPS, ids=[n for n, _, _ in _UNARY_OPS])
def test_unary_gradients(name, op, box):
    rng = np.random.default_rng(hash(name) % (2**32))
    lo, hi = box
    raw = rng.uniform(lo, hi, size=(3, 4))
    # keep relu/elu away from the kink where fd is invalid
    if name in ("relu", "leaky_relu", "elu"):
        raw = np.where(np.abs(raw) < 0.05, 0.3, raw)
    x = Tensor(raw, requires_grad=True)
    err = grad_check(lambda t: reduce_sum(op(t)), x, eps=1e-5)
    assert err < 1e-6, f"{name} gradient error {err}"


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(33)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        assert grad_check(lambda t: reduce_sum(op(t, b)), a) < 1e-6
        assert grad_check(lambda t: reduce_sum(op(a, t)), b) < 1e-6


def test_broadcast_rejects_leading_mismatch():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))


def test_reduce_and_shape_gradients():
    rng = np.random.default_rng(44)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w1 = rng.normal(size=(3, 4))
    w2 = rng.normal(size=(3, 4))
    cases = [
        lambda t: reduce_sum(t),
        lambda t: reduce_mean(t, axis=0).sum(),
        lambda t: reduce_sum(t, axis=1, keepdims=True).mean(),
        lambda t: logsumexp(t, axis=-1).sum(),
        lambda t: reduce_sum(reshape(t, (2, 6)) * 2.0),
        lambda t: reduce_sum(transpose(t) * 1.5),
        lambda t: reduce_sum(slice_axis(t, 1, 1, 3)),
        lambda t: reduce_sum(concat([t, t], axis=0)),
        lambda t: reduce_sum(softmax(t, axis=-1) * w1),
        lambda t: reduce_sum(layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))) * w2),
    ]
    for i, f in enumerate(cases):
        err = grad_check(f, x)
        assert err < 1e-5, f"case {i} gradient error {err}"


def test_take_rows_gradient_scatter_adds():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        picked = take_rows(table, [0, 2, 0])
        loss = reduce_sum(picked)
    backward(loss, tape)
    assert np.array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        take_rows(Tensor(np.zeros((3, 2))), [3])


def test_logsumexp_stability():
    out = logsumexp(Tensor([1000.0, 1000.0]), axis=-1)
    assert out.item() == pytest.approx(1000.0 + math.log(2.0))


def test_stack_builds_new_axis():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    out = stack([a, b], axis=0)
    assert out.shape == (2, 2)
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_masked_fill_removes_weight():
    logits = Tensor([5.0, 1.0, 3.0])
    masked = masked_fill_logits(logits, np.array([True, False, True]))
    w = softmax(masked).data
    assert w[1] == 0.0
    assert np.allclose(w.sum(), 1.0)
    # weights over surviving entries match softmax of the reduced problem
    ref = softmax(Tensor([5.0, 3.0])).data
    assert np.allclose([w[0], w[2]], ref, atol=1e-15)


# ---------------------------------------------------------------------------
# determinism and properties

def test_ops_deterministic():
    rng = np.random.default_rng(55)
    x = rng.normal(size=(4, 4))
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x)).data
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_softmax_sums_to_one_property(xs):
    out = softmax(Tensor(xs))
    assert abs(out.data.sum() - 1.0) < 1e-6
    assert np.all(out.data >= 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_add_mul_grads_property(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    err = grad_check(lambda t: reduce_sum(t * t + ad.log(t)), x)
    assert err < 1e-5
