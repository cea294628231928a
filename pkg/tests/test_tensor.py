from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmnet.errors import EmptyTape, NumericalError, ShapeMismatch
from dfmnet.tensor import (
    DTYPE,
    Tape,
    Tensor,
    add,
    div,
    elementwise,
    mul,
    no_grad,
    ones_like,
    relu,
    sigmoid,
    square,
    tsum,
)


def test_add_example():
    assert add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]


def test_mul_by_ones_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    assert np.array_equal(mul(x, ones_like(x)).data, x.data)


def test_sigmoid_at_zero():
    assert sigmoid(Tensor(0.0)).item() == 0.5


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tsum(square(x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_sigmoid_gradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    tsum(sigmoid(x)).backward()
    assert x.grad.tolist() == [0.25]


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    tsum(relu(x)).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_elementwise_dispatch():
    a, b = Tensor([2.0, 4.0]), Tensor([1.0, 2.0])
    assert elementwise("add", a, b).data.tolist() == [3.0, 6.0]
    assert elementwise("relu", Tensor([-1.0, 1.0])).data.tolist() == [0.0, 1.0]
    with pytest.raises(ShapeMismatch):
        elementwise("mul", a)


def test_not_broadcastable():
    with pytest.raises(ShapeMismatch):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_non_finite_output_raises():
    big = Tensor(np.array([3e38], DTYPE))
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        add(big, big)


def test_division_by_zero_is_guarded():
    out = div(Tensor([1.0]), Tensor([0.0]))
    assert np.isfinite(out.data).all()
    assert out.item() == pytest.approx(1e8, rel=1e-6)


def test_backward_needs_a_tape():
    with pytest.raises(EmptyTape):
        Tensor([1.0], requires_grad=True).backward()
    with pytest.raises(EmptyTape):
        tsum(Tensor([1.0, 2.0])).backward()


def test_backward_needs_a_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeMismatch):
        square(x).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = square(x)
    assert not y.requires_grad and y.is_leaf


def test_tape_visits_each_leaf_once():
    # x feeds three paths; the leaf must receive the summed gradient exactly once
    x = Tensor([3.0], requires_grad=True)
    y = add(mul(x, x), x)
    tape = Tape(tsum(y))
    assert sum(1 for n in tape.leaves() if n is x) == 1
    tape.backward()
    assert x.grad.tolist() == [7.0]


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    s = square(x)
    tsum(mul(s, s)).backward()  # x^4
    assert x.grad.tolist() == [32.0]


@st.composite
def broadcast_pair(draw):
    rank = draw(st.integers(1, 4))
    shape = draw(st.lists(st.integers(1, 3), min_size=rank, max_size=rank))
    a_shape = [s if draw(st.booleans()) else 1 for s in shape]
    b_shape = [s if draw(st.booleans()) else 1 for s in shape]
    drop = draw(st.integers(0, rank - 1))
    return tuple(a_shape), tuple(b_shape[drop:])


@settings(max_examples=60, deadline=None)
@given(broadcast_pair(), st.sampled_from(["add", "mul", "sub"]))
def test_broadcasting_matches_explicit_tiling(shapes, op):
    a_shape, b_shape = shapes
    rng = np.random.default_rng(0)
    a = rng.standard_normal(a_shape).astype(DTYPE)
    b = rng.standard_normal(b_shape).astype(DTYPE)
    full = np.broadcast_shapes(a_shape, b_shape)
    ta = np.tile(a.reshape((1,) * (len(full) - a.ndim) + a.shape), [f // s for f, s in zip(full, (1,) * (len(full) - a.ndim) + a.shape)])
    tb = np.tile(b.reshape((1,) * (len(full) - b.ndim) + b.shape), [f // s for f, s in zip(full, (1,) * (len(full) - b.ndim) + b.shape)])
    got = elementwise(op, Tensor(a), Tensor(b)).data
    want = elementwise(op, Tensor(ta), Tensor(tb)).data
    assert np.array_equal(got, want)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False, width=32), min_size=1, max_size=20))
def test_finite_inputs_give_finite_outputs(values):
    x = Tensor(values)
    for op in ("relu", "sigmoid", "square"):
        assert np.isfinite(elementwise(op, x).data).all()
    assert np.all((sigmoid(x).data >= 0) & (sigmoid(x).data <= 1))


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3,)), requires_grad=True)
    tsum(mul(x, b)).backward()
    assert x.grad.shape == x.shape and b.grad.shape == b.shape
    assert b.grad.tolist() == [2.0, 2.0, 2.0]
