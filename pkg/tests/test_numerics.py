import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgsl import numerics as nx
from dgsl.numerics import Tensor


def rand(shape, seed=0):
    return nx.Rng(seed).normal(shape)


# primitives ------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nx.matmul(a, np.eye(2))
    np.testing.assert_array_equal(out.value, a)


def test_softplus_zero():
    assert nx.softplus(0.0).item() == pytest.approx(0.6931471805599453, abs=1e-15)


def test_softplus_large_and_small_inputs_are_finite():
    v = nx.softplus(np.array([-800.0, 0.0, 800.0])).value
    assert np.all(np.isfinite(v))
    assert v[2] == pytest.approx(800.0)
    assert v[0] >= 0


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(nx.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(nx.ShapeError, match="add"):
        nx.add(np.zeros(3), np.zeros(4))


def test_log_is_clamped():
    assert nx.log(0.0).item() == pytest.approx(math.log(1e-12))


def test_sigmoid_is_clamped():
    v = nx.sigmoid(np.array([-100.0, 100.0])).value
    assert v[0] == pytest.approx(1e-7)
    assert v[1] == pytest.approx(1 - 1e-7)


UNARY = {
    "exp": lambda x: nx.exp(x).sum(),
    "log": lambda x: nx.log(nx.exp(x) + 0.5).sum(),
    "softplus": lambda x: nx.softplus(x).sum(),
    "sigmoid": lambda x: (nx.sigmoid(x, clamp=False) * x).sum(),
    "mean": lambda x: (nx.mean(x, axis=0) * nx.mean(x, axis=0)).sum(),
    "square": lambda x: nx.square(x).sum(),
    "sqrt": lambda x: nx.sqrt(nx.exp(x)).sum(),
    "transpose": lambda x: (nx.transpose(x) @ x).sum(),
    "softmax": lambda x: (nx.softmax(x, axis=1) * Tensor(np.arange(x.shape[1]))).sum(),
    "log_softmax": lambda x: (nx.log_softmax(x, axis=0) * nx.log_softmax(x, axis=0)).sum(),
    "concat": lambda x: (nx.concat([x, x * x], axis=1) * nx.concat([x, x], axis=1)).sum(),
    "stack": lambda x: (nx.stack([x, nx.exp(x)]) * nx.stack([x, x])).sum(),
    "broadcast": lambda x: (nx.broadcast_to(nx.sum_(x, axis=0, keepdims=True), x.shape) * x).sum(),
    "take_rows": lambda x: (nx.take_rows(x, [0, 0, x.shape[0] - 1]) * nx.take_rows(x, [1, 0, 1])).sum(),
    "segment_sum": lambda x: (nx.segment_sum(x, np.arange(x.shape[0]) % 2, 2) * nx.segment_sum(x, np.arange(x.shape[0]) % 2, 2)).sum(),
    "where": lambda x: nx.where(x.value > 0, x * x, nx.exp(x)).sum(),
    "div": lambda x: (x / (nx.exp(x) + 1.0)).sum(),
    "clamp": lambda x: (nx.clamp(x, -0.5, 0.5) * x).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(name, seed):
    r = nx.Rng(seed)
    n, m = 2 + int(r.integers(0, 7)), 2 + int(r.integers(0, 7))
    x = r.normal((n, m))
    if name == "clamp":
        x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x + 0.01, x)  # stay off the kinks
    if name == "where":
        x = np.where(np.abs(x) < 1e-3, 0.1, x)
    assert nx.finite_diff_check(UNARY[name], x) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_binary_primitive_gradients(seed):
    r = nx.Rng(seed)
    a, b = r.normal((4, 3)), r.normal((3, 5))
    c = r.normal((1, 5))
    assert nx.finite_diff_check(lambda x: ((x @ b) * (x @ b + c)).sum(), a) < 1e-5
    assert nx.finite_diff_check(lambda y: nx.exp(Tensor(a) @ y * 0.3).sum(), b) < 1e-5
    assert nx.finite_diff_check(lambda z: ((Tensor(a) @ b) - z * z).sum(), c) < 1e-5
    batched, other = r.normal((3, 2, 4)), Tensor(r.normal((3, 4, 2)))
    assert nx.finite_diff_check(lambda x: nx.exp(0.3 * (x @ other)).sum(), batched) < 1e-5


def test_composite_equals_chained_vjps():
    x0 = rand((5, 4), 3)
    W = rand((4, 3), 4)
    x = Tensor(x0, requires_grad=True)
    nx.sigmoid(x @ W, clamp=False).sum().backward()
    s = 1 / (1 + np.exp(-(x0 @ W)))
    manual = (s * (1 - s)) @ W.T
    np.testing.assert_allclose(x.grad, manual, rtol=0, atol=1e-12)


def test_gradient_accumulates_over_reused_nodes():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert x.grad[0] == pytest.approx(2 * 2.0 + 3 * 4.0)


# finite_diff_check -----------------------------------------------------------------

def test_fd_check_half_norm():
    assert nx.finite_diff_check(lambda x: 0.5 * (x * x).sum(), np.array([3.0, -1.0]), h=1e-5) < 1e-6


def test_fd_check_linear_is_exact():
    c = np.array([0.5, -2.0, 3.0])
    assert nx.finite_diff_check(lambda x: (x * c).sum(), np.array([1.0, 2.0, -1.0])) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_reports_nonfinite_coordinate():
    with pytest.raises(nx.NonFiniteError, match=r"\(1,\)"):
        nx.finite_diff_check(lambda x: nx.log(x, floor=0.0).sum(), np.array([1.0, 1e-4]), h=1e-3)


def test_fd_check_detects_wrong_gradient():
    def bad(x):
        return nx.make_op(np.sum(x.value**2), (x,), lambda g: (g * x.value,), "bad")

    assert nx.finite_diff_check(bad, np.array([1.0, 2.0])) > 0.4


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda x: x.sum(), np.ones(2), h=0.0)


def test_param_group_errors_are_per_tensor():
    a = Tensor(rand((3,), 1), requires_grad=True, name="a")
    b = Tensor(rand((2, 3), 2), requires_grad=True, name="b")
    errs = nx.param_group_errors(lambda: nx.exp(b @ a).sum(), [a, b])
    assert set(errs) == {"a", "b"}
    assert max(errs.values()) < 1e-6


# Adam -----------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    nx.adam_step(p, [np.zeros(2)], nx.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step():
    p = [np.array([1.0])]
    nx.adam_step(p, [np.array([1.0])], nx.AdamState(), lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    assert p[0][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_two_steps_match_hand_trace():
    # hand trace with g = 1 then g = 0.5, lr = 0.1, betas (0.9, 0.999), eps 1e-8
    m1, v1 = 0.1, 0.001
    p1 = 1.0 - 0.1 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1 * 0.5, 0.999 * v1 + 0.001 * 0.25
    p2 = p1 - 0.1 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    p, state = [np.array([1.0])], nx.AdamState()
    nx.adam_step(p, [np.array([1.0])], state, lr=0.1)
    nx.adam_step(p, [np.array([0.5])], state, lr=0.1)
    assert p[0][0] == pytest.approx(p2, abs=1e-15)
    assert state.step == 2


def test_adam_nonfinite_gradient_leaves_params_untouched():
    p = [np.array([1.0]), np.array([2.0])]
    state = nx.AdamState()
    with pytest.raises(nx.NonFiniteError):
        nx.adam_step(p, [np.array([1.0]), np.array([np.nan])], state)
    assert p[0][0] == 1.0 and p[1][0] == 2.0 and state.step == 0


def test_adam_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.adam_step([np.zeros(2)], [np.zeros(3)], nx.AdamState())


# RNG and Gumbel -----------------------------------------------------------------------

def test_rng_determinism():
    a, b = nx.Rng(7), nx.Rng(7)
    np.testing.assert_array_equal(a.normal(50), b.normal(50))
    np.testing.assert_array_equal(a.child(3, 1).random(5), b.child(3, 1).random(5))


def test_rng_children_are_independent_of_order():
    r = nx.Rng(1)
    first = r.child(2).random(4)
    r.child(1).random(100)
    np.testing.assert_array_equal(first, nx.Rng(1).child(2).random(4))
    assert not np.array_equal(r.child(1).random(4), r.child(2).random(4))


def test_gumbel_at_half():
    assert nx.gumbel_transform(0.5) == pytest.approx(-math.log(math.log(2.0)), abs=1e-15)
    assert nx.gumbel_transform(0.5) == pytest.approx(0.36651, abs=1e-5)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_gumbel_monotone_and_finite(u1, u2):
    g1, g2 = nx.gumbel_transform(u1), nx.gumbel_transform(u2)
    assert np.isfinite(g1) and np.isfinite(g2)
    if u1 < u2 and 1e-12 < u2 and u1 < 1 - 1e-12:
        assert g1 < g2


def test_gumbel_mean_is_euler_mascheroni():
    g = nx.gumbel_sample(nx.Rng(0), 100_000)
    assert abs(g.mean() - 0.5772156649) < 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_matmul_grad_property(seed, n, m):
    r = nx.Rng(seed)
    a, b = r.normal((n, m)), r.normal((m, 3))
    assert nx.finite_diff_check(lambda x: nx.exp(0.2 * (x @ b)).sum(), a) < 1e-5


def test_param_group_errors_group_scale():
    # a coordinate whose true gradient is tiny next to the loss: elementwise error explodes, group error does not
    a = Tensor(np.array([1.0, 1e-4]), requires_grad=True, name="a")
    loss = lambda: (a * np.array([1.0, 1e-9])).sum() + 1e3
    assert nx.param_group_errors(loss, [a], h=1e-6)["a"] > 1e-3
    assert nx.param_group_errors(loss, [a], h=1e-6, scale="group")["a"] < 1e-6
    with pytest.raises(ValueError):
        nx.param_group_errors(loss, [a], scale="bogus")
