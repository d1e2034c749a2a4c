"""Tensor-core tests: primitive correctness, gradient exactness, contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deliblab import autodiff as ad
from deliblab.autodiff import Tape, Tensor, backward, finite_diff_check
from deliblab.errors import ContractError, NumericDomainError, \
    VerificationInvalidError


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def test_matmul_identity():
    a = Tensor(rng(1).normal(size=(3, 5)))
    out = ad.matmul(ad.const(np.eye(3)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_softmax_uniform():
    out = ad.softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-15)


def test_tanh_odd_at_origin():
    assert ad.tanh(Tensor([[0.0]])).item() == 0.0


def test_sum_gradient_is_ones():
    x = Tensor(rng(2).normal(size=(2, 4)))
    with Tape():
        loss = ad.reduce_sum(x)
        g = backward(loss, {"x": x})
    np.testing.assert_array_equal(g["x"], np.ones((2, 4)))


def test_softmax_cross_entropy_gradient_at_uniform():
    # d/dlogits of -log softmax(logits)[k] at logits=0 is 1/V - onehot(k)
    V, k = 5, 2
    logits = Tensor(np.zeros((1, V)))
    with Tape():
        loss = ad.scale(ad.pick(ad.log_softmax(logits), 0, k), -1.0)
        g = backward(loss, {"logits": logits})
    expected = np.full((1, V), 1.0 / V)
    expected[0, k] -= 1.0
    np.testing.assert_allclose(g["logits"], expected, atol=1e-12)


def test_quadratic_finite_diff():
    x = Tensor([[1.0, 2.0]])

    def f(params):
        return ad.reduce_sum(params["x"] * params["x"])

    rep = finite_diff_check(f, {"x": x}, step=1e-5, tol=1e-8)
    assert rep.passed
    with Tape():
        g = backward(f({"x": x}), {"x": x})
    np.testing.assert_allclose(g["x"], [[2.0, 4.0]], atol=1e-12)


def test_constant_function_zero_gradient():
    x = Tensor([[0.3, -0.5]])

    def f(params):
        return ad.const(np.array([[7.0]])) + ad.scale(ad.reduce_sum(params["x"]), 0.0)

    rep = finite_diff_check(f, {"x": x}, tol=1e-9)
    assert rep.passed


PRIM_CASES = [
    ("add", lambda p: ad.add(p["a"], p["b"]), (3, 4), (3, 4)),
    ("add_row", lambda p: ad.add(p["a"], p["b"]), (3, 4), (1, 4)),
    ("sub", lambda p: ad.sub(p["a"], p["b"]), (2, 3), (2, 3)),
    ("mul", lambda p: ad.mul(p["a"], p["b"]), (3, 4), (3, 4)),
    ("mul_row", lambda p: ad.mul(p["a"], p["b"]), (3, 4), (1, 4)),
    ("matmul", lambda p: ad.matmul(p["a"], p["b"]), (3, 4), (4, 2)),
    ("tanh", lambda p: ad.tanh(p["a"]), (2, 5), None),
    ("sigmoid", lambda p: ad.sigmoid(p["a"]), (2, 5), None),
    ("exp", lambda p: ad.exp(p["a"]), (2, 3), None),
    ("transpose", lambda p: ad.transpose(p["a"]), (2, 3), None),
    ("softmax", lambda p: ad.softmax(p["a"]), (3, 4), None),
    ("log_softmax", lambda p: ad.log_softmax(p["a"]), (3, 4), None),
    ("scale", lambda p: ad.scale(p["a"], -2.5), (2, 3), None),
    ("slice_cols", lambda p: ad.slice_cols(p["a"], 1, 3), (2, 4), None),
    ("slice_rows", lambda p: ad.slice_rows(p["a"], 0, 2), (4, 3), None),
    ("concat_rows", lambda p: ad.concat_rows([p["a"], p["b"]]), (2, 3), (4, 3)),
    ("concat_cols", lambda p: ad.concat_cols([p["a"], p["b"]]), (2, 3), (2, 2)),
    ("pick", lambda p: ad.pick(p["a"], 1, 2), (3, 4), None),
]


@pytest.mark.parametrize("name,fn,sa,sb", PRIM_CASES, ids=[c[0] for c in PRIM_CASES])
def test_primitive_gradients_match_finite_differences(name, fn, sa, sb):
    r = rng(hash(name) % 2**32)
    params = {"a": Tensor(r.normal(size=sa) * 0.7)}
    if sb is not None:
        params["b"] = Tensor(r.normal(size=sb) * 0.7)
    out_shape = fn(params).data.shape
    w = r.normal(size=out_shape)

    def f(p):
        return ad.reduce_sum(fn(p) * ad.const(w))

    rep = finite_diff_check(f, params, step=1e-5, tol=1e-6)
    assert rep.passed, f"{name}: worst rel err {rep.worst}"


def test_embedding_gradient_accumulates_repeated_ids():
    table = Tensor(rng(5).normal(size=(4, 3)))
    with Tape():
        out = ad.embed(table, (1, 1, 2))
        g = backward(ad.reduce_sum(out), {"t": table})
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[2] = 1.0
    np.testing.assert_array_equal(g["t"], expected)


def test_straight_through_forwards_hard_and_backwards_soft():
    logits = Tensor([[0.3, 1.2, -0.5]])
    hard = np.array([[0.0, 1.0, 0.0]])
    with Tape():
        soft = ad.softmax(logits)
        out = ad.straight_through(hard, soft)
        np.testing.assert_array_equal(out.data, hard)
        w = ad.const(np.array([[1.0, 2.0, 3.0]]))
        g = backward(ad.reduce_sum(out * w), {"logits": logits})
    with Tape():
        g_soft = backward(ad.reduce_sum(ad.softmax(logits) * ad.const(
            np.array([[1.0, 2.0, 3.0]]))), {"logits": logits})
    np.testing.assert_array_equal(g["logits"], g_soft["logits"])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_softmax_rows_stochastic(n, m, seed):
    x = Tensor(rng(seed).normal(size=(n, m)) * 3)
    out = ad.softmax(x).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10**6))
def test_backward_linearity(a, b, seed):
    x = Tensor(rng(seed).normal(size=(2, 3)))

    def f(t):
        return ad.reduce_sum(ad.tanh(t))

    def g(t):
        return ad.reduce_sum(t * t)

    with Tape():
        gf = backward(f(x), {"x": x})["x"]
    with Tape():
        gg = backward(g(x), {"x": x})["x"]
    with Tape():
        combo = ad.add(ad.scale(f(x), a), ad.scale(g(x), b))
        gc = backward(combo, {"x": x})["x"]
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)


def test_replay_determinism():
    def run():
        x = Tensor(rng(7).normal(size=(3, 3)))
        with Tape():
            loss = ad.reduce_sum(ad.softmax(ad.tanh(x @ x)))
            return loss.item()

    assert run() == run()


def test_parameter_not_on_graph_gets_zeros():
    x = Tensor([[1.0, 2.0]])
    unused = Tensor([[5.0]])
    with Tape():
        g = backward(ad.reduce_sum(x), {"x": x, "u": unused})
    np.testing.assert_array_equal(g["u"], np.zeros((1, 1)))


def test_shape_mismatch_names_both_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(3, 3\)"):
        ad.add(a, b)


def test_non_scalar_loss_rejected():
    x = Tensor(np.zeros((2, 2)))
    with Tape():
        with pytest.raises(ContractError):
            backward(ad.tanh(x), {"x": x})


def test_log_domain_error():
    with pytest.raises(NumericDomainError):
        ad.log(Tensor([[1.0, -2.0]]))


def test_non_finite_literal_rejected():
    with pytest.raises(NumericDomainError):
        Tensor([[np.inf, 1.0]])


def test_exp_overflow_rejected():
    with pytest.raises(NumericDomainError):
        ad.exp(Tensor([[1000.0]]))


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("tanh", Tensor([[0.5]]))
    np.testing.assert_allclose(out.data, np.tanh(0.5))
    with pytest.raises(ContractError):
        ad.apply_primitive("frobnicate", Tensor([[1.0]]))


def test_nondeterministic_objective_rejected():
    x = Tensor([[1.0]])
    state = {"n": 0}

    def f(params):
        state["n"] += 1
        return ad.scale(params["x"], float(state["n"]))

    with pytest.raises(VerificationInvalidError):
        finite_diff_check(f, {"x": x})
