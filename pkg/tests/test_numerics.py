import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qumatl import numerics as nx


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def grad_of(fn, x):
    tape = nx.Tape()
    v = tape.parameter("x", x)
    return tape.backward(fn(v))["x"]


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nx.matmul(np.eye(2), a), a)


def test_matmul_hand_sum():
    assert np.array_equal(nx.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]])), [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(nx.matmul(a, b) - triple_loop(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ----------------------------------------------------------------- softmax


def test_softmax_symmetric_row():
    assert np.array_equal(nx.softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])


def test_softmax_large_entry():
    out = nx.softmax_rows(np.array([[1000.0, 0.0]]))
    assert abs(out[0, 0] - 1) < 1e-12 and abs(out[0, 1]) < 1e-12


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expect = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(nx.softmax_rows(x[None]) - expect)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax_rows(x)
    assert np.all(np.abs(out.sum(axis=-1) - 1) < 1e-9)
    assert np.all(out >= 0)


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row():
    out = nx.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    assert np.array_equal(out, np.zeros((1, 4)))


def test_layer_norm_normalized_row():
    out = nx.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2))
    expect = np.array([1.0, -1.0]) / math.sqrt(1.0 + nx.LAYER_NORM_EPS)
    assert np.max(np.abs(out - expect)) < 1e-12


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -2.0, 1.0])
    out = nx.layer_norm(np.random.default_rng(1).normal(size=(4, 3)), np.zeros(3), bias)
    assert np.array_equal(out, np.broadcast_to(bias, (4, 3)))


def test_layer_norm_rejects_bad_gain_shape():
    with pytest.raises(nx.ShapeError):
        nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


# ---------------------------------------------------------------- backward


def test_backward_sum_is_ones():
    assert np.array_equal(grad_of(nx.total, np.ones((2, 2))), np.ones((2, 2)))


def test_backward_quadratic_is_x():
    x = np.random.default_rng(2).normal(size=(2, 3))
    g = grad_of(lambda v: nx.mul(nx.total(nx.mul(v, v)), 0.5), x)
    assert np.max(np.abs(g - x)) < 1e-14


def test_backward_requires_scalar_loss():
    tape = nx.Tape()
    v = tape.parameter("x", np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(nx.mul(v, 2.0))


def test_backward_fills_unused_parameters_with_zeros():
    tape = nx.Tape()
    a = tape.parameter("a", np.ones(2))
    tape.parameter("b", np.ones((3, 3)))
    grads = tape.backward(nx.total(a))
    assert np.array_equal(grads["b"], np.zeros((3, 3)))


def test_backward_unbroadcasts_bias():
    rng = np.random.default_rng(3)
    x, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    tape = nx.Tape()
    bv = tape.parameter("b", b)
    g = tape.backward(nx.total(nx.mul(nx.add(x, bv), nx.add(x, bv))))["b"]
    assert np.max(np.abs(g - 2 * (x + b).sum(axis=0))) < 1e-12


OPS = {
    "matmul": lambda v, c: nx.total(nx.mul(nx.matmul(v, c["w"]), c["r"])),
    "softmax": lambda v, c: nx.total(nx.mul(nx.softmax_rows(v), c["s"])),
    "layer_norm": lambda v, c: nx.total(nx.mul(nx.layer_norm(v, c["g"], c["b"]), c["s"])),
    "gelu": lambda v, c: nx.total(nx.mul(nx.gelu(v), c["s"])),
    "log": lambda v, c: nx.total(nx.mul(nx.log_clipped(nx.add(nx.mul(v, v), 0.5)), c["s"])),
    "mean": lambda v, c: nx.total(nx.mul(nx.mean(nx.mul(v, v), axis=0), c["g"])),
    "transpose": lambda v, c: nx.total(nx.mul(nx.swap_last(v), c["t"])),
    "reshape": lambda v, c: nx.total(nx.mul(nx.reshape(v, (3, 4)), c["q"])),
    "sub": lambda v, c: nx.total(nx.mul(nx.sub(c["s"], v), v)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(4)
    consts = {
        "w": rng.normal(size=(3, 2)), "r": rng.normal(size=(4, 2)), "s": rng.normal(size=(4, 3)),
        "g": rng.normal(size=3), "b": rng.normal(size=3), "t": rng.normal(size=(3, 4)),
        "q": rng.normal(size=(3, 4)),
    }
    x = rng.normal(size=(4, 3))
    fn = OPS[name]
    analytic = grad_of(lambda v: fn(v, consts), x)
    numeric = nx.finite_diff_grad(lambda z: float(fn(z, consts)), x, 1e-5)
    assert nx.max_relative_error(analytic, numeric) < 1e-4


@pytest.mark.parametrize("which", ["gain", "bias"])
def test_layer_norm_parameter_gradients(which):
    rng = np.random.default_rng(5)
    x, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    g0, b0 = rng.normal(size=3), rng.normal(size=3)

    def f(v):
        g, b = (v, b0) if which == "gain" else (g0, v)
        return nx.total(nx.mul(nx.layer_norm(x, g, b), s))

    start = g0 if which == "gain" else b0
    analytic = grad_of(f, start)
    numeric = nx.finite_diff_grad(lambda z: float(f(z)), start, 1e-5)
    assert nx.max_relative_error(analytic, numeric) < 1e-4


# ---------------------------------------------------------- finite diffs


def test_finite_diff_of_sum():
    assert np.allclose(nx.finite_diff_grad(lambda z: float(z.sum()), np.zeros((2, 3))), 1.0)


def test_finite_diff_square():
    g = nx.finite_diff_grad(lambda z: float(z[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_agrees_with_backward_on_bilinear_form():
    rng = np.random.default_rng(6)
    a, y = rng.normal(size=(4, 4)), rng.normal(size=(4, 1))
    x = rng.normal(size=(1, 4))
    f = lambda v: nx.total(nx.matmul(nx.matmul(v, a), y))
    numeric = nx.finite_diff_grad(lambda z: float(f(z)), x, 1e-5)
    assert np.max(np.abs(grad_of(f, x) - numeric)) < 1e-6


def test_finite_diff_leaves_input_untouched():
    x = np.array([1.0, 2.0])
    before = x.copy()
    nx.finite_diff_grad(lambda z: float(np.sum(z**3)), x)
    assert np.array_equal(x, before)


# ------------------------------------------------------------ clip / adamw


def test_clip_halves_at_norm_two():
    grads = {"a": np.array([2.0, 0.0]), "b": np.array([0.0])}
    out = nx.clip_global_norm(grads, 1.0)
    assert np.allclose(out["a"], [1.0, 0.0])


def test_clip_leaves_small_norm():
    grads = {"a": np.array([0.3, 0.4])}
    assert np.array_equal(nx.clip_global_norm(grads, 1.0)["a"], grads["a"])


def test_clip_three_four():
    out = nx.clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert abs(out["a"][0] - 0.6) < 1e-15 and abs(out["b"][0] - 0.8) < 1e-15


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)),
    arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 10.0),
)
def test_clip_never_exceeds_max(a, b, max_norm):
    out = nx.clip_global_norm({"a": a, "b": b}, max_norm)
    assert nx.global_norm(out) <= max_norm + 1e-12


def _one_param_state(wd):
    params = {"t": np.array([1.0])}
    return params, nx.OptimizerState.for_params(params, weight_decay=wd)


def test_adamw_zero_lr_keeps_params_but_updates_moments():
    params, state = _one_param_state(0.01)
    nx.adamw_step(params, {"t": np.array([0.5])}, state, 0.0)
    assert params["t"][0] == 1.0
    assert state.first_moment["t"][0] != 0.0 and state.second_moment["t"][0] != 0.0


def test_adamw_first_step_is_sign_step():
    params, state = _one_param_state(0.0)
    nx.adamw_step(params, {"t": np.array([1.0])}, state, 0.1)
    assert abs(params["t"][0] - 0.9) < 1e-7


def test_adamw_pure_decay():
    params, state = _one_param_state(0.01)
    nx.adamw_step(params, {"t": np.array([0.0])}, state, 0.1)
    assert abs(params["t"][0] - 0.999) < 1e-15


def test_adamw_inactive_rows_untouched():
    params = {"h": np.ones((3, 2))}
    state = nx.OptimizerState.for_params(params)
    active = {"h": np.array([True, False, True])}
    nx.adamw_step(params, {"h": np.ones((3, 2))}, state, 0.1, active)
    assert np.array_equal(params["h"][1], [1.0, 1.0])
    assert np.all(params["h"][[0, 2]] < 1.0)
    assert np.array_equal(state.first_moment["h"][1], [0.0, 0.0])


# ------------------------------------------------------------ lr schedule


def test_lr_at_warmup_end_is_base():
    assert abs(nx.lr_schedule(20, 100, 0.2, 1e-4) - 1e-4) < 1e-20


def test_lr_at_end_is_zero():
    assert nx.lr_schedule(100, 100, 0.2, 1e-4) == 0.0


def test_lr_cosine_midpoint():
    assert abs(nx.lr_schedule(60, 100, 0.2, 1e-4) - 0.5e-4) < 1e-18


def test_lr_starts_at_zero():
    assert nx.lr_schedule(0, 100, 0.2, 1e-4) == 0.0


@pytest.mark.parametrize("step,frac", [(-1, 0.2), (101, 0.2), (5, 0.0), (5, 1.0)])
def test_lr_rejects_bad_arguments(step, frac):
    with pytest.raises(ValueError):
        nx.lr_schedule(step, 100, frac, 1e-4)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 5000), st.floats(0.05, 0.95))
def test_lr_bounded(total, frac):
    base = 1e-3
    values = [nx.lr_schedule(s, total, frac, base) for s in range(0, total + 1, max(1, total // 50))]
    assert all(0.0 <= v <= base * (1 + 1e-12) for v in values)


def test_lr_continuous_at_warmup_boundary():
    below, at, above = (nx.lr_schedule(s, 1000, 0.2, 1.0) for s in (199, 200, 201))
    assert at == 1.0
    assert abs(below - at) < 1e-2 and abs(above - at) < 1e-4
