import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agmm.data import Rng
from agmm.mlp import (
    AdamState,
    MlpModel,
    ProjectionSpec,
    adam_step,
    adam_update,
    forward,
    forward_vjp,
    grad_theta_forward,
    init_params,
    n_params,
)

widths_st = st.lists(st.integers(1, 8), min_size=0, max_size=3).map(lambda h: (1, *h, 1))


def naive_forward(widths, theta, w):
    # oracle: explicit loops over layers with weights unpacked by hand
    a = np.asarray(w, float).reshape(-1, 1)
    pos = 0
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        W = theta[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = theta[pos : pos + fan_out]
        pos += fan_out
        a = a @ W.T + b
        if i < len(widths) - 2:
            a = np.maximum(a, 0)
    return a[:, 0]


def fd_grad(widths, theta, w, cot, eps=1e-6):
    g = np.zeros_like(theta)
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += eps
        tm[j] -= eps
        g[j] = cot @ (naive_forward(widths, tp, w) - naive_forward(widths, tm, w)) / (2 * eps)
    return g


@given(widths_st)
def test_param_count(widths):
    assert n_params(widths) == sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


@given(widths_st, st.integers(0, 2**32))
def test_forward_matches_naive(widths, seed):
    rng = Rng(seed)
    m = MlpModel(widths, rng.normal(n_params(widths)))
    w = rng.normal(17)
    assert np.allclose(forward(m, w), naive_forward(widths, m.theta, w), rtol=1e-12, atol=1e-12)


@given(widths_st, st.integers(0, 2**32))
def test_vjp_vs_finite_differences(widths, seed):
    rng = Rng(seed)
    m = MlpModel(widths, rng.normal(n_params(widths)))
    w, cot = rng.normal(9), rng.normal(9)
    _, g = forward_vjp(m, w, cot)
    fd = fd_grad(widths, m.theta, w, cot)
    scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-8)
    assert np.linalg.norm(g - fd) / scale < 1e-4


@given(widths_st, st.integers(0, 2**32))
def test_jacobian_consistent_with_vjp(widths, seed):
    rng = Rng(seed)
    m = MlpModel(widths, rng.normal(n_params(widths)))
    w, cot = rng.normal(6), rng.normal(6)
    J = grad_theta_forward(m, w)
    assert J.shape == (6, m.p)
    assert np.allclose(cot @ J, forward_vjp(m, w, cot)[1], atol=1e-10)


def test_scalar_forward():
    m = init_params((1, 4, 1), Rng(0))
    assert isinstance(forward(m, 0.3), float)


def test_init_glorot_bounds_and_zero_bias():
    m = init_params((1, 100, 100, 1), Rng(1))
    for i, (W, b) in enumerate(m.layers()):
        limit = np.sqrt(6 / (W.shape[0] + W.shape[1]))
        assert np.all(np.abs(W) <= limit)
        assert np.all(b == 0)


def test_bad_widths():
    with pytest.raises(ValueError):
        MlpModel((2, 3, 1), np.zeros(n_params((2, 3, 1))))
    with pytest.raises(ValueError):
        MlpModel((1, 3, 1), np.zeros(3))


def test_json_roundtrip(tmp_path):
    m = init_params((1, 5, 1), Rng(2))
    p = tmp_path / "m.json"
    m.save(p)
    back = MlpModel.load(p)
    assert back.widths == m.widths and np.array_equal(back.theta, m.theta)
    json.loads(p.read_text())


def test_adam_first_step_is_lr_sign():
    # bias-corrected first step is -lr * g/|g| up to eps
    st_ = AdamState.zeros(3)
    out = adam_update(np.zeros(3), st_, np.array([2.0, -0.5, 1e-3]), 0.1)
    assert np.allclose(out, [-0.1, 0.1, -0.1], atol=1e-6)
    assert st_.t == 1


def test_adam_matches_reference_sequence():
    rng = Rng(4)
    grads = rng.normal((5, 4))
    p, state = np.zeros(4), AdamState.zeros(4)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(grads, 1):
        p = adam_update(p, state, g, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p, ref, rtol=1e-12, atol=1e-15)


def test_adam_rejects_nonfinite():
    with pytest.raises(FloatingPointError, match="coordinate 1"):
        adam_update(np.zeros(2), AdamState.zeros(2), np.array([0.0, np.inf]), 0.1)


@given(st.floats(0.1, 10))
def test_projection_bounds_norm(radius):
    m = init_params((1, 6, 1), Rng(0))
    new, _ = adam_step(m, AdamState.zeros(m.p), np.full(m.p, -1.0), 100.0, ProjectionSpec(radius))
    assert np.linalg.norm(new.theta) <= radius * (1 + 1e-12)


def test_projection_rejects_bad_radius():
    with pytest.raises(ValueError):
        ProjectionSpec(0.0)
