import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srupp import sru
from srupp import tensor as tc
from srupp.harness.gradcheck import gradcheck, make_instance
from srupp.sru import BI, UNI, ConfigError


def random_cell(rng, d_in, h, scale=0.5):
    cell = sru.init_cell(rng, d_in, h)
    for a in (cell.v_f, cell.v_r, cell.b_f, cell.b_r):
        a[...] = rng.normal(a.shape, scale)
    return cell


def random_layer(seed, d_in, d_h, mode=UNI):
    rng = tc.SeededRng(seed)
    p = sru.init_sru(rng, d_in, d_h, mode)
    for name, a in sru.named_params(p, mode).items():
        a[...] = rng.normal(a.shape, 0.7)
    return p


# --- projection -------------------------------------------------------------

def test_project_zero_weights():
    p = sru.init_sru(tc.SeededRng(0), 3, 2)
    p.weight[...] = 0
    u = sru.sru_project_u(p, tc.SeededRng(1).normal((4, 3)))
    assert u.shape == (4, 3, 2) and not u.any()


def test_project_scalar_case():
    p = sru.SruParams(np.ones((3, 1)), sru.init_cell(tc.SeededRng(0), 1, 1))
    u = sru.sru_project_u(p, np.array([[2.0], [3.0]]))
    assert u[:, :, 0].tolist() == [[2, 2, 2], [3, 3, 3]]


def test_project_matches_three_separate_matmuls_bitwise():
    p = random_layer(3, 2, 2)
    x = tc.SeededRng(4).normal((3, 2))
    u = sru.sru_project_u(p, x)
    w, w1, w2 = np.split(p.weight, 3)
    ref = np.stack([tc.matmul(x, m.T) for m in (w, w1, w2)], axis=1)
    assert np.array_equal(u, ref)


def test_project_dimension_mismatch():
    with pytest.raises(tc.DimensionError):
        sru.sru_project_u(random_layer(0, 3, 2), np.ones((4, 2)))


# --- recurrence -------------------------------------------------------------

def test_zero_parameter_recurrence():
    cell = sru.init_cell(tc.SeededRng(0), 3, 3)
    x = tc.SeededRng(1).normal((5, 3))
    h, tape = sru.sru_recurrence(cell, np.zeros((5, 3, 3)), x)
    assert np.array_equal(h, 0.5 * x)
    assert not tape.c.any()
    assert (tape.f == 0.5).all() and (tape.r == 0.5).all()


def test_saturated_forget_gate_carries_memory():
    rng = tc.SeededRng(2)
    cell = sru.init_cell(rng, 3, 3)
    cell.b_f[...] = 20.0
    c0 = rng.uniform(-0.5, 0.5, (3,))
    u = rng.uniform(-0.5, 0.5, (4, 3, 3))
    u[:, 0] = 0  # forget-gate pre-activation is b_f alone
    _, tape = sru.sru_recurrence(cell, u, rng.normal((4, 3)), c0=c0)
    drift = np.abs(tape.c - c0)
    # each step moves c by (1 - sigmoid(20)) * |U2 - c| <= 2.1e-9
    leak = 1 - tc.sigmoid(np.array([20.0]))[0]
    assert (drift <= leak * np.arange(1, 5)[:, None] * 1.01).all()
    assert drift.max() <= 1e-8


def test_recurrence_matches_oracle():
    rng = tc.SeededRng(3)
    cell = random_cell(rng, 3, 3)
    u, x, c0 = rng.normal((5, 3, 3)), rng.normal((5, 3)), rng.normal((3,))
    h, _ = sru.sru_recurrence(cell, u, x, c0)
    assert np.max(np.abs(h - sru.sru_recurrence_oracle(cell, u, x, c0))) <= 1e-12


def test_oracle_hand_computed_two_steps():
    # d=1: v=0, b=0, U rows [0, 0, 1] and [0, 0, 2], x = [1, -1].
    cell = sru.init_cell(tc.SeededRng(0), 1, 1)
    u = np.array([[[0.0], [0.0], [1.0]], [[0.0], [0.0], [2.0]]])
    x = np.array([[1.0], [-1.0]])
    c1 = 0.5 * 1.0            # f = 0.5, c0 = 0
    h1 = 0.5 * c1 + 0.5 * 1.0
    c2 = 0.5 * c1 + 0.5 * 2.0
    h2 = 0.5 * c2 + 0.5 * -1.0
    assert sru.sru_recurrence_oracle(cell, u, x)[:, 0].tolist() == [h1, h2]
    assert sru.sru_recurrence(cell, u, x)[0][:, 0].tolist() == [h1, h2]


def test_recurrence_with_highway_projection_matches_oracle():
    rng = tc.SeededRng(5)
    cell = random_cell(rng, 4, 2)
    assert cell.highway is not None
    u, x = rng.normal((4, 3, 2)), rng.normal((4, 4))
    h, _ = sru.sru_recurrence(cell, u, x)
    assert np.max(np.abs(h - sru.sru_recurrence_oracle(cell, u, x))) <= 1e-12


def test_non_finite_step_is_reported_with_time_index():
    cell = sru.init_cell(tc.SeededRng(0), 2, 2)
    u = np.zeros((3, 3, 2))
    u[1, 2, 0] = np.inf
    with pytest.raises(tc.NumericError, match="t=1"):
        sru.sru_recurrence(cell, u, np.zeros((3, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gates_in_open_unit_interval(seed):
    rng = tc.SeededRng(seed)
    cell = random_cell(rng, 3, 3, scale=2.0)
    _, tape = sru.sru_recurrence(cell, rng.normal((6, 3, 3), 3.0), rng.normal((6, 3)))
    for g in (tape.f, tape.r):
        assert ((g > 0) & (g < 1)).all()


# --- layer forward ----------------------------------------------------------

def test_bidirectional_requires_even_width():
    with pytest.raises(ConfigError):
        sru.init_sru(tc.SeededRng(0), 3, 5, BI)


def test_bidirectional_with_zeroed_backward_direction():
    fwd, bwd = random_layer(6, 4, 4, BI)
    x = tc.SeededRng(7).normal((5, 4))
    bwd = sru.zeros_like_params(bwd)
    h, _ = sru.sru_forward((fwd, bwd), x, BI)
    ref, _ = sru.sru_forward(fwd, x, UNI)
    assert np.array_equal(h[:, :2], ref)
    # zero highway projection -> 0.5 * (0 @ x) = 0
    assert np.array_equal(h[:, 2:], np.zeros((5, 2)))


def test_bidirectional_matches_composed_oracle():
    pair = random_layer(8, 4, 4, BI)
    x = tc.SeededRng(9).normal((4, 4))
    h, _ = sru.sru_forward(pair, x, BI)
    fwd = sru.sru_recurrence_oracle(pair[0].cell, sru.sru_project_u(pair[0], x), x)
    xr = x[::-1]
    bwd = sru.sru_recurrence_oracle(pair[1].cell, sru.sru_project_u(pair[1], xr), xr)[::-1]
    assert np.max(np.abs(h - np.concatenate([fwd, bwd], axis=1))) <= 1e-12


def test_bidirectional_reversal_symmetry_is_exact():
    fwd, bwd = random_layer(10, 3, 4, BI)
    x = tc.SeededRng(11).normal((6, 3))
    h, _ = sru.sru_forward((fwd, bwd), x, BI)
    hr, _ = sru.sru_forward((bwd, fwd), x[::-1].copy(), BI)
    assert np.array_equal(hr, np.concatenate([h[::-1, 2:], h[::-1, :2]], axis=1))


def test_unidirectional_is_causal():
    p = random_layer(12, 3, 3)
    x = tc.SeededRng(13).normal((7, 3))
    h, _ = sru.sru_forward(p, x)
    x2 = x.copy()
    x2[4:] += tc.SeededRng(14).normal((3, 3), 5.0)
    h2, _ = sru.sru_forward(p, x2)
    assert np.array_equal(h[:4], h2[:4])
    assert not np.array_equal(h[4:], h2[4:])


def test_mode_and_params_must_agree():
    with pytest.raises(ConfigError):
        sru.sru_forward(random_layer(0, 2, 2), np.ones((2, 2)), BI)


# --- backward ---------------------------------------------------------------

@pytest.mark.parametrize("mode", [UNI, BI])
def test_zero_upstream_gradient(mode):
    p = random_layer(15, 3, 4, mode)
    x = tc.SeededRng(16).normal((4, 3))
    _, tape = sru.sru_forward(p, x, mode)
    gx, grads = sru.sru_backward(tape, np.zeros((4, 4)))
    assert not gx.any() and not any(g.any() for g in grads.values())


def test_gradient_names_match_parameters():
    p = random_layer(17, 3, 4, BI)
    _, tape = sru.sru_forward(p, np.ones((3, 3)), BI)
    _, grads = sru.sru_backward(tape, np.ones((3, 4)))
    named = sru.named_params(p, BI)
    assert set(grads) == set(named)
    assert all(grads[k].shape == named[k].shape for k in named)


def test_zero_parameter_gradcheck():
    rep = gradcheck("sru", 0, zero=True)
    assert rep.max_rel_err <= 1e-6


def test_zero_parameter_input_gradient_value():
    # loss = sum(h), all parameters zero, d_in == width: dh/dx is exactly 0.5.
    inst = make_instance("sru", 1, {"d_in": 2, "d_hidden": 2, "bidirectional": False}, zero=True)
    gx, _ = inst.backward(inst.x, np.ones_like(inst.forward(inst.x)))
    assert np.array_equal(gx, np.full_like(inst.x, 0.5))


def test_random_instance_gradcheck():
    rep = gradcheck("sru", 4, {"length": 4, "d_in": 3, "d_hidden": 4})
    assert rep.passed(1e-4), rep


def test_backward_rejects_bad_shape():
    p = random_layer(0, 2, 2)
    _, tape = sru.sru_forward(p, np.ones((3, 2)))
    with pytest.raises(tc.DimensionError):
        sru.sru_backward(tape, np.ones((2, 2)))
