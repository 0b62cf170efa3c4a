import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_model
from qlpv_rci.ccpoly import box_template
from qlpv_rci.control import (ClosedLoopTrace, StateOutsideSet, closed_loop, piecewise_reference,
                              tracking_control)
from qlpv_rci.plantlab import DuffingPlant
from qlpv_rci.qlpv import blend, scheduling
from qlpv_rci.rci import InputConstraints

TPL = box_template(2)
UC = InputConstraints.box([-1.0], [1.0])
Q = np.ones(4)  # X(q) is the unit box


@pytest.fixture(scope="module")
def model():
    return random_model(np.random.default_rng(3), n_p=2).to_numpy()


def frozen(model, z):
    p = scheduling(model, z)
    return blend(model.A, p), blend(model.B, p), blend(model.L, p)


def test_origin(model):
    res = tracking_control(model, Q, TPL, UC, np.zeros(2), [0.0], [0.0])
    assert res.status == "Optimal"
    np.testing.assert_allclose(res.u, 0.0, atol=1e-9)
    assert res.cost <= 1e-16


def test_least_squares_oracle(model):
    z, y = np.array([0.1, -0.05]), np.array([0.02])
    A, B, L = frozen(model, z)
    C = np.asarray(model.C)
    drift = A @ z + L @ (y - C @ z)
    r = C @ (drift + B @ [0.3])  # reachable, inside X and U
    u_ls = np.linalg.lstsq(C @ B, r - C @ drift, rcond=None)[0]
    res = tracking_control(model, Q, TPL, UC, z, y, r)
    np.testing.assert_allclose(res.u, u_ls, atol=1e-8)
    assert res.cost <= 1e-14


@pytest.mark.parametrize("r", [100.0, -100.0])
def test_far_reference_saturates(model, r):
    res = tracking_control(model, Q, TPL, UC, np.zeros(2), [0.0], [r])
    assert res.status == "Optimal"
    on_facet = np.max(TPL.F @ res.z_plus - Q)
    on_u = np.max(UC.Hu @ res.u - UC.hu)
    assert max(on_facet, on_u) >= -1e-7  # something is active
    assert on_facet <= 1e-7 and on_u <= 1e-9


def test_infeasible_surfaced(model):
    res = tracking_control(model, 0.01 * Q, TPL, UC, np.zeros(2), [1e4], [0.0])
    assert res.status == "Infeasible" and "X(q)" in res.detail
    assert np.all(np.isnan(res.u))


def test_state_outside_set(model):
    with pytest.raises(StateOutsideSet):
        tracking_control(model, Q, TPL, UC, [1.5, 0.0], [0.0], [0.0])
    with pytest.raises(StateOutsideSet):
        closed_loop(DuffingPlant(), model, Q, TPL, UC, np.zeros((3, 1)), z0=[0.0, 2.0])


@given(st.integers(0, 10_000))
def test_control_invariants(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_p=2)
    z = rng.uniform(-1, 1, 2)
    res = tracking_control(m, Q, TPL, UC, z, rng.normal(size=1), rng.normal(size=1) * 3)
    if res.status == "Optimal":
        assert np.all(UC.Hu @ res.u <= UC.hu + 1e-9)
        assert np.all(TPL.F @ res.z_plus <= Q + 1e-7)


def test_closed_loop_zero_steps(model):
    tr = closed_loop(DuffingPlant(), model, Q, TPL, UC, np.zeros((5, 1)), T=0)
    assert len(tr) == 0 and tr.z.shape == (1, 2) and tr.failed_at is None
    with pytest.raises(ValueError):
        closed_loop(DuffingPlant(), model, Q, TPL, UC, np.zeros((5, 1)), T=6)


def test_closed_loop_trace_invariants(model):
    r = piecewise_reference([0.2, -0.2], 10, 40)
    tr = closed_loop(DuffingPlant(), model, 2 * Q, TPL, UC, r)
    n = len(tr)
    assert tr.x.shape == (n + 1, 2) and tr.z.shape == (n + 1, 2) and len(tr.status) == n
    assert tr.failed_at is None or tr.failed_at == n
    assert np.all(tr.u @ UC.Hu.T <= UC.hu + 1e-9)
    assert np.all(tr.z @ TPL.F.T <= 2 * Q + 1e-7)


def test_trace_csv(tmp_path):
    tr = ClosedLoopTrace(np.zeros((3, 2)), np.array([[0.1], [1 / 3]]), np.array([[0.0, 1.0]] * 3),
                         np.array([[0.5], [-0.25]]), np.array([[0.0], [0.2]]),
                         ["Optimal", "Optimal"])
    p = tmp_path / "t.csv"
    tr.to_csv(p, comment="run=x")
    lines = p.read_text().splitlines()
    assert lines[0] == "# run=x"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["t", "y1", "r1", "u1", "z1", "z2", "status"]
    assert rows[2] == ["1", repr(1 / 3), "0.2", "-0.25", "0.0", "1.0", "Optimal"]


def test_piecewise_reference():
    r = piecewise_reference([1.0, -1.0, 0.5], 2, 7)
    np.testing.assert_array_equal(r[:, 0], [1, 1, -1, -1, 0.5, 0.5, 1])
    np.testing.assert_array_equal(piecewise_reference([[1.0, 2.0]], 3, 4)[:, 0], [1, 1, 1, 2])
