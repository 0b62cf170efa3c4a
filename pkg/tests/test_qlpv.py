import json

import jax
import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import central_fd, norm_rel_err, random_model, random_net
from qlpv_rci.qlpv import (IoDataset, QlpvModel, SchedulingNet, SimulationDivergence, bfr, blend,
                           fit_gradients, fit_loss, init_model, model_step, net_logits,
                           observer_step, scheduling, simulate)
from qlpv_rci.qpcore import lp_membership


def lti_scalar(a=0.5, b=1.0, c=1.0):
    net = SchedulingNet((np.zeros((1, 1, 1)),), (np.zeros((1, 1)),))
    return QlpvModel(np.array([[[a]]]), np.array([[[b]]]), np.array([[c]]),
                     np.zeros((1, 1, 1)), net).check()


def logit_model(bias):
    """n_p = len(bias) with a zero-weight single-layer net: logits equal ``bias``."""
    n_p = len(bias)
    net = SchedulingNet((np.zeros((n_p, 1, 2)),), (np.asarray(bias, dtype=float)[:, None],))
    A = np.zeros((n_p, 2, 2))
    return QlpvModel(A, np.zeros((n_p, 2, 1)), np.zeros((1, 2)), np.zeros((n_p, 2, 1)), net).check()


# -- scheduling / blend -----------------------------------------------------

def test_equal_logits_uniform():
    rng = np.random.default_rng(0)
    m = random_model(rng, n_p=4)
    W = tuple(np.broadcast_to(w[:1], w.shape).copy() for w in m.net.weights)
    b = tuple(np.broadcast_to(v[:1], v.shape).copy() for v in m.net.biases)
    m = m.replace(net=SchedulingNet(W, b))
    for x in rng.standard_normal((5, 2)):
        np.testing.assert_allclose(scheduling(m, x), 0.25, atol=1e-15)


def test_closed_form_softmax():
    p = scheduling(logit_model([np.log(2.0), 0.0]), np.zeros(2))
    np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_matches_direct_evaluation():
    rng = np.random.default_rng(1)
    m = random_model(rng, n_p=6, net_scale=0.5)
    for x in rng.standard_normal((10, 2)):
        z = np.asarray(net_logits(m.net, x))
        np.testing.assert_allclose(scheduling(m, x), np.exp(z) / np.exp(z).sum(), atol=1e-12)


def test_softmax_overflow_safe():
    p = scheduling(logit_model([800.0, 0.0]), np.zeros(2))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


def test_nonfinite_logits_error():
    with pytest.raises(FloatingPointError):
        scheduling(logit_model([np.inf, 0.0]), np.zeros(2))


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_scheduling_in_simplex(seed, n_p):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_p=n_p, net_scale=2.0)
    p = scheduling(m, 3 * rng.standard_normal(2))
    assert np.all(p > 0)
    assert abs(p.sum() - 1) <= 1e-12


def test_blend_examples():
    A = np.random.default_rng(2).standard_normal((2, 3, 3))
    np.testing.assert_array_equal(blend(A, [1.0, 0.0]), A[0])
    np.testing.assert_allclose(blend(np.stack([A[0], -A[0]]), [0.5, 0.5]), 0.0)
    with pytest.raises(ValueError):
        blend(A, [0.7, 0.7])


@given(st.integers(0, 10_000))
def test_blend_in_hull(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 2, 2))
    p = rng.dirichlet(np.ones(4))
    assert lp_membership(blend(A, p).ravel(), [a.ravel() for a in A])


# -- steps and simulation ---------------------------------------------------

def test_model_step_examples():
    rng = np.random.default_rng(3)
    m = random_model(rng, n_p=3)
    np.testing.assert_allclose(model_step(m, np.zeros(2), [0.0]), 0.0)
    lti = lti_scalar()
    np.testing.assert_allclose(model_step(lti, [2.0], [1.0]), [2.0])
    x, u = rng.standard_normal(2), rng.standard_normal(1)
    p = scheduling(m, x)
    np.testing.assert_allclose(model_step(m, x, u), blend(m.A, p) @ x + blend(m.B, p) @ u,
                               atol=1e-14)


def test_observer_step_examples():
    rng = np.random.default_rng(4)
    m = random_model(rng, n_p=3)
    z, u = rng.standard_normal(2), rng.standard_normal(1)
    y = np.asarray(m.C) @ z
    np.testing.assert_allclose(observer_step(m, z, u, y), model_step(m, z, u), atol=1e-14)
    m0 = m.replace(L=np.zeros_like(m.L))
    np.testing.assert_allclose(observer_step(m0, z, u, [3.0]), model_step(m0, z, u), atol=1e-14)
    yy = rng.standard_normal(1)
    p = scheduling(m, z)
    ref = blend(m.A, p) @ z + blend(m.B, p) @ u + blend(m.L, p) @ (yy - np.asarray(m.C) @ z)
    np.testing.assert_allclose(observer_step(m, z, u, yy), ref, atol=1e-14)


def test_nonfinite_step_error():
    with pytest.raises(FloatingPointError):
        model_step(lti_scalar(), [np.nan], [0.0])


@given(st.integers(0, 10_000))
def test_frozen_p_superposition(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_p=3)
    p = scheduling(m, rng.standard_normal(2))
    Ap, Bp = blend(m.A, p), blend(m.B, p)
    step = lambda x, u: Ap @ x + Bp @ u
    x1, x2, u1, u2 = (rng.standard_normal(k) for k in (2, 2, 1, 1))
    a, b = rng.standard_normal(2)
    np.testing.assert_allclose(step(a * x1 + b * x2, a * u1 + b * u2),
                               a * step(x1, u1) + b * step(x2, u2), atol=1e-12)


def test_simulate_examples():
    rng = np.random.default_rng(5)
    m = random_model(rng, n_p=2)
    X, Y = simulate(m, np.zeros(2), np.zeros((10, 1)))
    assert X.shape == (11, 2) and Y.shape == (10, 1) and np.all(X == 0)
    X, _ = simulate(lti_scalar(), [0.0], np.ones((8, 1)))
    t = np.arange(9)
    np.testing.assert_allclose(X[:, 0], 2 * (1 - 0.5 ** t), atol=1e-14)


def test_simulate_stepwise_and_deterministic():
    rng = np.random.default_rng(6)
    m = random_model(rng, n_p=3)
    U = rng.uniform(-1, 1, (50, 1))
    X, Y = simulate(m, np.zeros(2), U)
    x = np.zeros(2)
    for t in range(50):
        np.testing.assert_allclose(X[t], x, atol=1e-12)
        x = model_step(m, x, U[t])
    np.testing.assert_allclose(Y, X[:-1] @ np.asarray(m.C).T)
    X2, _ = simulate(m, np.zeros(2), U)
    assert X.tobytes() == X2.tobytes()


def test_simulate_divergence_names_step():
    with pytest.raises(SimulationDivergence, match="step"):
        simulate(lti_scalar(a=10.0), [1.0], np.zeros((30, 1)))


# -- loss and gradients -----------------------------------------------------

def test_fit_loss_examples():
    rng = np.random.default_rng(7)
    m = random_model(rng, n_p=2)
    U = rng.uniform(-1, 1, (30, 1))
    x0 = rng.standard_normal(2)
    _, Y = simulate(m, x0, U)
    assert fit_loss(m, x0, IoDataset(U, Y)) == pytest.approx(0.0, abs=1e-28)
    m0 = m.replace(C=np.zeros_like(m.C))
    Yr = rng.standard_normal((30, 1))
    assert fit_loss(m0, x0, IoDataset(U, Yr)) == pytest.approx(np.mean(Yr[:, 0] ** 2))
    Yr2 = Yr + 0.3
    X, _ = simulate(m, x0, U)
    naive = sum(float((Yr2[t, 0] - np.asarray(m.C)[0] @ X[t]) ** 2) for t in range(30)) / 30
    assert fit_loss(m, x0, IoDataset(U, Yr2)) == pytest.approx(naive, rel=1e-12)


def test_fit_gradients_zero_at_exact_fit():
    rng = np.random.default_rng(8)
    m = random_model(rng, n_p=2)
    U = rng.uniform(-1, 1, (20, 1))
    _, Y = simulate(m, np.zeros(2), U)
    _, gm, gx = fit_gradients(m, np.zeros(2), IoDataset(U, Y))
    for leaf in jax.tree_util.tree_leaves((gm, gx)):
        assert np.max(np.abs(leaf)) <= 1e-12


def test_fit_gradients_scalar_hand_chain_rule():
    # x1 = a x0 + b u0, yhat0 = c x0, yhat1 = c x1, loss = ((y0-c x0)^2 + (y1-c x1)^2)/2
    a, b, c, x0, u0, u1, y0, y1 = 0.5, 1.0, 2.0, 0.3, 0.7, -0.2, 0.4, 1.1
    m = lti_scalar(a, b, c)
    _, gm, gx = fit_gradients(m, [x0], IoDataset([[u0], [u1]], [[y0], [y1]]))
    x1 = a * x0 + b * u0
    e0, e1 = y0 - c * x0, y1 - c * x1
    assert float(gm.A[0, 0, 0]) == pytest.approx(-e1 * c * x0, rel=1e-12)
    assert float(gm.B[0, 0, 0]) == pytest.approx(-e1 * c * u0, rel=1e-12)
    assert float(gm.C[0, 0]) == pytest.approx(-(e0 * x0 + e1 * x1), rel=1e-12)
    assert float(gx[0]) == pytest.approx(-(e0 * c + e1 * c * a), rel=1e-12)
    assert np.all(np.asarray(gm.L) == 0)


@pytest.mark.parametrize("seed", range(3))
def test_fit_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_p=2)
    U = rng.uniform(-1, 1, (20, 1))
    data = IoDataset(U, rng.standard_normal((20, 1)))
    x0 = rng.standard_normal(2)
    _, gm, gx = fit_gradients(m, x0, data)
    leaves, tdef = jax.tree_util.tree_flatten(m.to_numpy())
    gleaves = jax.tree_util.tree_leaves(gm)
    for k, (leaf, g) in enumerate(zip(leaves, gleaves)):
        def f(v, k=k):
            ls = list(leaves)
            ls[k] = v
            return fit_loss(jax.tree_util.tree_unflatten(tdef, ls), x0, data)
        assert norm_rel_err(g, central_fd(f, leaf, 1e-6)) <= 1e-4
    assert norm_rel_err(gx, central_fd(lambda v: fit_loss(m, v, data), x0, 1e-6)) <= 1e-4


# -- bfr ----------------------------------------------------------------------

def test_bfr_examples():
    y = np.array([0.0, 1.0, 2.0])
    assert bfr(y, y) == 100.0
    assert bfr(y, np.full(3, y.mean())) == pytest.approx(0.0, abs=1e-12)
    assert bfr(y, [0.0, 1.0, 1.0]) == pytest.approx(100 * (1 - 1 / np.sqrt(2)))
    assert bfr(y, -10 * y) == 0.0
    with pytest.raises(ValueError):
        bfr(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        bfr([1.0], [1.0])


# -- serialization ----------------------------------------------------------

def test_model_roundtrip_bit_exact():
    m = init_model(2, 1, 1, 6, (3,), seed=3)
    m = m.replace(L=np.random.default_rng(0).standard_normal((6, 2, 1)))
    back = QlpvModel.from_dict(json.loads(json.dumps(m.to_dict())))
    for a, b in zip(jax.tree_util.tree_leaves(m), jax.tree_util.tree_leaves(back)):
        assert np.asarray(a).tobytes() == np.asarray(b).tobytes()
    with pytest.raises(ValueError):
        QlpvModel.from_dict({**m.to_dict(), "format_version": 99})


def test_dimension_checks():
    m = init_model(2, 1, 1, 3)
    with pytest.raises(ValueError):
        m.replace(L=np.zeros((2, 2, 1))).check()
    with pytest.raises(ValueError):
        SchedulingNet(m.net.weights, m.net.biases, "relu")
    with pytest.raises(ValueError):
        IoDataset(np.zeros((3, 1)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        IoDataset(np.array([[np.nan]]), np.zeros((1, 1)))
    net = random_net(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        net.check(2)
