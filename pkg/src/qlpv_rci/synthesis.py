"""Concurrent identification: pretraining, the regularized objective, its
gradient through the unrolled RCI iteration, Adam, and checkpointing.

The RCI regularizer r(theta; q) is evaluated by tracing every step of the
iteration with jax (disturbance box, bounding box, interval bounds,
tightening, QP assembly). The QP solve itself is a numpy callback wrapped
in a custom VJP whose backward pass is the KKT adjoint from qpcore.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .ccpoly import PolytopeTemplate
from .qlpv import IoDataset, QlpvModel, fit_loss, fit_loss_, init_model
from .qpcore import QpSolution, QpStatus, QuadProg, qp_gradients, qp_solve
from .rci import (DisturbanceBox, InputConstraints, OutputConstraints, RciInfeasible,
                  RciProblem, RciSolution, algorithm1, box_, characterize_w, dtil_,
                  ibp_logits_, rci_qp_, size_value_, softmax_lb_log_, solve_baseline_r,
                  tightened_, w_box_)

CHECKPOINT_VERSION = 1
REGULARIZERS = ("alg1", "baseline")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 5e-4
    kappa: float = 1.01
    zeta: float = 0.05
    k_hat: int = 1
    l_hat: int = 300
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    M: int = 5
    pretrain_iters: int = 2000
    pretrain_lr: float | None = 1e-2  # None: same as lr
    regularizer: str = "alg1"  # or "baseline" (untightened RCI polytope)
    qp_ridge: float = 1e-9
    n_x: int = 2
    n_p: int = 6
    hidden: tuple = (3,)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [(self.tau >= 0, "tau must be >= 0"), (self.kappa > 0, "kappa must be > 0"),
                  (self.zeta > 0, "zeta must be > 0"), (self.k_hat >= 1, "k_hat must be >= 1"),
                  (self.l_hat >= 1, "l_hat must be >= 1"), (self.lr > 0, "lr must be > 0"),
                  (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "Adam betas in [0, 1)"),
                  (self.adam_eps > 0, "adam_eps must be > 0"), (self.M >= 1, "M must be >= 1"),
                  (self.pretrain_iters >= 0, "pretrain_iters must be >= 0"),
                  (self.regularizer in REGULARIZERS, f"regularizer must be one of {REGULARIZERS}"),
                  (self.qp_ridge >= 0, "qp_ridge must be >= 0"),
                  (self.n_x >= 1 and self.n_p >= 1, "n_x and n_p must be >= 1")]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RciContext:
    """Everything the regularizer needs besides the model."""

    template: PolytopeTemplate
    Y: OutputConstraints
    U: InputConstraints
    dw: IoDataset

    def problem(self, config: TrainConfig) -> RciProblem:
        return RciProblem(self.template, self.Y, self.U, config.M, config.qp_ridge)


# -- Adam -------------------------------------------------------------------

@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class AdamState:
    step: jnp.ndarray
    m: object
    v: object


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(lambda p: jnp.zeros_like(jnp.asarray(p, dtype=float)), params)
    return AdamState(jnp.asarray(0, dtype=jnp.int64), zeros, zeros)


@partial(jax.jit, static_argnums=(3, 4, 5, 6))
def _adam(params, grads, state, lr, b1, b2, eps):
    t = state.step + 1
    m = jax.tree_util.tree_map(lambda a, g: b1 * a + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda a, g: b2 * a + (1 - b2) * g * g, state.v, grads)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = jax.tree_util.tree_map(lambda p, a, b: p - lr * (a / c1) / (jnp.sqrt(b / c2) + eps),
                                 params, m, v)
    return new, AdamState(t, m, v)


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr=None):
    """One bias-corrected Adam update; returns (params', state')."""
    lr = config.lr if lr is None else lr
    return _adam(params, grads, state, float(lr), float(config.adam_beta1),
                 float(config.adam_beta2), float(config.adam_eps))


# -- differentiable QP layer ------------------------------------------------

def _qp_forward_np(H, f, G, h, tol):
    sol = qp_solve(QuadProg(np.asarray(H), np.asarray(f), np.asarray(G), np.asarray(h)), tol=tol)
    n, m = H.shape[0], G.shape[0]
    if not sol.ok:
        return (np.zeros(n), np.zeros(m), np.zeros(m), np.float64(0.0),
                np.float64(sol.kkt_residual))
    return (sol.x, sol.lam, sol.active.astype(float), np.float64(1.0),
            np.float64(sol.kkt_residual))


def _qp_backward_np(H, f, G, h, x, lam, active, ok, gx):
    n, m = H.shape[0], G.shape[0]
    if ok < 0.5:
        return np.zeros((n, n)), np.zeros(n), np.zeros((m, n)), np.zeros(m)
    qp = QuadProg(np.asarray(H), np.asarray(f), np.asarray(G), np.asarray(h))
    sol = QpSolution(np.asarray(x), np.asarray(lam), np.zeros(0), QpStatus.OPTIMAL, 0.0,
                     np.asarray(active) > 0.5)
    g = qp_gradients(qp, sol, np.asarray(gx))
    return g.H, g.f, g.G, g.h


def _shapes(H, G):
    n, m = H.shape[0], G.shape[0]
    f64 = jnp.float64
    return (jax.ShapeDtypeStruct((n,), f64), jax.ShapeDtypeStruct((m,), f64),
            jax.ShapeDtypeStruct((m,), f64), jax.ShapeDtypeStruct((), f64),
            jax.ShapeDtypeStruct((), f64))


@partial(jax.custom_vjp, nondiff_argnums=(4,))
def qp_layer(H, f, G, h, tol=1e-8):
    """Differentiable QP: returns (x*, ok flag, kkt residual)."""
    x, _, _, ok, res = jax.pure_callback(partial(_qp_forward_np, tol=tol), _shapes(H, G), H, f, G, h)
    return x, ok, res


def _qp_layer_fwd(H, f, G, h, tol):
    x, lam, act, ok, res = jax.pure_callback(partial(_qp_forward_np, tol=tol), _shapes(H, G),
                                             H, f, G, h)
    return (x, ok, res), (H, f, G, h, x, lam, act, ok)


def _qp_layer_bwd(tol, resid, cot):
    H, f, G, h, x, lam, act, ok = resid
    gx = cot[0]
    shapes = (jax.ShapeDtypeStruct(H.shape, H.dtype), jax.ShapeDtypeStruct(f.shape, f.dtype),
              jax.ShapeDtypeStruct(G.shape, G.dtype), jax.ShapeDtypeStruct(h.shape, h.dtype))
    return jax.pure_callback(_qp_backward_np, shapes, H, f, G, h, x, lam, act, ok, gx)


qp_layer.defvjp(_qp_layer_fwd, _qp_layer_bwd)


# -- regularizer ------------------------------------------------------------

def regularizer_(model, q_tilde, r_prev, Uw, Yw, prob: RciProblem, kappa, zeta, k_hat,
                 mode, tol=1e-8):
    """Traced r(theta; q_tilde). Returns (r, (q, v, a, ok, kkt)).

    Failed step-k solves keep the previous iterate; if the very first solve
    fails, r falls back to the constant ``r_prev`` (zero gradient).
    """
    c_w, eps_w = w_box_(model, Uw, Yw)
    C = model.C
    F, V = jnp.asarray(prob.template.F), jnp.asarray(prob.template.V)
    nq, nvu, _ = prob.sizes
    n_p = model.A.shape[0]
    q = jnp.asarray(q_tilde)
    v = jnp.zeros(nvu)
    a = jnp.zeros(n_p)
    r = jnp.asarray(r_prev, dtype=float)
    ok_all = jnp.asarray(True)
    ok_any = jnp.asarray(False)
    kkt = jnp.asarray(0.0)
    steps = 1 if mode == "baseline" else k_hat
    for _ in range(steps):
        if mode == "baseline":
            a_k, box = jnp.zeros(n_p), None
        else:
            mu, sig = box_(V, q, zeta)
            llo, lhi = ibp_logits_(model.net, mu, sig)
            a_k, box = softmax_lb_log_(llo, lhi), (mu, sig)
        At, Bt, Lt = tightened_(model.A, model.B, model.L, a_k)
        dt = dtil_(F, Lt, c_w, eps_w, kappa)
        H, f, G, h, Z, T = rci_qp_(prob, C, (At, Bt, Lt, dt), c_w, eps_w, kappa, box)
        x, ok, res = qp_layer(H, f, G, h, tol)
        good = ok > 0.5
        r = jnp.where(good, size_value_(Z, T, x), r)
        q = jnp.where(good, x[:nq], q)
        v = jnp.where(good, x[nq:nq + nvu], v)
        a = jnp.where(good, a_k, a)
        ok_all = ok_all & good
        ok_any = ok_any | good
        kkt = jnp.maximum(kkt, jnp.where(good, res, 0.0))
    return r, (q, v, a, ok_all, ok_any, kkt)


class Objective:
    """J(theta, x0; q) = fit_loss + tau * r(theta; q) with jitted value/gradient."""

    def __init__(self, data: IoDataset, ctx: RciContext, config: TrainConfig):
        self.config = config
        self.ctx = ctx
        self.prob = ctx.problem(config)
        self.U, self.Y = jnp.asarray(data.u), jnp.asarray(data.y)
        self.Uw, self.Yw = jnp.asarray(ctx.dw.u), jnp.asarray(ctx.dw.y)
        c = config
        reg = partial(regularizer_, prob=self.prob, kappa=c.kappa, zeta=c.zeta,
                      k_hat=c.k_hat, mode=c.regularizer)

        def total(model, x0, q_tilde, r_prev, U, Y, Uw, Yw):
            fit = fit_loss_(model, x0, U, Y)
            r, aux = reg(model, q_tilde, r_prev, Uw, Yw)
            return fit + c.tau * r, (fit, r, aux)

        self._value = jax.jit(total)
        self._grad = jax.jit(jax.value_and_grad(total, argnums=(0, 1), has_aux=True))

    def value(self, model, x0, q_tilde, r_prev=np.inf):
        J, (fit, r, aux) = self._value(model, jnp.asarray(x0), jnp.asarray(q_tilde),
                                       jnp.asarray(r_prev, dtype=float), self.U, self.Y,
                                       self.Uw, self.Yw)
        return float(J), float(fit), float(r), aux

    def grad(self, model, x0, q_tilde, r_prev=np.inf):
        (J, (fit, r, aux)), (gm, gx0) = self._grad(
            model, jnp.asarray(x0), jnp.asarray(q_tilde), jnp.asarray(r_prev, dtype=float),
            self.U, self.Y, self.Uw, self.Yw)
        return (float(J), float(fit), float(r), aux), (gm, gx0)


_fit_vg = jax.jit(jax.value_and_grad(fit_loss_, argnums=(0, 1)))


def objective(model, x0, data, q_tilde, rci_context, config, r_prev=np.inf):
    """Returns (J, r, q_new, v_new)."""
    if config.tau == 0:
        return fit_loss(model, x0, data), float("nan"), np.asarray(q_tilde), None
    J, fit, r, (q, v, a, ok_all, ok_any, kkt) = Objective(data, rci_context, config).value(
        model, x0, q_tilde, r_prev)
    return J, r, np.asarray(q), np.asarray(v).reshape(rci_context.template.n_vertices, -1)


def grad_objective(model, x0, data, q_tilde, rci_context, config, r_prev=np.inf):
    """Gradients of J over all model entries and x0 (numpy pytrees)."""
    if config.tau == 0:
        _, (gm, gx0) = _fit_vg(model, jnp.asarray(x0), jnp.asarray(data.u), jnp.asarray(data.y))
    else:
        _, (gm, gx0) = Objective(data, rci_context, config).grad(model, x0, q_tilde, r_prev)
    return gm.to_numpy(), np.asarray(gx0)


# -- checkpoint -------------------------------------------------------------

def _tree_to_list(tree):
    return [np.asarray(x).tolist() for x in jax.tree_util.tree_leaves(tree)]


def _tree_from_list(like, leaves):
    ref = jax.tree_util.tree_leaves(like)
    if len(ref) != len(leaves):
        raise ValueError("optimizer state does not match the parameter structure")
    arrs = [np.asarray(v, dtype=np.asarray(r).dtype).reshape(np.shape(r)) for v, r in zip(leaves, ref)]
    return jax.tree_util.tree_unflatten(jax.tree_util.tree_structure(like), arrs)


@dataclass
class Checkpoint:
    model: QlpvModel
    x0: np.ndarray
    q: np.ndarray | None = None
    v: np.ndarray | None = None
    outer_iter: int = 0
    loss_history: list = field(default_factory=list)  # (fit, r, total)
    adam: AdamState | None = None
    config: TrainConfig | None = None
    scaling: dict = field(default_factory=lambda: {"u": [1.0], "y": [1.0]})
    rci: RciSolution | None = None
    W: DisturbanceBox | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"checkpoint_version": CHECKPOINT_VERSION,
             "model": self.model.to_dict(), "x0": np.asarray(self.x0).tolist(),
             "q": None if self.q is None else np.asarray(self.q).tolist(),
             "v": None if self.v is None else np.asarray(self.v).tolist(),
             "outer_iter": int(self.outer_iter),
             "loss_history": [[float(a) for a in row] for row in self.loss_history],
             "config": None if self.config is None else self.config.to_dict(),
             "scaling": self.scaling,
             "rci": None if self.rci is None else self.rci.to_dict(),
             "W": None if self.W is None else self.W.to_dict(),
             "extra": self.extra}
        if self.adam is not None:
            d["adam"] = {"step": int(self.adam.step), "m": _tree_to_list(self.adam.m),
                         "v": _tree_to_list(self.adam.v)}
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('checkpoint_version')}")
        model = QlpvModel.from_dict(d["model"])
        x0 = np.asarray(d["x0"], dtype=float)
        q = None if d.get("q") is None else np.asarray(d["q"], dtype=float)
        v = None if d.get("v") is None else np.asarray(d["v"], dtype=float)
        adam = None
        if d.get("adam") is not None:
            like = (model, x0)
            adam = AdamState(np.asarray(d["adam"]["step"], dtype=np.int64),
                             _tree_from_list(like, d["adam"]["m"]),
                             _tree_from_list(like, d["adam"]["v"]))
        cfg = None if d.get("config") is None else TrainConfig.from_dict(d["config"])
        W = None
        if d.get("W") is not None:
            W = DisturbanceBox(d["W"]["c_w"], d["W"]["eps_w"], d["W"]["kappa"])
        rci = None if d.get("rci") is None else RciSolution.from_dict(d["rci"])
        ck = cls(model, x0, q, v, int(d["outer_iter"]), [tuple(r) for r in d["loss_history"]],
                 adam, cfg, d.get("scaling", {"u": [1.0], "y": [1.0]}), rci, W,
                 d.get("extra", {}))
        return ck

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- training loops ---------------------------------------------------------

def pretrain(data: IoDataset, config: TrainConfig, model: QlpvModel | None = None, x0=None,
             adam: AdamState | None = None, iters: int | None = None, log=None):
    """Adam on the fit loss alone. Observer gains are set to zero.

    Returns (model, x0, adam_state) so training can be continued exactly.
    """
    if model is None:
        model = init_model(config.n_x, data.u.shape[1], data.y.shape[1], config.n_p,
                           config.hidden, seed=config.seed)
    model = model.replace(L=np.zeros_like(np.asarray(model.L))).to_numpy()
    x0 = np.zeros(model.nx) if x0 is None else np.asarray(x0, dtype=float)
    params = (model, jnp.asarray(x0))
    state = adam_init(params) if adam is None else adam
    lr = config.lr if config.pretrain_lr is None else config.pretrain_lr
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)
    n = config.pretrain_iters if iters is None else iters
    for k in range(n):
        val, grads = _fit_vg(params[0], params[1], U, Y)
        if not np.isfinite(float(val)):
            raise TrainingDiverged(f"fit loss became non-finite at pretraining step {k}; "
                                   "try a smaller learning rate")
        params, state = adam_step(params, grads, state, config, lr)
        if log is not None:
            log(k, float(val))
    return params[0].to_numpy(), np.asarray(params[1]), state


RESTART_SHRINK = (0.75, 0.5, 0.25, 0.0)
MAX_BACKTRACK = 6


def _rci_step(model, W, ctx, config, q_prev, x_init=None):
    """r(theta; q_prev) by the configured regularizer (forward only).

    If the first refinement step is infeasible at q_prev, restart from
    shrunken copies s*q_prev: a smaller box certifies larger lower bounds a,
    and s*q stays in the cone. Returns (solution, shrink factor used).
    """
    if config.regularizer == "baseline":
        return solve_baseline_r(model, W, ctx.Y, ctx.U, ctx.template, config.M,
                                config.qp_ridge), 1.0
    run = partial(algorithm1, model, W, ctx.Y, ctx.U, ctx.template, k_hat=config.k_hat,
                  zeta=config.zeta, M=config.M, ridge=config.qp_ridge)
    sol = run(q_prev, x_init=x_init)
    if sol.trace:
        return sol, 1.0
    for s in RESTART_SHRINK:
        retry = run(s * np.asarray(q_prev))
        if retry.trace:
            return retry, s
    return sol, None


LOG_COLUMNS = ("outer_iter", "fit_loss", "r", "J", "max_kkt_residual", "wall_time_s")


def algorithm2(data: IoDataset, ctx: RciContext, config: TrainConfig,
               start: Checkpoint | None = None, log_path=None, strict: bool = False,
               progress=None, comment: str | None = None) -> Checkpoint:
    """Concurrent identification: alternate Adam steps on J(theta, x0; q_l)
    with r(theta_{l+1}; q_l) to update q. ``start`` supplies the pretrained
    model (and optionally a previous q and optimizer state to resume)."""
    if start is None:
        m0, x00, st = pretrain(data, config)
        start = Checkpoint(m0, x00, adam=st, config=config)
    model = start.model.to_numpy()
    x0 = np.asarray(start.x0, dtype=float)
    state = start.adam if start.adam is not None else adam_init((model, jnp.asarray(x0)))
    history = list(start.loss_history)
    params = (model, jnp.asarray(x0))

    W = characterize_w(model, ctx.dw, config.kappa)
    if start.q is None:
        base = solve_baseline_r(model, W, ctx.Y, ctx.U, ctx.template, config.M, config.qp_ridge)
        if not base.ok:
            raise RciInfeasible("no RCI set exists for the initial model "
                                f"({base.status}); enlarge Y or U, change the template "
                                "or pretrain further")
        sol = base
    else:
        sol = start.rci if start.rci is not None else RciSolution(
            start.q, start.v, np.zeros(model.n_p), np.inf)
    q, r_last = np.asarray(sol.q), float(sol.r)

    obj = Objective(data, ctx, config) if config.tau > 0 else None
    U, Y = jnp.asarray(data.u), jnp.asarray(data.y)
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    it0 = start.outer_iter
    restarts = []  # (iteration, shrink factor or None when no restart helped)
    backtracks = []  # (iteration, number of step halvings)
    stalled = None
    try:
        l = it0
        while l < it0 + config.l_hat:
            if obj is None:
                val, grads = _fit_vg(params[0], params[1], U, Y)
                fit = J = float(val)
                kkt = 0.0
            else:
                (J, fit, _, aux), grads = obj.grad(params[0], params[1], q, r_last)
                kkt = float(aux[-1])
            if not np.isfinite(J):
                raise TrainingDiverged(f"objective became non-finite at outer iteration {l}")
            # with tau > 0 the step must keep an RCI set in existence; shorten it if not
            tries = MAX_BACKTRACK + 1 if config.tau > 0 else 1
            for j in range(tries):
                cand, cstate = adam_step(params, grads, state, config, config.lr * 0.5 ** j)
                model = cand[0].to_numpy()
                W = characterize_w(model, ctx.dw, config.kappa)
                new, shrink = _rci_step(model, W, ctx, config, q, sol.x if sol.ok else None)
                feasible = new.ok or bool(new.trace and config.regularizer == "alg1")
                if feasible or config.tau == 0:
                    break
            if not feasible and config.tau > 0:
                stalled = l
                break
            params, state = cand, cstate
            if j:
                backtracks.append((l + 1, j))
            if feasible:
                sol = new
                q, r_last = np.asarray(sol.q), float(sol.r)
                kkt = max(kkt, float(new.kkt_residual))
            if shrink != 1.0:
                restarts.append((l + 1, shrink))
            l += 1
            history.append((fit, r_last, fit + config.tau * r_last))
            if writer is not None:
                wall = 0.0 if strict else time.perf_counter() - t0
                writer.writerow([l, repr(fit), repr(r_last), repr(fit + config.tau * r_last),
                                 repr(kkt), repr(wall)])
            if progress is not None:
                progress(l, fit, r_last, sol.status)
    finally:
        if fh is not None:
            fh.close()
    model = params[0].to_numpy()
    if W is None or stalled is not None:
        W = characterize_w(model, ctx.dw, config.kappa)
    extra = dict(start.extra)
    extra["restarts"] = extra.get("restarts", []) + restarts
    extra["backtracks"] = extra.get("backtracks", []) + backtracks
    if stalled is not None:
        extra["stalled_at"] = stalled
    return Checkpoint(model, np.asarray(params[1]), q, np.asarray(sol.v), l,
                      history, state, config, start.scaling, sol, W, extra)
