"""Robust control invariant sets for qLPV models.

Disturbance characterization, tightened vertex systems from certified
scheduling lower bounds, the size QP, the baseline and tightened RCI
problems, interval bound propagation, the iterative RCI algorithm and a
brute-force verifier.

Decision vector layout for the RCI QPs: [q (f), v (n_v * n_u), traj (v_y * M * n_u)].
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import linprog

from . import ccpoly
from .ccpoly import Box, PolytopeTemplate
from .qlpv import ACTIVATIONS, IoDataset, QlpvModel, blend_, observe, observe_, sched
from .qpcore import QuadProg, lp_membership, qp_solve

DEFAULT_KAPPA = 1.01
DEFAULT_M = 5
QP_RIDGE = 1e-9
QP_TOL = 1e-8


class RciInfeasible(RuntimeError):
    pass


# -- sets -------------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceBox:
    c_w: np.ndarray
    eps_w: np.ndarray
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        object.__setattr__(self, "c_w", np.asarray(self.c_w, dtype=float).reshape(-1))
        object.__setattr__(self, "eps_w", np.asarray(self.eps_w, dtype=float).reshape(-1))
        if np.any(self.eps_w < 0):
            raise ValueError("eps_w must be nonnegative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def corners(self):
        ny = self.c_w.size
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=ny)))
        return self.c_w + signs * (self.kappa * self.eps_w)

    def to_dict(self):
        return {"c_w": self.c_w.tolist(), "eps_w": self.eps_w.tolist(), "kappa": self.kappa}


def _polygon_vertices(H, h):
    """Vertices of {y : H y <= h} for n_y <= 2 by pairwise facet intersection."""
    ny = H.shape[1]
    pts = []
    for rows in itertools.combinations(range(H.shape[0]), ny):
        Hs = H[list(rows)]
        if abs(np.linalg.det(Hs)) < 1e-12:
            continue
        y = np.linalg.solve(Hs, h[list(rows)])
        if np.all(H @ y <= h + 1e-9) and not any(np.allclose(y, p) for p in pts):
            pts.append(y)
    if ny == 2 and pts:
        c = np.mean(pts, axis=0)
        pts.sort(key=lambda p: np.arctan2(p[1] - c[1], p[0] - c[0]))
    return np.array(pts)


@dataclass(frozen=True)
class OutputConstraints:
    Hy: np.ndarray
    hy: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        Hy = np.atleast_2d(np.asarray(self.Hy, dtype=float))
        hy = np.asarray(self.hy, dtype=float).reshape(-1)
        V = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        object.__setattr__(self, "Hy", Hy)
        object.__setattr__(self, "hy", hy)
        object.__setattr__(self, "vertices", V)
        if np.any(V @ Hy.T > hy + 1e-9):
            raise ValueError("an output vertex violates the halfspace description")
        if Hy.shape[1] <= 2:
            for y in _polygon_vertices(Hy, hy):
                if not lp_membership(y, list(V), tol=1e-7):
                    raise ValueError("vertex list and halfspaces describe different sets")

    @classmethod
    def from_halfspaces(cls, Hy, hy):
        Hy = np.atleast_2d(np.asarray(Hy, dtype=float))
        hy = np.asarray(hy, dtype=float).reshape(-1)
        if Hy.shape[1] > 2:
            raise ValueError("explicit vertices are required for n_y > 2")
        return cls(Hy, hy, _polygon_vertices(Hy, hy))

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        ny = lo.size
        Hy = np.vstack([np.eye(ny), -np.eye(ny)])
        corners = np.array([[hi[i] if s[i] else lo[i] for i in range(ny)]
                            for s in itertools.product((0, 1), repeat=ny)])
        return cls(Hy, np.concatenate([hi, -lo]), corners)

    def contains(self, y, tol=0.0):
        return bool(np.all(self.Hy @ np.asarray(y) <= self.hy + tol))

    def to_dict(self):
        return {"Hy": self.Hy.tolist(), "hy": self.hy.tolist(), "vertices": self.vertices.tolist()}


@dataclass(frozen=True)
class InputConstraints:
    Hu: np.ndarray
    hu: np.ndarray

    def __post_init__(self):
        Hu = np.atleast_2d(np.asarray(self.Hu, dtype=float))
        hu = np.asarray(self.hu, dtype=float).reshape(-1)
        object.__setattr__(self, "Hu", Hu)
        object.__setattr__(self, "hu", hu)
        nu = Hu.shape[1]
        for i in range(nu):
            for sgn in (1.0, -1.0):
                c = np.zeros(nu)
                c[i] = -sgn
                res = linprog(c, A_ub=Hu, b_ub=hu, bounds=[(None, None)] * nu, method="highs")
                if res.status == 2:
                    raise ValueError("input constraint set is empty")
                if res.status == 3:
                    raise ValueError("input constraint set is unbounded")

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        nu = lo.size
        return cls(np.vstack([np.eye(nu), -np.eye(nu)]), np.concatenate([hi, -lo]))

    @property
    def nu(self):
        return self.Hu.shape[1]

    def is_box(self):
        nu = self.nu
        return self.Hu.shape == (2 * nu, nu) and np.array_equal(
            self.Hu, np.vstack([np.eye(nu), -np.eye(nu)]))

    def project(self, u):
        """Clip onto a box-shaped set (identity for general polytopes)."""
        if not self.is_box():
            return u
        nu = self.nu
        return np.clip(u, -self.hu[nu:], self.hu[:nu])

    def to_dict(self):
        return {"Hu": self.Hu.tolist(), "hu": self.hu.tolist()}


@dataclass
class TightenedSystem:
    Atil: np.ndarray
    Btil: np.ndarray
    Ltil: np.ndarray
    dtil: np.ndarray  # (n_p, f)


@dataclass
class RciSolution:
    q: np.ndarray
    v: np.ndarray  # (n_v, n_u)
    a: np.ndarray
    r: float
    trace: list = field(default_factory=list)
    status: str = "Optimal"
    box_center: np.ndarray = None  # region over which a was certified
    box_half: np.ndarray = None
    kkt_residual: float = 0.0
    x: np.ndarray = None  # full QP solution, used for warm starts

    @property
    def ok(self):
        return self.status == "Optimal"

    def to_dict(self):
        d = {"q": np.asarray(self.q).tolist(), "v": np.asarray(self.v).tolist(),
             "a": np.asarray(self.a).tolist(), "r": float(self.r),
             "trace": [float(t) for t in self.trace], "status": self.status,
             "kkt_residual": float(self.kkt_residual)}
        if self.x is not None:
            d["x"] = np.asarray(self.x).tolist()
        if self.box_center is not None:
            d["box_center"] = np.asarray(self.box_center).tolist()
            d["box_half"] = np.asarray(self.box_half).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        return cls(arr("q"), arr("v"), arr("a"), float(d["r"]), list(d.get("trace", [])),
                   d.get("status", "Optimal"), arr("box_center"), arr("box_half"),
                   float(d.get("kkt_residual", 0.0)), arr("x"))


# -- traced building blocks -------------------------------------------------

def w_box_(model, U, Y):
    """Observer residual bounds (c_w, eps_w) with detached argmax/argmin indices."""
    _, Wr = observe_(model, jnp.zeros(model.nx), U, Y)
    cols = jnp.arange(Wr.shape[1])
    hi = Wr[jax.lax.stop_gradient(jnp.argmax(Wr, axis=0)), cols]
    lo = Wr[jax.lax.stop_gradient(jnp.argmin(Wr, axis=0)), cols]
    return 0.5 * (hi + lo), 0.5 * (hi - lo)


def box_(V, q, zeta):
    X = jnp.einsum("jxf,f->jx", V, q)
    cols = jnp.arange(V.shape[1])
    hi = X[jax.lax.stop_gradient(jnp.argmax(X, axis=0)), cols]
    lo = X[jax.lax.stop_gradient(jnp.argmin(X, axis=0)), cols]
    return 0.5 * (hi + lo), 0.5 * (hi - lo) + zeta


def ibp_logits_(net, center, half):
    """Interval bounds on every network's scalar output over the box."""
    act = ACTIVATIONS[net.activation]
    c = jnp.broadcast_to(center, (net.n_p, center.shape[-1]))
    r = jnp.broadcast_to(half, (net.n_p, half.shape[-1]))
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        c = jnp.einsum("poi,pi->po", W, c) + b
        r = jnp.einsum("poi,pi->po", jnp.abs(W), r)
        if k < last:
            lo, hi = act(c - r), act(c + r)
            c, r = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return (c - r)[:, 0], (c + r)[:, 0]


def softmax_lb_log_(llo, lhi):
    """a_i = e^llo_i / (e^llo_i + sum_{j != i} e^lhi_j), evaluated in log space."""
    n = llo.shape[0]
    others = jnp.where(jnp.eye(n, dtype=bool), llo[:, None], lhi[None, :])
    return jnp.exp(llo - jax.scipy.special.logsumexp(others, axis=1))


def tightened_(A, B, L, a):
    s = 1.0 - jnp.sum(a)
    return (s * A + blend_(A, a)[None], s * B + blend_(B, a)[None], s * L + blend_(L, a)[None])


def dtil_(F, Lt, c_w, eps_w, kappa):
    FL = jnp.einsum("fx,pxy->pfy", F, Lt)
    return FL @ c_w + kappa * jnp.abs(FL) @ eps_w


def prediction_matrix_(Abar, Bbar, M):
    """Phi with z_{t+1} = sum_{s<=t} Abar^(t-s) Bbar u_s stacked for t = 0..M-1."""
    nx, nu = Bbar.shape
    powers = [jnp.eye(nx)]
    for _ in range(M - 1):
        powers.append(Abar @ powers[-1])
    rows = []
    for t in range(M):
        rows.append(jnp.hstack([powers[t - s] @ Bbar if s <= t else jnp.zeros((nx, nu))
                                for s in range(M)]))
    return jnp.vstack(rows)


@dataclass(frozen=True)
class RciProblem:
    """Static ingredients shared by every RCI QP of one setup."""

    template: PolytopeTemplate
    Y: OutputConstraints
    U: InputConstraints
    M: int = DEFAULT_M
    ridge: float = QP_RIDGE

    @property
    def sizes(self):
        t = self.template
        nu = self.U.nu
        return t.n_facets, t.n_vertices * nu, len(self.Y.vertices) * self.M * nu

    def targets(self):
        return np.concatenate([np.tile(yk, self.M) for yk in self.Y.vertices])


def size_cost_(prob: RciProblem, Abar, Bbar, C):
    """Return (Z, T) with the size objective sum_k,t |y_k - C z_t^k|^2 = |T - Z traj|^2."""
    Phi = prediction_matrix_(Abar, Bbar, prob.M)
    ZC = jnp.kron(jnp.eye(prob.M), C) @ Phi
    nv = len(prob.Y.vertices)
    return jnp.kron(jnp.eye(nv), ZC), jnp.asarray(prob.targets())


def shat_rows_(prob: RciProblem, C, tight, c_w, eps_w, kappa, box=None):
    """Linear rows over (q, v): tightened RCI, output, input, cone, and box containment."""
    t = prob.template
    F, V = jnp.asarray(t.F), jnp.asarray(t.V)
    At, Bt, dt = tight
    nf, nv, nx = t.n_facets, t.n_vertices, t.nx
    nu = prob.U.nu
    Hy, hy = jnp.asarray(prob.Y.Hy), jnp.asarray(prob.Y.hy)
    Hu, hu = jnp.asarray(prob.U.Hu), jnp.asarray(prob.U.hu)
    n_p = At.shape[0]
    blocks, rhs = [], []
    # F(At_i V_j q + Bt_i U_j v) + dt_i <= q
    FAV = jnp.einsum("fx,pxy,jyg->pjfg", F, At, V) - jnp.eye(nf)
    FB = jnp.einsum("fx,pxu->pfu", F, Bt)
    sel = jnp.eye(nv)
    FBU = jnp.einsum("pfu,jk->pjfku", FB, sel).reshape(n_p, nv, nf, nv * nu)
    blocks.append(jnp.concatenate([FAV, FBU], axis=-1).reshape(n_p * nv * nf, nf + nv * nu))
    rhs.append(jnp.broadcast_to(-dt[:, None, :], (n_p, nv, nf)).reshape(-1))
    # Hy(C V_j q + c_w) + kappa |Hy| eps_w <= hy
    HCV = jnp.einsum("ay,yx,jxf->jaf", Hy, C, V)
    my = Hy.shape[0]
    blocks.append(jnp.concatenate([HCV, jnp.zeros((nv, my, nv * nu))], axis=-1)
                  .reshape(nv * my, -1))
    ytight = hy - Hy @ c_w - kappa * jnp.abs(Hy) @ eps_w
    rhs.append(jnp.tile(ytight, nv))
    # U_j v in U
    mu_ = Hu.shape[0]
    blocks.append(jnp.hstack([jnp.zeros((nv * mu_, nf)), jnp.kron(jnp.eye(nv), Hu)]))
    rhs.append(jnp.tile(hu, nv))
    # E q <= 0
    E = jnp.asarray(t.E)
    blocks.append(jnp.hstack([E, jnp.zeros((E.shape[0], nv * nu))]))
    rhs.append(jnp.zeros(E.shape[0]))
    if box is not None:
        mu_b, sig_b = box
        Vs = V.reshape(nv * nx, nf)
        blocks.append(jnp.hstack([jnp.vstack([Vs, -Vs]), jnp.zeros((2 * nv * nx, nv * nu))]))
        rhs.append(jnp.concatenate([jnp.tile(mu_b + sig_b, nv), jnp.tile(sig_b - mu_b, nv)]))
    return jnp.vstack(blocks), jnp.concatenate(rhs)


def rci_qp_(prob: RciProblem, C, tight, c_w, eps_w, kappa, box=None):
    """Assemble (H, f, G, h, Z, T) of the combined size/RCI QP."""
    At, Bt, Lt, dt = tight
    Abar, Bbar = jnp.mean(At, axis=0), jnp.mean(Bt, axis=0)
    nq, nvu, ntr = prob.sizes
    n = nq + nvu + ntr
    Z, T = size_cost_(prob, Abar, Bbar, C)
    Zfull = jnp.hstack([jnp.zeros((Z.shape[0], nq + nvu)), Z])
    H = 2.0 * Zfull.T @ Zfull + prob.ridge * jnp.eye(n)
    f = -2.0 * Zfull.T @ T
    F = jnp.asarray(prob.template.F)
    nvy = len(prob.Y.vertices)
    M = prob.M
    Phi = prediction_matrix_(Abar, Bbar, M)
    # F z_t^k <= q for t = 1..M
    FPhi = jnp.kron(jnp.eye(M), F) @ Phi
    traj_state = jnp.hstack([
        jnp.tile(-jnp.eye(nq), (nvy * M, 1)),
        jnp.zeros((nvy * M * nq, nvu)),
        jnp.kron(jnp.eye(nvy), FPhi)])
    Hu, hu = jnp.asarray(prob.U.Hu), jnp.asarray(prob.U.hu)
    traj_input = jnp.hstack([jnp.zeros((nvy * M * Hu.shape[0], nq + nvu)),
                             jnp.kron(jnp.eye(nvy * M), Hu)])
    Gs, hs = shat_rows_(prob, C, (At, Bt, dt), c_w, eps_w, kappa, box)
    Gs = jnp.hstack([Gs, jnp.zeros((Gs.shape[0], ntr))])
    G = jnp.vstack([traj_state, traj_input, Gs])
    h = jnp.concatenate([jnp.zeros(traj_state.shape[0]), jnp.tile(hu, nvy * M), hs])
    return H, f, G, h, Zfull, T


def size_value_(Zfull, T, x):
    e = T - Zfull @ x
    return e @ e


# -- public operations ------------------------------------------------------

def characterize_w(model: QlpvModel, dw: IoDataset, kappa: float = DEFAULT_KAPPA) -> DisturbanceBox:
    """Inflated bounding box of observer residuals w_t = y_t - C z_t from z_0 = 0."""
    if len(dw) == 0:
        raise ValueError("disturbance dataset is empty")
    try:
        _, Wr = observe(model, dw)
    except Exception as exc:
        raise RciInfeasible(f"observer diverged on the disturbance data ({exc}); "
                            "re-identify the model") from exc
    hi, lo = Wr.max(axis=0), Wr.min(axis=0)
    return DisturbanceBox(0.5 * (hi + lo), 0.5 * (hi - lo), kappa)


def tightened_vertices(model: QlpvModel, a, template: PolytopeTemplate | None = None,
                       W: DisturbanceBox | None = None) -> TightenedSystem:
    """Vertex systems of the tightened hull; ``dtil`` needs both template and W."""
    a = np.asarray(a, dtype=float)
    if np.any(a < 0) or a.sum() > 1.0 + 1e-12:
        raise ValueError(f"a = {a} must be nonnegative with sum <= 1")
    At, Bt, Lt = (np.asarray(m) for m in tightened_(model.A, model.B, model.L, a))
    dt = None
    if template is not None and W is not None:
        dt = np.asarray(dtil_(template.F, Lt, W.c_w, W.eps_w, W.kappa))
    return TightenedSystem(At, Bt, Lt, dt)


def untightened(model: QlpvModel, template, W) -> TightenedSystem:
    return tightened_vertices(model, np.zeros(model.n_p), template, W)


def mean_system(tight: TightenedSystem):
    return np.mean(tight.Atil, axis=0), np.mean(tight.Btil, axis=0)


def size_qp(Abar, Bbar, C, q, template: PolytopeTemplate, U: InputConstraints,
            Y: OutputConstraints, M: int = DEFAULT_M):
    """Size d of X(q): optimal cost of steering z^+ = Abar z + Bbar u toward every
    output vertex for M steps from the origin inside X(q). Returns (d, trajectories)
    with trajectories of shape (v_y, M+1, n_x) (states) and (v_y, M, n_u) (inputs)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if not ccpoly.check_config(template, q):
        raise ValueError("q violates the configuration constraints")
    prob = RciProblem(template, Y, U, M)
    Abar, Bbar, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (Abar, Bbar, C))
    Z, T = (np.asarray(m) for m in size_cost_(prob, Abar, Bbar, C))
    Phi = np.asarray(prediction_matrix_(Abar, Bbar, M))
    nvy, nu = len(Y.vertices), U.nu
    FPhi = np.kron(np.eye(M), template.F) @ Phi
    G = np.vstack([np.kron(np.eye(nvy), FPhi), np.kron(np.eye(nvy * M), U.Hu)])
    h = np.concatenate([np.tile(q, nvy * M), np.tile(U.hu, nvy * M)])
    n = Z.shape[1]
    qp = QuadProg(2 * Z.T @ Z + prob.ridge * np.eye(n), -2 * Z.T @ T, G, h)
    sol = qp_solve(qp, tol=QP_TOL)
    if not sol.ok:
        raise RciInfeasible(f"size QP is {sol.status.value}")
    d = float(size_value_(Z, T, sol.x))
    u = sol.x.reshape(nvy, M, nu)
    z = np.concatenate([np.zeros((nvy, 1, Abar.shape[0])),
                        (Phi @ u.reshape(nvy, M * nu).T).T.reshape(nvy, M, -1)], axis=1)
    return d, {"states": z, "inputs": u}


def build_shat(model: QlpvModel, tight: TightenedSystem, W: DisturbanceBox,
               Y: OutputConstraints, U: InputConstraints, template: PolytopeTemplate,
               qtilde=None, zeta: float = 0.0):
    """Rows (G, h) over (q, v) of the tightened RCI polytope; no containment rows
    when ``qtilde`` is None (the untightened case with a = 0 is then the baseline set)."""
    prob = RciProblem(template, Y, U)
    box = None
    if qtilde is not None:
        b = ccpoly.bounding_box(template, qtilde, zeta)
        box = (b.center, b.half_width)
    G, h = shat_rows_(prob, np.asarray(model.C), (tight.Atil, tight.Btil, tight.dtil),
                      W.c_w, W.eps_w, W.kappa, box)
    return np.asarray(G), np.asarray(h)


def ibp_forward(net, box: Box):
    """Sound interval [lo_i, hi_i] on exp(N(z; theta_i)) for all z in the box."""
    llo, lhi = ibp_logits_(net, jnp.asarray(box.center), jnp.asarray(box.half_width))
    llo, lhi = np.asarray(llo), np.asarray(lhi)
    if not (np.all(np.isfinite(llo)) and np.all(np.isfinite(lhi))):
        raise FloatingPointError("non-finite interval bound in the scheduling network")
    return np.exp(llo), np.exp(lhi)


def softmax_lower_bounds(lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.any(lo < 0) or np.any(hi < lo):
        raise ValueError("interval bounds must satisfy 0 <= lo <= hi")
    # a_i = 1 / (1 + sum_{j != i} hi_j / lo_i); the ratio form makes equal bounds give exactly 1/n
    a = np.zeros_like(lo)
    ok = lo > 0
    if np.any(~ok & (hi.sum() - hi == 0)):
        warnings.warn("zero denominator in softmax lower bound; using a_i = 0")
    with np.errstate(over="ignore"):  # an overflowed ratio correctly drives a_i to 0
        ratio = hi[None, :] / np.where(ok, lo, 1.0)[:, None]
    np.fill_diagonal(ratio, 0.0)
    a[ok] = 1.0 / (1.0 + ratio[ok].sum(axis=1))
    return a


def bound_prop(model: QlpvModel, template: PolytopeTemplate, q, zeta: float):
    """Certified lower bounds a_i <= p_i(z) over the zeta-inflated bounding box of X(q)."""
    box = ccpoly.bounding_box(template, q, zeta)
    llo, lhi = ibp_logits_(model.net, jnp.asarray(box.center), jnp.asarray(box.half_width))
    if not (np.all(np.isfinite(llo)) and np.all(np.isfinite(lhi))):
        raise FloatingPointError("non-finite interval bound in the scheduling network")
    return np.asarray(softmax_lb_log_(llo, lhi)), box


def _solve_rci(prob, model, a, W, box, x_init=None):
    tight = tightened_(model.A, model.B, model.L, jnp.asarray(a))
    dt = dtil_(prob.template.F, tight[2], W.c_w, W.eps_w, W.kappa)
    H, f, G, h, Z, T = (np.asarray(m) for m in rci_qp_(
        prob, jnp.asarray(model.C), (*tight, dt), W.c_w, W.eps_w, W.kappa, box))
    sol = qp_solve(QuadProg(H, f, G, h), tol=QP_TOL, x_init=x_init)
    r = float(size_value_(Z, T, sol.x)) if sol.ok else np.inf
    return sol, r


def _split(prob, x):
    nq, nvu, _ = prob.sizes
    return x[:nq].copy(), x[nq:nq + nvu].reshape(prob.template.n_vertices, prob.U.nu)


def solve_baseline_r(model: QlpvModel, W: DisturbanceBox, Y: OutputConstraints,
                     U: InputConstraints, template: PolytopeTemplate,
                     M: int = DEFAULT_M, ridge: float = QP_RIDGE) -> RciSolution:
    """Smallest size over the untightened RCI polytope (no scheduling information)."""
    prob = RciProblem(template, Y, U, M, ridge)
    a = np.zeros(model.n_p)
    sol, r = _solve_rci(prob, model, a, W, None)
    if not sol.ok:
        nq, nvu, _ = prob.sizes
        return RciSolution(np.full(nq, np.nan), np.full((template.n_vertices, U.nu), np.nan),
                           a, np.inf, [], sol.status.value)
    q, v = _split(prob, sol.x)
    return RciSolution(q, v, a, r, [r], "Optimal", kkt_residual=sol.kkt_residual, x=sol.x)


def algorithm1(model: QlpvModel, W: DisturbanceBox, Y: OutputConstraints,
               U: InputConstraints, template: PolytopeTemplate, q0, k_hat: int,
               zeta: float, M: int = DEFAULT_M, ridge: float = QP_RIDGE,
               x_init=None) -> RciSolution:
    """Iterate: bound the scheduling over the box of X(q_k), tighten the vertex
    systems, re-solve the size QP over the tightened RCI polytope.

    When the step-k QP fails the last feasible iterate is returned with status
    ``Infeasible@k`` (or ``MaxIter@k``).
    """
    if k_hat < 1:
        raise ValueError("k_hat must be >= 1")
    q = np.asarray(q0, dtype=float)
    if not ccpoly.check_config(template, q):
        raise ValueError("q0 violates the configuration constraints")
    prob = RciProblem(template, Y, U, M, ridge)
    trace, v, a_used, box_used = [], None, None, None
    status, kkt, x = "Optimal", 0.0, x_init
    for k in range(k_hat):
        a, box = bound_prop(model, template, q, zeta)
        sol, r = _solve_rci(prob, model, a, W, (box.center, box.half_width), x)
        if not sol.ok:
            status = f"{sol.status.value}@{k}"
            break
        q, v = _split(prob, sol.x)
        x, kkt = sol.x, max(kkt, sol.kkt_residual)
        a_used, box_used = a, box
        trace.append(r)
    if not trace:
        Abar, Bbar = (np.mean(np.asarray(m), axis=0) for m in (model.A, model.B))
        try:
            r0 = size_qp(Abar, Bbar, model.C, q, template, U, Y, M)[0]
        except RciInfeasible:
            r0 = np.inf
        nv = template.n_vertices
        return RciSolution(q, np.full((nv, U.nu), np.nan), np.zeros(model.n_p), r0, [],
                           status)
    return RciSolution(q, v, a_used, trace[-1], trace, status, box_used.center,
                       box_used.half_width, kkt, x)


# -- verification -----------------------------------------------------------

def _one_step_violation(model, F, q, Z, Uv, Wc):
    def one(z, u):
        p = sched(model, z)
        base = blend_(model.A, p) @ z + blend_(model.B, p) @ u
        Lp = blend_(model.L, p)
        succ = base[None, :] + Wc @ Lp.T
        return jnp.max(succ @ F.T - q), p
    return jax.vmap(one)(Z, Uv)


_one_step_jit = jax.jit(_one_step_violation)
_sched_batch = jax.jit(jax.vmap(sched, in_axes=(None, 0)))


def verify_rci(model: QlpvModel, W: DisturbanceBox, Y: OutputConstraints,
               U: InputConstraints, template: PolytopeTemplate, sol: RciSolution,
               n_samples: int = 10_000, seed: int = 0, tol: float = 1e-7) -> dict:
    """Brute-force check of an RCI solution; violations are reported, never raised."""
    q = np.asarray(sol.q, dtype=float)
    v = np.asarray(sol.v, dtype=float).reshape(template.n_vertices, U.nu)
    a = np.asarray(sol.a, dtype=float)
    rep = {"tol": tol, "n_samples": n_samples}
    tight = tightened_vertices(model, a, template, W)
    prob = RciProblem(template, Y, U)
    G, h = shat_rows_(prob, np.asarray(model.C), (tight.Atil, tight.Btil, tight.dtil),
                      W.c_w, W.eps_w, W.kappa)
    viol = np.asarray(G) @ np.concatenate([q, v.reshape(-1)]) - np.asarray(h)
    n_p, nv, nf = model.n_p, template.n_vertices, template.n_facets
    my, mu_ = Y.Hy.shape[0], U.Hu.shape[0]
    sizes = [n_p * nv * nf, nv * my, nv * mu_, template.E.shape[0]]
    names = ["rci_rows", "output_rows", "input_rows", "config_rows"]
    off = 0
    for name, k in zip(names, sizes):
        rep[f"{name}_max_violation"] = float(np.max(viol[off:off + k], initial=-np.inf))
        off += k
    rep["exact_ok"] = bool(np.all(viol <= tol))

    rng = np.random.default_rng(seed)
    ok_cfg = ccpoly.check_config(template, q)
    rep["config_ok"] = ok_cfg
    if ok_cfg:
        Z, lam = ccpoly.sample_hull(template, q, n_samples, rng)
        Uv = lam @ v
        dyn, P = _one_step_jit(model, jnp.asarray(template.F), jnp.asarray(q), jnp.asarray(Z),
                               jnp.asarray(Uv), jnp.asarray(W.corners()))
        dyn, P = np.asarray(dyn), np.asarray(P)
        Yc = (Z @ np.asarray(model.C).T)[:, None, :] + W.corners()[None]
        outv = np.max(Yc @ Y.Hy.T - Y.hy, axis=(1, 2))
        rep["sampled_dynamics_max_violation"] = float(dyn.max())
        rep["sampled_dynamics_violations"] = int(np.sum(dyn > tol))
        rep["sampled_output_max_violation"] = float(outv.max())
        rep["sampled_output_violations"] = int(np.sum(outv > tol))
        rep["sampled_input_max_violation"] = float(np.max(Uv @ U.Hu.T - U.hu))
        rep["sched_in_X_min_margin"] = float(np.min(P - a))
    else:
        rep["sampled_dynamics_violations"] = n_samples
        rep["sampled_output_violations"] = n_samples
        rep["sched_in_X_min_margin"] = -np.inf
        rep["sampled_input_max_violation"] = np.inf
    if sol.box_center is not None:
        Zb = sol.box_center + sol.box_half * rng.uniform(-1, 1, (n_samples, template.nx))
        Pb = np.asarray(_sched_batch(model, jnp.asarray(Zb)))
        rep["sched_in_box_min_margin"] = float(np.min(Pb - a))
    else:
        rep["sched_in_box_min_margin"] = float(rep["sched_in_X_min_margin"])
    rep["sampled_ok"] = bool(
        ok_cfg and rep["sampled_dynamics_violations"] == 0
        and rep["sampled_output_violations"] == 0
        and rep["sampled_input_max_violation"] <= tol
        and rep["sched_in_X_min_margin"] >= -1e-12
        and rep["sched_in_box_min_margin"] >= -1e-12)
    rep["passed"] = bool(rep["exact_ok"] and rep["sampled_ok"])
    return rep
