"""Dense convex QP solver with KKT-based solution derivatives.

Problems have the form

    minimize    0.5 x'Hx + f'x
    subject to  G x <= h
                Aeq x = beq

and are solved with a Mehrotra predictor-corrector interior point method
followed by an active-set polish, so that the returned solution carries a
crisp active set for implicit differentiation.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import nnls

REG_FACTOR = 1e-9
ACTIVE_SLACK = 1e-7
STALL_PRES = 1e-6  # primal residual below which a stalled run is polished
STALL_KKT = 1e-8


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


class QpDimensionError(ValueError):
    pass


class QpNotConvexError(ValueError):
    pass


def _as2d(a, ncols):
    if a is None:
        return np.zeros((0, ncols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, ncols))
    return a


def _as1d(a):
    if a is None:
        return np.zeros(0)
    return np.asarray(a, dtype=float).reshape(-1)


@dataclass(frozen=True)
class QuadProg:
    """Container for a dense QP; H is symmetrized on construction."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray = None
    h: np.ndarray = None
    Aeq: np.ndarray = None
    beq: np.ndarray = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise QpDimensionError(f"H must be square, got {H.shape}")
        f = _as1d(self.f)
        if f.shape != (n,):
            raise QpDimensionError(f"f has length {f.size}, expected {n}")
        G = _as2d(self.G, n)
        h = _as1d(self.h)
        Aeq = _as2d(self.Aeq, n)
        beq = _as1d(self.beq)
        if G.shape[1] != n or h.shape != (G.shape[0],):
            raise QpDimensionError(f"G {G.shape} / h {h.shape} inconsistent with n={n}")
        if Aeq.shape[1] != n or beq.shape != (Aeq.shape[0],):
            raise QpDimensionError(f"Aeq {Aeq.shape} / beq {beq.shape} inconsistent with n={n}")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "Aeq", Aeq)
        object.__setattr__(self, "beq", beq)

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def m(self):
        return self.G.shape[0]

    @property
    def p(self):
        return self.Aeq.shape[0]

    @property
    def rho(self):
        scale = np.trace(self.H) / self.n
        return REG_FACTOR * (scale if scale > 0 else 1.0)

    def regularized_hessian(self):
        Hr = self.H + self.rho * np.eye(self.n)
        try:
            np.linalg.cholesky(Hr)
        except np.linalg.LinAlgError:
            raise QpNotConvexError(
                "H + rho*I is not positive definite (offending matrix: H)"
            ) from None
        return Hr

    def dump(self, path):
        """Write the problem as plain-text matrix blocks for offline inspection."""
        with open(path, "w") as fh:
            for name in ("H", "f", "G", "h", "Aeq", "beq"):
                a = np.atleast_2d(getattr(self, name))
                if name in ("f", "h", "beq"):
                    a = a.reshape(-1, 1)
                fh.write(f"# {name} {a.shape[0]} {a.shape[1]}\n")
                np.savetxt(fh, a, fmt="%.17g")


@dataclass
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: QpStatus
    kkt_residual: float
    active: np.ndarray = field(default=None)
    iterations: int = 0
    polished: bool = False

    @property
    def ok(self):
        return self.status == QpStatus.OPTIMAL


def kkt_residuals(qp: QuadProg, x, lam, nu, H=None):
    """Return (stationarity, primal infeasibility, complementarity, dual infeasibility)."""
    H = qp.H if H is None else H
    r_d = H @ x + qp.f + qp.G.T @ lam + qp.Aeq.T @ nu
    slack = qp.G @ x - qp.h
    stat = np.max(np.abs(r_d), initial=0.0)
    pinf = max(np.max(slack, initial=0.0), np.max(np.abs(qp.Aeq @ x - qp.beq), initial=0.0))
    comp = np.max(np.abs(lam * slack), initial=0.0)
    dinf = max(0.0, -np.min(lam, initial=0.0))
    return stat, pinf, comp, dinf


def _solve_kkt(H, GA, Aeq, rhs):
    """Solve the symmetric equality-constrained KKT system; lstsq when singular."""
    k = GA.shape[0] + Aeq.shape[0]
    C = np.vstack([GA, Aeq])
    K = np.block([[H, C.T], [C, np.zeros((k, k))]])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(K, check_finite=False)
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        if np.all(np.isfinite(sol)) and np.linalg.cond(K) < 1e12:
            return sol, False
    except (sla.LinAlgError, ValueError):
        pass
    sol = sla.lstsq(K, rhs, cond=1e-13, lapack_driver="gelsd")[0]
    return sol, True


def _polish(qp, H, x, s, lam, max_rounds=8):
    """Active-set refinement of an interior point iterate.

    Multipliers of a rank-deficient (degenerate) active set are recovered by
    nonnegative least squares on the stationarity condition. Returns
    (x, lam, nu, active) or None when no consistent active set is found.
    """
    n, m, p = qp.n, qp.m, qp.p
    hscale = 1.0 + np.abs(qp.h)
    active = (s <= ACTIVE_SLACK * hscale) | (lam > s)
    for _ in range(max_rounds):
        GA = qp.G[active]
        rhs = np.concatenate([-qp.f, qp.h[active], qp.beq])
        sol, singular = _solve_kkt(H, GA, qp.Aeq, rhs)
        xp = sol[:n]
        lamA = sol[n:n + GA.shape[0]]
        nup = sol[n + GA.shape[0]:]
        if singular and GA.shape[0]:
            g = H @ xp + qp.f
            basis = np.hstack([GA.T, qp.Aeq.T, -qp.Aeq.T])
            coef, _ = nnls(basis, -g, maxiter=50 * basis.shape[1])
            k = GA.shape[0]
            lamA, nup = coef[:k], coef[k:k + p] - coef[k + p:]
        lam_full = np.zeros(m)
        lam_full[active] = lamA
        viol = qp.G @ xp - qp.h
        neg = active & (lam_full < -1e-10)
        bad = (~active) & (viol > 1e-10 * hscale)
        if not neg.any() and not bad.any():
            return xp, np.maximum(lam_full, 0.0), nup, active
        active = (active & ~neg) | bad
    return None


def qp_solve(qp: QuadProg, tol: float = 1e-9, max_iter: int = 100, x_init=None) -> QpSolution:
    """Solve a convex QP.

    ``x_init`` optionally warm-starts the primal iterate. The result status is
    ``Infeasible`` when a Farkas certificate appears or the primal residual
    stays above ``STALL_PRES*(1+|h|_inf)`` after ``max_iter`` iterations. A
    run that stalls closer to feasibility is polished and reported Optimal if
    the polished KKT residual is within ``STALL_KKT``, MaxIter otherwise.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    H = qp.regularized_hessian()
    n, m, p = qp.n, qp.m, qp.p
    G, h, A, b, f = qp.G, qp.h, qp.Aeq, qp.beq, qp.f
    hnorm = np.max(np.abs(h), initial=0.0)
    fnorm = np.max(np.abs(f), initial=0.0)

    if m == 0:
        sol, _ = _solve_kkt(H, G, A, np.concatenate([-f, b]))
        x, nu = sol[:n], sol[n:]
        lam = np.zeros(0)
        res = max(kkt_residuals(qp, x, lam, nu, H))
        return QpSolution(x, lam, nu, QpStatus.OPTIMAL, res, np.zeros(0, bool), 0, True)

    # starting point: least squares on objective + constraints as equalities
    if x_init is None:
        K0 = H + G.T @ G
        rhs = -f + G.T @ h
        if p:
            sol, _ = _solve_kkt(K0, np.zeros((0, n)), A, np.concatenate([rhs, b]))
            x = sol[:n]
        else:
            x = sla.solve(K0, rhs, assume_a="pos")
    else:
        x = np.asarray(x_init, dtype=float).copy()
    s = h - G @ x
    shift = -np.min(s)
    if shift >= -1.0:
        s = s + (1.0 + shift)
    lam = np.ones(m)
    nu = np.zeros(p)

    status = QpStatus.MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ x + f + G.T @ lam + A.T @ nu
        r_p = G @ x + s - h
        r_e = A @ x - b
        mu = s @ lam / m
        pres = max(np.max(np.abs(r_p)), np.max(np.abs(r_e), initial=0.0))
        if (np.max(np.abs(r_d)) <= tol * (1.0 + fnorm)
                and pres <= tol * (1.0 + hnorm) and mu <= tol):
            status = QpStatus.OPTIMAL
            break

        # Farkas certificate: lam >= 0, G'lam + A'nu = 0, h'lam + b'nu < 0
        lnorm = np.max(lam) + np.max(np.abs(nu), initial=0.0)
        if lnorm > 1e6:
            gap = h @ lam + b @ nu
            if gap < 0 and np.max(np.abs(G.T @ lam + A.T @ nu)) <= 1e-8 * (-gap):
                status = QpStatus.INFEASIBLE
                break

        with np.errstate(over="ignore", divide="ignore"):
            d = lam / s
        if not np.all(np.isfinite(d)):
            break
        K = H + (G.T * d) @ G
        if p:
            Kfull = np.block([[K, A.T], [A, np.zeros((p, p))]])
            fac = sla.lu_factor(Kfull, check_finite=False)

            def solve(r1, r2):
                sol = sla.lu_solve(fac, np.concatenate([r1, r2]), check_finite=False)
                return sol[:n], sol[n:]
        else:
            try:
                fac = sla.cho_factor(K, check_finite=False)
            except sla.LinAlgError:
                fac = None
                lu = sla.lu_factor(K, check_finite=False)

            def solve(r1, r2):
                if fac is not None:
                    return sla.cho_solve(fac, r1, check_finite=False), np.zeros(0)
                return sla.lu_solve(lu, r1, check_finite=False), np.zeros(0)

        def direction(r_c):
            r1 = -r_d + G.T @ ((r_c - lam * r_p) / s)
            dx, dnu = solve(r1, -r_e)
            ds = -r_p - G @ dx
            dlam = (-r_c - lam * ds) / s
            return dx, ds, dlam, dnu

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, np.min(-v[neg] / dv[neg]))

        dx, ds, dlam, dnu = direction(s * lam)
        a_aff = min(max_step(s, ds), max_step(lam, dlam))
        mu_aff = (s + a_aff * ds) @ (lam + a_aff * dlam) / m
        sigma = (mu_aff / mu) ** 3
        r_c = s * lam + ds * dlam - sigma * mu
        dx, ds, dlam, dnu = direction(r_c)
        alpha = min(1.0, 0.99 * min(max_step(s, ds), max_step(lam, dlam)))
        xn, sn = x + alpha * dx, s + alpha * ds
        lamn, nun = lam + alpha * dlam, nu + alpha * dnu
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(lamn))
                and np.all(sn > 0) and np.all(lamn > 0)):
            break  # numerical breakdown: keep the last sound iterate
        x, s, lam, nu = xn, sn, lamn, nun

    if status == QpStatus.MAX_ITER:
        r_p = G @ x - h
        pres = max(np.max(r_p, initial=0.0), np.max(np.abs(A @ x - b), initial=0.0))
        if not np.isfinite(pres) or pres > STALL_PRES * (1.0 + hnorm):
            status = QpStatus.INFEASIBLE
        else:
            # stalled close to the optimum (typical for nearly singular H):
            # accept an active-set polish that meets a slightly looser bound
            pol = _polish(qp, H, x, np.maximum(-r_p, 0.0), lam)
            if pol is not None:
                xp, lamp, nup, active = pol
                pres = max(kkt_residuals(qp, xp, lamp, nup, H))
                if pres <= STALL_KKT * (1.0 + max(fnorm, hnorm)):
                    return QpSolution(xp, lamp, nup, QpStatus.OPTIMAL, pres, active, it, True)

    if status != QpStatus.OPTIMAL:
        res = max(kkt_residuals(qp, x, lam, nu, H))
        return QpSolution(x, lam, nu, status, res, s <= ACTIVE_SLACK, it, False)

    ip_res = max(kkt_residuals(qp, x, lam, nu, H))
    pol = _polish(qp, H, x, s, lam)
    if pol is not None:
        xp, lamp, nup, active = pol
        pres = max(kkt_residuals(qp, xp, lamp, nup, H))
        if pres <= max(ip_res, 1e-9):
            return QpSolution(xp, lamp, nup, QpStatus.OPTIMAL, pres, active, it, True)
    active = (s <= ACTIVE_SLACK * (1.0 + np.abs(h))) | (lam > s)
    return QpSolution(x, lam, nu, QpStatus.OPTIMAL, ip_res, active, it, False)


@dataclass
class QpGradients:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    degenerate: bool = False


def qp_gradients(qp: QuadProg, sol: QpSolution, dL_dx, lam_tol: float = 1e-9) -> QpGradients:
    """Backpropagate dL/dx* to all QP data through the active-set KKT system.

    Constraints that are active with (near) zero multiplier are treated as
    inactive, which also sets ``degenerate``.
    """
    if sol.status != QpStatus.OPTIMAL:
        raise ValueError(f"cannot differentiate a {sol.status.value} solution")
    n, m = qp.n, qp.m
    H = qp.H + qp.rho * np.eye(n)
    g = np.asarray(dL_dx, dtype=float).reshape(-1)
    lam = sol.lam
    active = np.zeros(m, bool) if sol.active is None else sol.active.copy()
    weak = active & (lam <= lam_tol * (1.0 + np.max(lam, initial=0.0)))
    degenerate = bool(weak.any())
    act = active & ~weak
    GA = qp.G[act]
    k = GA.shape[0]
    rhs = np.concatenate([g, np.zeros(k + qp.p)])
    v, singular = _solve_kkt(H, GA, qp.Aeq, rhs)
    degenerate = degenerate or singular
    vx, vl, vn = v[:n], v[n:n + k], v[n + k:]
    x = sol.x
    dHe = -np.outer(vx, x)
    dH = 0.5 * (dHe + dHe.T) + (REG_FACTOR / n) * np.trace(dHe) * np.eye(n)
    dG = np.zeros_like(qp.G)
    dG[act] = -(np.outer(lam[act], vx) + np.outer(vl, x))
    dh = np.zeros(m)
    dh[act] = vl
    dA = -(np.outer(sol.nu, vx) + np.outer(vn, x))
    return QpGradients(dH, -vx, dG, dh, dA, vn.copy(), degenerate)


def lp_membership(point, generators, tol: float = 1e-7) -> bool:
    """True iff ``point`` lies (within ``tol``, inf-norm) in the convex hull of ``generators``."""
    P = np.asarray(point, dtype=float).reshape(-1)
    Gm = np.array([np.asarray(g, dtype=float).reshape(-1) for g in generators]).T
    if Gm.size == 0:
        raise QpDimensionError("at least one generator is required")
    if Gm.shape[0] != P.size:
        raise QpDimensionError(f"generator dimension {Gm.shape[0]} != point dimension {P.size}")
    k = Gm.shape[1]
    # scale-normalize so tolerances act on comparable magnitudes
    scale = max(1.0, np.max(np.abs(Gm)), np.max(np.abs(P)))
    Gs, Ps = Gm / scale, P / scale
    H = Gs.T @ Gs + 1e-12 * np.eye(k)
    qp = QuadProg(H, -Gs.T @ Ps, -np.eye(k), np.zeros(k), np.ones((1, k)), np.ones(1))
    sol = qp_solve(qp, tol=1e-12, max_iter=200)
    if sol.status == QpStatus.INFEASIBLE:
        return False
    lam = np.clip(sol.x, 0.0, None)
    lam = lam / lam.sum()
    if np.max(np.abs(Gm @ lam - P)) <= tol:
        return True
    # the rho ridge biases lam when generators nearly coincide; re-solve the
    # unregularized least squares on the support of lam
    S = lam > 1e-9 * lam.max()
    K = np.block([[Gs[:, S].T @ Gs[:, S], np.ones((S.sum(), 1))],
                  [np.ones((1, S.sum())), np.zeros((1, 1))]])
    sol_s = np.linalg.lstsq(K, np.concatenate([Gs[:, S].T @ Ps, [1.0]]), rcond=None)[0]
    ref = np.zeros(k)
    ref[S] = sol_s[:-1]
    if np.any(ref < 0):
        return False
    return bool(np.max(np.abs(Gm @ ref - P)) <= tol)
