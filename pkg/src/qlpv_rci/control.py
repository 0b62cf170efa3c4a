"""Safe tracking controller and the plant/observer/controller closed loop.

The controller minimizes ||C z+ - r||^2 over u in U subject to
z+ = A(p(z)) z + B(p(z)) u + L(p(z)) (y - C z) lying in X(q). Both work in
model units; the plant runs in physical units and ``scaling`` converts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .ccpoly import PolytopeTemplate
from .plantlab import DuffingPlant, plant_step
from .qlpv import QlpvModel, blend, scheduling
from .qpcore import QpStatus, QuadProg, qp_solve
from .rci import InputConstraints

Z_TOL = 1e-7
U_TOL = 1e-9


class StateOutsideSet(ValueError):
    pass


@dataclass
class ControlResult:
    u: np.ndarray
    z_plus: np.ndarray
    status: str
    cost: float
    detail: str = ""


def _frozen(model: QlpvModel, z):
    p = scheduling(model, z)
    return blend(model.A, p), blend(model.B, p), blend(model.L, p)


def tracking_control(model: QlpvModel, q, template: PolytopeTemplate, U: InputConstraints,
                     z, y, r, weight_u: float = 0.0, weight_z: float = 0.0,
                     tol: float = 1e-10) -> ControlResult:
    """One step of the tracking QP in u; z+ follows affinely."""
    F, q = np.asarray(template.F), np.asarray(q, dtype=float)
    z, y, r = (np.asarray(v, dtype=float).reshape(-1) for v in (z, y, r))
    slack = F @ z - q
    if np.max(slack) > Z_TOL:
        raise StateOutsideSet(f"observer state outside X(q) by {np.max(slack):.3e}")
    m = model.to_numpy()
    C = np.asarray(m.C)
    Ap, Bp, Lp = _frozen(m, z)
    drift = Ap @ z + Lp @ (y - C @ z)
    CB = C @ Bp
    nu = Bp.shape[1]
    H = 2.0 * (CB.T @ CB + weight_u * np.eye(nu) + weight_z * Bp.T @ Bp)
    f = 2.0 * (CB.T @ (C @ drift - r) + weight_z * Bp.T @ drift)
    G = np.vstack([F @ Bp, U.Hu])
    h = np.concatenate([q - F @ drift, U.hu])
    sol = qp_solve(QuadProg(H, f, G, h), tol=tol)
    if not sol.ok:
        detail = ("no admissible input keeps z+ in X(q)" if sol.status == QpStatus.INFEASIBLE
                  else f"QP solver returned {sol.status.value}")
        return ControlResult(np.full(nu, np.nan), np.full(z.shape, np.nan), sol.status.value,
                             np.nan, detail)
    u = U.project(sol.x)
    zp = drift + Bp @ u
    e = C @ zp - r
    cost = float(e @ e + weight_u * u @ u + weight_z * zp @ zp)
    return ControlResult(u, zp, sol.status.value, cost)


@dataclass
class ClosedLoopTrace:
    x: np.ndarray  # plant states (T+1, 2), physical units
    y: np.ndarray  # outputs (T, ny), model units
    z: np.ndarray  # observer states (T+1, nx)
    u: np.ndarray  # inputs (T, nu), model units
    r: np.ndarray  # references (T, ny), model units
    status: list = field(default_factory=list)
    failed_at: int | None = None

    def __len__(self):
        return len(self.u)

    def to_csv(self, path, comment: str | None = None):
        ny, nx, nu = self.y.shape[1], self.z.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", *[f"y{i + 1}" for i in range(ny)], *[f"r{i + 1}" for i in range(ny)],
                        *[f"u{i + 1}" for i in range(nu)], *[f"z{i + 1}" for i in range(nx)],
                        "status"])
            f = lambda row: [repr(float(v)) for v in row]
            for t in range(len(self)):
                w.writerow([t, *f(self.y[t]), *f(self.r[t]), *f(self.u[t]), *f(self.z[t]),
                            self.status[t]])


def closed_loop(plant: DuffingPlant, model: QlpvModel, q, template: PolytopeTemplate,
                U: InputConstraints, r_seq, z0=None, plant_x0=(0.0, 0.0), T: int | None = None,
                dt: float = 0.1, u_scale=1.0, y_scale=1.0, weight_u=0.0, weight_z=0.0):
    """Run T steps: measure y_t, solve the tracking QP, apply u_t, advance.

    ``r_seq`` is in model output units, one row per step. Physical input is
    u_scale * u and the model sees y / y_scale.
    """
    r_seq = np.atleast_2d(np.asarray(r_seq, dtype=float))
    if r_seq.shape[0] == 1 and r_seq.shape[1] != model.ny:
        r_seq = r_seq.T
    T = len(r_seq) if T is None else int(T)
    if T > len(r_seq):
        raise ValueError(f"reference has {len(r_seq)} rows, need {T}")
    m = model.to_numpy()
    z = np.zeros(m.nx) if z0 is None else np.asarray(z0, dtype=float)
    if np.max(np.asarray(template.F) @ z - np.asarray(q)) > Z_TOL:
        raise StateOutsideSet("initial observer state outside X(q)")
    su, sy = np.asarray(u_scale, dtype=float), np.asarray(y_scale, dtype=float)
    s = np.asarray(plant_x0, dtype=float)
    xs, zs, ys, us, status = [s], [z], [], [], []
    failed = None
    for t in range(T):
        y = plant.output(s) / sy
        res = tracking_control(m, q, template, U, z, y, r_seq[t], weight_u, weight_z)
        if res.status != "Optimal":
            failed = t
            break
        s = plant_step(plant, s, float(np.reshape(su * res.u, -1)[0]), dt)
        z = res.z_plus
        xs.append(s)
        zs.append(z)
        ys.append(y)
        us.append(res.u)
        status.append(res.status)
    nu = m.nu
    return ClosedLoopTrace(np.array(xs), np.array(ys).reshape(-1, m.ny),
                           np.array(zs).reshape(-1, m.nx), np.array(us).reshape(-1, nu),
                           r_seq[:len(us)].copy(), status, failed)


def piecewise_reference(levels, hold: int, T: int) -> np.ndarray:
    """Piecewise-constant reference cycling through ``levels`` every ``hold`` steps."""
    levels = np.atleast_2d(np.asarray(levels, dtype=float))
    if levels.shape[0] == 1:
        levels = levels.T
    idx = (np.arange(T) // hold) % len(levels)
    return levels[idx]
