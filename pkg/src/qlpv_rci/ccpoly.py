"""Configuration-constrained polytope templates X(q) = {x : F x <= q}.

Only simple polytopes given by an explicit vertex-facet incidence are
supported: vertex j is the intersection of the n_x facets listed in
``incidence[j]``, so the vertex map is V_j = inv(F[J_j]) S_j with S_j the
selector of the J_j entries of q.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CONFIG_TOL = 1e-9
MAX_COND = 1e8


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PolytopeTemplate:
    F: np.ndarray
    incidence: tuple
    V: np.ndarray  # (n_vertices, n_x, n_facets)
    E: np.ndarray  # configuration cone rows

    @property
    def n_facets(self):
        return self.F.shape[0]

    @property
    def n_vertices(self):
        return len(self.incidence)

    @property
    def nx(self):
        return self.F.shape[1]

    def to_dict(self):
        return {
            "n_x": self.nx,
            "n_facets": self.n_facets,
            "n_vertices": self.n_vertices,
            "F": self.F.tolist(),
            "incidence": [list(J) for J in self.incidence],
        }

    @classmethod
    def from_dict(cls, d):
        t = build_template(np.asarray(d["F"], dtype=float), d["incidence"])
        if (t.nx, t.n_facets, t.n_vertices) != (d["n_x"], d["n_facets"], d["n_vertices"]):
            raise TemplateError("stored dimensions disagree with F/incidence")
        return t

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x : |x - center| <= half_width}.

    ``argmax``/``argmin`` record, per coordinate, which template vertex
    attained the max/min so that gradients can treat the choice as fixed.
    """

    center: np.ndarray
    half_width: np.ndarray
    argmax: np.ndarray = None
    argmin: np.ndarray = None

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width

    def contains(self, x, tol=0.0):
        return bool(np.all(np.abs(np.asarray(x) - self.center) <= self.half_width + tol))


def build_template(F, incidence) -> PolytopeTemplate:
    F = np.atleast_2d(np.asarray(F, dtype=float))
    nf, nx = F.shape
    inc = tuple(tuple(int(i) for i in J) for J in incidence)
    seen = set()
    V = np.zeros((len(inc), nx, nf))
    for j, J in enumerate(inc):
        if len(J) != nx or len(set(J)) != nx:
            raise TemplateError(f"vertex {j}: incidence {J} must list {nx} distinct facets")
        if any(i < 0 or i >= nf for i in J):
            raise TemplateError(f"vertex {j}: facet index out of range in {J}")
        key = frozenset(J)
        if key in seen:
            raise TemplateError(f"vertex {j}: duplicate incidence {J}")
        seen.add(key)
        FJ = F[list(J)]
        if np.linalg.cond(FJ) > MAX_COND:
            raise TemplateError(f"vertex {j}: facet submatrix {J} is singular")
        S = np.zeros((nx, nf))
        S[np.arange(nx), list(J)] = 1.0
        V[j] = np.linalg.solve(FJ, S)
    rows = []
    for j, J in enumerate(inc):
        for i in range(nf):
            if i in J:
                continue
            row = F[i] @ V[j]
            row[i] -= 1.0
            rows.append(row)
    E = np.array(rows).reshape(-1, nf)
    return PolytopeTemplate(F, inc, V, E)


def box_template(nx: int) -> PolytopeTemplate:
    """Axis-aligned box: facets x_i <= q_i and -x_i <= q_{nx+i}.

    Vertices follow a reflected Gray code so that consecutive vertices are
    adjacent (counter-clockwise in 2D, starting at (+,+)).
    """
    F = np.vstack([np.eye(nx), -np.eye(nx)])
    incidence = []
    for k in range(2 ** nx):
        gray = k ^ (k >> 1)
        bits = [(gray >> i) & 1 for i in range(nx)]
        incidence.append(tuple(i + nx * b for i, b in enumerate(bits)))
    return build_template(F, incidence)


def polygon_template(n_facets: int) -> PolytopeTemplate:
    """Regular polygon in 2D with normals at angles 2*pi*i/n_facets."""
    if n_facets < 3:
        raise TemplateError("a polygon needs at least 3 facets")
    ang = 2 * np.pi * np.arange(n_facets) / n_facets
    F = np.column_stack([np.cos(ang), np.sin(ang)])
    incidence = [(i, (i + 1) % n_facets) for i in range(n_facets)]
    return build_template(F, incidence)


def check_config(template: PolytopeTemplate, q) -> bool:
    q = np.asarray(q, dtype=float)
    if q.shape != (template.n_facets,):
        raise TemplateError(f"q has shape {q.shape}, expected ({template.n_facets},)")
    return bool(np.all(template.E @ q <= CONFIG_TOL))


def vertices(template: PolytopeTemplate, q) -> np.ndarray:
    """Vertices V_j q stacked as rows (n_vertices x n_x)."""
    if not check_config(template, q):
        raise TemplateError("q violates the configuration constraints E q <= 0")
    return np.einsum("jxf,f->jx", template.V, np.asarray(q, dtype=float))


def bounding_box(template: PolytopeTemplate, q, zeta: float) -> Box:
    """Bounding box of X(q) with half-widths inflated by ``zeta``."""
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    X = vertices(template, q)
    # np.argmax/argmin return the first (lowest-index) maximizer
    imax = np.argmax(X, axis=0)
    imin = np.argmin(X, axis=0)
    cols = np.arange(template.nx)
    hi, lo = X[imax, cols], X[imin, cols]
    return Box(0.5 * (hi + lo), 0.5 * (hi - lo) + zeta, imax, imin)


def contains(template: PolytopeTemplate, q, x, tol=1e-9) -> bool:
    return bool(np.all(template.F @ np.asarray(x, dtype=float) <= np.asarray(q) + tol))


def sample_hull(template: PolytopeTemplate, q, n: int, rng) -> tuple:
    """Dirichlet(1) hull-weight samples: returns (points, weights)."""
    X = vertices(template, q)
    lam = rng.dirichlet(np.ones(template.n_vertices), size=n)
    return lam @ X, lam

