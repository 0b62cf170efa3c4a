"""Duffing-type oscillator plant, dataset generation and CSV dataset I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .qlpv import IoDataset


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DuffingPlant:
    """m*y'' + c*y' + k*y + k3*y^3 = u, integrated with RK4 under zero-order hold."""

    m: float = 1.5
    c: float = 1.0
    k: float = 1.0
    k3: float = 1000.0
    substeps: int = 10

    def __post_init__(self):
        if not all(np.isfinite([self.m, self.c, self.k, self.k3])):
            raise ValueError("plant coefficients must be finite")
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def rhs(self, s, u):
        y, v = s
        return np.array([v, (u - self.c * v - self.k * y - self.k3 * y ** 3) / self.m])

    def energy(self, s):
        y, v = s
        return 0.5 * self.m * v ** 2 + 0.5 * self.k * y ** 2 + 0.25 * self.k3 * y ** 4

    def output(self, s):
        return np.array([s[0]])


def plant_step(plant: DuffingPlant, state, u, dt: float, substeps: int | None = None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = plant.substeps if substeps is None else substeps
    s = np.asarray(state, dtype=float).copy()
    u = float(np.asarray(u).reshape(-1)[0])
    if not (np.all(np.isfinite(s)) and np.isfinite(u)):
        raise FloatingPointError("non-finite plant state or input")
    h = dt / n
    for _ in range(n):
        k1 = plant.rhs(s, u)
        k2 = plant.rhs(s + 0.5 * h * k1, u)
        k3 = plant.rhs(s + 0.5 * h * k2, u)
        k4 = plant.rhs(s + h * k3, u)
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("plant state became non-finite")
    return s


def gen_dataset(plant: DuffingPlant, seed: int, N: int, u_lo=-0.5, u_hi=0.5,
                dt=0.1, hold: int = 1, state0=(0.0, 0.0)) -> IoDataset:
    """Random uniform inputs held for ``hold`` samples; y_t is measured before u_t acts."""
    if u_lo > u_hi:
        raise ValueError("u_lo must not exceed u_hi")
    if N < 1 or hold < 1:
        raise ValueError("N and hold must be >= 1")
    rng = np.random.default_rng(seed)
    n_draw = -(-N // hold)
    u = np.repeat(rng.uniform(u_lo, u_hi, size=n_draw), hold)[:N]
    y = np.empty(N)
    s = np.asarray(state0, dtype=float)
    for t in range(N):
        y[t] = s[0]
        s = plant_step(plant, s, u[t], dt)
    return IoDataset(u[:, None], y[:, None], dt)


def save_dataset(data: IoDataset, path, comment: str | None = None):
    nu, ny = data.u.shape[1], data.y.shape[1]
    ucols = ["u"] if nu == 1 else [f"u{i + 1}" for i in range(nu)]
    ycols = ["y"] if ny == 1 else [f"y{i + 1}" for i in range(ny)]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["t", *ucols, *ycols])
        for t in range(len(data)):
            w.writerow([f"{t * data.dt:.17g}"] + [f"{v:.17g}" for v in data.u[t]]
                       + [f"{v:.17g}" for v in data.y[t]])


def load_dataset(path) -> IoDataset:
    with open(path, newline="") as fh:
        lines = [(i + 1, ln) for i, ln in enumerate(fh) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DatasetFormatError(f"{path}: empty dataset file")
    header = next(csv.reader([lines[0][1]]))
    if not header or header[0] != "t":
        raise DatasetFormatError(f"{path}:{lines[0][0]}: header must start with 't'")
    ucols = [i for i, c in enumerate(header) if c == "u" or (c.startswith("u") and c[1:].isdigit())]
    ycols = [i for i, c in enumerate(header) if c == "y" or (c.startswith("y") and c[1:].isdigit())]
    if not ucols or not ycols or len(ucols) + len(ycols) + 1 != len(header):
        raise DatasetFormatError(f"{path}:{lines[0][0]}: header must be t,u...,y...")
    rows = []
    for lineno, ln in lines[1:]:
        rec = next(csv.reader([ln]))
        if len(rec) != len(header):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append([float(v) for v in rec])
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    arr = np.array(rows)
    dt = float(arr[1, 0] - arr[0, 0]) if len(arr) > 1 else 1.0
    return IoDataset(arr[:, ucols], arr[:, ycols], dt)
