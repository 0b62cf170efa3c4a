"""Run configuration and the paired identification experiment.

One config drives data generation, pretraining, the sequential (tau = 0),
baseline-regularized and refinement-regularized runs, the k_hat = 200
re-solves and the closed loop. Data are scaled by their training standard
deviations; Y may be given in scaled or physical units, U likewise.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import ccpoly
from .plantlab import DuffingPlant, gen_dataset, load_dataset, save_dataset
from .qlpv import IoDataset, QlpvModel, bfr, simulate
from .rci import (InputConstraints, OutputConstraints, RciInfeasible, RciSolution, algorithm1,
                  characterize_w, solve_baseline_r)
from .synthesis import Checkpoint, RciContext, TrainConfig, algorithm2, pretrain


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": "runs/full",
    "train": TrainConfig().to_dict(),
    "plant": {"m": 1.5, "c": 1.0, "k": 1.0, "k3": 1000.0, "substeps": 10},
    "data": {"train": "data/train.csv", "disturbance": "data/disturbance.csv",
             "test": "data/test.csv", "points": {"train": 10000, "disturbance": 2000, "test": 10000},
             "seeds": {"train": 1, "disturbance": 2, "test": 3},
             "u_lo": -0.5, "u_hi": 0.5, "dt": 0.1, "hold": 1},
    "scaling": "std",
    "template": {"kind": "polygon", "facets": 8},
    "Y": {"lo": [-1.0], "hi": [1.0], "units": "scaled"},
    "U": {"lo": [-0.5], "hi": [0.5], "units": "physical"},
    "zeta_sweep": [0.01, 0.04, 0.07, 0.1],
    "rci": {"k_hat": 200, "verify_samples": 10000, "zeta": 0.07},
    "simulate": {"levels": [0.0, 0.8, -0.8, 1.5, -1.5, 0.3], "hold": 50, "T": 500,
                 "weight_u": 0.0, "weight_z": 0.0},
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k not in ("train",):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}{k} must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d):
        raw = _merge(DEFAULTS, d)
        raw["train"] = {**DEFAULTS["train"], **raw["train"]}
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def validate(self):
        r = self.raw
        try:
            self.train_config()
            DuffingPlant(**r["plant"])
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        pts = r["data"]["points"]
        if any(int(pts[k]) < 1 for k in ("train", "disturbance", "test")):
            raise ConfigError("data.points entries must be >= 1")
        if r["data"]["u_lo"] > r["data"]["u_hi"] or r["data"]["dt"] <= 0 or r["data"]["hold"] < 1:
            raise ConfigError("data needs u_lo <= u_hi, dt > 0 and hold >= 1")
        if r["scaling"] not in ("std", "none"):
            raise ConfigError("scaling must be 'std' or 'none'")
        if r["template"].get("kind") not in ("polygon", "box", "file"):
            raise ConfigError("template.kind must be polygon, box or file")
        for key in ("Y", "U"):
            spec = r[key]
            if spec.get("units") not in ("scaled", "physical"):
                raise ConfigError(f"{key}.units must be 'scaled' or 'physical'")
            if len(spec["lo"]) != len(spec["hi"]) or np.any(np.asarray(spec["lo"]) > np.asarray(spec["hi"])):
                raise ConfigError(f"{key} needs lo <= hi of equal length")
        if any(z <= 0 for z in r["zeta_sweep"]):
            raise ConfigError("zeta_sweep entries must be > 0")
        if r["rci"]["k_hat"] < 1 or r["rci"]["zeta"] <= 0 or r["rci"]["verify_samples"] < 1:
            raise ConfigError("rci needs k_hat >= 1, zeta > 0, verify_samples >= 1")
        s = r["simulate"]
        if s["hold"] < 1 or s["T"] < 0:
            raise ConfigError("simulate needs hold >= 1 and T >= 0")

    def __getitem__(self, k):
        return self.raw[k]

    def train_config(self, **over) -> TrainConfig:
        d = {**self.raw["train"], "seed": self.raw["seed"], **over}
        return TrainConfig.from_dict(d)

    def with_overrides(self, **over):
        return RunConfig.from_dict(_merge(self.raw, over))

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def comment(self) -> str:
        return f"config_hash={self.hash()}"

    def plant(self) -> DuffingPlant:
        return DuffingPlant(**self.raw["plant"])


# -- data and constraint setup ---------------------------------------------

def data_path(cfg: RunConfig, which: str) -> str:
    p = cfg["data"][which]
    return p if os.path.isabs(p) else os.path.join(cfg["out"], p)


def generate_data(cfg: RunConfig) -> dict:
    d, plant = cfg["data"], cfg.plant()
    return {k: gen_dataset(plant, d["seeds"][k], int(d["points"][k]), d["u_lo"], d["u_hi"],
                           d["dt"], d["hold"])
            for k in ("train", "disturbance", "test")}


def write_data(cfg: RunConfig, sets: dict, force: bool = False):
    paths = {k: data_path(cfg, k) for k in sets}
    clash = [p for p in paths.values() if os.path.exists(p)]
    if clash and not force:
        raise FileExistsError(f"refusing to overwrite {clash[0]} (use --force)")
    for k, ds in sets.items():
        os.makedirs(os.path.dirname(paths[k]) or ".", exist_ok=True)
        save_dataset(ds, paths[k], cfg.comment())
    return paths


def make_template(spec) -> ccpoly.PolytopeTemplate:
    if spec["kind"] == "polygon":
        return ccpoly.polygon_template(int(spec.get("facets", 8)))
    if spec["kind"] == "box":
        return ccpoly.box_template(int(spec.get("n_x", 2)))
    return ccpoly.PolytopeTemplate.load(spec["path"])


@dataclass
class Setup:
    """Scaled datasets, constraints and template for one run config."""

    train: IoDataset
    dw: IoDataset
    test: IoDataset
    su: np.ndarray
    sy: np.ndarray
    template: ccpoly.PolytopeTemplate
    Y: OutputConstraints
    U: InputConstraints

    @property
    def ctx(self) -> RciContext:
        return RciContext(self.template, self.Y, self.U, self.dw)

    def scaling(self):
        return {"u": self.su.tolist(), "y": self.sy.tolist()}


def make_setup(cfg: RunConfig, sets: dict | None = None) -> Setup:
    if sets is None:
        sets = {k: load_dataset(data_path(cfg, k)) for k in ("train", "disturbance", "test")}
    tr = sets["train"]
    if cfg["scaling"] == "std":
        su, sy = tr.u.std(axis=0), tr.y.std(axis=0)
        if np.any(su == 0) or np.any(sy == 0):
            raise ConfigError("training data has a constant channel; use scaling 'none'")
    else:
        su, sy = np.ones(tr.u.shape[1]), np.ones(tr.y.shape[1])
    sc = lambda d: IoDataset(d.u / su, d.y / sy, d.dt)
    Ys, Us = cfg["Y"], cfg["U"]
    yk = sy if Ys["units"] == "physical" else 1.0
    uk = su if Us["units"] == "physical" else 1.0
    Y = OutputConstraints.box(np.asarray(Ys["lo"]) / yk, np.asarray(Ys["hi"]) / yk)
    U = InputConstraints.box(np.asarray(Us["lo"]) / uk, np.asarray(Us["hi"]) / uk)
    tpl = make_template(cfg["template"])
    if tpl.nx != cfg["train"]["n_x"]:
        raise ConfigError(f"template has n_x = {tpl.nx}, model has n_x = {cfg['train']['n_x']}")
    return Setup(sc(tr), sc(sets["disturbance"]), sc(sets["test"]), su, sy, tpl, Y, U)


# -- evaluation ------------------------------------------------------------

def bfr_scores(model: QlpvModel, x0, s: Setup) -> dict:
    """Free-run BFR; the training set starts from the fitted x0, the others from 0."""
    out = {}
    for name, ds, z0 in (("train", s.train, x0), ("disturbance", s.dw, None), ("test", s.test, None)):
        z0 = np.zeros(model.nx) if z0 is None else z0
        out[name] = bfr(ds.y, simulate(model, z0, ds.u)[1])
    return out


def baseline_rci(model: QlpvModel, s: Setup, tc: TrainConfig) -> RciSolution:
    W = characterize_w(model, s.dw, tc.kappa)
    return solve_baseline_r(model, W, s.Y, s.U, s.template, tc.M, tc.qp_ridge)


def resolve_alg1(model: QlpvModel, s: Setup, tc: TrainConfig, q0, zeta, k_hat) -> RciSolution:
    W = characterize_w(model, s.dw, tc.kappa)
    return algorithm1(model, W, s.Y, s.U, s.template, q0, k_hat, zeta, tc.M, tc.qp_ridge)


def trace_report(trace, tol=1e-6) -> dict:
    t = np.asarray(trace, dtype=float)
    inc = np.diff(t)
    bad = np.where(inc > tol)[0]
    return {"monotone": bool(bad.size == 0), "n_increases": int(bad.size),
            "max_increase": float(inc.max(initial=0.0)),
            "first_increase_step": None if bad.size == 0 else int(bad[0] + 1)}


def pretrained(cfg: RunConfig, s: Setup) -> Checkpoint:
    tc = cfg.train_config()
    model, x0, st = pretrain(s.train, tc)
    ck = Checkpoint(model, x0, adam=st, config=tc, scaling=s.scaling())
    base = baseline_rci(model, s, tc)
    ck.extra["q0"] = np.asarray(base.q).tolist() if base.ok else None
    ck.extra["baseline_r_theta0"] = float(base.r)
    return ck


def identify_run(cfg: RunConfig, s: Setup, start: Checkpoint, name: str, tc: TrainConfig,
                 out_dir: str | None = None, strict: bool = False, progress=None) -> dict:
    """One concurrent-training run from ``start``; returns a summary and writes files."""
    log = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log = os.path.join(out_dir, f"{name}_log.csv")
    ck = algorithm2(s.train, s.ctx, tc, start, log_path=log, strict=strict, progress=progress,
                    comment=cfg.comment())
    ck.extra["q0"] = start.extra.get("q0")
    ck.extra["name"] = name
    summary = summarize(cfg, s, ck, name)
    ck.extra["summary"] = summary
    if out_dir is not None:
        ck.save(os.path.join(out_dir, f"{name}.json"))
    return {"summary": summary, "checkpoint": ck}


def summarize(cfg: RunConfig, s: Setup, ck: Checkpoint, name: str) -> dict:
    tc = ck.config
    scores = bfr_scores(ck.model, ck.x0, s)
    alg1 = tc.tau > 0 and tc.regularizer == "alg1"
    out = {"name": name, "tau": tc.tau, "regularizer": tc.regularizer if tc.tau > 0 else "none",
           "zeta": tc.zeta if alg1 else None,
           "outer_iters": ck.outer_iter, "final_r": float(ck.rci.r) if ck.rci else None,
           "bfr_train": scores["train"], "bfr_disturbance": scores["disturbance"],
           "bfr_test": scores["test"], "config_hash": cfg.hash(),
           "stalled_at": ck.extra.get("stalled_at")}
    if tc.tau == 0 or tc.regularizer == "baseline":
        sol = baseline_rci(ck.model, s, tc)
        out["d"] = float(sol.r)
        out["d_kind"] = "baseline"
        out["d_status"] = sol.status
    else:
        q0 = ck.extra.get("q0")
        q0 = np.zeros(s.template.n_facets) if q0 is None else np.asarray(q0)
        sol = resolve_alg1(ck.model, s, tc, q0, tc.zeta, cfg["rci"]["k_hat"])
        out["d"] = float(sol.r)
        out["d_kind"] = f"alg1_k{cfg['rci']['k_hat']}"
        out["d_status"] = sol.status
        out["trace"] = trace_report(sol.trace)
    return out


def compare(cfg: RunConfig, s: Setup, out_dir: str | None = None, strict: bool = False,
            zetas=None, progress=None) -> dict:
    """Paired runs from one pretrained model: sequential, baseline, zeta sweep."""
    start = pretrained(cfg, s)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        start.save(os.path.join(out_dir, "pretrained.json"))
    if start.extra["q0"] is None:
        raise RciInfeasible("no RCI set exists for the pretrained model; enlarge Y or U, "
                            "change the template or pretrain further")
    tc = cfg.train_config()
    runs = [("sequential", tc.replace(tau=0.0)), ("baseline", tc.replace(regularizer="baseline"))]
    zetas = cfg["zeta_sweep"] if zetas is None else zetas
    runs += [(f"zeta_{z:g}", tc.replace(zeta=float(z), regularizer="alg1")) for z in zetas]
    results = {}
    for name, rc in runs:
        p = None if progress is None else (lambda l, f, r, st, n=name: progress(n, l, f, r, st))
        results[name] = identify_run(cfg, s, start, name, rc, out_dir, strict, p)
    return {"pretrained": start, "runs": results}
