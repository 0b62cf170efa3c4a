"""Command-line interface: gen-data, identify, rci, simulate, report.

Exit codes: 0 success, 2 infeasibility, 3 I/O, 4 config validation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from xml.sax.saxutils import escape

import numpy as np

EXIT_OK, EXIT_INFEASIBLE, EXIT_IO, EXIT_CONFIG = 0, 2, 3, 4


class Infeasible(RuntimeError):
    pass


# -- SVG --------------------------------------------------------------------

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"]


class SvgPanel:
    """Axes box with linear scales; everything is drawn in data coordinates."""

    def __init__(self, x0, y0, w, h, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        pad = lambda lo, hi: (lo - 1.0, hi + 1.0) if hi - lo < 1e-12 else (lo, hi)
        self.xlim, self.ylim = pad(*xlim), pad(*ylim)
        self.items = []
        self.legend = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x, y):
        (a, b), (c, d) = self.xlim, self.ylim
        return (self.x0 + (x - a) / (b - a) * self.w, self.y0 + self.h - (y - c) / (d - c) * self.h)

    def _pts(self, xs, ys):
        return " ".join("%.2f,%.2f" % self.px(x, y) for x, y in zip(xs, ys)
                        if math.isfinite(x) and math.isfinite(y))

    def line(self, xs, ys, color, label=None, width=1.5, dash=None, markers=False):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{d} '
                          f'points="{self._pts(xs, ys)}"/>')
        if markers:
            for x, y in zip(xs, ys):
                if math.isfinite(x) and math.isfinite(y):
                    cx, cy = self.px(x, y)
                    self.items.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}"/>')
        if label:
            self.legend.append((label, color))

    def polygon(self, xs, ys, fill, stroke, label=None):
        self.items.append(f'<polygon fill="{fill}" fill-opacity="0.3" stroke="{stroke}" '
                          f'points="{self._pts(xs, ys)}"/>')
        if label:
            self.legend.append((label, stroke))

    def render(self, uid=0):
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" '
               'fill="white" stroke="black"/>']
        out += [f'<clipPath id="c{uid}"><rect x="{self.x0}" y="{self.y0}" width="{self.w}" '
                f'height="{self.h}"/></clipPath><g clip-path="url(#c{uid})">', *self.items, "</g>"]
        for k, (lo, hi) in enumerate((self.xlim, self.ylim)):
            for t in np.linspace(lo, hi, 5):
                if k == 0:
                    x, y = self.px(t, self.ylim[0])
                    out.append(f'<text x="{x:.1f}" y="{y + 14:.1f}" font-size="10" '
                               f'text-anchor="middle">{t:.3g}</text>')
                else:
                    x, y = self.px(self.xlim[0], t)
                    out.append(f'<text x="{x - 4:.1f}" y="{y + 3:.1f}" font-size="10" '
                               f'text-anchor="end">{t:.3g}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 - 8}" font-size="12" '
                   f'text-anchor="middle">{escape(self.title)}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2}" y="{self.y0 + self.h + 30}" font-size="11" '
                   f'text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="{self.x0 - 45}" y="{self.y0 + self.h / 2}" font-size="11" '
                   f'text-anchor="middle" transform="rotate(-90 {self.x0 - 45} {self.y0 + self.h / 2})">'
                   f'{escape(self.ylabel)}</text>')
        for i, (label, color) in enumerate(self.legend):
            y = self.y0 + 14 + 14 * i
            out.append(f'<line x1="{self.x0 + self.w - 130}" x2="{self.x0 + self.w - 110}" '
                       f'y1="{y - 4}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{self.x0 + self.w - 105}" y="{y}" font-size="10">'
                       f'{escape(label)}</text>')
        return "\n".join(out)


def write_svg(path, panels, width, height, comment=None):
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n')
        if comment:
            fh.write(f"<!-- {escape(comment)} -->\n")
        for i, p in enumerate(panels):
            fh.write(p.render(i) + "\n")
        fh.write("</svg>\n")


def _lims(*arrays):
    v = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (0.0, 1.0)
    lo, hi = float(v.min()), float(v.max())
    m = 0.05 * (hi - lo) if hi > lo else 1.0
    return (lo - m, hi + m)


def plot_zeta_sweep(path, zetas, d_zeta, d_seq, d_base, comment=None):
    p = SvgPanel(70, 40, 520, 300, _lims(zetas), _lims(d_zeta, [d_seq, d_base]),
                 "RCI size after concurrent training", "zeta", "d")
    p.line(zetas, d_zeta, COLORS[0], "d_zeta (refined, k=200)", markers=True)
    xl = p.xlim
    for val, col, lab in ((d_seq, COLORS[1], "d_seq"), (d_base, COLORS[2], "d_base")):
        if math.isfinite(val):
            p.line(xl, [val, val], col, lab, dash="6,4")
    write_svg(path, [p], 640, 400, comment)


def plot_trace(path, trace, comment=None):
    k = np.arange(1, len(trace) + 1)
    p = SvgPanel(70, 40, 520, 300, _lims(k), _lims(trace), "set refinement iterations", "k", "r_k")
    p.line(k, trace, COLORS[0], "r_k")
    write_svg(path, [p], 640, 400, comment)


def plot_closed_loop(path, trc, model, q, template, Y, comment=None):
    from . import ccpoly
    t = np.arange(len(trc))
    Cz = trc.z[:-1] @ np.asarray(model.C).T if len(trc) else np.zeros((0, 1))
    ylo, yhi = Y.vertices.min(axis=0), Y.vertices.max(axis=0)
    top = SvgPanel(70, 40, 620, 250, _lims(t if len(t) else [0, 1]),
                   _lims(trc.y, trc.r, Cz, [ylo[0], yhi[0]]), "Closed-loop output", "t", "y (scaled)")
    if len(trc):
        top.line(t, trc.r[:, 0], COLORS[3], "reference", dash="4,3")
        top.line(t, trc.y[:, 0], COLORS[0], "plant y")
        top.line(t, Cz[:, 0], COLORS[2], "model C z", width=1.0)
    for b in (ylo[0], yhi[0]):
        top.line(top.xlim, [b, b], "black", width=2)
    X = ccpoly.vertices(template, q)
    Xc = np.vstack([X, X[:1]])
    bot = SvgPanel(70, 350, 620, 300, _lims(Xc[:, 0], trc.z[:, 0]), _lims(Xc[:, 1], trc.z[:, 1]),
                   "Observer state in X(q)", "z1", "z2")
    bot.polygon(Xc[:, 0], Xc[:, 1], "#9ecae1", COLORS[0], "X(q)")
    bot.line(trc.z[:, 0], trc.z[:, 1], COLORS[2], "z_t", width=1.0)
    write_svg(path, [top, bot], 740, 700, comment)


# -- helpers ----------------------------------------------------------------

def _csv(path, header, rows, comment):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def _config(args):
    from .experiment import ConfigError, RunConfig
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if getattr(args, "points", None) is not None:
        if args.points < 1:
            raise ConfigError("--points must be >= 1")
        over["data"] = {"points": {k: args.points for k in ("train", "disturbance", "test")}}
    return cfg.with_overrides(**over) if over else cfg


def _echo_config(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.effective.json"), "w") as fh:
        json.dump({"config_hash": cfg.hash(), **cfg.raw}, fh, indent=1, sort_keys=True)


def _summary_rows(summaries):
    rows = []
    for s in summaries:
        rows.append([s["name"], s["tau"], s["regularizer"], s["zeta"], s["d"], s["d_kind"],
                     s["bfr_train"], s["bfr_disturbance"], s["bfr_test"]])
    return rows


SUMMARY_HEADER = ["run", "tau", "regularizer", "zeta", "d", "d_kind", "bfr_train",
                  "bfr_disturbance", "bfr_test"]


def markdown_table(summaries):
    lines = ["| " + " | ".join(SUMMARY_HEADER) + " |",
             "|" + "---|" * len(SUMMARY_HEADER)]
    for r in _summary_rows(summaries):
        cells = ["-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v) for v in r]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args):
    from .experiment import generate_data, write_data
    cfg = _config(args)
    _echo_config(cfg)
    paths = write_data(cfg, generate_data(cfg), force=args.force)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_identify(args):
    from .experiment import compare, identify_run, make_setup, pretrained
    from .rci import RciInfeasible
    cfg = _config(args)
    _echo_config(cfg)
    s = make_setup(cfg)
    out = os.path.join(cfg["out"], "identify")
    os.makedirs(out, exist_ok=True)
    strict = args.strict_determinism
    progress = None
    if args.verbose:
        progress = lambda *a: print(" ".join(map(str, a)), file=sys.stderr)
    if args.mode == "single":
        start = pretrained(cfg, s)
        tc = cfg.train_config()
        if tc.tau > 0 and start.extra["q0"] is None:
            raise RciInfeasible("no RCI set exists for the pretrained model; enlarge Y or U, "
                                "change the template or pretrain further")
        name = "tau0" if tc.tau == 0 else f"{tc.regularizer}_zeta_{tc.zeta:g}"
        res = identify_run(cfg, s, start, name, tc, out, strict)
        summaries = [res["summary"]]
    else:
        zetas = None if args.mode == "compare" else cfg["zeta_sweep"]
        res = compare(cfg, s, out, strict, zetas,
                      None if progress is None else (lambda n, l, f, r, st: progress(n, l, f, r, st)))
        summaries = [r["summary"] for r in res["runs"].values()]
    for sm in summaries:
        line = (f"{sm['name']}: BFR train {sm['bfr_train']:.3f}, disturbance "
                f"{sm['bfr_disturbance']:.3f}, test {sm['bfr_test']:.3f}")
        if sm["tau"] > 0:
            line += f", final r {sm['final_r']:.6g}"
        print(line)
        if sm.get("stalled_at") is not None:
            print(f"FLAG: {sm['name']} stopped early at outer iteration {sm['stalled_at']}: "
                  f"no step size kept an RCI set in existence")
    if args.mode != "single":
        table = markdown_table(summaries)
        print(table)
        with open(os.path.join(out, "d_comparison.md"), "w") as fh:
            fh.write(f"<!-- {cfg.comment()} -->\n{table}\n")
        _csv(os.path.join(out, "d_comparison.csv"), SUMMARY_HEADER, _summary_rows(summaries),
             cfg.comment())
        sw = [sm for sm in summaries if sm["name"].startswith("zeta_")]
        _csv(os.path.join(out, "zeta_sweep.csv"), ["zeta", "d_zeta", "status"],
             [[sm["zeta"], sm["d"], sm["d_status"]] for sm in sw], cfg.comment())
        by = {sm["name"]: sm for sm in summaries}
        plot_zeta_sweep(os.path.join(out, "zeta_sweep.svg"), [sm["zeta"] for sm in sw],
                        [sm["d"] for sm in sw], by["sequential"]["d"], by["baseline"]["d"],
                        cfg.comment())
    return EXIT_OK


def _load_checkpoint(path):
    from .synthesis import Checkpoint
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_rci(args):
    from .experiment import make_setup, trace_report
    from .rci import algorithm1, characterize_w, solve_baseline_r, verify_rci
    cfg = _config(args)
    s = make_setup(cfg)
    ck = _load_checkpoint(args.checkpoint)
    tc = ck.config or cfg.train_config()
    zeta = cfg["rci"]["zeta"] if args.zeta is None else args.zeta
    k_hat = cfg["rci"]["k_hat"] if args.k_hat is None else args.k_hat
    W = characterize_w(ck.model, s.dw, tc.kappa)
    base = solve_baseline_r(ck.model, W, s.Y, s.U, s.template, tc.M, tc.qp_ridge)
    if base.ok:
        q0, q0_src = base.q, "baseline_this_model"
    elif ck.extra.get("q0") is not None:
        q0, q0_src = np.asarray(ck.extra["q0"]), "baseline_pretrained"
    else:
        q0, q0_src = np.zeros(s.template.n_facets), "origin"
    sol = algorithm1(ck.model, W, s.Y, s.U, s.template, q0, k_hat, zeta, tc.M, tc.qp_ridge)
    out = os.path.join(cfg["out"], "rci")
    os.makedirs(out, exist_ok=True)
    rep = verify_rci(ck.model, W, s.Y, s.U, s.template, sol, cfg["rci"]["verify_samples"],
                     seed=cfg["seed"]) if sol.trace else {"passed": False}
    rep["trace"] = trace_report(sol.trace)
    rep["q0_source"] = q0_src
    rep["status"] = sol.status
    rep["config_hash"] = cfg.hash()
    doc = {"config_hash": cfg.hash(), "zeta": zeta, "k_hat": k_hat, "solution": sol.to_dict(),
           "W": W.to_dict(), "template": s.template.to_dict()}
    with open(os.path.join(out, "rci.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    with open(os.path.join(out, "verify.json"), "w") as fh:
        json.dump(rep, fh, indent=1)
    _csv(os.path.join(out, "rci_trace.csv"), ["k", "r"],
         [[k + 1, float(r)] for k, r in enumerate(sol.trace)], cfg.comment())
    plot_trace(os.path.join(out, "rci_trace.svg"), sol.trace, cfg.comment())
    print(f"status {sol.status}, r = {sol.r:.6g} after {len(sol.trace)} steps (q0 from {q0_src})")
    if sol.trace and not sol.ok:
        print(f"FLAG: set refinement stopped early ({sol.status}); reporting the last feasible iterate")
    tr = rep["trace"]
    if not tr["monotone"]:
        print(f"FLAG: r_k increased at {tr['n_increases']} steps (max {tr['max_increase']:.3g}, "
              f"first at k={tr['first_increase_step']})")
    print(f"verification {'passed' if rep['passed'] else 'FAILED'}")
    if not sol.trace:
        return EXIT_INFEASIBLE
    return EXIT_OK if rep["passed"] else EXIT_INFEASIBLE


def _read_reference(path, ny):
    from .plantlab import DatasetFormatError
    rows = []
    with open(path, newline="") as fh:
        for i, ln in enumerate(fh, 1):
            if not ln.strip() or ln.startswith("#"):
                continue
            rec = next(csv.reader([ln]))
            try:
                rows.append([float(v) for v in rec[-ny:]])
            except ValueError:
                if rows:
                    raise DatasetFormatError(f"{path}:{i}: non-numeric reference") from None
    if not rows:
        raise DatasetFormatError(f"{path}: empty reference file")
    return np.asarray(rows)


def cmd_simulate(args):
    from .control import StateOutsideSet, closed_loop, piecewise_reference
    from .experiment import make_setup
    from .rci import RciSolution
    cfg = _config(args)
    s = make_setup(cfg)
    ck = _load_checkpoint(args.checkpoint)
    if not os.path.exists(args.rci):
        raise FileNotFoundError(f"RCI file not found: {args.rci}")
    with open(args.rci) as fh:
        sol = RciSolution.from_dict(json.load(fh)["solution"])
    sim = cfg["simulate"]
    if args.reference:
        ref = _read_reference(args.reference, ck.model.ny)
        T = len(ref) if args.steps is None else args.steps
    else:
        T = sim["T"] if args.steps is None else args.steps
        ref = piecewise_reference(sim["levels"], sim["hold"], max(T, 1))
    try:
        trc = closed_loop(cfg.plant(), ck.model, sol.q, s.template, s.U, ref, T=T,
                          dt=cfg["data"]["dt"], u_scale=s.su, y_scale=s.sy,
                          weight_u=sim["weight_u"], weight_z=sim["weight_z"])
    except StateOutsideSet as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = os.path.join(cfg["out"], "simulate")
    os.makedirs(out, exist_ok=True)
    trc.to_csv(os.path.join(out, "closed_loop.csv"), cfg.comment())
    plot_closed_loop(os.path.join(out, "closed_loop.svg"), trc, ck.model, sol.q, s.template, s.Y,
                     cfg.comment())
    in_y = bool(np.all([s.Y.contains(y, 1e-9) for y in trc.y]))
    print(f"{len(trc)} steps, output inside Y: {in_y}")
    if trc.failed_at is not None:
        print(f"controller infeasible at step {trc.failed_at}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_report(args):
    summaries = []
    for p in args.paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"report input not found: {p}")
        with open(p) as fh:
            d = json.load(fh)
        sm = d.get("extra", {}).get("summary", d if "d" in d else None)
        if sm is None:
            print(f"skipping {p}: no run summary inside", file=sys.stderr)
            continue
        summaries.append(sm)
    order = {"sequential": 0, "baseline": 1}
    summaries.sort(key=lambda s: (order.get(s["name"], 2), s.get("zeta") or 0.0))
    table = markdown_table(summaries)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.md"), "w") as fh:
            fh.write(table + "\n")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON)")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--out", help="output directory override")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--strict-determinism", action="store_true",
                        help="bitwise-reproducible outputs (wall times written as 0)")
    ap = argparse.ArgumentParser(prog="qlpv-rci", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="generate train/disturbance/test CSVs")
    p.add_argument("--points", type=int, help="points per dataset (overrides config)")
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("identify", parents=[common], help="pretrain and run concurrent training")
    p.add_argument("--mode", choices=("single", "compare", "sweep"), default="single",
                   help="single run, full paired comparison, or the zeta sweep with benchmarks")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_identify)
    p = sub.add_parser("rci", parents=[common], help="k_hat-step set refinement and verification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--zeta", type=float)
    p.add_argument("--k-hat", type=int)
    p.set_defaults(func=cmd_rci)
    p = sub.add_parser("simulate", parents=[common], help="closed loop with the tracking controller")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rci", required=True)
    p.add_argument("--reference", help="CSV whose last column(s) hold the reference")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("report", parents=[common], help="markdown table from run checkpoints")
    p.add_argument("paths", nargs="*")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    from .experiment import ConfigError
    from .plantlab import DatasetFormatError
    from .rci import RciInfeasible
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RciInfeasible, Infeasible) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
