"""Command-line entry point: rate sweeps, construction verification, and the
insight experiments, all with machine-readable outputs and a run manifest
written before any long computation.

Exit codes: 0 verdict passed, 1 verdict failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import construct as C
from . import experiments as E
from . import kernel_approx as KA
from . import kernels as K
from .model import sup_error_estimate

USAGE_ERROR = 2


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out_dir: Path, subcommand: str, config: dict, seed: int,
                   artifacts: list[str]) -> dict:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
        "config_hash": hashlib.sha256(_canonical_json(config).encode()).hexdigest(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        fh.write(_canonical_json(manifest) + "\n")
    return manifest


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def svg_loglog_plot(path: Path, xs, ys, title: str, ref_slope: float | None = None) -> None:
    """Tiny self-contained SVG log-log line plot (deterministic bytes)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.maximum(np.asarray(ys, dtype=np.float64), 1e-300)
    W, Hgt, pad = 480, 360, 48
    lx, ly = np.log10(xs), np.log10(ys)
    x0, x1 = lx.min(), lx.max()
    y0, y1 = ly.min(), ly.max()
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def sy(v):
        return Hgt - pad - (v - y0) / (y1 - y0) * (Hgt - 2 * pad)

    pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(lx, ly))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hgt}">',
        f'<rect width="{W}" height="{Hgt}" fill="white"/>',
        f'<text x="{W//2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.5"/>',
    ]
    for a, b in zip(lx, ly):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="black"/>')
    if ref_slope is not None:
        ry0 = ly[0]
        ry1 = ly[0] + ref_slope * (lx[-1] - lx[0])
        parts.append(f'<line x1="{sx(lx[0]):.2f}" y1="{sy(ry0):.2f}" '
                     f'x2="{sx(lx[-1]):.2f}" y2="{sy(ry1):.2f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{pad}" y="{Hgt - 12}" font-size="11">'
                 f'log10 x: [{x0:.2f}, {x1:.2f}]  log10 y: [{y0:.2f}, {y1:.2f}]</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# approx-rate
# ---------------------------------------------------------------------------

RATE_FAMILIES = ("indicator-exp", "indicator-poly", "decay-exp", "decay-poly",
                 "lsq-exp", "lsq-power")


def _rate_builder(family: str, T: int, beta: float, scaled: bool,
                  alpha: float | None, gamma: float | None):
    if family == "indicator-exp":
        a = alpha if alpha is not None else (2.0 / T if scaled else 0.01)
        g = gamma if gamma is not None else a
        return (lambda m: KA.indicator_exp_approx(T, m, alpha=a, gamma=g)), "indicator-exp"
    if family == "indicator-poly":
        a = alpha if alpha is not None else (2.0 if scaled else 0.01)
        g = gamma if gamma is not None else 0.01
        return (lambda m: KA.indicator_poly_approx(T, m, alpha=a, gamma=g)), "indicator-poly"
    if family == "decay-exp":
        rho = K.ExpDecay(1.0, beta)
        return (lambda m: KA.decay_exp_approx(rho, m)), "decay-exp"
    if family == "decay-poly":
        rho = K.PolyDecay(1.0, beta)
        return (lambda m: KA.decay_poly_approx(rho, m)), "decay-poly"
    if family == "lsq-exp":
        rho = K.ExpDecay(1.0, beta)
        return (lambda m: KA.lsq_fit(rho, m, "exp")), "decay-exp"
    rho = K.PolyDecay(1.0, beta)
    return (lambda m: KA.lsq_fit(rho, m, "power")), "decay-poly"


def cmd_approx_rate(args) -> int:
    try:
        m_list = [int(v) for v in args.m.split(",") if v.strip()]
    except ValueError:
        print("error: bad --m list", file=sys.stderr)
        return USAGE_ERROR
    if not m_list:
        print("error: empty --m list", file=sys.stderr)
        return USAGE_ERROR
    if args.family not in RATE_FAMILIES:
        print(f"error: unknown family {args.family!r}; choose from {RATE_FAMILIES}",
              file=sys.stderr)
        return USAGE_ERROR
    out = Path(args.out)
    config = {"family": args.family, "T": args.T, "n": args.n, "m": m_list,
              "beta": args.beta, "scaled": args.scaled, "alpha": args.alpha,
              "gamma": args.gamma}
    write_manifest(out, "approx-rate", config, args.seed,
                   ["rate_report.json", "rate_plot.svg"])
    builder, shape_kind = _rate_builder(args.family, args.T, args.beta,
                                        args.scaled, args.alpha, args.gamma)
    report = KA.rate_sweep(builder, m_list, args.n, shape_kind, T=args.T,
                           target_name=args.family)
    write_json(out / "rate_report.json", report.to_dict())
    errs = [e[1] for e in report.entries]
    svg_loglog_plot(out / "rate_plot.svg", m_list, errs,
                    f"{args.family} T={args.T}: l1 error vs m",
                    ref_slope=-float(args.n))
    threshold = -(args.n - 0.5)
    ok = (not report.inconclusive) and report.slope <= threshold
    print(f"family={args.family} T={args.T} slope={report.slope:.3f} "
          f"threshold={threshold:.1f} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# construct-verify
# ---------------------------------------------------------------------------

def _readout_from_spec(spec: dict, in_dim: int) -> C.TeacherFn:
    kind = spec.get("kind", "linear")
    if kind == "linear":
        w = np.asarray(spec.get("w", np.ones(in_dim) / in_dim), dtype=np.float64)
        return C.TeacherFn.linear(w, bias=float(spec.get("bias", 0.0)))
    if kind == "zero":
        return C.TeacherFn.zero(in_dim)
    raise ValueError(f"unknown readout kind {kind!r}")


def _kernel_from_spec(spec: dict) -> K.MemoryKernel:
    form = spec["form"]
    if form == "exp-decay":
        return K.ExpDecay(float(spec.get("c", 1.0)), float(spec["beta"]))
    if form == "poly-decay":
        return K.PolyDecay(float(spec.get("c", 1.0)), float(spec["beta"]))
    if form == "indicator":
        return K.Indicator(int(spec["T"]))
    if form == "tabulated":
        return K.Tabulated(tuple(spec["values"]))
    raise ValueError(f"unknown kernel form {form!r}")


def default_task_spec(task: str) -> dict:
    if task == "task1":
        return {"task": "task1", "d": 2, "lags": [3, 8],
                "readout": {"kind": "linear",
                            "w": [0.4, -0.3, 0.35, 0.25, -0.2, 0.3]}}
    if task == "task2":
        return {"task": "task2", "d": 1, "alphabet": [[-1.0], [1.0]],
                "maps": [[2, 1]], "caps": [2],
                "readout": {"kind": "linear", "w": [0.5, -0.5]}}
    if task == "task3":
        return {"task": "task3", "d": 1,
                "kernels": [{"form": "exp-decay", "c": 1.0, "beta": 5.0}],
                "readout": {"kind": "linear", "w": [1.0]}}
    raise ValueError(f"no default spec for task {task!r}")


def _load_task(doc: dict):
    task = doc["task"]
    if task == "task1":
        d = int(doc["d"])
        lags = [int(v) for v in doc["lags"]]
        readout = _readout_from_spec(doc["readout"], (len(lags) + 1) * d)
        t = C.FixedSparse(d=d, lags=tuple(lags), readout=readout)
        return t, C.build_task1, C.target_fixed_sparse(t)
    if task == "task2":
        d = int(doc["d"])
        alphabet = np.asarray(doc["alphabet"], dtype=np.float64)
        maps = []
        for table in doc["maps"]:
            vals = {tuple(tok): int(v) for tok, v in zip(alphabet, table)}
            maps.append(lambda tok, vals=vals: vals[tuple(np.atleast_1d(tok))])
        readout = _readout_from_spec(doc["readout"], (len(maps) + 1) * d)
        t = C.AdaptiveWarmup(d=d, alphabet=alphabet, maps=maps,
                             caps=[int(v) for v in doc["caps"]], readout=readout)
        return t, C.build_task2_warmup, C.target_adaptive_warmup(t)
    if task == "task3":
        d = int(doc["d"])
        kernels = [_kernel_from_spec(sp) for sp in doc["kernels"]]
        readout = _readout_from_spec(doc["readout"], len(kernels) * d)
        t = C.EssentiallySparse(d=d, kernels=kernels, readout=readout)
        return t, C.build_task3, C.target_essential(t)
    raise ValueError(f"unknown task {task!r}")


def cmd_construct_verify(args) -> int:
    if args.spec_file:
        path = Path(args.spec_file)
        if not path.exists():
            print(f"error: spec file {path} not found", file=sys.stderr)
            return USAGE_ERROR
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            print(f"error: malformed spec file: {exc}", file=sys.stderr)
            return USAGE_ERROR
    else:
        try:
            doc = default_task_spec(args.task)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return USAGE_ERROR
    out = Path(args.out)
    config = {"task_spec": doc, "H": args.H, "rpe": args.rpe,
              "trials": args.trials, "variant": args.variant}
    write_manifest(out, "construct-verify", config, args.seed,
                   ["verify_report.json"])
    try:
        task, builder, target_fn = _load_task(doc)
    except (KeyError, ValueError) as exc:
        print(f"error: bad task spec: {exc}", file=sys.stderr)
        return USAGE_ERROR

    alphabet_kw = {}
    if isinstance(task, C.AdaptiveWarmup):
        alphabet_kw = {"alphabet": "tokens", "tokens": task.alphabet}

    build = builder(task, args.H, rpe=args.rpe)
    measured = sup_error_estimate(build.spec, build.weights, target_fn,
                                  trials=args.trials, length=build.eval_length,
                                  seed=args.seed, **alphabet_kw)
    lip = task.readout.lip_bound()
    decomposition_bound = lip * build.attn_error_total()
    report = {
        "task": doc["task"], "H": args.H, "rpe": args.rpe,
        "measured_sup_error": measured,
        "group_errors": build.group_errors,
        "decomposition_bound": decomposition_bound,
        "head_alloc": build.head_alloc,
        "horizon": build.horizon,
        "notes": build.notes,
    }
    if args.variant == "tmx":
        if not isinstance(task, C.AdaptiveWarmup):
            print("error: --variant tmx applies to task2 specs", file=sys.stderr)
            return USAGE_ERROR
        tmx = C.build_task2_tmx(task, args.H, rpe=args.rpe)
        rng = np.random.default_rng(args.seed)
        idx = rng.integers(0, task.alphabet.shape[0],
                           size=(args.trials, build.eval_length))
        X = task.alphabet[idx]
        from .model import batch_outputs_at
        a = batch_outputs_at(build.spec, build.weights, X, build.eval_length - 1)
        b = batch_outputs_at(tmx.spec, tmx.weights, X, tmx.eval_length - 1)
        report["tmx_max_abs_diff"] = float(np.abs(a - b).max())
    write_json(out / "verify_report.json", report)
    ok = measured <= decomposition_bound + 1e-12
    if args.variant == "tmx":
        ok = ok and report["tmx_max_abs_diff"] <= 1e-9
    print(f"task={doc['task']} H={args.H} rpe={args.rpe} measured={measured:.4e} "
          f"bound={decomposition_bound:.4e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    if args.id in E.OUT_OF_SCOPE_INSIGHTS:
        print(f"error: out of scope: insight {args.id} needs full-scale "
              "pretraining", file=sys.stderr)
        return USAGE_ERROR
    if args.id not in E.INSIGHT_IDS:
        print(f"error: unknown insight id {args.id!r}", file=sys.stderr)
        return USAGE_ERROR
    out = Path(args.out)
    cfg = E.InsightConfig(insight_id=args.id, seed=args.seed)
    if args.iterations:
        cfg.iterations = args.iterations
    if args.batch:
        cfg.batch = args.batch
    if args.id in ("4a", "4b"):
        cfg.iterations = args.iterations or 8000
        cfg.lr = 0.05
    config = {"id": args.id, "iterations": cfg.iterations, "batch": cfg.batch,
              "lr": cfg.lr}
    write_manifest(out, "experiment", config, args.seed,
                   ["experiment_report.json", "cells.csv"])
    report = E.run_insight(args.id, cfg)
    write_json(out / "experiment_report.json", report.to_dict())
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "final_loss", "diverged"])
        for c in report.cells:
            w.writerow([c.label, repr(c.final_loss), c.diverged])
    for k, v in report.verdicts.items():
        print(f"  verdict {k}: {'pass' if v else 'FAIL'}")
    print(f"insight {args.id}: {'PASS' if report.passed() else 'FAIL'} "
          f"({report.wall_clock:.0f}s)")
    return 0 if report.passed() else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsemem",
                                 description="kernel approximation sweeps, "
                                 "constructive model verification, and "
                                 "synthetic training experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("approx-rate", help="l1-error rate sweep for a kernel family")
    r.add_argument("--family", required=True)
    r.add_argument("--T", type=int, default=10)
    r.add_argument("--beta", type=float, default=5.0,
                   help="decay rate for decay/lsq families")
    r.add_argument("--n", type=int, default=2)
    r.add_argument("--m", required=True, help="comma-separated budgets")
    r.add_argument("--alpha", type=float, default=None)
    r.add_argument("--gamma", type=float, default=None)
    r.add_argument("--scaled", action="store_true",
                   help="use lag-scaled transform rates instead of 0.01")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="out/approx-rate")
    r.set_defaults(fn=cmd_approx_rate)

    v = sub.add_parser("construct-verify", help="build a model and verify its error")
    v.add_argument("--task", default="task1", choices=["task1", "task2", "task3"])
    v.add_argument("--spec-file", default=None)
    v.add_argument("--H", type=int, default=16)
    v.add_argument("--rpe", default="lin", choices=["lin", "log"])
    v.add_argument("--trials", type=int, default=2000)
    v.add_argument("--variant", default=None, choices=[None, "tmx"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="out/construct-verify")
    v.set_defaults(fn=cmd_construct_verify)

    e = sub.add_parser("experiment", help="run one insight's training grid")
    e.add_argument("--id", required=True)
    e.add_argument("--iterations", type=int, default=None)
    e.add_argument("--batch", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="out/experiment")
    e.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0,) else 0
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
