"""Command-line entry point: ``mrprune {gen|fit|prune|theory|report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 degenerate data.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

from mrprune import __version__
from mrprune.annotation import flag_minorities, majority_outcomes, read_log, sessionize, write_log
from mrprune.glm import DesignSpec, auc, build_design, fit_logistic, predict_design, pseudo_r2, write_model
from mrprune.io import RunManifest, atomic_write_text, dump_json, fmt_float
from mrprune.pruner import (
    SWEEP_COLUMNS,
    EvalReport,
    Mode,
    PrunePolicy,
    evaluate_simulation,
    format_decisions,
    format_sweep,
    format_trace,
    horizon_hours,
    parse_sweep,
    run_pruning_simulation,
    run_sweep,
)
from mrprune.synthgen import ConfigError, format_config, generate, read_config, write_truth
from mrprune.theory import (
    ClassifierRates,
    GaussianScoreModel,
    TheoryConfig,
    accuracy_curve,
    beta_gamma,
    default_theta_grid,
    format_curve,
    p_err,
    p_err_oracle,
    parse_curve,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE = 0, 2, 3, 4
DEFAULT_SEED = 20230118


class DegenerateData(Exception):
    pass


def ratio(text: str) -> float:
    """Parse ``0.25`` or ``25%`` into a ratio."""
    s = text.strip()
    try:
        return float(s[:-1]) / 100.0 if s.endswith("%") else float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a ratio or percent: {text!r}") from None


def hours(text: str) -> float:
    if text.strip().lower() in ("inf", "infinite", "infinity"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number of hours: {text!r}") from None


def _list(cast):
    def parse(text: str):
        return [cast(t) for t in text.split(",") if t.strip()]

    return parse


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _config_echo(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    tick = time.perf_counter()
    config = read_config(args.config)
    if args.seed is not None:
        config = type(config)(**{**asdict(config), "seed": args.seed})
    lo, hi = config.repeats
    if config.theory_check and not any(n % 2 for n in range(lo, hi + 1)):
        print("warning: theory requires odd n; the repeat range holds only even counts", file=sys.stderr)
    log = generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    write_log(log.records, log_path)
    crops_path, workers_path = write_truth(log, out)
    atomic_write_text(out / "config.txt", format_config(config))
    RunManifest(
        "gen",
        {**_config_echo(args), "resolved": format_config(config)},
        config.seed,
        [str(args.config)],
        [str(log_path), str(crops_path), str(workers_path), str(out / "config.txt")],
        wall_clock_s=time.perf_counter() - tick,
    ).write(out / "manifest.json")
    print(f"wrote {len(log.records)} repeats to {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    tick = time.perf_counter()
    records = read_log(args.log)
    flags = flag_minorities(records, majority_outcomes(records))
    if flags.all() or not flags.any():
        raise DegenerateData("degenerate labels: minority flags hold a single class")
    spec = DesignSpec.ladder(
        args.model,
        class_balanced=args.class_balanced,
        ridge_lambda_worker=args.ridge_worker,
        ridge_lambda_crop=args.ridge_crop,
    )
    sessions = sessionize(records, args.gap_minutes)
    design = build_design(records, flags, spec, sessions)
    model = fit_logistic(design, tol=args.tol, max_iter=args.max_iter)
    out = Path(args.out)
    write_model(model, out)
    metrics_path = out.with_name(out.stem + ".metrics.json")
    metrics = {
        "model": args.model,
        "auc": auc(predict_design(model, design), flags),
        "pseudo_r2": pseudo_r2(model),
        "n_obs": len(records),
        "n_minority": int(flags.sum()),
        "converged": model.converged,
        "iterations": model.iterations,
    }
    atomic_write_text(metrics_path, dump_json(metrics) + "\n")
    RunManifest(
        "fit", _config_echo(args), args.seed, [str(args.log)], [str(out), str(metrics_path)], wall_clock_s=time.perf_counter() - tick
    ).write(_manifest_path(out))
    print(f"auc={metrics['auc']:.6f} pseudo_r2={metrics['pseudo_r2']:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- prune


def _policy(args, **overrides) -> PrunePolicy:
    design = DesignSpec(
        include_worker=True,
        include_crop=True,
        include_question=True,
        include_day=False,
        class_balanced=not args.unweighted,
    )
    kw = dict(
        theta=args.theta,
        delta_hours=args.delta,
        tau_hours=args.tau,
        mode=Mode(args.mode),
        min_retained_per_task=args.min_retained,
        design=design,
    )
    kw.update(overrides)
    return PrunePolicy(**kw)


def cmd_prune(args) -> int:
    tick = time.perf_counter()
    records = read_log(args.log)
    horizon = horizon_hours([r.start_time for r in records])
    if args.tau > horizon:
        raise ValueError(f"--tau {args.tau} exceeds the log horizon of {horizon:.6g} h")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.sweep_thetas or args.sweep_deltas or args.sweep_modes:
        rows = run_sweep(
            records,
            args.sweep_thetas or [args.theta],
            args.sweep_deltas or [args.delta],
            args.sweep_modes or [args.mode],
            base=_policy(args),
            jobs=args.jobs,
        )
        atomic_write_text(out / "sweep.csv", format_sweep(rows))
        outputs.append(str(out / "sweep.csv"))
        print(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")
    else:
        policy = _policy(args)
        result = run_pruning_simulation(records, policy)
        report = evaluate_simulation(result, seed=args.seed)
        atomic_write_text(out / "decisions.csv", format_decisions(result.decisions))
        atomic_write_text(out / "trace.csv", format_trace(result.trace))
        atomic_write_text(out / "eval.json", report.to_json() + "\n")
        outputs += [str(out / n) for n in ("decisions.csv", "trace.csv", "eval.json")]
        print(f"prune_rate={report.prune_rate:.6f} accuracy={report.accuracy:.6f} f1={report.f1:.6f}")
    RunManifest("prune", _config_echo(args), args.seed, [str(args.log)], outputs, wall_clock_s=time.perf_counter() - tick).write(
        out / "manifest.json"
    )
    return EXIT_OK


# ---------------------------------------------------------------- theory


def _rates(args) -> ClassifierRates:
    return ClassifierRates(args.qt, args.qf)


def cmd_theory(args) -> int:
    if args.what == "perr":
        print(fmt_float(p_err(TheoryConfig(args.n, args.p), _rates(args))))
    elif args.what == "oracle":
        cfg, rates = TheoryConfig(args.n, args.p), _rates(args)
        closed = p_err(cfg, rates)
        res = p_err_oracle(cfg, rates, method=args.method, samples=args.samples, seed=args.seed)
        print(f"closed_form={fmt_float(closed)}")
        print(f"oracle={fmt_float(res.value)} stderr={fmt_float(res.stderr)} method={args.method}")
        print(f"abs_diff={fmt_float(abs(closed - res.value))}")
    elif args.what == "lemma":
        rates = _rates(args)
        TheoryConfig(args.n, 0.0)
        print("k,beta,gamma")
        for k in range(args.n // 2 + 1, args.n + 1):
            b, g = beta_gamma(args.n, k, rates)
            print(f"{k},{fmt_float(b)},{fmt_float(g)}")
    elif args.what == "curve":
        TheoryConfig(args.n, 0.0)
        if args.gauss is not None:
            if len(args.gauss) != 3:
                raise ValueError("--gauss takes mu1,mu0,sigma")
            model = GaussianScoreModel(*args.gauss)
            rows = accuracy_curve(args.n, args.p, model=model, thetas=default_theta_grid(args.theta_points))
        else:
            rows = accuracy_curve(args.n, args.p, rates=_rates(args))
        text = format_curve(rows)
        if args.out is None:
            sys.stdout.write(text)
        else:
            tick = time.perf_counter()
            out = Path(args.out)
            atomic_write_text(out, text)
            RunManifest("theory curve", _config_echo(args), None, [], [str(out)], wall_clock_s=time.perf_counter() - tick).write(
                _manifest_path(out)
            )
    return EXIT_OK


# ---------------------------------------------------------------- report

REPORT_COLUMNS = ("section", "source", "mode", "n", "p", "theta", "delta_hours", "prune_rate", "accuracy", "f1")


def _load_report_inputs(paths):
    prune_rows, theory_rows = [], []
    for path in paths:
        text = Path(path).read_text(encoding="utf-8")
        name = Path(path).name
        if path.endswith(".json"):
            d = json.loads(text)
            if "prune_rate" not in d:
                raise ValueError(f"{path}: not an evaluation report")
            rep = EvalReport(**d)
            pol = rep.metadata.get("policy", {})
            delta = pol.get("delta_hours", math.nan)
            prune_rows.append(
                dict(
                    source=name,
                    mode=pol.get("mode", ""),
                    theta=float(pol.get("theta", math.nan)),
                    delta_hours=math.inf if delta == "inf" else float(delta),
                    prune_rate=rep.prune_rate,
                    accuracy=rep.accuracy,
                    f1=rep.f1,
                )
            )
            continue
        header = text.split("\n", 1)[0].strip()
        if header == ",".join(SWEEP_COLUMNS):
            for r in parse_sweep(text):
                prune_rows.append(dict(source=name, mode=r.mode.value, **{k: getattr(r, k) for k in SWEEP_COLUMNS if k != "mode"}))
        elif header.startswith("n,p,theta"):
            theory_rows.extend((name, r) for r in parse_curve(text))
        else:
            raise ValueError(f"{path}: line 1: unrecognized header")
    return prune_rows, theory_rows


def _theory_summary(theory_rows):
    groups: dict = {}
    for source, r in theory_rows:
        groups.setdefault((source, r.n, r.p), []).append(r)
    out = []
    for (source, n, p), rows in sorted(groups.items()):
        lo = min(rows, key=lambda r: r.r)
        hi = max(rows, key=lambda r: r.r)
        out.append((source, n, p, len(rows), lo, hi))
    return out


def _cell(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else ("" if math.isnan(x) else f"{x:.6g}")
    return str(x)


def render_report(prune_rows, theory_rows) -> tuple[str, str]:
    prune_rows = sorted(prune_rows, key=lambda d: (-d["theta"], d["mode"], d["delta_hours"], d["source"]))
    summary = _theory_summary(theory_rows)
    md = ["# Pruning report", ""]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    if prune_rows:
        md += ["## Pruning policies", "", "| mode | theta | delta_hours | prune_rate | accuracy | f1 | source |", "|---|---|---|---|---|---|---|"]
        for d in prune_rows:
            md.append(
                "| "
                + " | ".join(_cell(d[k]) for k in ("mode", "theta", "delta_hours", "prune_rate", "accuracy", "f1", "source"))
                + " |"
            )
            w.writerow(["prune", d["source"], d["mode"], "", "", fmt_float(d["theta"]), "inf" if math.isinf(d["delta_hours"]) else fmt_float(d["delta_hours"]), fmt_float(d["prune_rate"]), fmt_float(d["accuracy"]), fmt_float(d["f1"])])
        md.append("")
    if summary:
        md += ["## Theory curves", "", "| n | p | points | min r | accuracy at min r | max r | accuracy at max r | source |", "|---|---|---|---|---|---|---|---|"]
        for source, n, p, count, lo, hi in summary:
            md.append(f"| {n} | {_cell(p)} | {count} | {_cell(lo.r)} | {_cell(lo.accuracy)} | {_cell(hi.r)} | {_cell(hi.accuracy)} | {source} |")
            for r in (lo, hi):
                w.writerow(["theory", source, "", n, fmt_float(p), fmt_float(r.theta), "", fmt_float(r.r), fmt_float(r.accuracy), ""])
        md.append("")
    return "\n".join(md), buf.getvalue()


def cmd_report(args) -> int:
    tick = time.perf_counter()
    if not args.inputs:
        raise ValueError("report needs at least one input")
    prune_rows, theory_rows = _load_report_inputs(args.inputs)
    md, table = render_report(prune_rows, theory_rows)
    out = Path(args.out)
    csv_path = out.with_suffix(".csv")
    atomic_write_text(out, md)
    atomic_write_text(csv_path, table)
    RunManifest("report", _config_echo(args), None, list(args.inputs), [str(out), str(csv_path)], wall_clock_s=time.perf_counter() - tick).write(
        _manifest_path(out)
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrprune", description="Minority-report prediction and repeat pruning.")
    parser.add_argument("--version", action="version", version=f"mrprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic annotation log")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit a minority-report model")
    f.add_argument("log")
    f.add_argument("--out", required=True)
    f.add_argument("--model", default="awc", choices=["base", "a", "aw", "ac", "awc"])
    f.add_argument("--gap-minutes", type=float, default=10.0)
    f.add_argument("--class-balanced", action="store_true")
    f.add_argument("--ridge-worker", type=float, default=1.0)
    f.add_argument("--ridge-crop", type=float, default=1.0)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--max-iter", type=int, default=100)
    f.add_argument("--seed", type=int, default=DEFAULT_SEED)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("prune", help="replay a log under a pruning policy or sweep")
    p.add_argument("log")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--theta", type=ratio, default=0.5)
    p.add_argument("--delta", type=hours, default=1.0, help="recalibration interval in hours, or inf")
    p.add_argument("--tau", type=hours, default=36.0, help="warm-up length in hours")
    p.add_argument("--mode", default="predictive", choices=[m.value for m in Mode])
    p.add_argument("--min-retained", type=int, default=1)
    p.add_argument("--unweighted", action="store_true", help="fit without class-balanced weights")
    p.add_argument("--sweep-thetas", type=_list(ratio), default=None)
    p.add_argument("--sweep-deltas", type=_list(hours), default=None)
    p.add_argument("--sweep-modes", type=_list(str), default=None)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: MRPRUNE_JOBS or 1)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_prune)

    t = sub.add_parser("theory", help="closed-form error probability tools")
    tsub = t.add_subparsers(dest="what", required=True)
    for name in ("perr", "oracle", "lemma", "curve"):
        s = tsub.add_parser(name)
        s.add_argument("--n", type=int, required=True)
        s.add_argument("--qt", type=ratio, default=None if name == "curve" else 0.5)
        s.add_argument("--qf", type=ratio, default=None if name == "curve" else 0.5)
        if name in ("perr", "oracle"):
            s.add_argument("--p", type=ratio, required=True)
        if name == "oracle":
            s.add_argument("--method", default="enumerate", choices=["enumerate", "montecarlo"])
            s.add_argument("--samples", type=int, default=1_000_000)
            s.add_argument("--seed", type=int, default=DEFAULT_SEED)
        if name == "curve":
            s.add_argument("--p", type=_list(ratio), required=True, help="comma-separated p grid")
            s.add_argument("--gauss", type=_list(float), default=None, help="mu1,mu0,sigma")
            s.add_argument("--theta-points", type=int, default=99)
            s.add_argument("--out", default=None)
        s.set_defaults(func=cmd_theory)

    r = sub.add_parser("report", help="tabulate sweeps, evaluations and theory curves")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--out", required=True, help="Markdown path; a .csv twin is written next to it")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "theory" and args.what == "curve" and args.gauss is None and (args.qt is None or args.qf is None):
        parser.error("theory curve needs --gauss or both --qt and --qf")
    try:
        return args.func(args)
    except DegenerateData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ConfigError as exc:
        print("error: invalid config", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
