"""Generate the trend log, fit the model ladder, sweep pruning policies, report.

Everything goes through the command-line entry point so the outputs match
what ``mrprune`` writes by hand.
"""

import argparse
import json
import sys
from pathlib import Path

from mrprune.cli import main as mrprune

HERE = Path(__file__).resolve().parent


def run(*argv) -> None:
    code = mrprune([str(a) for a in argv])
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=HERE / "configs" / "trend.cfg")
    ap.add_argument("--out", type=Path, default=Path("results/pruning"))
    ap.add_argument("--thetas", default="0.99,0.9,0.7,0.5,0.3,0.1")
    ap.add_argument("--deltas", default="1,6,inf")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = args.out
    log = out / "gen" / "log.csv"
    run("gen", "--config", args.config, "--out", out / "gen")
    (out / "models").mkdir(parents=True, exist_ok=True)
    for name in ("base", "a", "aw", "ac", "awc"):
        run("fit", log, "--model", name, "--out", out / "models" / f"{name}.json")
        m = json.loads((out / "models" / f"{name}.metrics.json").read_text())
        print(f"{name:>4}: AUC {m['auc']:.4f}  pseudo-R2 {m['pseudo_r2']:.4f}")
    run(
        "prune", log, "--sweep-thetas", args.thetas, "--sweep-deltas", args.deltas,
        "--sweep-modes", "predictive,aw,np", "--jobs", args.jobs, "--out", out / "sweep",
    )
    run("prune", log, "--theta", "0.5", "--out", out / "theta_0.5")
    run("report", out / "sweep" / "sweep.csv", out / "theta_0.5" / "eval.json", "--out", out / "report.md")
    print((out / "report.md").read_text())


if __name__ == "__main__":
    main()
