"""Global/local fusion weight sweep on one trained benchmark model."""

import argparse
import json
from pathlib import Path

from ebaker.benchmark import SAR_BASELINE_SEED, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=SAR_BASELINE_SEED)
    ap.add_argument("--alphas", type=float, nargs="+", default=[1.0, 0.8, 0.6, 0.4, 0.2, 0.0])
    ap.add_argument("--out", default="results/fusion.json")
    args = ap.parse_args()

    run = run_benchmark(args.seed, "split")
    rows = [{"alpha": a, "beta": 1.0 - a, "mR": run.mR(a, 1.0 - a)} for a in args.alphas]
    for r in rows:
        print(f"alpha {r['alpha']:.1f} beta {r['beta']:.1f}: mR {r['mR']:6.2f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"seed": args.seed, "rows": rows}, indent=1) + "\n")


if __name__ == "__main__":
    main()
