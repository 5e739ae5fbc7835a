"""No elimination vs EBA-Split on the synthetic benchmark (seeds 1-3).

Prints per-seed test mR, the median gain and the share of final-epoch
eliminated pairs that are truly corrupted.  Results go to results/eba.json.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ebaker.benchmark import SEEDS, BenchmarkData, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--scheme", default="split", choices=("split", "joint"))
    ap.add_argument("--out", default="results/eba.json")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        data = BenchmarkData.build(seed)
        base = run_benchmark(seed, "none", data=data)
        eba = run_benchmark(seed, args.scheme, data=data)
        rows.append({"seed": seed, "mR_none": base.mR(), f"mR_{args.scheme}": eba.mR(),
                     "precision": eba.final_precision, "eliminated": len(eba.reports[-1].eliminated)})
        print(f"seed {seed}: none {base.mR():6.2f}  {args.scheme} {eba.mR():6.2f}  "
              f"precision {eba.final_precision:.2f}", flush=True)
    gain = float(np.median([r[f"mR_{args.scheme}"] for r in rows]) - np.median([r["mR_none"] for r in rows]))
    print(f"median gain {gain:+.2f} mR")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"rows": rows, "median_gain": gain}, indent=1) + "\n")


if __name__ == "__main__":
    main()
