"""Keyword reasoning on (mlm_weight 0.5) vs off (0) under EBA-Split, seeds 1-3."""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from ebaker.benchmark import SEEDS, BenchmarkData, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--out", default="results/ker.json")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        data = BenchmarkData.build(seed)
        on = run_benchmark(seed, "split", 0.5, data=data)
        off = run_benchmark(seed, "split", 0.0, data=data)
        rows.append({"seed": seed, "mR_ker": on.mR(), "mR_no_ker": off.mR(), "mlm_final": on.final_mlm,
                     "ln_V": math.log(len(data.vocab))})
        print(f"seed {seed}: KER {on.mR():6.2f}  no KER {off.mR():6.2f}  "
              f"MLM {on.final_mlm:.3f} (0.5 ln V = {0.5 * math.log(len(data.vocab)):.3f})", flush=True)
    med_on = float(np.median([r["mR_ker"] for r in rows]))
    med_off = float(np.median([r["mR_no_ker"] for r in rows]))
    print(f"median KER {med_on:.2f} vs {med_off:.2f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps({"rows": rows, "median_ker": med_on, "median_no_ker": med_off},
                                         indent=1) + "\n")


if __name__ == "__main__":
    main()
