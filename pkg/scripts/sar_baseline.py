"""Record the fixed-seed SAR regression baseline.

Trains the EBA-Split benchmark model for the baseline seed, evaluates with
and without reranking and writes results/sar_baseline.json.  The acceptance
suite compares fresh runs against the committed file.
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from ebaker.benchmark import SAR_BASELINE_SEED, run_benchmark
from ebaker.rerank import SarConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=SAR_BASELINE_SEED)
    ap.add_argument("--out", default="results/sar_baseline.json")
    args = ap.parse_args()

    run = run_benchmark(args.seed, "split")
    sar = SarConfig()
    plain, reranked = run.mR(), run.mR(sar=sar)
    print(f"mR without SAR {plain:.4f}, with SAR {reranked:.4f} (change {reranked - plain:+.4f})")
    record = {"seed": args.seed, "mR": plain, "mR_sar": reranked, "delta": reranked - plain, "sar": asdict(sar)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
