#!/usr/bin/env python3
"""
Complexity-scaling and RTF-ordering checks on one CPU thread.

This script:
1. Times 4 stacked attention layers (D=192, 6 heads) at N=1000 and N=4000 frames
   for softmax and FAVOR+ and checks the time ratios (FAVOR+ <= 5.5, softmax >= 10)
2. Sweeps conformer-4 and f-conformer-4 over 1..10 s inputs: FAVOR+ RTF(10 s)/RTF(1 s) <= 1.5,
   softmax RTF rising with duration (Spearman rho > 0.9)
3. Checks Conv-Tasformer RTF > DF-Conformer-8 RTF at every benchmarked duration

Results are appended to CSV files in --out-dir. Exit code is the number of failed checks.
"""

import argparse
import os
import sys
from pathlib import Path

# Single BLAS thread before numpy is imported anywhere
os.environ.setdefault("DFC_THREADS", "1")
sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from app.services.bench_service import BenchService, rtf_ratio, rtf_trend, scaling_ratio, write_csv
from app.utils.helper import log


def check(name: str, passed: bool, detail: str) -> int:
    log(f"{'PASS' if passed else 'FAIL'} {name}: {detail}", "INFO" if passed else "ERROR")
    return 0 if passed else 1


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out-dir", default="bench")
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--warmup", type=int, default=2)
    parser.add_argument("--durations", type=float, nargs="+", default=[float(d) for d in range(1, 11)])
    parser.add_argument("--ordering-durations", type=float, nargs="+", default=[1.0, 2.0, 4.0])
    parser.add_argument("--skip-ordering", action="store_true")
    args = parser.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    bench = BenchService(reps=args.reps, warmup=args.warmup)
    failures = 0

    attention = bench.attention_sweep(frame_counts=(1000, 4000))
    write_csv(attention, os.path.join(args.out_dir, "attention_scaling.csv"))
    favor, softmax = scaling_ratio(attention, "favor"), scaling_ratio(attention, "softmax")
    failures += check("favor attention scaling", favor <= 5.5, f"time(4000)/time(1000)={favor:.2f}")
    failures += check("softmax attention scaling", softmax >= 10.0, f"time(4000)/time(1000)={softmax:.2f}")

    rtf = bench.rtf_sweep(["conformer-4", "f-conformer-4"], args.durations)
    write_csv(rtf, os.path.join(args.out_dir, "rtf_conformer4.csv"))
    ratio = rtf_ratio(rtf, "f-conformer-4")
    rho = rtf_trend(rtf, "conformer-4")
    failures += check("f-conformer-4 RTF flat", ratio <= 1.5, f"RTF(max)/RTF(min)={ratio:.2f}")
    failures += check("conformer-4 RTF rising", rho > 0.9, f"spearman={rho:.3f}")

    if not args.skip_ordering:
        ordering = bench.rtf_sweep(["df-conformer-8", "conv-tasformer"], args.ordering_durations)
        write_csv(ordering, os.path.join(args.out_dir, "rtf_ordering.csv"))
        pivot = ordering.pivot(index="duration_s", columns="preset", values="rtf_median")
        slower = bool((pivot["conv-tasformer"] > pivot["df-conformer-8"]).all())
        failures += check("conv-tasformer slower than df-conformer-8", slower, pivot.to_string())

    log(f"RTF sweep finished: failures={failures}, out_dir={args.out_dir}")
    return failures


if __name__ == "__main__":
    sys.exit(main())
