"""Parameter counts and streaming RTF for the N=2/4/8 default configs.

    python3 scripts/bench_sizes.py --seconds 10 --runs 20 --csv sizes.csv
"""
import argparse
import csv

from threadpoolctl import threadpool_limits

from e3net.model import count_params, init_params, preset
from e3net.stream import bench_rtf

REPORTED = {"student": (2, 4.50e6), "baseline": (4, 6.61e6), "teacher": (8, 10.85e6)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=10.0, help="audio length per run")
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--filters", type=int, default=None, help="override F for a reduced-size proxy")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    rows = []
    for name, (n, reported) in REPORTED.items():
        cfg = preset(name) if args.filters is None else preset(name, num_filters=args.filters)
        with threadpool_limits(limits=1):
            rep = bench_rtf(init_params(cfg), cfg, args.seconds, args.runs)
        rows.append({"N": n, "F": cfg.num_filters, "params": count_params(cfg),
                     "reported_params": int(reported), "rtf": rep.rtf, "median_s": rep.median_s,
                     "p95_s": rep.p95_s, "rel_std": rep.rel_std})
        print(f"N={n}  F={cfg.num_filters}  params {rows[-1]['params']:>11,d} "
              f"(reported {reported / 1e6:.2f} M)  RTF {rep.rtf:.4f}  p95 {rep.p95_s:.3f}s")
    print(f"RTF ratio N=8/N=2: {rows[2]['rtf'] / rows[0]['rtf']:.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
