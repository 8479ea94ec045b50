"""Toy-scale sweep over encoder filters F and block count N.

Each point trains the same synthetic data with a shared seed and reports the
held-out SI-SDR, giving the shape of the quality/size trade-off.

    python3 scripts/sweep_filters.py --out runs/sweep --steps 2000
"""
import argparse
import json
from pathlib import Path

from e3net.runner import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--filters", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--blocks", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--items", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = {"seed": 100 + args.seed, "n_items": args.items, "seconds": 2.0, "n_speakers": 16}
    held_out = {"seed": 200 + args.seed, "n_items": 16, "seconds": 2.0, "n_speakers": 16}
    configs = [{"preset": "small", "model": {"num_filters": f, "num_blocks": n},
                "synthetic": data, "eval_synthetic": held_out, "seed": args.seed,
                "schedule": {"peak_lr": 1e-3, "total_steps": args.steps, "warmup_steps": 100}}
               for f in args.filters for n in args.blocks]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep_config.json").write_text(json.dumps(configs, indent=1))
    path = run_sweep(configs, args.out)
    print(path.read_text())


if __name__ == "__main__":
    main()
