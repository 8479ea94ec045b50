"""``e3net`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data as e3data
from .checkpoint import CheckpointError, read_checkpoint
from .embedding import EmbeddingError, builtin_embedding, load_embedding
from .metrics import metric_report
from .model import (ConfigError, ModelConfig, count_params, enhance, init_params,
                    param_breakdown, preset)
from .nnops import ShapeError
from .runner import RunConfig, run_sweep, run_training
from .stream import StreamEngine, bench_rtf, rtf
from .train import NumericalError, Regime

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(args, result: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(result, indent=None if args.json else 1, sort_keys=True))
    else:
        print(text)


def _config_file(path) -> ModelConfig:
    """A bare model config, or a run config as given to ``train``."""
    raw = json.loads(Path(path).read_text())
    if {"regime", "preset", "model", "schedule"} & set(raw):
        return RunConfig.from_dict(raw).model_config()
    return ModelConfig.from_dict(raw)


def _model_from_args(args):
    if getattr(args, "model", None):
        ck = read_checkpoint(args.model)
        return ck.params, ck.config
    if getattr(args, "config", None):
        config = _config_file(args.config)
    else:
        config = preset(args.preset)
    return init_params(config, seed=0), config


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    e3data.make_fixture_set(args.seed, args.out, n_speakers=args.speakers,
                            per_scenario=args.per_scenario, seconds=args.seconds,
                            long_form_seconds=args.long_form_seconds)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    _emit(args, {"out": str(args.out), "manifest_sha256": digest}, f"manifest sha256 {digest}")
    return EXIT_OK


def _run_config(args) -> RunConfig | list:
    raw = json.loads(Path(args.config).read_text())
    items = raw if isinstance(raw, list) else [raw]
    for d in items:
        if args.data:
            d["data_dir"] = str(args.data)
        if getattr(args, "teacher", None):
            d["teacher"] = str(args.teacher)
    return [RunConfig.from_dict(d) for d in items] if isinstance(raw, list) else RunConfig.from_dict(items[0])


def cmd_train(args, distill: bool = False) -> int:
    cfg = _run_config(args)
    if isinstance(cfg, list):
        path = run_sweep([asdict(c) for c in cfg], args.out)
        _emit(args, {"sweep_csv": str(path)}, f"wrote {path}")
        return EXIT_OK
    regime = Regime.parse(cfg.regime)
    if distill and not regime.needs_teacher:
        raise UsageError(f"distill needs a distillation regime, got {regime.value}")
    if regime.needs_teacher and not cfg.teacher:
        raise UsageError(f"regime {regime.value} requires --teacher")
    res = run_training(cfg, args.out, resume=args.resume)
    _emit(args, {"checkpoint": str(res.checkpoint), "log": str(res.log_path), "steps": res.steps,
                 "final_loss": res.final_loss},
          f"{res.steps} steps, final loss {res.final_loss:.4f}; wrote {res.checkpoint}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    if not args.enroll and not args.embedding:
        raise UsageError("one of --enroll or --embedding is required")
    ck = read_checkpoint(args.model)
    params, config = ck.params, ck.config
    sr = config.sample_rate_hz
    x = e3data.load_wav(args.input, sr).samples
    if args.embedding:
        emb = load_embedding(args.embedding, config.emb_dim)
    else:
        emb = builtin_embedding(e3data.load_wav(args.enroll, sr).samples, config.emb_dim, sr)
    t0 = time.perf_counter()
    if args.streaming:
        y = StreamEngine(params, config, emb).process(x, config.hop_samples)[:x.size]
    else:
        y = enhance(params, config, x, emb.vector)
    elapsed = time.perf_counter() - t0
    e3data.save_wav(args.out, y, sr)
    r = rtf(elapsed, x.size / sr)
    _emit(args, {"out": str(args.out), "rtf": r, "seconds": elapsed, "streaming": args.streaming,
                 "embedding_source": emb.source}, f"wrote {args.out}; RTF {r:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    params, config = _model_from_args(args)
    rep = bench_rtf(params, config, args.seconds, args.runs)
    _emit(args, rep.to_dict(),
          f"runs {rep.runs}  audio {rep.audio_seconds:g}s  mean {rep.mean_s:.4f}s  "
          f"median {rep.median_s:.4f}s  p95 {rep.p95_s:.4f}s  RTF {rep.rtf:.4f}")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.model:
        config = read_checkpoint(args.model).config
    elif args.config:
        config = _config_file(args.config)
    else:
        config = preset(args.preset)
    total = count_params(config)
    breakdown = param_breakdown(config)
    lines = [f"{k:12s} {v:>12,d}" for k, v in breakdown.items()] + [f"{'total':12s} {total:>12,d}"]
    _emit(args, {"total": total, "breakdown": breakdown, "config": config.to_dict()}, "\n".join(lines))
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref = e3data.load_wav(args.ref).samples
    deg = e3data.load_wav(args.deg).samples
    if ref.size != deg.size:
        raise e3data.WavError(f"length mismatch: ref {ref.size} vs deg {deg.size} samples")
    noisy = e3data.load_wav(args.noisy).samples if args.noisy else None
    rep = metric_report(str(args.deg), deg, ref, noisy)
    print(json.dumps(rep, sort_keys=True, indent=None if args.json else 1))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="e3net", description="Personalized speech enhancement toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("simulate", cmd_simulate, "generate a synthetic fixture set")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--speakers", type=int, default=4)
    sp.add_argument("--per-scenario", type=int, default=2)
    sp.add_argument("--seconds", type=float, default=4.0)
    sp.add_argument("--long-form-seconds", type=float, default=180.0)

    for name, distill in (("train", False), ("distill", True)):
        sp = add(name, lambda a, d=distill: cmd_train(a, distill=d),
                 "train a model from a JSON run config" if not distill else "distil a student from a teacher")
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--teacher", type=Path)
        sp.add_argument("--data", type=Path)
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--resume", action="store_true")

    sp = add("enhance", cmd_enhance, "enhance a WAV file")
    sp.add_argument("--model", required=True, type=Path)
    sp.add_argument("--in", dest="input", required=True, type=Path)
    sp.add_argument("--enroll", type=Path)
    sp.add_argument("--embedding", type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--streaming", action="store_true")

    sp = add("bench", cmd_bench, "single-thread real-time-factor benchmark")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--model", type=Path)
    g.add_argument("--preset", default="baseline")
    sp.add_argument("--seconds", type=float, default=10.0)
    sp.add_argument("--runs", type=int, default=100)

    sp = add("params", cmd_params, "exact parameter count and breakdown")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--config", type=Path)
    g.add_argument("--model", type=Path)
    g.add_argument("--preset", default="baseline")

    sp = add("metrics", cmd_metrics, "SI-SDR, SNR and TSOS report")
    sp.add_argument("--ref", required=True, type=Path)
    sp.add_argument("--deg", required=True, type=Path)
    sp.add_argument("--noisy", type=Path)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help exits 0, argument errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = int(os.environ.get("E3NET_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"e3net: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"e3net: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (e3data.WavError, CheckpointError, EmbeddingError, ShapeError, OSError,
            json.JSONDecodeError) as exc:
        print(f"e3net: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"e3net: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
