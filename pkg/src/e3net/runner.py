"""Config-driven training runs: data loading, the regime loop, checkpoints,
resume and parameter sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as e3data
from .checkpoint import read_checkpoint, save_checkpoint
from .embedding import builtin_embedding
from .model import ConfigError, ModelConfig, count_params, init_params, preset
from .train import (EnvelopeHook, FrozenModel, JsonlLog, Provenance, Regime, TrainBatch,
                    Trainer, TrainSchedule, check_compatible, evaluate_si_sdr)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """One training run. ``data_dir`` points at a simulated fixture set;
    without it, ``synthetic`` holds :func:`e3net.data.make_dataset` arguments."""
    regime: str = "supervisedSE"
    preset: Optional[str] = "small"
    model: dict = field(default_factory=dict)
    init: Optional[str] = None
    teacher: Optional[str] = None
    data_dir: Optional[str] = None
    unlabeled_dir: Optional[str] = None
    eval_dir: Optional[str] = None
    synthetic: Optional[dict] = None
    eval_synthetic: Optional[dict] = None
    schedule: dict = field(default_factory=dict)
    seed: int = 0
    batch_size: int = 4
    crop_seconds: float = 2.0
    checkpoint_every: int = 0
    remix: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        if self.preset is None:
            return ModelConfig.from_dict(self.model)
        return preset(self.preset, **self.model)

    def train_schedule(self) -> TrainSchedule:
        sched = dict(self.schedule)
        sched.setdefault("regime", self.regime)
        # gradient accumulation of 2 for every distillation regime
        if Regime.parse(sched["regime"]).needs_teacher:
            sched.setdefault("grad_accumulation", 2)
        return TrainSchedule(**sched)


@dataclass
class Examples:
    noisy: list
    clean: Optional[list]
    embeddings: np.ndarray

    def __len__(self):
        return len(self.noisy)


def load_examples(data_dir, emb_dim: int, sample_rate: int = 16000, with_clean: bool = True) -> Examples:
    """Read every manifest entry; embeddings come from each enrollment clip."""
    root = Path(data_dir)
    noisy, clean, embs = [], [], []
    cache: dict[str, np.ndarray] = {}
    for entry in e3data.read_manifest(root):
        p = entry["paths"]
        noisy.append(e3data.load_wav(root / p["noisy"], sample_rate).samples)
        if with_clean:
            clean.append(e3data.load_wav(root / p["clean"], sample_rate).samples)
        enr = p["enrollment"]
        if enr not in cache:
            cache[enr] = builtin_embedding(e3data.load_wav(root / enr, sample_rate).samples,
                                           emb_dim, sample_rate).vector
        embs.append(cache[enr])
    if not noisy:
        raise e3data.WavError(f"{root}: manifest lists no mixtures")
    return Examples(noisy, clean if with_clean else None, np.stack(embs))


def synthetic_examples(emb_dim: int, **kwargs) -> Examples:
    ds = e3data.make_dataset(emb_dim=emb_dim, **kwargs)
    return Examples(list(ds.noisy), list(ds.clean), ds.embeddings)


def _crop_batch(ex: Examples, rng: np.random.Generator, size: int, length: int,
                provenance=Provenance.GROUND_TRUTH, remix: bool = False) -> TrainBatch:
    """Random crops. With ``remix`` the noisy input is the crop's clean target
    plus the residual noise of another random item at a random offset."""
    idx = rng.integers(len(ex), size=size)
    noisy, clean = [], []
    for i in idx:
        x = ex.noisy[i]
        start = int(rng.integers(x.size - length + 1)) if x.size > length else 0
        noisy.append(e3data.loop_pad(x[start:start + length], length))
        if ex.clean is not None:
            clean.append(e3data.loop_pad(ex.clean[i][start:start + length], length))
    if remix and ex.clean is not None:
        for k in range(size):
            j = int(rng.integers(len(ex)))
            resid = ex.noisy[j] - ex.clean[j]
            shift = int(rng.integers(resid.size))
            noisy[k] = clean[k] + e3data.loop_pad(np.roll(resid, -shift), length)
    return TrainBatch(np.stack(noisy), ex.embeddings[idx],
                      np.stack(clean) if ex.clean is not None else None, provenance)


@dataclass
class RunResult:
    params: dict
    config: ModelConfig
    steps: int
    final_loss: float
    checkpoint: Path
    log_path: Path


def _final_loss(log_path: Path, window: int = 20) -> float:
    if not log_path.exists():
        return float("nan")
    lines = log_path.read_text().splitlines()[-window:]
    vals = [json.loads(x)["loss"] for x in lines if x.strip()]
    return float(np.mean(vals)) if vals else float("nan")


def run_training(cfg: RunConfig, out: str | Path, resume: bool = False,
                 max_steps: int | None = None) -> RunResult:
    """Train per ``cfg`` and write ``out`` (checkpoint) and ``out.jsonl`` (log).

    ``max_steps`` stops this session early (the schedule still spans
    ``total_steps``); a later ``resume=True`` call picks up from there.

    Batch ``k`` of optimizer step ``s`` is drawn from ``default_rng([seed, s, k])``
    so a resumed run continues the exact data stream.
    """
    out = Path(out)
    log_path = out.with_suffix(".jsonl")
    schedule = cfg.train_schedule()
    regime = schedule.regime
    if regime.needs_teacher and not cfg.teacher:
        raise ConfigError(f"regime {regime.value} requires a teacher checkpoint")

    start_step = 0
    optim_state, optim_t = {}, 0
    if resume and out.exists():
        ck = read_checkpoint(out)
        params, mconf = ck.params, ck.config
        ts = ck.train_state or {}
        start_step, optim_t = int(ts.get("step", 0)), int(ts.get("optimizer_t", 0))
        optim_state = dict(ck.extra)
        log.info("resuming %s at step %d", out, start_step)
    elif cfg.init:
        ck = read_checkpoint(cfg.init)
        params, mconf = ck.params, ck.config
    else:
        mconf = cfg.model_config()
        params = init_params(mconf, seed=cfg.seed)
        if log_path.exists():
            log_path.unlink()

    teacher = None
    if regime.needs_teacher:
        tck = read_checkpoint(cfg.teacher)
        check_compatible(mconf, tck.config)
        teacher = FrozenModel(tck.params, tck.config)

    sr = mconf.sample_rate_hz
    if cfg.data_dir:
        sim = load_examples(cfg.data_dir, mconf.emb_dim, sr)
    else:
        sim = synthetic_examples(mconf.emb_dim, **(cfg.synthetic or {"seed": cfg.seed, "n_items": 32}))
    unlab = None
    if regime in (Regime.KD_ON_UNLAB, Regime.MTL_KD_ON_UNLAB):
        unlab = (load_examples(cfg.unlabeled_dir, mconf.emb_dim, sr, with_clean=False)
                 if cfg.unlabeled_dir else Examples(sim.noisy, None, sim.embeddings))

    trainer = Trainer(params, mconf, schedule, log=JsonlLog(log_path))
    trainer.step = start_step
    if optim_state:
        trainer.optimizer.load_state(optim_state, optim_t)
    hook = EnvelopeHook(sr)
    length = int(round(cfg.crop_seconds * sr))

    def save():
        save_checkpoint(trainer.params, mconf, out, extra=trainer.optimizer.state_tensors(),
                        train_state={"step": trainer.step, "optimizer_t": trainer.optimizer.t,
                                     "regime": regime.value, "run_config": asdict(cfg)})

    try:
        stop = schedule.total_steps if max_steps is None else min(schedule.total_steps, start_step + max_steps)
        while trainer.step < stop:
            step = trainer.step
            for k in range(schedule.grad_accumulation):
                rng = np.random.default_rng([cfg.seed, step, k])
                sb = _crop_batch(sim, rng, cfg.batch_size, length, remix=cfg.remix)
                if regime is Regime.SUPERVISED:
                    trainer.supervised_step(sb)
                elif regime is Regime.KD_ON_SUP:
                    trainer.kd_step(teacher, sb)
                else:
                    ub = _crop_batch(unlab, rng, cfg.batch_size, length, Provenance.PSEUDO_LABEL)
                    if regime is Regime.KD_ON_UNLAB:
                        trainer.kd_unlabeled_step(teacher, sb, ub)
                    else:
                        trainer.mtl_kd_round(teacher, sb, ub, hook)
            trainer.flush()
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                save()
    finally:
        trainer.log.close()
    save()
    return RunResult(trainer.params, mconf, trainer.step, _final_loss(log_path), out, log_path)


def run_sweep(configs: list[dict], out_dir: str | Path) -> Path:
    """Run each config (sharing its seed) and write ``sweep.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, d in enumerate(configs):
        cfg = RunConfig.from_dict(d)
        res = run_training(cfg, out_dir / f"run_{i:02d}.e3n")
        mconf = res.config
        if cfg.eval_dir:
            ev = load_examples(cfg.eval_dir, mconf.emb_dim, mconf.sample_rate_hz)
        else:
            ev = synthetic_examples(mconf.emb_dim, **(cfg.eval_synthetic or
                                                       {"seed": cfg.seed + 10_000, "n_items": 8}))
        n = min(x.size for x in ev.noisy)
        noisy = np.stack([x[:n] for x in ev.noisy])
        clean = np.stack([x[:n] for x in ev.clean])
        score = float(np.mean(evaluate_si_sdr(res.params, mconf, noisy, clean, ev.embeddings)))
        rows.append({"filters": mconf.num_filters, "N": mconf.num_blocks,
                     "params": count_params(mconf), "final_loss": res.final_loss, "si_sdr": score})
    path = out_dir / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path
