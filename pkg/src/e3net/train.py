"""Supervised, distillation and MTL+distillation training at desk scale."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np

from . import model as e3model
from . import nnops
from .embedding import mel_filterbank, stft_params
from .model import ConfigError, ModelConfig


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite; training is aborted."""


class Regime(str, Enum):
    SUPERVISED = "supervisedSE"
    KD_ON_SUP = "KDonSup"
    KD_ON_UNLAB = "KDonUnlab"
    MTL_KD_ON_UNLAB = "MTL+KDonUnlab"

    @classmethod
    def parse(cls, name: str) -> "Regime":
        key = name.removeprefix("L_").replace("_", "").replace("+", "").lower()
        for r in cls:
            if r.value.replace("+", "").lower() == key:
                return r
        raise ValueError(f"unknown regime {name!r}; choose from {[r.value for r in cls]}")

    @property
    def needs_teacher(self) -> bool:
        return self is not Regime.SUPERVISED


class Provenance(str, Enum):
    GROUND_TRUTH = "GroundTruthClean"
    PSEUDO_LABEL = "TeacherPseudoLabel"


@dataclass
class TrainBatch:
    inputs: np.ndarray
    embeddings: np.ndarray
    targets: Optional[np.ndarray] = None
    provenance: Provenance = Provenance.GROUND_TRUTH
    payloads: Optional[Sequence[Any]] = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(self.inputs)
        self.embeddings = np.atleast_2d(self.embeddings)
        if self.embeddings.shape[0] != self.inputs.shape[0]:
            raise nnops.ShapeError("TrainBatch: embeddings batch axis 0 does not match inputs")
        if self.targets is not None:
            self.targets = np.atleast_2d(self.targets)
            if self.targets.shape != self.inputs.shape:
                raise nnops.ShapeError(
                    f"TrainBatch: targets {self.targets.shape} vs inputs {self.inputs.shape}")

    def __len__(self):
        return self.inputs.shape[0]


def _nonempty(batch: Optional[TrainBatch]) -> bool:
    return batch is not None and len(batch) > 0


@dataclass
class TrainSchedule:
    peak_lr: float = 1e-4
    total_steps: int = 1000
    warmup_steps: int = 0
    grad_accumulation: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    l1_weight: float = 1.0
    regime: Regime = Regime.SUPERVISED

    def __post_init__(self):
        self.regime = Regime.parse(self.regime) if isinstance(self.regime, str) else self.regime
        if self.grad_accumulation < 1:
            raise ValueError("grad_accumulation must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Cosine annealing from ``peak_lr`` to 0, with optional linear warm-up."""
    if step >= schedule.total_steps:
        return 0.0
    if step < schedule.warmup_steps:
        return schedule.peak_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# losses

def se_loss_components(enhanced, target):
    """``(si_sdr_db, l1)`` per item; silent targets contribute SI-SDR 0."""
    enhanced = np.asarray(enhanced)
    target = np.asarray(target)
    val, _ = nnops._si_sdr(enhanced, target, allow_zero_reference=True)
    return val, nnops.l1(enhanced, target)


def se_loss(enhanced, target, l1_weight: float = 1.0) -> float:
    """``-SI-SDR + l1_weight * mean|enhanced - target|``, averaged over a batch."""
    s, l = se_loss_components(enhanced, target)
    return float(np.mean(-s + l1_weight * l))


def _se_loss_on_tape(tape, out: nnops.Var, target: np.ndarray, weight: float, l1_weight: float):
    bsz = out.shape[0]
    ref = tape.const(target.astype(out.value.dtype, copy=False))
    s = tape.si_sdr(out, ref, allow_zero_reference=True)
    l = tape.l1(out, ref)
    w = np.full(bsz, weight / bsz)
    loss = tape.add(tape.weighted_sum(s, -w), tape.weighted_sum(l, l1_weight * w))
    return loss, float(np.mean(s.value)), float(np.mean(l.value))


def se_loss_and_grads(params, config: ModelConfig, inputs, embeddings, target,
                      l1_weight: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """``se_loss`` of the model output and its gradient for every parameter."""
    tape = nnops.Tape()
    out, _ = e3model.forward_on_tape(tape, params, config, np.atleast_2d(inputs),
                                     np.atleast_2d(embeddings))
    tgt = np.atleast_2d(target)[..., :out.shape[-1]]
    loss, _, _ = _se_loss_on_tape(tape, out, tgt, 1.0, l1_weight)
    return float(loss.value), tape.backward(loss)


def params_hash(params) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, params, grads, lr: float):
        """Return a new parameter dict; inputs are left untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = type(params)()
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[name] + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = (p - np.asarray(lr, p.dtype) * step).astype(p.dtype, copy=False)
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        d = {f"optim.m.{k}": v for k, v in self.m.items()}
        d.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return d

    def load_state(self, tensors: dict, t: int) -> None:
        self.m = {k[len("optim.m."):]: v for k, v in tensors.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: v for k, v in tensors.items() if k.startswith("optim.v.")}
        self.t = t


# --------------------------------------------------------------------------
# teacher

@dataclass
class FrozenModel:
    """Read-only model used to produce pseudo labels."""
    params: dict
    config: ModelConfig

    def __post_init__(self):
        for arr in self.params.values():
            arr.setflags(write=False)

    def __call__(self, inputs, embeddings):
        return e3model.forward(self.params, self.config, inputs, embeddings)


def check_compatible(student: ModelConfig, teacher: ModelConfig) -> None:
    for name in ("sample_rate_hz", "window_samples", "hop_samples", "emb_dim"):
        if getattr(student, name) != getattr(teacher, name):
            raise ConfigError(f"teacher/student mismatch on {name}: "
                              f"{getattr(teacher, name)} vs {getattr(student, name)}")


# --------------------------------------------------------------------------
# transcription-loss hooks

class AsrHook(Protocol):
    def __call__(self, enhanced: np.ndarray, batch: TrainBatch) -> tuple[float, Optional[np.ndarray]]:
        """Return ``(loss, d loss / d enhanced)``; a ``None`` gradient means no update."""


class ZeroHook:
    """Constant-zero transcription loss."""

    def __call__(self, enhanced, batch):
        return 0.0, None


class EnvelopeHook:
    """Stand-in transcription loss: L1 distance between 40-band log-mel
    envelopes of the enhanced signal and of the input, over frames where the
    input is speech-active."""

    def __init__(self, sample_rate: int = 16000, active_range_db: float = 40.0):
        self.sample_rate = sample_rate
        self.win, self.hop, n_fft = stft_params(sample_rate)
        k = np.arange(n_fft // 2 + 1)
        n = np.arange(self.win)[:, None]
        window = np.hanning(self.win)[:, None]
        self.cos = window * np.cos(2 * np.pi * n * k / n_fft)
        self.sin = -window * np.sin(2 * np.pi * n * k / n_fft)
        self.mel = mel_filterbank(n_fft, sample_rate)
        self.active_range = active_range_db / 10 * math.log(10)

    def _spec(self, x):
        frames = nnops.frame_signal(np.asarray(x, np.float64), self.win, self.hop)
        re = frames @ self.cos
        im = frames @ self.sin
        mel = (re * re + im * im) @ self.mel + 1e-10
        return re, im, mel

    def __call__(self, enhanced, batch):
        n = min(enhanced.shape[-1], batch.inputs.shape[-1])
        enh = np.asarray(enhanced, np.float64)[..., :n]
        re, im, mel = self._spec(enh)
        lm_ref = np.log(self._spec(batch.inputs[..., :n])[2])
        energy = np.log(np.exp(lm_ref).sum(axis=-1))
        active = energy >= energy.max(axis=-1, keepdims=True) - self.active_range
        count = max(int(active.sum()) * mel.shape[-1], 1)
        diff = np.log(mel) - lm_ref
        loss = float(np.sum(np.abs(diff) * active[..., None]) / count)
        dmel = np.sign(diff) * active[..., None] / count / mel
        dpow = dmel @ self.mel.T
        dframes = (2 * re * dpow) @ self.cos.T + (2 * im * dpow) @ self.sin.T
        dx = nnops.overlap_add(dframes, self.hop)
        grad = np.zeros(enhanced.shape, np.float64)
        grad[..., :dx.shape[-1]] = dx
        return loss, grad.astype(enhanced.dtype)


class RecordingHook:
    """Wraps a hook and records every call, for control-flow inspection."""

    def __init__(self, inner=None, record: list | None = None):
        self.inner = inner or ZeroHook()
        self.record = record if record is not None else []

    def __call__(self, enhanced, batch):
        self.record.append("ASR")
        return self.inner(enhanced, batch)


# --------------------------------------------------------------------------
# trainer

StepObserver = Callable[[str, dict], None]


class Trainer:
    """Owns student parameters, optimizer state and gradient accumulation.

    Each ``*_step`` call processes one micro-batch; parameters change when
    ``schedule.grad_accumulation`` micro-batches have been accumulated.
    ``self.step`` counts optimizer updates and indexes the LR schedule.
    """

    def __init__(self, params, config: ModelConfig, schedule: TrainSchedule,
                 observer: StepObserver | None = None, log: Callable[[dict], None] | None = None):
        e3model.check_params(params, config)
        self.params = params
        self.config = config
        self.schedule = schedule
        self.optimizer = Adam(schedule.beta1, schedule.beta2, schedule.adam_eps)
        self.step = 0
        self.observer = observer
        self.log = log
        self._acc: dict[str, np.ndarray] | None = None
        self._micro = 0
        self._acc_loss: list[float] = []
        self._acc_parts: dict[str, list[float]] = {}
        self._t0 = time.perf_counter()

    # -- core
    def _grads(self, terms):
        """``terms``: list of ``(batch, targets, weight, tag)``; one tape per batch."""
        total = None
        loss = 0.0
        parts: dict[str, float] = {}
        for batch, targets, weight, tag in terms:
            tape = nnops.Tape()
            out, _ = e3model.forward_on_tape(tape, self.params, self.config,
                                             batch.inputs, batch.embeddings)
            tgt = targets[..., :out.shape[-1]]
            lv, s, l = _se_loss_on_tape(tape, out, tgt, weight, self.schedule.l1_weight)
            self._check_finite(lv.value, f"{tag} loss")
            g = tape.backward(lv)
            total = g if total is None else {k: total[k] + g[k] for k in total}
            loss += float(lv.value)
            parts[f"{tag}_si_sdr"] = s
            parts[f"{tag}_l1"] = l
        return loss, parts, total

    def _check_finite(self, value, what):
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite {what} at optimizer step {self.step} "
                                 f"(micro-batch {self._micro})")

    def _accumulate(self, loss, parts, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name} at optimizer step {self.step}")
        if self._acc is None:
            self._acc = grads
        else:
            self._acc = {k: self._acc[k] + grads[k] for k in self._acc}
        self._micro += 1
        self._acc_loss.append(loss)
        for k, v in parts.items():
            self._acc_parts.setdefault(k, []).append(v)
        if self._micro >= self.schedule.grad_accumulation:
            self._update()

    def _update(self):
        k = self._micro
        grads = self._acc if k == 1 else {n: g / np.asarray(k, g.dtype) for n, g in self._acc.items()}
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if norm > self.schedule.clip_norm:
            scale = self.schedule.clip_norm / norm
            grads = {n: g * np.asarray(scale, g.dtype) for n, g in grads.items()}
        lr = lr_at(self.schedule, self.step)
        self.params = self.optimizer.update(self.params, grads, lr)
        if self.log is not None:
            self.log({
                "step": self.step, "lr": lr, "loss": float(np.mean(self._acc_loss)),
                "components": {n: float(np.mean(v)) for n, v in self._acc_parts.items()},
                "grad_norm": norm, "wall_ms": round((time.perf_counter() - self._t0) * 1000, 3),
            })
        self.step += 1
        self._acc = None
        self._micro = 0
        self._acc_loss = []
        self._acc_parts = {}

    def _notify(self, kind, **info):
        if self.observer is not None:
            self.observer(kind, info)

    def _pseudo_labels(self, teacher: FrozenModel, batch: TrainBatch) -> np.ndarray:
        check_compatible(self.config, teacher.config)
        out = teacher(batch.inputs, batch.embeddings)
        return out.astype(next(iter(self.params.values())).dtype, copy=False)

    # -- public steps
    def supervised_step(self, batch: TrainBatch) -> float:
        if batch.provenance is not Provenance.GROUND_TRUTH or batch.targets is None:
            raise ValueError("supervised step needs ground-truth targets")
        loss, parts, grads = self._grads([(batch, batch.targets, 1.0, "sup")])
        self._notify("SE", loss=loss)
        self._accumulate(loss, parts, grads)
        return loss

    def kd_step(self, teacher: FrozenModel, batch: TrainBatch) -> float:
        """Train on teacher outputs for ``batch.inputs``; ``batch.targets`` is ignored."""
        labels = self._pseudo_labels(teacher, batch)
        loss, parts, grads = self._grads([(batch, labels, 1.0, "kd")])
        self._notify("KD", loss=loss)
        self._accumulate(loss, parts, grads)
        return loss

    def kd_unlabeled_step(self, teacher: FrozenModel, sim_batch: TrainBatch | None,
                          unlabeled_batch: TrainBatch | None) -> float:
        """One update from a ground-truth batch and a pseudo-labelled batch,
        weighted equally; an empty side leaves the other at full weight."""
        terms = []
        if _nonempty(sim_batch):
            if sim_batch.targets is None:
                raise ValueError("simulated batch needs ground-truth targets")
            terms.append([sim_batch, sim_batch.targets, 1.0, "sup"])
        if _nonempty(unlabeled_batch):
            terms.append([unlabeled_batch, self._pseudo_labels(teacher, unlabeled_batch), 1.0, "kd"])
        if not terms:
            raise ValueError("both batches are empty")
        for t in terms:
            t[2] = 1.0 / len(terms)
        loss, parts, grads = self._grads([tuple(t) for t in terms])
        self._notify("KD_UNLAB", loss=loss)
        self._accumulate(loss, parts, grads)
        return loss

    def asr_step(self, batch: TrainBatch, hook: AsrHook) -> float:
        """Update the student through an external loss on its enhanced output."""
        tape = nnops.Tape()
        out, _ = e3model.forward_on_tape(tape, self.params, self.config, batch.inputs, batch.embeddings)
        loss, grad = hook(out.value, batch)
        self._check_finite(loss, "transcription-hook loss")
        self._notify("ASR", loss=float(loss))
        if grad is None or not np.any(grad):
            return float(loss)
        self._check_finite(grad, "transcription-hook gradient")
        grads = tape.backward(tape.seed(out, grad))
        self._accumulate(float(loss), {"asr": float(loss)}, grads)
        return float(loss)

    def mtl_kd_round(self, teacher: FrozenModel, sim_batch: TrainBatch,
                     unlabeled_batch: TrainBatch, hook: AsrHook) -> dict:
        """SE step on simulated data, transcription step on unlabeled audio,
        then a KD step on the same unlabeled audio."""
        se = self.supervised_step(sim_batch)
        asr = self.asr_step(unlabeled_batch, hook)
        kd = self.kd_step(teacher, unlabeled_batch)
        return {"se": se, "asr": asr, "kd": kd}

    def flush(self) -> None:
        """Apply a partially accumulated gradient, if any."""
        if self._micro:
            self._update()


class JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def batch_from(noisy, clean, embeddings, idx, provenance=Provenance.GROUND_TRUTH) -> TrainBatch:
    idx = np.asarray(idx)
    return TrainBatch(noisy[idx], embeddings[idx], None if clean is None else clean[idx], provenance)


def evaluate_si_sdr(params, config, noisy, clean, embeddings, chunk: int = 16) -> np.ndarray:
    """Per-item SI-SDR of the enhanced output against ``clean``."""
    vals = []
    for s in range(0, len(noisy), chunk):
        out = e3model.forward(params, config, noisy[s:s + chunk], embeddings[s:s + chunk])
        vals.append(nnops.si_sdr(out, clean[s:s + chunk, :out.shape[-1]]))
    return np.concatenate(vals)


__all__ = [
    "Adam", "AsrHook", "EnvelopeHook", "FrozenModel", "JsonlLog", "NumericalError", "Provenance",
    "RecordingHook", "Regime", "TrainBatch", "TrainSchedule", "Trainer", "ZeroHook", "batch_from",
    "check_compatible", "evaluate_si_sdr", "lr_at", "params_hash", "se_loss",
    "se_loss_components",
]
