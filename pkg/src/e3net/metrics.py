"""Evaluation metrics: SI-SDR, SNR and target-speaker over-suppression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .nnops import SI_SDR_CAP_DB, ShapeError

UNAVAILABLE = "unavailable"


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +-100; raises on a silent reference."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.ndim != 1:
        raise ShapeError("si_sdr expects 1-D signals")
    return float(nnops.si_sdr(est, ref))


def snr_db(signal, noise_estimate) -> float:
    s = np.asarray(signal, dtype=np.float64)
    n = np.asarray(noise_estimate, dtype=np.float64)
    if s.shape != n.shape:
        raise ShapeError(f"snr_db: shapes differ, {s.shape} vs {n.shape}")
    ps, pn = float(s @ s), float(n @ n)
    if pn == 0:
        return SI_SDR_CAP_DB if ps > 0 else 0.0
    if ps == 0:
        return -SI_SDR_CAP_DB
    return float(np.clip(10 * np.log10(ps / pn), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


@dataclass
class TsosReport:
    oversuppressed_seconds: float
    normalized_seconds_per_half_hour: float
    frame_decisions: np.ndarray = field(repr=False)  # [frames, 2] bool: active, suppressed
    frame_ms: float
    total_seconds: float
    active_seconds: float

    @property
    def no_activity(self) -> bool:
        return not self.frame_decisions[:, 0].any()

    def to_dict(self) -> dict:
        return {"seconds": self.oversuppressed_seconds,
                "per_half_hour": self.normalized_seconds_per_half_hour,
                "active_seconds": self.active_seconds, "no_activity": self.no_activity}


def _frame_energy(x: np.ndarray, n: int) -> np.ndarray:
    frames = x[: (x.size // n) * n].reshape(-1, n)
    return np.einsum("ij,ij->i", frames, frames) / n


def tsos(enhanced, clean_reference, frame_ms: float = 20.0, activity_floor_dbfs: float = -40.0,
         suppression_drop_db: float = 10.0, sample_rate: int = 16000) -> TsosReport:
    """Seconds of target-active reference where the enhanced frame lost more
    than ``suppression_drop_db`` of energy, also scaled to a half hour.

    Non-overlapping frames; a trailing partial frame is ignored.
    """
    enh = np.asarray(enhanced, dtype=np.float64).ravel()
    ref = np.asarray(clean_reference, dtype=np.float64).ravel()
    if enh.size != ref.size:
        raise ShapeError(f"tsos: length mismatch, {enh.size} vs {ref.size}")
    n = int(round(frame_ms * sample_rate / 1000))
    e_ref = _frame_energy(ref, n)
    e_enh = _frame_energy(enh, n)
    active = e_ref > 10 ** (activity_floor_dbfs / 10)
    suppressed = active & (e_enh < e_ref * 10 ** (-suppression_drop_db / 10))
    frame_s = frame_ms / 1000
    seconds = float(suppressed.sum()) * frame_s
    total = ref.size / sample_rate
    return TsosReport(seconds, seconds * 1800.0 / total if total > 0 else 0.0,
                      np.stack([active, suppressed], axis=1), frame_ms, total,
                      float(active.sum()) * frame_s)


def metric_report(name: str, enhanced, clean, noisy=None, sample_rate: int = 16000, **tsos_kw) -> dict:
    """Per-file report; DNSMOS and WER need external models and are marked unavailable."""
    enhanced = np.asarray(enhanced, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    n = min(enhanced.size, clean.size)
    enhanced, clean = enhanced[:n], clean[:n]
    rep = tsos(enhanced, clean, sample_rate=sample_rate, **tsos_kw)
    out = {"file": name, "si_sdr_db": si_sdr(enhanced, clean),
           "snr_db": snr_db(clean, enhanced - clean), "tsos": rep.to_dict(),
           "dnsmos": UNAVAILABLE, "wer": UNAVAILABLE,
           "params": {"frame_ms": rep.frame_ms, "sample_rate": sample_rate, **tsos_kw}}
    if noisy is not None:
        noisy = np.asarray(noisy, dtype=np.float64)[:n]
        out["si_sdr_input_db"] = si_sdr(noisy, clean)
        out["si_sdr_improvement_db"] = out["si_sdr_db"] - out["si_sdr_input_db"]
    return out
