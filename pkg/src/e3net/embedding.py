"""Speaker embeddings from enrollment audio.

The built-in extractor summarises an enrollment clip by the per-band mean
and standard deviation of its log-mel spectrum. It is a deterministic
stand-in for a trained d-vector network; anything producing an
``emb_dim`` vector can be used instead via :func:`load_embedding`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

N_MELS = 40
FRAME_MS = 25.0
HOP_MS = 10.0
LOG_FLOOR = 1e-10
ACTIVE_RANGE = np.log(1e4)


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    source: str  # "file-loaded" | "builtin-stats"

    def __post_init__(self):
        v = np.asarray(self.vector)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise EmbeddingError("embedding must be a finite 1-D vector")
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-4:
            raise EmbeddingError("embedding must be L2-normalised")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-style filters, shape ``[n_fft // 2 + 1, n_mels]``."""
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((freqs.size, n_mels))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[:, m] = np.clip(np.minimum(up, down), 0, None)
    fb.setflags(write=False)
    return fb


def stft_params(sample_rate: int) -> tuple[int, int, int]:
    win = int(round(FRAME_MS * sample_rate / 1000))
    hop = int(round(HOP_MS * sample_rate / 1000))
    n_fft = 1 << (win - 1).bit_length()
    return win, hop, n_fft


def log_mel(x: np.ndarray, sample_rate: int = 16000) -> np.ndarray:
    """Log-mel power spectrogram ``[frames, 40]`` over 25 ms Hann frames."""
    win, hop, n_fft = stft_params(sample_rate)
    x = np.asarray(x, dtype=np.float64)
    if x.size < win:
        raise EmbeddingError("signal shorter than one analysis frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2
    return np.log(power @ mel_filterbank(n_fft, sample_rate) + LOG_FLOOR)


def builtin_embedding(enrollment: np.ndarray, emb_dim: int,
                      sample_rate: int = 16000) -> SpeakerEmbedding:
    """Mean and std of each log-mel band over speech-active frames,
    zero-padded or truncated to ``emb_dim``, then unit-normalised."""
    enrollment = np.asarray(enrollment)
    if enrollment.size < sample_rate:
        raise EmbeddingError("enrollment must be at least 1 s of audio")
    lm = log_mel(enrollment, sample_rate)
    # statistics over frames within 40 dB of the loudest one; pauses would
    # otherwise pull every speaker towards the same floor vector
    energy = np.log(np.exp(lm).sum(axis=1))
    lm = lm[energy >= energy.max() - ACTIVE_RANGE]
    stats = np.concatenate([lm.mean(axis=0), lm.std(axis=0)])
    vec = np.zeros(emb_dim)
    n = min(emb_dim, stats.size)
    vec[:n] = stats[:n]
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec[0] = 1.0
    else:
        vec /= norm
    return SpeakerEmbedding(vec.astype(np.float32), "builtin-stats")


def load_embedding(path: str | Path, emb_dim: int) -> SpeakerEmbedding:
    """Read a vector from ``.npy`` or whitespace/comma separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        vec = np.load(path)
    else:
        vec = np.array(path.read_text().replace(",", " ").split(), dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.size != emb_dim:
        raise EmbeddingError(f"embedding file has {vec.size} values, expected {emb_dim}")
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0:
        raise EmbeddingError("embedding must be finite and non-zero")
    return SpeakerEmbedding((vec / norm).astype(np.float32), "file-loaded")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
