"""Causal frame-by-frame inference and real-time-factor benchmarking."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import nnops
from .model import ModelConfig, check_params, stacked_lstm
from .nnops import StateError


@dataclass
class StreamState:
    """Per-utterance state.

    ``history`` holds the last ``W - hop`` input samples once the first
    window is complete, ``residue`` the input not yet part of any frame and
    ``tail`` the pending overlap-add region.
    """
    h: list
    c: list
    history: np.ndarray
    residue: np.ndarray
    tail: np.ndarray
    frames_processed: int = 0
    closed: bool = False


class StreamEngine:
    """Streaming E3Net over read-only parameters.

    One engine can serve many :class:`StreamState` objects; each state must
    be driven from a single thread.
    """

    def __init__(self, params, config: ModelConfig, embedding):
        check_params(params, config)
        self.config = config
        self.dtype = params["encoder.filters"].dtype
        emb = np.asarray(getattr(embedding, "vector", embedding), dtype=self.dtype)
        if emb.shape != (config.emb_dim,):
            raise ValueError(f"embedding length {emb.shape} != emb_dim {config.emb_dim}")
        self.P = params
        self.W = config.window_samples
        self.hop = config.hop_samples
        F = config.num_filters
        # embedding columns of the projection are constant over a stream
        self.proj_w = np.ascontiguousarray(params["proj.weight"][:, :F])
        self.proj_b = params["proj.weight"][:, F:] @ emb + params["proj.bias"]
        self.lstm = [stacked_lstm(params, f"block_{b}.") for b in range(config.num_blocks)]
        self.dec_t = np.ascontiguousarray(params["decoder.filters"])

    def new_state(self) -> StreamState:
        D = self.config.model_dim
        n = self.config.num_blocks
        z = np.zeros(D, self.dtype)
        return StreamState([z.copy() for _ in range(n)], [z.copy() for _ in range(n)],
                           np.zeros(0, self.dtype), np.zeros(0, self.dtype),
                           np.zeros(self.W - self.hop, self.dtype))

    def reset(self, state: StreamState) -> None:
        fresh = self.new_state()
        state.__dict__.update(fresh.__dict__)

    def _frame(self, state: StreamState, frame: np.ndarray) -> np.ndarray:
        P = self.P
        enc = nnops.conv1d_encoder(frame, P["encoder.filters"], P["encoder.bias"])
        x = nnops.prelu(enc, P["encoder.prelu_alpha"])
        x = nnops.layer_norm(x, P["encoder.ln.gamma"], P["encoder.ln.beta"])
        x = nnops.prelu(x @ self.proj_w.T + self.proj_b, P["proj.prelu_alpha"])
        for b, (w_x, w_h, bias) in enumerate(self.lstm):
            p = f"block_{b}."
            y = nnops.prelu(nnops.linear(x, P[p + "fc1.weight"], P[p + "fc1.bias"]), P[p + "fc1.prelu_alpha"])
            y = nnops.prelu(nnops.linear(y, P[p + "fc2.weight"], P[p + "fc2.bias"]), P[p + "fc2.prelu_alpha"])
            y = nnops.layer_norm(y, P[p + "ln_fc.gamma"], P[p + "ln_fc.beta"])
            h, c, _ = nnops.lstm_cell_step(y, state.h[b], state.c[b], w_x, w_h, bias)
            state.h[b], state.c[b] = h, c
            z = nnops.layer_norm(h, P[p + "ln_lstm.gamma"], P[p + "ln_lstm.beta"])
            x = nnops.layer_norm(y + z, P[p + "ln_res.gamma"], P[p + "ln_res.beta"])
        mask = nnops.sigmoid(nnops.linear(x, P["mask.weight"], P["mask.bias"]))
        out = (mask * enc) @ self.dec_t + P["decoder.bias"]
        out[:self.W - self.hop] += state.tail
        state.tail = out[self.hop:].copy()
        state.frames_processed += 1
        return out[:self.hop]

    def push(self, state: StreamState, samples) -> np.ndarray:
        """Feed samples; returns the enhanced samples that became final."""
        if state.closed:
            raise StateError("push after flush: stream is closed")
        x = np.asarray(samples, dtype=self.dtype).ravel()
        buf = np.concatenate([state.residue, x])
        need = self.W - self.hop
        if state.history.size < need:
            if buf.size < need:
                state.residue = buf
                return np.zeros(0, self.dtype)
            state.history, buf = buf[:need], buf[need:]
        out = []
        pos = 0
        hist = state.history
        while buf.size - pos >= self.hop:
            frame = np.concatenate([hist, buf[pos:pos + self.hop]])
            out.append(self._frame(state, frame))
            hist = frame[self.hop:]
            pos += self.hop
        state.history = hist
        state.residue = buf[pos:].copy()
        return np.concatenate(out) if out else np.zeros(0, self.dtype)

    def flush(self, state: StreamState) -> np.ndarray:
        """Zero-pad any unconsumed input into a last frame, emit the tail and close."""
        if state.closed:
            raise StateError("stream already flushed")
        parts = []
        if state.residue.size:
            frame = np.zeros(self.W, self.dtype)
            head = np.concatenate([state.history, state.residue])
            frame[:head.size] = head
            state.residue = np.zeros(0, self.dtype)
            parts.append(self._frame(state, frame))
        parts.append(state.tail.copy())
        state.closed = True
        return np.concatenate(parts)

    def process(self, samples, chunk: int | None = None) -> np.ndarray:
        """Stream a whole signal through a fresh state and flush."""
        state = self.new_state()
        samples = np.asarray(samples)
        chunk = chunk or samples.size or 1
        out = [self.push(state, samples[i:i + chunk]) for i in range(0, samples.size, chunk)]
        out.append(self.flush(state))
        return np.concatenate(out)


# --------------------------------------------------------------------------
# real-time factor

def rtf(processing_seconds: float, audio_seconds: float) -> float:
    return processing_seconds / audio_seconds


@dataclass
class RtfReport:
    runs: int
    audio_seconds: float
    times: list = field(repr=False)
    mean_s: float = 0.0
    median_s: float = 0.0
    p95_s: float = 0.0
    rtf: float = 0.0
    rel_std: float = 0.0

    @classmethod
    def from_times(cls, times, audio_seconds):
        times = list(times)
        mean = statistics.fmean(times)
        return cls(len(times), audio_seconds, times, mean, statistics.median(times),
                   float(np.percentile(times, 95)), rtf(mean, audio_seconds),
                   statistics.pstdev(times) / mean if mean > 0 else 0.0)

    def to_dict(self) -> dict:
        return {"runs": self.runs, "audio_seconds": self.audio_seconds, "mean_s": self.mean_s,
                "median_s": self.median_s, "p95_s": self.p95_s, "rtf": self.rtf,
                "rel_std": self.rel_std, "times": self.times}


def bench_rtf(params, config: ModelConfig, audio_seconds: float = 10.0, runs: int = 100,
              warmup: int = 3, seed: int = 0, chunk: int | None = None) -> RtfReport:
    """Time single-threaded streaming over deterministic noise.

    Audio is pushed in hop-sized chunks, as a live capture would deliver it;
    warm-up runs are excluded from the statistics.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    rng = np.random.default_rng(seed)
    audio = (0.1 * rng.standard_normal(int(round(audio_seconds * config.sample_rate_hz)))).astype(np.float32)
    emb = rng.standard_normal(config.emb_dim)
    emb /= np.linalg.norm(emb)
    engine = StreamEngine(params, config, emb)
    chunk = chunk or config.hop_samples
    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            engine.process(audio, chunk)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    return RtfReport.from_times(times, audio_seconds)
