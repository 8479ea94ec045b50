"""Numeric kernels for the E3Net graph and a small reverse-mode tape.

Tensors are plain C-contiguous numpy arrays. Every kernel has a pure
forward function and a matching ``*_backward`` function that maps the
upstream gradient to gradients of the kernel inputs. :class:`Tape` records
kernel calls on :class:`Var` nodes and replays the backward functions in
reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

SI_SDR_CAP_DB = 100.0
_DB = 10.0 / math.log(10.0)


class ShapeError(ValueError):
    """Raised when kernel operands disagree on a dimension."""


class StateError(RuntimeError):
    """Raised when an object is used out of its allowed lifecycle order."""


def ln_eps(dtype) -> float:
    return 1e-8 if np.dtype(dtype) == np.float64 else 1e-5


def colsum(m: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array via a fixed-order BLAS product."""
    return np.ones(m.shape[0], dtype=m.dtype) @ m


def _check_dim(op: str, axis: str, got: int, want: int) -> None:
    if got != want:
        raise ShapeError(f"{op}: {axis} has size {got}, expected {want}")


# --------------------------------------------------------------------------
# framing / overlap-add

def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Slice ``x[..., L]`` into frames ``[..., T, window]`` with stride ``hop``.

    Trailing samples that do not fill a whole window are dropped.
    """
    if not (window >= hop >= 1):
        raise ValueError(f"need window >= hop >= 1, got window={window}, hop={hop}")
    x = np.asarray(x)
    if x.shape[-1] < window:
        raise ValueError("input shorter than one frame")
    view = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)
    return np.ascontiguousarray(view[..., ::hop, :])


def num_frames(length: int, window: int, hop: int) -> int:
    return (length - window) // hop + 1


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum ``[..., T, W]`` frames at stride ``hop`` into ``[..., (T-1)*hop + W]``."""
    *lead, t, w = frames.shape
    if t == 0:
        return np.zeros((*lead, 0), dtype=frames.dtype)
    out_len = (t - 1) * hop + w
    chunks = -(-w // hop)
    if chunks * hop != w:
        pad = np.zeros((*lead, t, chunks * hop - w), dtype=frames.dtype)
        frames = np.concatenate([frames, pad], axis=-1)
    out = np.zeros((*lead, (t + chunks - 1) * hop), dtype=frames.dtype)
    # descending k adds frames in ascending time order at every sample
    for k in range(chunks - 1, -1, -1):
        part = frames[..., k * hop:(k + 1) * hop].reshape(*lead, t * hop)
        out[..., k * hop:k * hop + t * hop] += part
    return out[..., :out_len]


def overlap_add_backward(grad: np.ndarray, window: int, hop: int) -> np.ndarray:
    # framing is the adjoint of overlap-add
    return frame_signal(grad, window, hop)


# --------------------------------------------------------------------------
# dense layers

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got shape {weight.shape}")
    _check_dim("linear", "input axis -1", x.shape[-1], weight.shape[1])
    _check_dim("linear", "bias axis 0", bias.shape[0], weight.shape[0])
    return x @ weight.T + bias


def linear_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray):
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return grad @ weight, g2.T @ x2, colsum(g2)


def conv1d_encoder(frames: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Strided 1-D convolution with kernel == window and stride == hop.

    Operating on pre-cut frames this is one matrix product per frame.
    """
    _check_dim("conv1d_encoder", "frame width (axis -1)", frames.shape[-1], filters.shape[1])
    _check_dim("conv1d_encoder", "bias axis 0", bias.shape[0], filters.shape[0])
    return frames @ filters.T + bias


conv1d_encoder_backward = linear_backward


def overlap_add_decoder(masked: np.ndarray, filters: np.ndarray, bias: np.ndarray,
                        hop: int) -> np.ndarray:
    """Decode ``[..., T, F]`` features with ``filters[F, W]`` and overlap-add."""
    _check_dim("overlap_add_decoder", "feature axis -1", masked.shape[-1], filters.shape[0])
    _check_dim("overlap_add_decoder", "bias axis 0", bias.shape[0], filters.shape[1])
    return overlap_add(masked @ filters + bias, hop)


def overlap_add_decoder_backward(grad, masked, filters, hop):
    gframes = overlap_add_backward(grad, filters.shape[1], hop)
    g2 = gframes.reshape(-1, gframes.shape[-1])
    m2 = masked.reshape(-1, masked.shape[-1])
    return gframes @ filters.T, m2.T @ g2, colsum(g2)


# --------------------------------------------------------------------------
# activations / normalization

def _check_alpha(op: str, x: np.ndarray, alpha: np.ndarray) -> None:
    if alpha.size != 1:
        _check_dim(op, "channel axis -1", x.shape[-1], alpha.shape[-1])


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=x.dtype)
    _check_alpha("prelu", x, alpha)
    return np.maximum(x, 0) + alpha * np.minimum(x, 0)


def prelu_backward(grad, x, alpha):
    alpha = np.asarray(alpha, dtype=x.dtype)
    pos = (x > 0).astype(x.dtype)
    # slope is exactly 1 or alpha
    gx = grad * (pos + alpha * (1 - pos))
    ga = grad * np.minimum(x, 0)
    if alpha.size == 1:
        ga = np.asarray(ga.sum(), dtype=x.dtype).reshape(alpha.shape)
    else:
        ga = colsum(ga.reshape(-1, x.shape[-1]))
    return gx, ga


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(grad, out):
    return grad * out * (1 - out)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float | None = None) -> np.ndarray:
    """Normalise the last axis with population variance, then scale and shift."""
    return _layer_norm(x, gamma, beta, eps)[0]


def _layer_norm(x, gamma, beta, eps):
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm: feature axis -1 is empty")
    _check_dim("layer_norm", "gamma axis 0", gamma.shape[0], d)
    _check_dim("layer_norm", "beta axis 0", beta.shape[0], d)
    if eps is None:
        eps = ln_eps(x.dtype)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return gamma * xhat + beta, xhat, rstd


def layer_norm_backward(grad, xhat, rstd, gamma):
    d = xhat.shape[-1]
    g2 = grad.reshape(-1, d)
    gbeta = colsum(g2)
    ggamma = colsum(g2 * xhat.reshape(-1, d))
    gxhat = grad * gamma
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# LSTM

GATES = ("i", "f", "g", "o")


def _gate_split(z: np.ndarray, hidden: int):
    return (z[..., :hidden], z[..., hidden:2 * hidden],
            z[..., 2 * hidden:3 * hidden], z[..., 3 * hidden:])


def lstm_cell_step(x, h_prev, c_prev, w_x, w_h, b):
    """One LSTM step. ``w_x [4H, D]``, ``w_h [4H, H]`` and ``b [4H]`` stack
    the gates in (i, f, g, o) order.

    Returns ``(h, c, cache)``; ``cache`` feeds :func:`lstm_cell_step_backward`.
    """
    hidden = h_prev.shape[-1]
    _check_dim("lstm_cell_step", "w_x axis 0", w_x.shape[0], 4 * hidden)
    _check_dim("lstm_cell_step", "input axis -1", x.shape[-1], w_x.shape[1])
    _check_dim("lstm_cell_step", "w_h axis 1", w_h.shape[1], hidden)
    _check_dim("lstm_cell_step", "c_prev axis -1", c_prev.shape[-1], hidden)
    z = x @ w_x.T + h_prev @ w_h.T + b
    h, c, acts = _lstm_pointwise(z, c_prev, hidden)
    return h, c, acts + ((x, h_prev),)


def _lstm_pointwise(z, c_prev, hidden):
    zi, zf, zg, zo = _gate_split(z, hidden)
    i = expit(zi)
    f = expit(zf)
    g = np.tanh(zg)
    o = expit(zo)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, c_prev, tc)


def _lstm_pointwise_backward(dh, dc, acts):
    i, f, g, o, c_prev, tc = acts
    dc = dc + dh * o * (1 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1 - i),
        dc * c_prev * f * (1 - f),
        dc * i * (1 - g * g),
        dh * tc * o * (1 - o),
    ], axis=-1)
    return dz, dc * f


def lstm_cell_step_backward(dh, dc, cache, w_x, w_h):
    """Gradients of one step: ``(dx, dh_prev, dc_prev, dw_x, dw_h, db)``."""
    i, f, g, o, c_prev, tc, (x, h_prev) = cache
    dz, dc_prev = _lstm_pointwise_backward(dh, dc, (i, f, g, o, c_prev, tc))
    dz2 = dz.reshape(-1, dz.shape[-1])
    return (dz @ w_x, dz @ w_h, dc_prev,
            dz2.T @ x.reshape(-1, x.shape[-1]),
            dz2.T @ h_prev.reshape(-1, h_prev.shape[-1]),
            dz2.sum(axis=0))


def lstm_sequence(x, w_x, w_h, b, h0=None, c0=None):
    """Run the cell over ``x[B, T, D]``; returns ``(h_seq, (h_T, c_T), cache)``."""
    bsz, steps, _ = x.shape
    hidden = w_h.shape[1]
    _check_dim("lstm_sequence", "w_x axis 0", w_x.shape[0], 4 * hidden)
    _check_dim("lstm_sequence", "input axis -1", x.shape[-1], w_x.shape[1])
    H = hidden
    h = np.zeros((bsz, H), x.dtype) if h0 is None else h0
    c = np.zeros((bsz, H), x.dtype) if c0 is None else c0
    zx = x @ w_x.T + b
    w_hT = np.ascontiguousarray(w_h.T)
    hs = np.empty((bsz, steps, H), x.dtype)
    h_prevs = np.empty_like(hs)
    c_prevs = np.empty_like(hs)
    sig = np.empty((bsz, steps, 4 * H), x.dtype)  # sigmoid of all gates; g slot holds tanh
    tcs = np.empty_like(hs)
    for t in range(steps):
        h_prevs[:, t] = h
        c_prevs[:, t] = c
        z = zx[:, t] + h @ w_hT
        s = expit(z)
        s[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        c = s[:, H:2 * H] * c + s[:, :H] * s[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = s[:, 3 * H:] * tc
        sig[:, t] = s
        tcs[:, t] = tc
        hs[:, t] = h
    return hs, (h, c), (x, h_prevs, c_prevs, sig, tcs)


def lstm_sequence_backward(grad_hs, cache, w_x, w_h):
    """Backprop through time; returns ``(dx, dw_x, dw_h, db)``."""
    x, h_prevs, c_prevs, sig, tcs = cache
    bsz, steps, H = grad_hs.shape
    i, f, g, o = (sig[..., k * H:(k + 1) * H] for k in range(4))
    # everything except the recurrence, vectorised over time
    a = o * (1 - tcs * tcs)
    gc = np.stack([g * i * (1 - i), c_prevs * f * (1 - f), i * (1 - g * g)], axis=2)
    go = tcs * o * (1 - o)
    dzs = np.empty((bsz, steps, 4 * H), grad_hs.dtype)
    dz_c = dzs[..., :3 * H].reshape(bsz, steps, 3, H)
    dz_o = dzs[..., 3 * H:]
    dh = np.zeros((bsz, H), grad_hs.dtype)
    dc = np.zeros_like(dh)
    f_next = np.zeros_like(dh)
    for t in range(steps - 1, -1, -1):
        dhh = grad_hs[:, t] + dh
        dc = dc * f_next + dhh * a[:, t]
        np.multiply(dc[:, None], gc[:, t], out=dz_c[:, t])
        np.multiply(dhh, go[:, t], out=dz_o[:, t])
        dh = dzs[:, t] @ w_h
        f_next = f[:, t]
    dz2 = dzs.reshape(-1, 4 * H)
    dx = dzs @ w_x
    dw_x = dz2.T @ x.reshape(-1, x.shape[-1])
    dw_h = dz2.T @ h_prevs.reshape(-1, H)
    return dx, dw_x, dw_h, colsum(dz2)


# --------------------------------------------------------------------------
# losses

def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Scale-invariant SDR in dB over the last axis, clipped to +-100 dB."""
    return _si_sdr(estimate, reference)[0]


def _si_sdr(est, ref, allow_zero_reference=False):
    if est.shape != ref.shape:
        raise ShapeError(f"si_sdr: shapes differ, {est.shape} vs {ref.shape}")
    e64 = est.astype(np.float64)
    r64 = ref.astype(np.float64)
    rr = np.einsum("...l,...l->...", r64, r64)
    zero = rr == 0
    if np.any(zero):
        if not allow_zero_reference:
            raise ValueError("si_sdr: reference has zero energy")
        # rows with a silent reference get value 0 and no gradient
        rr = np.where(zero, 1.0, rr)
    er = np.einsum("...l,...l->...", e64, r64)
    scale = er / rr
    target = er * scale
    resid = e64 - scale[..., None] * r64
    noise = np.einsum("...l,...l->...", resid, resid)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = _DB * (np.log(target) - np.log(noise))
    raw = np.where(noise == 0, SI_SDR_CAP_DB, raw)
    raw = np.where(target == 0, -SI_SDR_CAP_DB, raw)
    raw = np.where(zero, np.inf, raw)
    val = np.where(zero, 0.0, np.clip(raw, -SI_SDR_CAP_DB, SI_SDR_CAP_DB))
    return val, (r64, resid, scale, target, noise, raw)


def si_sdr_backward(grad, cache, dtype):
    r64, resid, scale, target, noise, raw = cache
    live = (raw > -SI_SDR_CAP_DB) & (raw < SI_SDR_CAP_DB)
    with np.errstate(divide="ignore", invalid="ignore"):
        ds = np.where(live, 2 * _DB * scale / target, 0.0)
        dn = np.where(live, 2 * _DB / noise, 0.0)
    g = np.asarray(grad, np.float64)
    out = (g * ds)[..., None] * r64 - (g * dn)[..., None] * resid
    return out.astype(dtype)


def l1(estimate, target):
    """Mean absolute difference over the last axis."""
    return np.abs(estimate - target).mean(axis=-1)


def l1_backward(grad, estimate, target):
    n = estimate.shape[-1]
    return (np.asarray(grad)[..., None] * np.sign(estimate - target) / n).astype(estimate.dtype)


# --------------------------------------------------------------------------
# tape

class Var:
    """A value on a tape. ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{list(self.value.shape)})"


class Tape:
    """Ordered record of kernel invocations for reverse-mode differentiation.

    A tape is single-use: ``backward`` may be called once after the forward
    is recorded.
    """

    def __init__(self):
        self.nodes: list[tuple[Var, tuple, Callable]] = []
        self.params: dict[str, Var] = {}
        self._done = False

    # leaves
    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(value, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value))

    def _record(self, value, inputs: Sequence[Var], backward) -> Var:
        out = Var(value, requires_grad=any(v.requires_grad for v in inputs))
        if out.requires_grad:
            self.nodes.append((out, tuple(inputs), backward))
        return out

    # ops
    def linear(self, x: Var, w: Var, b: Var) -> Var:
        def back(g):
            return linear_backward(g, x.value, w.value)
        return self._record(linear(x.value, w.value, b.value), (x, w, b), back)

    def conv1d_encoder(self, frames: Var, w: Var, b: Var) -> Var:
        def back(g):
            return conv1d_encoder_backward(g, frames.value, w.value)
        return self._record(conv1d_encoder(frames.value, w.value, b.value), (frames, w, b), back)

    def prelu(self, x: Var, alpha: Var) -> Var:
        def back(g):
            return prelu_backward(g, x.value, alpha.value)
        return self._record(prelu(x.value, alpha.value), (x, alpha), back)

    def sigmoid(self, x: Var) -> Var:
        out = sigmoid(x.value)
        return self._record(out, (x,), lambda g: (sigmoid_backward(g, out),))

    def layer_norm(self, x: Var, gamma: Var, beta: Var, eps=None) -> Var:
        out, xhat, rstd = _layer_norm(x.value, gamma.value, beta.value, eps)

        def back(g):
            return layer_norm_backward(g, xhat, rstd, gamma.value)
        return self._record(out, (x, gamma, beta), back)

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def mul(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
        return self._record(a.value * b.value, (a, b),
                            lambda g: (g * b.value, g * a.value))

    def concat_frames(self, x: Var, emb: Var) -> Var:
        """Append a per-item vector ``emb[B, E]`` to every frame of ``x[B, T, F]``."""
        bsz, steps, feat = x.shape
        _check_dim("concat_frames", "embedding batch axis 0", emb.shape[0], bsz)
        e = np.broadcast_to(emb.value[:, None, :], (bsz, steps, emb.shape[-1]))
        out = np.concatenate([x.value, e], axis=-1)
        return self._record(out, (x, emb),
                            lambda g: (g[..., :feat], g[..., feat:].sum(axis=1)))

    def lstm(self, x: Var, w_x: Var, w_h: Var, b: Var) -> Var:
        hs, _, cache = lstm_sequence(x.value, w_x.value, w_h.value, b.value)

        def back(g):
            return lstm_sequence_backward(g, cache, w_x.value, w_h.value)
        return self._record(hs, (x, w_x, w_h, b), back)

    def stack_rows(self, parts: Sequence[Var]) -> Var:
        """Concatenate 2-D or 1-D parameters along axis 0 (gate stacking)."""
        sizes = [p.shape[0] for p in parts]
        cuts = np.cumsum(sizes)[:-1]
        out = np.concatenate([p.value for p in parts], axis=0)
        return self._record(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=0)))

    def overlap_add_decoder(self, masked: Var, w: Var, b: Var, hop: int) -> Var:
        def back(g):
            return overlap_add_decoder_backward(g, masked.value, w.value, hop)
        return self._record(overlap_add_decoder(masked.value, w.value, b.value, hop),
                            (masked, w, b), back)

    def si_sdr(self, est: Var, ref: Var, allow_zero_reference=False) -> Var:
        val, cache = _si_sdr(est.value, ref.value, allow_zero_reference)
        dtype = est.value.dtype
        return self._record(val, (est,), lambda g: (si_sdr_backward(g, cache, dtype),))

    def l1(self, est: Var, ref: Var) -> Var:
        return self._record(l1(est.value, ref.value), (est,),
                            lambda g: (l1_backward(g, est.value, ref.value),))

    def weighted_sum(self, x: Var, weights: np.ndarray) -> Var:
        """Scalar ``sum(weights * x)``; the usual way to reduce a batch loss."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != x.shape:
            raise ShapeError(f"weighted_sum: shapes differ, {weights.shape} vs {x.shape}")
        val = np.asarray(float(np.sum(weights * x.value)))
        return self._record(val, (x,), lambda g: (float(g) * weights,))

    def seed(self, x: Var, grad: np.ndarray) -> Var:
        """Scalar proxy whose gradient wrt ``x`` is ``grad`` (for external losses)."""
        grad = np.asarray(grad)
        if grad.shape != x.shape:
            raise ShapeError(f"seed: gradient shape {grad.shape} vs value {x.shape}")
        val = np.asarray(float(np.sum(grad.astype(np.float64) * x.value)))
        return self._record(val, (x,), lambda g: (float(g) * grad,))

    # reverse pass
    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Run the reverse pass from scalar ``loss``; returns gradients by parameter name."""
        if self._done:
            raise StateError("backward already ran on this tape; record a new forward")
        if not self.nodes:
            raise StateError("backward called before any forward was recorded")
        if np.ndim(loss.value) != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        self._done = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, inputs, back in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = back(out.grad)
            for v, g in zip(inputs, grads):
                if not v.requires_grad or g is None:
                    continue
                v.grad = g if v.grad is None else v.grad + g
            out.grad = None
        grads = {}
        for name, v in self.params.items():
            g = v.grad if v.grad is not None else np.zeros_like(v.value)
            grads[name] = np.asarray(g, dtype=v.value.dtype).reshape(v.value.shape)
        return grads


class Eager:
    """Tape-compatible op set that only computes values (inference path)."""

    def param(self, name, value):
        return value

    def const(self, value):
        return np.asarray(value)

    linear = staticmethod(linear)
    conv1d_encoder = staticmethod(conv1d_encoder)
    prelu = staticmethod(prelu)
    sigmoid = staticmethod(sigmoid)
    layer_norm = staticmethod(layer_norm)
    overlap_add_decoder = staticmethod(overlap_add_decoder)

    @staticmethod
    def add(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
        return a + b

    @staticmethod
    def mul(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
        return a * b

    @staticmethod
    def concat_frames(x, emb):
        bsz, steps, _ = x.shape
        _check_dim("concat_frames", "embedding batch axis 0", emb.shape[0], bsz)
        e = np.broadcast_to(emb[:, None, :], (bsz, steps, emb.shape[-1]))
        return np.concatenate([x, e], axis=-1)

    @staticmethod
    def lstm(x, w_x, w_h, b):
        return lstm_sequence(x, w_x, w_h, b)[0]

    @staticmethod
    def stack_rows(parts):
        return np.concatenate(parts, axis=0)
