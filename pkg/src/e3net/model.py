"""E3Net: learnable encoder, speaker-conditioned LSTM blocks, sigmoid mask,
learnable overlap-add decoder."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nnops
from .nnops import GATES, Eager, ShapeError

Params = "OrderedDict[str, np.ndarray]"


class ConfigError(ValueError):
    """Raised for inconsistent model configurations or mismatched inputs."""


@dataclass(frozen=True)
class ModelConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 20.0
    hop_ms: float = 10.0
    num_filters: int = 2048
    emb_dim: int = 256
    model_dim: int = 256
    fc_hidden: int = 1024
    num_blocks: int = 4

    def __post_init__(self):
        if self.hop_samples < 1 or self.hop_samples > self.window_samples:
            raise ConfigError(
                f"need 1 <= hop_samples <= window_samples, got {self.hop_samples}/{self.window_samples}")
        for name in ("num_filters", "emb_dim", "model_dim", "fc_hidden", "num_blocks", "sample_rate_hz"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "baseline": ModelConfig(num_blocks=4),
    "teacher": ModelConfig(num_blocks=8),
    "student": ModelConfig(num_blocks=2),
    # desk-scale configs
    "small": ModelConfig(num_filters=256, emb_dim=128, model_dim=128, fc_hidden=256, num_blocks=2),
    "small-student": ModelConfig(num_filters=256, emb_dim=128, model_dim=128, fc_hidden=256, num_blocks=1),
    "mini": ModelConfig(num_filters=64, emb_dim=16, model_dim=32, fc_hidden=64, num_blocks=1),
    # gradient-check and overfit config: W=4, hop=2 at 16 kHz
    "tiny": ModelConfig(window_ms=0.25, hop_ms=0.125, num_filters=8, emb_dim=4,
                             model_dim=4, fc_hidden=8, num_blocks=1),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**base.to_dict(), **overrides})


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every tensor the config induces, in canonical order."""
    F, W = config.num_filters, config.window_samples
    E, D, H = config.emb_dim, config.model_dim, config.fc_hidden
    s = OrderedDict()
    s["encoder.filters"] = (F, W)
    s["encoder.bias"] = (F,)
    s["encoder.prelu_alpha"] = (F,)
    s["encoder.ln.gamma"] = (F,)
    s["encoder.ln.beta"] = (F,)
    s["proj.weight"] = (D, F + E)
    s["proj.bias"] = (D,)
    s["proj.prelu_alpha"] = (D,)
    for b in range(config.num_blocks):
        p = f"block_{b}."
        s[p + "fc1.weight"] = (H, D)
        s[p + "fc1.bias"] = (H,)
        s[p + "fc1.prelu_alpha"] = (H,)
        s[p + "fc2.weight"] = (D, H)
        s[p + "fc2.bias"] = (D,)
        s[p + "fc2.prelu_alpha"] = (D,)
        s[p + "ln_fc.gamma"] = (D,)
        s[p + "ln_fc.beta"] = (D,)
        for g in GATES:
            s[p + f"lstm.W{g}"] = (D, D)
        for g in GATES:
            s[p + f"lstm.U{g}"] = (D, D)
        for g in GATES:
            s[p + f"lstm.b{g}"] = (D,)
        for ln in ("ln_lstm", "ln_res"):
            s[p + f"{ln}.gamma"] = (D,)
            s[p + f"{ln}.beta"] = (D,)
    s["mask.weight"] = (F, D)
    s["mask.bias"] = (F,)
    s["decoder.filters"] = (F, W)
    s["decoder.bias"] = (W,)
    return s


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


def param_breakdown(config: ModelConfig) -> "OrderedDict[str, int]":
    """Parameter totals grouped by top-level module name."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, shape in param_shapes(config).items():
        key = name.split(".", 1)[0]
        out[key] = out.get(key, 0) + int(np.prod(shape))
    return out


def _fan_in(name: str, shape, config: ModelConfig) -> int:
    if name == "decoder.filters":
        return shape[0]
    return shape[1]


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Allocate parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases,
    forget-gate bias 1, PReLU slopes 0.25, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, config))
            arr = rng.uniform(-bound, bound, size=shape)
        elif leaf == "prelu_alpha":
            arr = np.full(shape, 0.25)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "bf":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


def check_params(params, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    missing = [n for n in shapes if n not in params]
    extra = [n for n in params if n not in shapes]
    if missing or extra:
        raise ConfigError(f"parameter set mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")


def cast_params(params, dtype) -> Params:
    return OrderedDict((k, np.ascontiguousarray(v, dtype=dtype)) for k, v in params.items())


def stacked_lstm(params, prefix: str):
    """``(w_x [4D, D], w_h [4D, D], b [4D])`` for block ``prefix`` in gate order."""
    return (np.concatenate([params[f"{prefix}lstm.W{g}"] for g in GATES]),
            np.concatenate([params[f"{prefix}lstm.U{g}"] for g in GATES]),
            np.concatenate([params[f"{prefix}lstm.b{g}"] for g in GATES]))


# --------------------------------------------------------------------------
# forward

def _fc_block(ops, P, p, x):
    h = ops.prelu(ops.linear(x, P[p + "fc1.weight"], P[p + "fc1.bias"]), P[p + "fc1.prelu_alpha"])
    y = ops.prelu(ops.linear(h, P[p + "fc2.weight"], P[p + "fc2.bias"]), P[p + "fc2.prelu_alpha"])
    return ops.layer_norm(y, P[p + "ln_fc.gamma"], P[p + "ln_fc.beta"])


def _residual_out(ops, P, p, y, h):
    z = ops.layer_norm(h, P[p + "ln_lstm.gamma"], P[p + "ln_lstm.beta"])
    return ops.layer_norm(ops.add(y, z), P[p + "ln_res.gamma"], P[p + "ln_res.beta"])


def lstm_block_forward(params, prefix: str, x_t, state, lstm_weights=None):
    """One frame through an LSTM block.

    ``x_t`` is ``[D]`` or ``[B, D]``; ``state`` is ``(h, c)``. Returns
    ``(out, (h, c))``. The residual adds the FC-block output to the
    normalised LSTM output.
    """
    ops = Eager()
    y = _fc_block(ops, params, prefix, x_t)
    w_x, w_h, b = lstm_weights if lstm_weights is not None else stacked_lstm(params, prefix)
    h, c, _ = nnops.lstm_cell_step(y, state[0], state[1], w_x, w_h, b)
    return _residual_out(ops, params, prefix, y, h), (h, c)


def _as_batch(waveform, embedding, config):
    wav = np.asarray(waveform)
    emb = np.asarray(embedding)
    single = wav.ndim == 1
    if single:
        wav = wav[None]
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (wav.shape[0], emb.shape[0]))
    if emb.shape[-1] != config.emb_dim:
        raise ConfigError(f"embedding length {emb.shape[-1]} != emb_dim {config.emb_dim}")
    if emb.shape[0] != wav.shape[0]:
        raise ShapeError(f"forward: embedding batch axis 0 has {emb.shape[0]}, waveform has {wav.shape[0]}")
    if wav.shape[-1] < config.window_samples:
        raise ValueError("input shorter than one frame")
    return wav, emb, single


def graph(ops, P, config: ModelConfig, wav, emb):
    """Build the forward graph with ``ops`` (an :class:`Eager` or a :class:`Tape`).

    ``P`` maps names to whatever ``ops`` consumes (arrays or tape Vars);
    ``wav`` is ``[B, L]`` and ``emb`` is ``[B, E]``.
    """
    W, hop = config.window_samples, config.hop_samples
    frames = ops.const(nnops.frame_signal(wav, W, hop))
    enc = ops.conv1d_encoder(frames, P["encoder.filters"], P["encoder.bias"])
    feat = ops.prelu(enc, P["encoder.prelu_alpha"])
    feat = ops.layer_norm(feat, P["encoder.ln.gamma"], P["encoder.ln.beta"])
    cat = ops.concat_frames(feat, ops.const(emb))
    x = ops.prelu(ops.linear(cat, P["proj.weight"], P["proj.bias"]), P["proj.prelu_alpha"])
    for b in range(config.num_blocks):
        p = f"block_{b}."
        y = _fc_block(ops, P, p, x)
        w_x = ops.stack_rows([P[f"{p}lstm.W{g}"] for g in GATES])
        w_h = ops.stack_rows([P[f"{p}lstm.U{g}"] for g in GATES])
        bias = ops.stack_rows([P[f"{p}lstm.b{g}"] for g in GATES])
        h = ops.lstm(y, w_x, w_h, bias)
        x = _residual_out(ops, P, p, y, h)
    mask = ops.sigmoid(ops.linear(x, P["mask.weight"], P["mask.bias"]))
    masked = ops.mul(mask, enc)
    return ops.overlap_add_decoder(masked, P["decoder.filters"], P["decoder.bias"], hop)


def forward(params, config: ModelConfig, waveform, embedding) -> np.ndarray:
    """Offline enhancement of ``waveform`` (``[L]`` or ``[B, L]``).

    Output length is ``(T - 1) * hop + window`` with ``T`` whole frames.
    """
    wav, emb, single = _as_batch(waveform, embedding, config)
    dtype = next(iter(params.values())).dtype
    out = graph(Eager(), params, config, wav.astype(dtype, copy=False), emb.astype(dtype, copy=False))
    return out[0] if single else out


def forward_on_tape(tape, params, config: ModelConfig, waveform, embedding):
    """Record the forward on ``tape``; returns ``(output Var, {name: Var})``."""
    wav, emb, _ = _as_batch(waveform, embedding, config)
    dtype = next(iter(params.values())).dtype
    P = {name: tape.param(name, value) for name, value in params.items()}
    out = graph(tape, P, config, wav.astype(dtype, copy=False), emb.astype(dtype, copy=False))
    return out, P


def output_length(config: ModelConfig, input_length: int) -> int:
    t = nnops.num_frames(input_length, config.window_samples, config.hop_samples)
    return (t - 1) * config.hop_samples + config.window_samples


def pad_to_frames(config: ModelConfig, waveform) -> np.ndarray:
    """Zero-pad the last axis so that no trailing samples are dropped by framing."""
    x = np.asarray(waveform)
    W, hop = config.window_samples, config.hop_samples
    L = x.shape[-1]
    target = W if L <= W else W + -(-(L - W) // hop) * hop
    if target == L:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target - L)]
    return np.pad(x, pad)


def enhance(params, config: ModelConfig, waveform, embedding) -> np.ndarray:
    """Offline forward over the whole input, trimmed to the input length."""
    x = np.asarray(waveform)
    return forward(params, config, pad_to_frames(config, x), embedding)[..., :x.shape[-1]]
