"""E3Net personalized speech enhancement on numpy: kernels with hand-written
gradients, a streaming engine, supervised and distillation training."""
from .checkpoint import load_checkpoint, save_checkpoint
from .embedding import builtin_embedding, load_embedding
from .metrics import si_sdr, snr_db, tsos
from .model import ModelConfig, count_params, enhance, forward, init_params, preset
from .stream import StreamEngine, bench_rtf
from .train import Regime, Trainer, TrainSchedule

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Regime", "StreamEngine", "TrainSchedule", "Trainer", "bench_rtf",
    "builtin_embedding", "count_params", "enhance", "forward", "init_params", "load_checkpoint",
    "load_embedding", "preset", "save_checkpoint", "si_sdr", "snr_db", "tsos",
]
