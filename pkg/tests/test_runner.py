import csv
import json

import numpy as np
import pytest

from e3net.checkpoint import read_checkpoint, save_checkpoint
from e3net.model import ConfigError, init_params, preset
from e3net.runner import RunConfig, run_sweep, run_training
from e3net.train import Regime, params_hash

BASE = {"preset": "tiny", "batch_size": 2, "crop_seconds": 0.05,
        "synthetic": {"seed": 3, "n_items": 4, "seconds": 0.25, "n_speakers": 2}}


def _cfg(**kw):
    d = {**BASE, "schedule": {"peak_lr": 1e-3, "total_steps": 12}}
    d.update(kw)
    return RunConfig.from_dict(d)


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_kd_regimes_default_to_accumulation_two():
    assert _cfg().train_schedule().grad_accumulation == 1
    assert _cfg(regime="KDonSup").train_schedule().grad_accumulation == 2
    assert _cfg(regime="KDonSup", schedule={"grad_accumulation": 1}).train_schedule().grad_accumulation == 1
    assert _cfg(regime="L_MTL+KDonUnlab").train_schedule().regime is Regime.MTL_KD_ON_UNLAB


@pytest.mark.parametrize("regime", ["supervisedSE", "KDonUnlab"])
def test_resume_equals_uninterrupted(tmp_path, regime):
    extra = {}
    if regime != "supervisedSE":
        t = preset("tiny", num_blocks=2)
        save_checkpoint(init_params(t, 5), t, tmp_path / "t.e3n")
        extra["teacher"] = str(tmp_path / "t.e3n")
    full = run_training(_cfg(regime=regime, **extra), tmp_path / "full.e3n")
    out = tmp_path / "part.e3n"
    first = run_training(_cfg(regime=regime, **extra), out, max_steps=5)
    assert first.steps == 5 and read_checkpoint(out).train_state["step"] == 5
    res = run_training(_cfg(regime=regime, **extra), out, resume=True)
    assert res.steps == full.steps == 12
    assert params_hash(full.params) == params_hash(res.params)
    log = [json.loads(x) for x in (tmp_path / "part.jsonl").read_text().splitlines()]
    full_log = [json.loads(x) for x in (tmp_path / "full.jsonl").read_text().splitlines()]
    assert [r["loss"] for r in log] == [r["loss"] for r in full_log]


def test_missing_teacher_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        run_training(_cfg(regime="KDonSup"), tmp_path / "x.e3n")


def test_teacher_architecture_mismatch(tmp_path):
    t = preset("mini")
    save_checkpoint(init_params(t), t, tmp_path / "t.e3n")
    with pytest.raises(ConfigError):
        run_training(_cfg(regime="KDonSup", teacher=str(tmp_path / "t.e3n")), tmp_path / "s.e3n")


def test_sweep_csv(tmp_path):
    configs = [dict(BASE, model={"num_filters": f, "num_blocks": n}, schedule={"total_steps": 3},
                    eval_synthetic={"seed": 9, "n_items": 2, "seconds": 0.25, "n_speakers": 2})
               for f, n in ((8, 1), (16, 2))]
    path = run_sweep(configs, tmp_path)
    rows = list(csv.DictReader(open(path)))
    assert [r.keys() for r in rows][0] == {"filters", "N", "params", "final_loss", "si_sdr"}
    assert [(int(r["filters"]), int(r["N"])) for r in rows] == [(8, 1), (16, 2)]
    assert all(np.isfinite(float(r["si_sdr"])) for r in rows)


def test_remix_keeps_targets_and_uses_fixture_noise():
    from e3net.runner import _crop_batch, synthetic_examples
    ex = synthetic_examples(4, seed=1, n_items=3, seconds=0.25, n_speakers=2)
    n = ex.noisy[0].size
    a = _crop_batch(ex, np.random.default_rng(0), 4, n)
    b = _crop_batch(ex, np.random.default_rng(0), 4, n, remix=True)
    assert np.array_equal(a.targets, b.targets) and np.array_equal(a.embeddings, b.embeddings)
    resid = [x - c for x, c in zip(ex.noisy, ex.clean)]
    for k in range(4):
        noise = b.inputs[k] - b.targets[k]
        assert any(np.allclose(noise, np.roll(r, -s), atol=1e-6) for r in resid for s in range(n))
