import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from e3net.metrics import metric_report, si_sdr, snr_db, tsos
from e3net.nnops import ShapeError

SR = 16000


def _speechlike(seconds, rng, on=0.6):
    """Bursts of noise with silent gaps, 20 ms aligned."""
    n = int(seconds * SR)
    x = 0.1 * rng.standard_normal(n)
    frames = n // 320
    gate = np.repeat(rng.random(frames) < on, 320)
    x[:gate.size] *= gate
    return x


def test_si_sdr_identity_capped(rng):
    x = rng.standard_normal(1000)
    assert si_sdr(x, x) == 100.0


def test_si_sdr_scalar_oracle(rng):
    r = rng.standard_normal(64)
    e = r + 0.3 * rng.standard_normal(64)
    a = sum(x * y for x, y in zip(e, r)) / sum(y * y for y in r)
    num = sum((a * y) ** 2 for y in r)
    den = sum((x - a * y) ** 2 for x, y in zip(e, r))
    assert si_sdr(e, r) == pytest.approx(10 * math.log10(num / den), abs=1e-9)


@given(st.floats(1e-3, 1e3))
def test_si_sdr_scale_invariant(alpha):
    rng = np.random.default_rng(0)
    r = rng.standard_normal(256)
    e = r + 0.5 * rng.standard_normal(256)
    assert si_sdr(alpha * e, r) == pytest.approx(si_sdr(e, r), abs=1e-9)


def test_si_sdr_rejects_zero_reference_and_bad_shapes():
    with pytest.raises(ValueError):
        si_sdr(np.ones(10), np.zeros(10))
    with pytest.raises(ShapeError):
        si_sdr(np.ones((2, 10)), np.ones((2, 10)))


def test_snr_examples(rng):
    s = rng.standard_normal(100)
    assert snr_db(s, s) == pytest.approx(0.0)
    assert snr_db(s, 0.1 * s) == pytest.approx(20.0)
    assert snr_db(s, np.zeros(100)) == 100.0
    assert snr_db(np.zeros(100), s) == -100.0
    assert snr_db(np.zeros(5), np.zeros(5)) == 0.0


# ----------------------------------------------------------------- TSOS

def test_tsos_identical_is_zero(rng):
    x = _speechlike(5, rng)
    rep = tsos(x, x)
    assert rep.oversuppressed_seconds == 0.0 and not rep.no_activity


def test_tsos_zeroed_span_oracle():
    rng = np.random.default_rng(10)
    ref = 0.1 * rng.standard_normal(1800 * SR).astype(np.float32)
    enh = ref.copy()
    enh[600 * SR:603 * SR] = 0
    rep = tsos(enh, ref)
    assert abs(rep.oversuppressed_seconds - 3.0) <= 0.02
    assert rep.normalized_seconds_per_half_hour == pytest.approx(rep.oversuppressed_seconds)


def test_tsos_silence_reports_no_activity():
    rep = tsos(np.zeros(SR), np.zeros(SR))
    assert rep.no_activity and rep.oversuppressed_seconds == 0.0
    assert rep.to_dict()["no_activity"] is True


def test_tsos_normalization(rng):
    ref = _speechlike(60, rng)
    enh = ref.copy()
    enh[:SR] = 0
    rep = tsos(enh, ref)
    assert rep.normalized_seconds_per_half_hour == pytest.approx(
        rep.oversuppressed_seconds * 1800 / rep.total_seconds)
    assert rep.total_seconds == 60.0 and 0 < rep.active_seconds < 60


def test_tsos_monotone_in_zeroed_frames():
    rng = np.random.default_rng(11)
    ref = _speechlike(4, rng)
    enh = ref.copy()
    prev = 0.0
    for f in rng.permutation(ref.size // 320)[:60]:
        enh[f * 320:(f + 1) * 320] = 0
        cur = tsos(enh, ref).oversuppressed_seconds
        assert cur >= prev
        prev = cur


@pytest.mark.parametrize("gain", [0.5, 2.0])
def test_tsos_gain_invariant_away_from_floor(gain):
    rng = np.random.default_rng(12)
    ref = _speechlike(4, rng)
    enh = ref.copy()
    enh[SR:2 * SR] *= 0.1
    base = tsos(enh, ref).oversuppressed_seconds
    assert base > 0
    assert tsos(gain * enh, gain * ref).oversuppressed_seconds == base


def test_tsos_length_mismatch():
    with pytest.raises(ShapeError):
        tsos(np.zeros(100), np.zeros(101))


def test_tsos_ignores_trailing_partial_frame(rng):
    ref = _speechlike(1, rng)
    ext_ref = np.concatenate([ref, 0.1 * np.ones(100)])
    ext_enh = np.concatenate([ref, np.zeros(100)])
    assert tsos(ext_enh, ext_ref).oversuppressed_seconds == 0.0


def test_metric_report_contents(rng):
    clean = _speechlike(2, rng)
    noisy = clean + 0.05 * rng.standard_normal(clean.size)
    rep = metric_report("a.wav", clean, clean, noisy)
    assert rep["si_sdr_db"] == 100.0 and rep["tsos"]["seconds"] == 0.0
    assert rep["dnsmos"] == "unavailable" and rep["wer"] == "unavailable"
    assert rep["si_sdr_improvement_db"] == pytest.approx(100.0 - rep["si_sdr_input_db"])
