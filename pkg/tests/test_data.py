import hashlib
import wave

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from e3net import data
from e3net.data import (ChannelError, CodecError, MixtureSpec, SampleRateError, SpeakerProfile,
                        WavError, active_mask, load_wav, make_dataset, make_fixture_set,
                        mix_arrays, read_manifest, save_wav, synth_noise, synth_speech)
from e3net.embedding import builtin_embedding, cosine

SR = 16000


def _write_raw(path, frames, channels=1, width=2, rate=SR):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(frames)


def test_float_round_trip_bitwise(tmp_path, rng):
    x = rng.uniform(-1, 1, 4000).astype(np.float32)
    save_wav(tmp_path / "a.wav", x)
    assert np.array_equal(load_wav(tmp_path / "a.wav").samples, x)


def test_pcm16_scaling(tmp_path):
    _write_raw(tmp_path / "p.wav", np.array([32767, -32768, 0], "<i2").tobytes())
    s = load_wav(tmp_path / "p.wav").samples
    assert s.dtype == np.float32
    assert s[0] == np.float32(32767 / 32768) and s[1] == -1.0 and s[2] == 0.0


def test_pcm16_save_round_trip(tmp_path):
    x = np.array([0.5, -0.25, 32767 / 32768], np.float32)
    save_wav(tmp_path / "p.wav", x, pcm16=True)
    assert np.array_equal(load_wav(tmp_path / "p.wav").samples, x)


def test_stereo_rejected(tmp_path):
    _write_raw(tmp_path / "s.wav", np.zeros(20, "<i2").tobytes(), channels=2)
    with pytest.raises(ChannelError, match="mono required"):
        load_wav(tmp_path / "s.wav")


def test_wrong_rate_and_codec_are_distinct(tmp_path):
    _write_raw(tmp_path / "r.wav", np.zeros(20, "<i2").tobytes(), rate=8000)
    with pytest.raises(SampleRateError):
        load_wav(tmp_path / "r.wav")
    _write_raw(tmp_path / "c.wav", np.zeros(20, "u1").tobytes(), width=1)
    with pytest.raises(CodecError):
        load_wav(tmp_path / "c.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(CodecError):
        load_wav(tmp_path / "junk.wav")
    assert not issubclass(SampleRateError, CodecError) and not issubclass(ChannelError, CodecError)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "none.wav")


# ----------------------------------------------------------------- mixing

def test_snr_zero_equal_rms_gives_unit_scale(rng):
    t = 0.1 * rng.standard_normal(SR)
    n = 0.1 * rng.standard_normal(SR)
    n *= np.sqrt(np.mean(t * t) / np.mean(n * n))
    noisy, clean = mix_arrays(t, None, n, snr_noise_db=0.0)
    np.testing.assert_allclose(noisy, (t + n).astype(np.float32), atol=1e-7)
    assert data.gain_for_ratio(1.0, 1.0, 0.0) == 1.0


def test_ts3_is_clean(rng):
    t = synth_speech(SpeakerProfile.random(rng), 1.0, rng)
    noisy, clean = mix_arrays(t)
    assert np.array_equal(noisy, clean)


def _realised_ratios(target, interferer, noise, noisy, clean):
    # recover the two gains by least squares on the residual
    res = noisy.astype(np.float64) - clean
    A = np.stack([interferer, noise], axis=1).astype(np.float64)
    (gi, gn), *_ = np.linalg.lstsq(A, res, rcond=None)
    m = active_mask(target)
    rms = lambda v: np.sqrt(np.mean(np.asarray(v, np.float64)[m] ** 2))
    return 20 * np.log10(rms(clean) / rms(gi * interferer)), 20 * np.log10(rms(clean) / rms(gn * noise))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ts1_realised_ratios(seed):
    rng = np.random.default_rng(seed)
    t = synth_speech(SpeakerProfile.random(rng), 3.0, rng)
    i = synth_speech(SpeakerProfile.random(rng), 3.0, rng)
    n = synth_noise(3.0, rng)
    noisy, clean = mix_arrays(t, i, n, snr_noise_db=10.0, sir_db=5.0)
    sir, snr = _realised_ratios(t, i, n, noisy, clean)
    assert abs(sir - 5.0) <= 0.1 and abs(snr - 10.0) <= 0.1


@given(st.floats(-5, 20), st.floats(-5, 10))
def test_mix_invariants(snr, sir):
    rng = np.random.default_rng(3)
    t = synth_speech(SpeakerProfile.random(rng), 1.0, rng)
    i = synth_speech(SpeakerProfile.random(rng), 1.0, rng)
    n = synth_noise(1.0, rng)
    noisy, clean = mix_arrays(t, i, n, snr, sir)
    assert np.max(np.abs(noisy)) <= 1.0 and np.max(np.abs(clean)) <= 1.0
    # clean stays a pure rescaling of the target, aligned at lag 0
    g = float(clean @ t) / float(t @ t)
    np.testing.assert_allclose(clean, g * t, atol=1e-6)
    xc = np.correlate(noisy[:4000], clean[:4000], mode="full")
    assert np.argmax(xc) == 3999


def test_short_noise_is_loop_padded(rng):
    t = synth_speech(SpeakerProfile.random(rng), 1.0, rng)
    n = 0.1 * rng.standard_normal(1000)
    noisy, clean = mix_arrays(t, None, n, 10.0)
    res = noisy - clean
    np.testing.assert_allclose(res[:1000], res[1000:2000], rtol=1e-5, atol=1e-7)


def test_zero_target_is_error():
    with pytest.raises(WavError):
        mix_arrays(np.zeros(SR), None, np.ones(SR))


def test_mixture_spec_validation():
    with pytest.raises(ValueError):
        MixtureSpec("TS3", "t.wav", noise="n.wav")
    with pytest.raises(ValueError):
        MixtureSpec("TS1", "t.wav", noise="n.wav")
    with pytest.raises(ValueError):
        MixtureSpec("TS9", "t.wav")


# ----------------------------------------------------------------- fixtures

def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    make_fixture_set(5, out, n_speakers=3, per_scenario=2, seconds=2.0, long_form_seconds=10.0)
    return out


def test_fixture_set_deterministic(fixture_dir, tmp_path):
    make_fixture_set(5, tmp_path, n_speakers=3, per_scenario=2, seconds=2.0, long_form_seconds=10.0)
    assert _tree_hash(tmp_path) == _tree_hash(fixture_dir)


def test_manifest_references_existing_files(fixture_dir):
    man = read_manifest(fixture_dir)
    assert {e["scenario"] for e in man} == {"TS1", "TS2", "TS3"}
    assert any(e.get("long_form") for e in man)
    for e in man:
        for p in e["paths"].values():
            if p is not None:
                assert (fixture_dir / p).is_file()


def test_fixture_audio_in_range_and_mix_reproducible(fixture_dir):
    for e in read_manifest(fixture_dir):
        noisy = load_wav(fixture_dir / e["paths"]["noisy"]).samples
        assert np.max(np.abs(noisy)) <= 1.0
        if e.get("long_form"):
            continue
        again, _ = data.mix(data.spec_from_entry(e), fixture_dir)
        assert np.array_equal(again, noisy)


def test_synthetic_speakers_are_distinguishable(fixture_dir):
    embs = [builtin_embedding(load_wav(p).samples, 128).vector
            for p in sorted((fixture_dir / "enroll").glob("*.wav"))]
    assert len(embs) == 3
    for a in range(3):
        for b in range(a + 1, 3):
            assert cosine(embs[a], embs[b]) < 0.99


def test_make_dataset_deterministic_and_labelled():
    a = make_dataset(9, 4, seconds=0.5, n_speakers=2, emb_dim=16)
    b = make_dataset(9, 4, seconds=0.5, n_speakers=2, emb_dim=16)
    assert np.array_equal(a.noisy, b.noisy) and np.array_equal(a.embeddings, b.embeddings)
    assert a.noisy.shape == a.clean.shape == (4, 8000)
    assert list(a.speakers) == [0, 1, 0, 1]
    assert not np.array_equal(a.noisy, a.clean)
    ts3 = make_dataset(9, 2, seconds=0.5, scenario="TS3", n_speakers=2, emb_dim=16)
    assert np.array_equal(ts3.noisy, ts3.clean)
