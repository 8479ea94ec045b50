"""WAV I/O and desk-scale mixture simulation.

Synthetic "speakers" are harmonic sources with vibrato and a formant
envelope that switches vowel per syllable; noise is spectrally shaped
Gaussian noise with slow amplitude modulation. Mixtures follow the three
test scenarios: TS1 (target + interferer + noise), TS2 (target + noise),
TS3 (target only).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .embedding import builtin_embedding

SAMPLE_RATE = 16000
VAD_FRAME_MS = 20.0
VAD_FLOOR_DBFS = -40.0
SCENARIOS = ("TS1", "TS2", "TS3")


# --------------------------------------------------------------------------
# WAV

class WavError(ValueError):
    pass


class SampleRateError(WavError):
    pass


class ChannelError(WavError):
    pass


class CodecError(WavError):
    pass


@dataclass
class AudioFile:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE


def load_wav(path, sample_rate: int = SAMPLE_RATE) -> AudioFile:
    """Read mono 16-bit PCM or 32-bit float WAV. No resampling is done."""
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise CodecError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise ChannelError(f"{path}: mono required, got {data.shape[1]} channels")
    if rate != sample_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise CodecError(f"{path}: codec {data.dtype} not supported (PCM16 or float32 only)")
    return AudioFile(np.ascontiguousarray(samples), rate)


def save_wav(path, audio, sample_rate: int = SAMPLE_RATE, pcm16: bool = False) -> None:
    if isinstance(audio, AudioFile):
        sample_rate = audio.sample_rate_hz
        audio = audio.samples
    x = np.asarray(audio)
    if x.ndim != 1:
        raise ChannelError("mono required")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(x.astype(np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), sample_rate, data)


# --------------------------------------------------------------------------
# activity / level helpers

def frame_rms(x: np.ndarray, frame: int) -> np.ndarray:
    n = x.size // frame
    fr = np.asarray(x[:n * frame], np.float64).reshape(n, frame)
    return np.sqrt((fr * fr).mean(axis=1))


def active_mask(x: np.ndarray, sample_rate: int = SAMPLE_RATE,
                floor_dbfs: float = VAD_FLOOR_DBFS) -> np.ndarray:
    """Per-sample boolean mask of 20 ms frames whose RMS exceeds ``floor_dbfs``."""
    frame = int(round(VAD_FRAME_MS * sample_rate / 1000))
    rms = frame_rms(x, frame)
    with np.errstate(divide="ignore"):
        act = 20 * np.log10(rms) > floor_dbfs
    mask = np.zeros(x.size, bool)
    mask[:act.size * frame] = np.repeat(act, frame)
    return mask


def masked_rms(x: np.ndarray, mask: np.ndarray) -> float:
    sel = np.asarray(x, np.float64)[mask]
    return float(np.sqrt(np.mean(sel * sel))) if sel.size else 0.0


def loop_pad(x: np.ndarray, length: int) -> np.ndarray:
    """Tile ``x`` to exactly ``length`` samples."""
    if x.size == 0:
        raise WavError("cannot loop-pad an empty signal")
    return np.resize(x, length)


def gain_for_ratio(ref_rms: float, sig_rms: float, ratio_db: float) -> float:
    """Scalar making ``20*log10(ref_rms / (g * sig_rms)) == ratio_db``."""
    return ref_rms / (sig_rms * 10.0 ** (ratio_db / 20.0))


# --------------------------------------------------------------------------
# mixing

@dataclass
class MixtureSpec:
    scenario: str
    target: str
    interferer: str | None = None
    noise: str | None = None
    snr_noise_db: float = 10.0
    sir_db: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        need_i = self.scenario == "TS1"
        need_n = self.scenario in ("TS1", "TS2")
        if (self.interferer is not None) != need_i or (self.noise is not None) != need_n:
            raise ValueError(f"{self.scenario}: components do not match the scenario "
                             f"(interferer={self.interferer!r}, noise={self.noise!r})")


def mix_arrays(target, interferer=None, noise=None, snr_noise_db=10.0, sir_db=5.0,
               sample_rate: int = SAMPLE_RATE):
    """Scale and sum components; returns ``(noisy, clean_reference)``.

    All levels are measured over the target-active frames, so the realised
    SIR/SNR match the requested values on the same footing.
    """
    target = np.asarray(target, np.float64)
    mask = active_mask(target, sample_rate)
    t_rms = masked_rms(target, mask)
    if t_rms == 0:
        raise WavError("target has no energy")
    mix = target.copy()
    for comp, ratio in ((interferer, sir_db), (noise, snr_noise_db)):
        if comp is None:
            continue
        comp = loop_pad(np.asarray(comp, np.float64), target.size)
        c_rms = masked_rms(comp, mask)
        if c_rms == 0:
            c_rms = masked_rms(comp, np.ones_like(mask))
        if c_rms == 0:
            continue
        mix += gain_for_ratio(t_rms, c_rms, ratio) * comp
    peak = np.max(np.abs(mix))
    clean = target
    if peak > 1.0:
        g = 0.9 / peak
        mix = mix * g
        clean = target * g
    return mix.astype(np.float32), clean.astype(np.float32)


def mix(spec: MixtureSpec, root: str | Path = "."):
    """Load the component files named in ``spec`` and mix them."""
    root = Path(root)

    def get(p):
        return None if p is None else load_wav(root / p).samples

    target = get(spec.target)
    if target.size < SAMPLE_RATE:
        target = loop_pad(target, SAMPLE_RATE)
    return mix_arrays(target, get(spec.interferer), get(spec.noise),
                      spec.snr_noise_db, spec.sir_db)


# --------------------------------------------------------------------------
# synthetic sources

# (F1, F2, F3) in Hz for a neutral adult tract
_VOWELS = np.array([
    [730, 1090, 2440],   # a
    [530, 1840, 2480],   # e
    [270, 2290, 3010],   # i
    [570, 840, 2410],    # o
    [300, 870, 2240],    # u
    [500, 1500, 2500],   # schwa
    [660, 1720, 2410],   # ae
])


@dataclass(frozen=True)
class SpeakerProfile:
    f0_hz: float
    tract_scale: float
    vibrato_hz: float
    vibrato_depth: float
    tilt: float
    vowels: tuple[int, ...]
    breathiness: float

    @classmethod
    def random(cls, rng: np.random.Generator) -> "SpeakerProfile":
        return cls(
            f0_hz=float(math.exp(rng.uniform(math.log(85), math.log(260)))),
            tract_scale=float(rng.uniform(0.82, 1.22)),
            vibrato_hz=float(rng.uniform(3.5, 7.0)),
            vibrato_depth=float(rng.uniform(0.01, 0.05)),
            tilt=float(rng.uniform(0.6, 1.4)),
            vowels=tuple(int(v) for v in rng.choice(len(_VOWELS), size=4, replace=False)),
            breathiness=float(rng.uniform(0.0, 0.08)),
        )


def _smooth(x: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return x
    k = np.ones(n) / n
    pad = np.concatenate([np.full(n, x[0]), x, np.full(n, x[-1])])
    return np.convolve(pad, k, mode="same")[n:-n]


def synth_speech(profile: SpeakerProfile, seconds: float, rng: np.random.Generator,
                 sample_rate: int = SAMPLE_RATE, level_dbfs: float = -22.0) -> np.ndarray:
    """Syllable sequence with pauses from a synthetic speaker."""
    n = int(round(seconds * sample_rate))
    f0 = np.full(n, profile.f0_hz)
    formants = np.tile(_VOWELS[5] * profile.tract_scale, (n, 1)).astype(np.float64)
    env = np.zeros(n)
    pos = int(rng.integers(0, int(0.15 * sample_rate)))
    while pos < n:
        for _ in range(int(rng.integers(1, 4))):
            dur = int(rng.uniform(0.12, 0.34) * sample_rate)
            end = min(n, pos + dur)
            seg = end - pos
            if seg <= 0:
                break
            vowel = _VOWELS[profile.vowels[int(rng.integers(len(profile.vowels)))]]
            formants[pos:end] = vowel * profile.tract_scale * rng.uniform(0.95, 1.05, 3)
            accent = rng.uniform(0.9, 1.15)
            f0[pos:end] = profile.f0_hz * accent * np.linspace(1.03, 0.97, seg)
            ramp = np.clip(np.sin(np.pi * np.arange(seg) / max(seg - 1, 1)), 0, None) ** 0.5
            env[pos:end] = ramp * rng.uniform(0.6, 1.0)
            pos = end
        pos += int(rng.uniform(0.08, 0.4) * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = _smooth(f0, int(0.03 * sample_rate))
    f0 = f0 * (1 + profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_hz * t + rng.uniform(0, 2 * np.pi)))
    for j in range(3):
        formants[:, j] = _smooth(formants[:, j], int(0.02 * sample_rate))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    bw = np.array([80.0, 110.0, 160.0])
    gains = np.array([1.0, 0.6, 0.3])
    out = np.zeros(n)
    nyq = 0.48 * sample_rate
    for k in range(1, int(nyq / f0.min()) + 1):
        fk = k * f0
        amp = np.zeros(n)
        for j in range(3):
            amp += gains[j] / (1.0 + ((fk - formants[:, j]) / bw[j]) ** 2)
        amp = (amp + 0.02) * k ** (-0.5 * profile.tilt) * (fk < nyq)
        out += amp * np.sin(k * phase)
    out += profile.breathiness * rng.standard_normal(n) * np.max(np.abs(out)) * 0.1
    out *= _smooth(env, int(0.01 * sample_rate))
    act = active_mask(out, sample_rate, floor_dbfs=-60.0)
    rms = masked_rms(out, act) if act.any() else 1.0
    return (out * (10 ** (level_dbfs / 20) / rms)).astype(np.float32)


def synth_noise(seconds: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                level_dbfs: float = -25.0) -> np.ndarray:
    """Coloured Gaussian noise with a random spectral slope, a resonant band and slow AM."""
    n = int(round(seconds * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    slope = rng.uniform(0.0, 1.6)
    shape = 1.0 / np.maximum(f, 50.0) ** (slope / 2)
    centre = rng.uniform(200, 6000)
    shape *= 1 + rng.uniform(0, 4) * np.exp(-0.5 * ((f - centre) / (0.25 * centre)) ** 2)
    x = np.fft.irfft(spec * shape, n)
    t = np.arange(n) / sample_rate
    x *= 1 + rng.uniform(0, 0.5) * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, 2 * np.pi))
    x *= 10 ** (level_dbfs / 20) / np.sqrt(np.mean(x * x))
    return x.astype(np.float32)


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """In-memory mixtures with aligned references and per-item embeddings."""
    noisy: np.ndarray
    clean: np.ndarray
    embeddings: np.ndarray
    speakers: np.ndarray
    snr_db: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.noisy.shape[0]


def make_dataset(seed: int, n_items: int, seconds: float = 2.0, scenario: str = "TS2",
                 n_speakers: int = 10, emb_dim: int = 128, snr_range=(0.0, 20.0),
                 sir_range=(0.0, 10.0), enroll_seconds: float = 3.0) -> Dataset:
    """Deterministic synthetic mixtures for training and evaluation."""
    rng = np.random.default_rng(seed)
    profiles = [SpeakerProfile.random(rng) for _ in range(n_speakers)]
    embs = np.stack([builtin_embedding(synth_speech(p, enroll_seconds, rng), emb_dim).vector
                     for p in profiles])
    n = int(round(seconds * SAMPLE_RATE))
    noisy = np.empty((n_items, n), np.float32)
    clean = np.empty_like(noisy)
    spk = np.empty(n_items, int)
    snrs = np.empty(n_items)
    for i in range(n_items):
        s = i % n_speakers
        target = synth_speech(profiles[s], seconds, rng)
        interferer = noise = None
        snrs[i] = rng.uniform(*snr_range)
        sir = rng.uniform(*sir_range)
        if scenario == "TS1":
            other = (s + 1 + int(rng.integers(n_speakers - 1))) % n_speakers if n_speakers > 1 else s
            interferer = synth_speech(profiles[other], seconds, rng)
        if scenario in ("TS1", "TS2"):
            noise = synth_noise(seconds, rng)
        noisy[i], clean[i] = mix_arrays(target, interferer, noise, snrs[i], sir)
        spk[i] = s
    return Dataset(noisy, clean, embs[spk], spk, snrs,
                   {"seed": seed, "scenario": scenario, "seconds": seconds})


def make_fixture_set(seed: int, out_dir, n_speakers: int = 4, per_scenario: int = 2,
                     seconds: float = 4.0, long_form_seconds: float = 180.0) -> list[dict]:
    """Write synthetic components, mixtures, enrollment clips and ``manifest.json``.

    Paths in the manifest are relative to ``out_dir``. Output is a pure
    function of ``seed`` and the size arguments.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    profiles = [SpeakerProfile.random(rng) for _ in range(n_speakers)]
    for k, p in enumerate(profiles):
        save_wav(out / f"enroll/spk{k}.wav", synth_speech(p, 3.0, rng))
    manifest = []
    idx = 0
    for scenario in SCENARIOS:
        for _ in range(per_scenario):
            s = idx % n_speakers
            mseed = int(rng.integers(2**31))
            mrng = np.random.default_rng(mseed)
            tgt = f"components/{idx:04d}_target.wav"
            save_wav(out / tgt, synth_speech(profiles[s], seconds, mrng))
            itf = nse = None
            if scenario == "TS1":
                other = (s + 1) % n_speakers
                itf = f"components/{idx:04d}_interferer.wav"
                save_wav(out / itf, synth_speech(profiles[other], seconds, mrng))
            if scenario in ("TS1", "TS2"):
                nse = f"components/{idx:04d}_noise.wav"
                save_wav(out / nse, synth_noise(seconds, mrng))
            spec = MixtureSpec(scenario, tgt, itf, nse,
                               snr_noise_db=round(float(mrng.uniform(0, 20)), 3),
                               sir_db=round(float(mrng.uniform(0, 10)), 3), seed=mseed)
            noisy, clean = mix(spec, out)
            paths = {"target": tgt, "interferer": itf, "noise": nse,
                     "enrollment": f"enroll/spk{s}.wav",
                     "noisy": f"mixtures/{idx:04d}_{scenario}_noisy.wav",
                     "clean": f"mixtures/{idx:04d}_{scenario}_clean.wav"}
            save_wav(out / paths["noisy"], noisy)
            save_wav(out / paths["clean"], clean)
            manifest.append({"scenario": scenario, "paths": paths, "speaker": s,
                             "snr_noise_db": spec.snr_noise_db, "sir_db": spec.sir_db,
                             "seed": spec.seed})
            idx += 1
    if long_form_seconds > 0:
        manifest.append(_write_long_form(out, profiles[0], long_form_seconds, rng))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _write_long_form(out: Path, profile: SpeakerProfile, seconds: float, rng) -> dict:
    # concatenation of short TS2 segments whose noise changes every few seconds
    noisy_parts, clean_parts = [], []
    remaining = seconds
    while remaining > 0:
        seg = min(remaining, float(rng.uniform(3.0, 6.0)))
        seg = max(seg, 1.0)
        n, c = mix_arrays(synth_speech(profile, seg, rng), None, synth_noise(seg, rng),
                          float(rng.uniform(0, 20)))
        noisy_parts.append(n)
        clean_parts.append(c)
        remaining -= seg
    paths = {"noisy": "longform/spk0_noisy.wav", "clean": "longform/spk0_clean.wav",
             "enrollment": "enroll/spk0.wav", "target": None, "interferer": None, "noise": None}
    save_wav(out / paths["noisy"], np.concatenate(noisy_parts))
    save_wav(out / paths["clean"], np.concatenate(clean_parts))
    return {"scenario": "TS2", "paths": paths, "speaker": 0, "snr_noise_db": None,
            "sir_db": None, "seed": None, "long_form": True}


def read_manifest(data_dir) -> list[dict]:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def spec_from_entry(entry: dict) -> MixtureSpec:
    p = entry["paths"]
    return MixtureSpec(entry["scenario"], p["target"], p.get("interferer"), p.get("noise"),
                       entry["snr_noise_db"], entry["sir_db"], entry["seed"])


def asdict_spec(spec: MixtureSpec) -> dict:
    return asdict(spec)
