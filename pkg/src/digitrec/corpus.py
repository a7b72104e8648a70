"""Manifests, a seeded synthetic digit corpus, and the degradation pipeline."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import (MASTER_PROFILE, AudioBuffer, EncodingProfile, NoiseCondition, atomic_write_bytes,
                       encode_wav, mix_noise, read_wav, requantize, resample)
from .errors import IoFailure
from .scoring import DIGITS

SPLITS = ("train", "test")
NOISE_RMS = 0.2


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    speaker: str
    split: str
    condition: str = "clean"
    profile: str = MASTER_PROFILE.label


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    master_profile: EncodingProfile = MASTER_PROFILE

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: Manifest, path) -> None:
    """JSON lines; audio paths are stored relative to the manifest's directory."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for e in manifest.entries:
        p = Path(e.path).resolve()
        try:
            rel = p.relative_to(base).as_posix()
        except ValueError:
            rel = str(p)
        lines.append(json.dumps({"path": rel, "label": e.label, "speaker": e.speaker, "split": e.split,
                                 "condition": e.condition, "profile": e.profile}))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode() if lines else b"")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            p = Path(d["path"])
            entries.append(ManifestEntry(p if p.is_absolute() else path.parent / p, d["label"],
                                         d.get("speaker", ""), d["split"], d.get("condition", "clean"),
                                         d.get("profile", MASTER_PROFILE.label)))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return Manifest(entries)


# -- synthetic digits -----------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    tokens_per_digit_train: int = 20
    tokens_per_digit_test: int = 10
    base_profile: EncodingProfile = MASTER_PROFILE
    num_speakers: int = 4
    pitch_jitter: float = 0.04      # relative formant/pitch perturbation
    duration_jitter: float = 0.10   # relative length perturbation
    amplitude_jitter_db: float = 3.0
    background_rms: float = 3e-4


# (f1, f2, f3) targets per segment; an optional leading fricative band (lo, hi) in Hz.
DIGIT_PATTERNS = {
    "one":   ([(350, 900, 2300), (600, 1100, 2400), (450, 1700, 2500)], None),
    "two":   ([(300, 2100, 2900), (320, 1000, 2300), (300, 800, 2200)], (2500, 3400)),
    "three": ([(500, 1800, 2600), (400, 2200, 3000), (300, 2450, 3100)], (1500, 3400)),
    "four":  ([(700, 1200, 2500), (600, 1000, 2400), (500, 1400, 2300)], (1000, 2000)),
    "five":  ([(800, 1300, 2500), (500, 2000, 2700), (350, 1900, 2600)], None),
    "six":   ([(400, 2100, 2800), (350, 2000, 2700), (300, 1500, 2500)], (2800, 3500)),
    "seven": ([(550, 1800, 2600), (500, 1500, 2400), (450, 1300, 2400)], (3000, 3500)),
    "eight": ([(550, 1900, 2600), (380, 2300, 2900), (350, 2350, 2950)], None),
    "nine":  ([(400, 1500, 2500), (700, 1200, 2400), (400, 2100, 2700)], None),
    "zero":  ([(450, 1700, 2500), (400, 1200, 2300), (350, 900, 2200)], (3200, 3500)),
}
_FORMANT_GAINS = np.array([1.0, 0.6, 0.35])


def synth_utterance(digit: str, rng: np.random.Generator, sample_rate: int,
                    speaker_scale: float = 1.0, spec: SynthSpec = SynthSpec()) -> AudioBuffer:
    """One token: formant-like tone trajectories with per-token jitter and silence padding."""
    segments, fricative = DIGIT_PATTERNS[digit]
    scale = speaker_scale * (1.0 + rng.uniform(-spec.pitch_jitter, spec.pitch_jitter))
    dur = 0.45 * (1.0 + rng.uniform(-spec.duration_jitter, spec.duration_jitter))
    gain = 0.5 * 10.0 ** (rng.uniform(-spec.amplitude_jitter_db, spec.amplitude_jitter_db) / 20.0)
    lead, trail = 0.08 + rng.uniform(0, 0.02), 0.08 + rng.uniform(0, 0.02)
    fric_dur = 0.1 * dur if fricative else 0.0

    n_voiced = int(round(dur * sample_rate))
    t = np.arange(n_voiced) / sample_rate
    targets = np.array(segments, dtype=float) * scale              # (S, 3)
    knots = np.linspace(0.0, dur, len(segments))
    voiced = np.zeros(n_voiced)
    for k in range(3):
        f = np.interp(t, knots, targets[:, k])
        phase = 2 * np.pi * np.cumsum(f) / sample_rate + rng.uniform(0, 2 * np.pi)
        voiced += _FORMANT_GAINS[k] * np.sin(phase)
    env = np.minimum(1.0, np.minimum(t, dur - t) / 0.03)            # 30 ms ramps
    voiced *= env / np.sum(_FORMANT_GAINS)

    parts = [np.zeros(int(round(lead * sample_rate)))]
    if fricative:
        n_f = int(round(fric_dur * sample_rate))
        lo, hi = (np.array(fricative) * scale).clip(50, 0.45 * sample_rate)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        burst = signal.sosfilt(sos, rng.standard_normal(n_f))
        burst *= 0.5 / (np.sqrt(np.mean(burst ** 2)) + 1e-12) * np.hanning(n_f)
        parts.append(0.35 * burst)
    parts.append(voiced)
    parts.append(np.zeros(int(round(trail * sample_rate))))
    x = gain * np.concatenate(parts)
    x += spec.background_rms * rng.standard_normal(x.size)
    return AudioBuffer(np.clip(x, -1.0, 1.0), sample_rate, spec.base_profile.bit_depth)


def _token_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def synthetic_tokens(spec: SynthSpec):
    """Yield (digit, split, index, speaker, AudioBuffer) in a fixed order."""
    scales = _token_rng(spec.seed, 999).uniform(0.92, 1.08, spec.num_speakers)
    for d_idx, digit in enumerate(DIGITS):
        for s_idx, (split, count) in enumerate((("train", spec.tokens_per_digit_train),
                                                ("test", spec.tokens_per_digit_test))):
            for i in range(count):
                spk = i % spec.num_speakers
                rng = _token_rng(spec.seed, d_idx, s_idx, i)
                buf = synth_utterance(digit, rng, spec.base_profile.sample_rate, scales[spk], spec)
                yield digit, split, i, f"spk{spk:02d}", requantize(buf, spec.base_profile.bit_depth)


def corpus_path(root, condition: str, profile: EncodingProfile, digit: str, token: str) -> Path:
    return Path(root) / condition / profile.label / digit / f"{token}.wav"


def generate_synthetic_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Write every token as a WAV at the base profile plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    entries = []
    for digit, split, i, speaker, buf in synthetic_tokens(spec):
        path = corpus_path(out_dir, "clean", spec.base_profile, digit, f"{split}_{i:03d}")
        atomic_write_bytes(path, encode_wav(buf, spec.base_profile.bit_depth))
        entries.append(ManifestEntry(path, digit, speaker, split, "clean", spec.base_profile.label))
    manifest = Manifest(entries, spec.base_profile)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# -- noise and degradation ------------------------------------------------------------

def _normalize(x: np.ndarray) -> np.ndarray:
    x = x / np.sqrt(np.mean(x ** 2)) * NOISE_RMS
    peak = np.max(np.abs(x))
    return x / peak if peak > 1.0 else x


def builtin_noise(kind: str, duration: float, sample_rate: int, seed: int) -> AudioBuffer:
    """Seeded stand-ins for recorded noise.

    ``random``: uniform white noise. ``fan``: white noise through a 400 Hz
    low-pass plus a weak white floor. Both are scaled to RMS ``NOISE_RMS``.
    """
    n = max(1, int(round(duration * sample_rate)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(kind.encode())]))
    if kind == "random":
        x = rng.uniform(-1.0, 1.0, n)
    elif kind == "fan":
        sos = signal.butter(2, min(400.0, 0.4 * sample_rate), fs=sample_rate, output="sos")
        white = rng.standard_normal(n + 2048)
        low = signal.sosfilt(sos, white)[2048:]
        low /= np.sqrt(np.mean(low ** 2))
        x = low + 0.03 * rng.standard_normal(n)
    else:
        raise ValueError(f"no built-in noise for {kind!r}")
    return AudioBuffer(_normalize(x), sample_rate, 24)


def _noise_for(condition: NoiseCondition, n: int, sample_rate: int, key: int, noise_cache=None):
    if condition.noise_path:
        cache = noise_cache if noise_cache is not None else {}
        ck = (condition.noise_path, sample_rate)
        if ck not in cache:
            cache[ck] = resample(read_wav(condition.noise_path), sample_rate)
        src = cache[ck].samples
        offset = int(_token_rng(condition.seed, key).integers(0, max(1, src.size)))
        seg = np.roll(src, -offset)
        return AudioBuffer(seg, sample_rate, 24)
    return builtin_noise(condition.kind, n / sample_rate + 1e-9, sample_rate, condition.seed * 1_000_003 + key)


def degrade_buffer(buffer: AudioBuffer, profile: EncodingProfile, condition: NoiseCondition,
                   key: int = 0, noise_cache=None):
    """Resample to the profile rate, mix noise, requantize. Returns (buffer, n_clipped)."""
    x = resample(buffer, profile.sample_rate)
    clipped = 0
    if condition.kind != "clean" and len(x):
        noise = _noise_for(condition, len(x), profile.sample_rate, key, noise_cache)
        x, clipped = mix_noise(x, noise, condition.snr_db)
    return requantize(x, profile.bit_depth), clipped


def entry_key(entry: ManifestEntry) -> int:
    """Stable per-utterance noise key, independent of the corpus location."""
    return zlib.crc32(f"{entry.label}/{entry.split}/{Path(entry.path).stem}/{entry.speaker}".encode())


def degrade_corpus(manifest: Manifest, profile: EncodingProfile, condition: NoiseCondition, out_dir,
                   manifest_name: str | None = None) -> Manifest:
    out_dir = Path(out_dir)
    entries = []
    cache: dict = {}
    for e in manifest.entries:
        buf, _ = degrade_buffer(read_wav(e.path), profile, condition, entry_key(e), cache)
        path = corpus_path(out_dir, condition.kind, profile, e.label, Path(e.path).stem)
        atomic_write_bytes(path, encode_wav(buf, profile.bit_depth))
        entries.append(replace(e, path=path, condition=condition.kind, profile=profile.label))
    result = Manifest(entries, manifest.master_profile)
    name = manifest_name or f"manifest_{condition.kind}_{profile.label}.jsonl"
    write_manifest(result, out_dir / name)
    return result
