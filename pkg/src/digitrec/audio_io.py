"""Mono PCM audio: WAV I/O, encoding profiles, requantization, resampling, noise mixing."""
from __future__ import annotations

import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import (CorruptHeader, InvalidRate, IoFailure, NotPcm, RateMismatch,
                     SilentNoise, UnsupportedDepth)

WRITE_DEPTHS = (8, 16, 24)
READ_DEPTHS = (8, 16, 24, 32)

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# first two bytes of the KSDATAFORMAT_SUBTYPE_PCM GUID
_PCM_SUBTYPE_PREFIX = b"\x01\x00"


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Immutable mono signal, samples normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    source_bit_depth: int = 16

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0 or int(self.sample_rate) != self.sample_rate:
            raise InvalidRate(f"sample rate must be a positive integer, got {self.sample_rate}")
        if x.size and (not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1.0):
            raise ValueError("samples must be finite and lie in [-1, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))

    def replace(self, samples=None, sample_rate=None, source_bit_depth=None) -> "AudioBuffer":
        return AudioBuffer(
            self.samples if samples is None else samples,
            self.sample_rate if sample_rate is None else sample_rate,
            self.source_bit_depth if source_bit_depth is None else source_bit_depth,
        )


@dataclass(frozen=True)
class EncodingProfile:
    bit_depth: int
    sample_rate: int
    label: str = ""

    def __post_init__(self):
        if self.bit_depth not in WRITE_DEPTHS:
            raise UnsupportedDepth(f"bit depth {self.bit_depth} not in {WRITE_DEPTHS}")
        if self.sample_rate <= 0:
            raise InvalidRate(f"sample rate must be positive, got {self.sample_rate}")
        if not self.label:
            object.__setattr__(self, "label", f"{self.bit_depth}bit_{self.sample_rate}Hz")

    @property
    def bit_rate(self) -> int:
        return bit_rate(self)


@dataclass(frozen=True)
class NoiseCondition:
    """``kind`` is one of ``clean``, ``fan``, ``random``.

    ``noise_path`` points at a WAV to use instead of the built-in generator.
    """

    kind: str = "clean"
    snr_db: float = math.inf
    noise_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise condition {self.kind!r}; expected one of {NOISE_KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind == "clean":
            object.__setattr__(self, "snr_db", math.inf)

    @property
    def tag(self) -> str:
        return self.kind


NOISE_KINDS = ("clean", "fan", "random")

# Profiles of the experiment grid: the five mono PCM encodings.
GRID_PROFILES = (
    EncodingProfile(8, 8000),
    EncodingProfile(8, 16000),
    EncodingProfile(16, 16000),
    EncodingProfile(16, 44100),
    EncodingProfile(24, 48000),
)

MASTER_PROFILE = EncodingProfile(24, 48000)

_LABEL_RE = re.compile(r"^(\d+)\s*bit[_\- ]?(\d+)\s*hz$", re.IGNORECASE)


def load_profile_catalog(path=None) -> list[EncodingProfile]:
    """Parse a catalog file of ``label, depth, rate`` lines (``#`` comments allowed).

    Without ``path`` the bundled standard-formats catalog is read.
    """
    if path is None:
        text = resources.files("digitrec").joinpath("profiles.txt").read_text()
    else:
        text = Path(path).read_text()
    profiles = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"catalog line {lineno}: expected 'label, depth, rate'")
        profiles.append(EncodingProfile(int(parts[1]), int(parts[2]), parts[0]))
    return profiles


def profile_from_label(label: str, catalog=None) -> EncodingProfile:
    """Resolve ``label`` against a catalog, falling back to ``<depth>bit_<rate>Hz`` parsing."""
    for p in catalog if catalog is not None else (*GRID_PROFILES, *load_profile_catalog()):
        if p.label == label:
            return p
    m = _LABEL_RE.match(label.strip())
    if not m:
        raise ValueError(f"unknown profile label {label!r}")
    return EncodingProfile(int(m.group(1)), int(m.group(2)))


def bit_rate(profile: EncodingProfile) -> int:
    """Bits per second of a mono stream."""
    return profile.bit_depth * profile.sample_rate * 1


def format_bit_rate(bps: int) -> str:
    """Display string in the style of the standard-formats table.

    Values are truncated, not rounded: 705600 -> "705 kbps", 1152000 -> "1.1 Mbps".
    Rates below 100 kbps are shown in plain bps.
    """
    if bps >= 1_000_000:
        tenths = bps // 100_000
        return f"{tenths // 10}.{tenths % 10} Mbps"
    if bps >= 100_000:
        return f"{bps // 1000} kbps"
    return f"{bps} bps"


# -- WAV I/O --------------------------------------------------------------------------

def _iter_chunks(data: bytes, start: int):
    pos = start
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if len(body) < size:
            # tolerate a truncated data chunk only; anything else is corrupt
            if cid != b"data":
                raise CorruptHeader(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioBuffer:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _iter_chunks(data, 12):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
            break
    if fmt is None or len(fmt) < 16:
        raise CorruptHeader(f"{path}: missing or short fmt chunk")
    if payload is None:
        raise CorruptHeader(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise CorruptHeader(f"{path}: short WAVE_FORMAT_EXTENSIBLE header")
        if fmt[24:26] != _PCM_SUBTYPE_PREFIX:
            raise NotPcm(f"{path}: extensible subformat is not integer PCM")
    elif tag != _WAVE_FORMAT_PCM:
        raise NotPcm(f"{path}: format code 0x{tag:04x} is not integer PCM")
    if bits not in READ_DEPTHS:
        raise UnsupportedDepth(f"{path}: {bits}-bit samples not supported")
    if channels < 1 or rate <= 0:
        raise CorruptHeader(f"{path}: channels={channels}, rate={rate}")
    width = bits // 8
    if block_align != width * channels:
        raise CorruptHeader(f"{path}: block align {block_align} inconsistent with "
                            f"{channels}x{bits}-bit frames")

    n_frames = len(payload) // block_align
    raw = np.frombuffer(payload[: n_frames * block_align], dtype=np.uint8)
    if bits == 8:
        ints = raw.astype(np.int32) - 128
    elif bits == 16:
        ints = raw.view("<i2").astype(np.int32)
    elif bits == 24:
        b = raw.reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    else:
        ints = raw.view("<i4").astype(np.int64)
    x = ints.astype(np.float64) / float(1 << (bits - 1))
    x = x.reshape(n_frames, channels).mean(axis=1)
    return AudioBuffer(x, rate, bits)


def _to_codes(samples: np.ndarray, depth: int) -> np.ndarray:
    half = 1 << (depth - 1)
    return np.clip(np.round(samples * half), -half, half - 1).astype(np.int64)


def encode_wav(buffer: AudioBuffer, bit_depth: int) -> bytes:
    if bit_depth not in WRITE_DEPTHS:
        raise UnsupportedDepth(f"cannot write {bit_depth}-bit WAV; use one of {WRITE_DEPTHS}")
    codes = _to_codes(buffer.samples, bit_depth)
    if bit_depth == 8:
        payload = (codes + 128).astype(np.uint8).tobytes()
    elif bit_depth == 16:
        payload = codes.astype("<i2").tobytes()
    else:
        payload = codes.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    width = bit_depth // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, buffer.sample_rate,
        buffer.sample_rate * width, width, bit_depth,
        b"data", len(payload),
    )
    pad = b"\x00" if len(payload) & 1 else b""
    return header + payload + pad


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def write_wav(buffer: AudioBuffer, profile_bit_depth: int, path) -> None:
    atomic_write_bytes(path, encode_wav(buffer, profile_bit_depth))


# -- conversions ----------------------------------------------------------------------

def requantize(buffer: AudioBuffer, target_depth: int) -> AudioBuffer:
    """Uniform mid-tread quantizer with step 2 / 2**depth, no dither.

    Levels run from -1 to +1 inclusive so every input in [-1, 1] is within half a
    step of its output; the +1 level saturates to the top code when written.
    """
    if target_depth not in WRITE_DEPTHS:
        raise UnsupportedDepth(f"cannot requantize to {target_depth} bits")
    half = float(1 << (target_depth - 1))
    y = np.clip(np.round(buffer.samples * half), -half, half) / half
    return buffer.replace(samples=y, source_bit_depth=target_depth)


@lru_cache(maxsize=64)
def design_antialias_filter(rate_in: int, rate_out: int, attenuation_db: float = 60.0):
    """Kaiser-windowed sinc for rational resampling.

    Passband reaches 0.45 * min(rate_in, rate_out); the stopband starts at the lower
    Nyquist frequency. Returns (taps, up, down).
    """
    ratio = Fraction(rate_out, rate_in)
    up, down = ratio.numerator, ratio.denominator
    fs_up = rate_in * up
    low = min(rate_in, rate_out)
    width = 0.05 * low
    cutoff = 0.475 * low
    numtaps, beta = signal.kaiserord(attenuation_db, width / (0.5 * fs_up))
    numtaps |= 1
    taps = signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=fs_up)
    taps.setflags(write=False)  # shared through the cache
    return taps, up, down


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling; output is hard-clipped to [-1, 1]."""
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise InvalidRate(f"target rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == buffer.sample_rate:
        return buffer
    if len(buffer) == 0:
        return buffer.replace(sample_rate=target_rate)
    taps, up, down = design_antialias_filter(buffer.sample_rate, target_rate)
    y = signal.resample_poly(buffer.samples, up, down, window=taps)
    return buffer.replace(samples=np.clip(y, -1.0, 1.0), sample_rate=target_rate)


def tile_to_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.size >= n:
        return x[:n]
    return np.tile(x, -(-n // x.size))[:n]


def mix_noise(signal_buf: AudioBuffer, noise: AudioBuffer, snr_db: float):
    """Add ``noise`` scaled to reach ``snr_db`` relative to the signal RMS.

    Returns ``(mixed, n_clipped)``; samples beyond full scale are saturated and counted.
    An infinite SNR returns the signal untouched.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return signal_buf, 0
    if noise.sample_rate != signal_buf.sample_rate:
        raise RateMismatch(f"noise at {noise.sample_rate} Hz, signal at {signal_buf.sample_rate} Hz")
    n = len(signal_buf)
    if len(noise) == 0 or noise.rms() == 0.0:
        raise SilentNoise("noise buffer has zero RMS")
    nz = tile_to_length(noise.samples, n)
    nz_rms = float(np.sqrt(np.mean(nz ** 2))) if n else 1.0
    if nz_rms == 0.0:
        raise SilentNoise("noise segment used for mixing has zero RMS")
    gain = (signal_buf.rms() / nz_rms) * 10.0 ** (-snr_db / 20.0)
    y = signal_buf.samples + gain * nz
    clipped = int(np.count_nonzero(np.abs(y) > 1.0))
    return signal_buf.replace(samples=np.clip(y, -1.0, 1.0)), clipped


def snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Measured SNR of ``noisy`` against its clean component."""
    err = np.asarray(noisy, float) - np.asarray(clean, float)
    return 10.0 * math.log10(float(np.sum(np.asarray(clean, float) ** 2)) / float(np.sum(err ** 2)))
