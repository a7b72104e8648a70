"""Short-time analysis shared by all feature extractors."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

from .audio_io import AudioBuffer
from .errors import InvalidFftSize, LagTooLarge

WINDOWS = ("hamming", "rectangular")


@dataclass(frozen=True)
class FrameConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    pre_emphasis: float = 0.97
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.frame_shift_ms <= self.frame_length_ms:
            raise ValueError("need 0 < frame_shift_ms <= frame_length_ms")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must lie in [0, 1)")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")

    def frame_length(self, sample_rate: int) -> int:
        n = int(round(self.frame_length_ms * sample_rate / 1000.0))
        if n < 2:
            raise ValueError(f"{self.frame_length_ms} ms at {sample_rate} Hz gives {n} samples per frame")
        return n

    def frame_shift(self, sample_rate: int) -> int:
        return max(1, int(round(self.frame_shift_ms * sample_rate / 1000.0)))


@dataclass(frozen=True, eq=False)
class FrameMatrix:
    frames: np.ndarray  # (n_frames, frame_length), already windowed
    config: FrameConfig
    sample_rate: int
    raw: np.ndarray = field(default=None, repr=False)  # same frames before windowing

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_length(self) -> int:
        return self.frames.shape[1]

    @property
    def fft_size(self) -> int:
        return next_pow2(self.frame_length)

    @cached_property
    def power(self) -> np.ndarray:
        """Power spectrum of every frame, shared by the spectral feature kinds."""
        if len(self) == 0:
            return np.zeros((0, self.fft_size // 2 + 1))
        return power_spectrum(self.frames, self.fft_size)


def pre_emphasize(buffer: AudioBuffer, coeff: float) -> np.ndarray:
    """First-order high-pass y[n] = x[n] - coeff * x[n-1], with x[-1] taken as x[0].

    Returns a plain array: the output may leave [-1, 1], so it is not an AudioBuffer.
    """
    if not 0.0 <= coeff < 1.0:
        raise ValueError("pre-emphasis coefficient must lie in [0, 1)")
    x = buffer.samples if isinstance(buffer, AudioBuffer) else np.asarray(buffer, float)
    if x.size == 0 or coeff == 0.0:
        return np.array(x, dtype=np.float64)
    y = np.empty_like(x)
    y[0] = x[0] * (1.0 - coeff)
    y[1:] = x[1:] - coeff * x[:-1]
    return y


def window_function(name: str, n: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    raise ValueError(f"unknown window {name!r}")


def frame_count(n_samples: int, frame_len: int, shift: int) -> int:
    return max(0, (n_samples - frame_len) // shift + 1)


def frame_signal(buffer, config: FrameConfig, sample_rate: int | None = None) -> FrameMatrix:
    """Cut into overlapping windowed frames; a trailing partial frame is dropped.

    ``buffer`` is an AudioBuffer, or a raw array together with ``sample_rate``
    (used for pre-emphasized signals). Pre-emphasis is not applied here.
    """
    if isinstance(buffer, AudioBuffer):
        x, rate = buffer.samples, buffer.sample_rate
    else:
        x, rate = np.asarray(buffer, dtype=np.float64), int(sample_rate)
    flen, shift = config.frame_length(rate), config.frame_shift(rate)
    n = frame_count(x.size, flen, shift)
    if n == 0:
        raw = np.zeros((0, flen))
    else:
        idx = np.arange(flen)[None, :] + shift * np.arange(n)[:, None]
        raw = x[idx]
    return FrameMatrix(raw * window_function(config.window, flen), config, rate, raw)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@lru_cache(maxsize=32)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n == 0 or n & (n - 1):
        raise InvalidFftSize(f"FFT length {n} is not a power of two")
    a = a[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(*a.shape[:-1], n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        blocks[..., half:] = even - odd
        even += odd
        size *= 2
    return a


def rfft(x: np.ndarray) -> np.ndarray:
    """Bins 0..n/2 of the DFT of real input, via one complex FFT of half length."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2 or n & (n - 1):
        raise InvalidFftSize(f"FFT length {n} is not a power of two >= 2")
    h = n // 2
    z = fft(x[..., 0::2] + 1j * x[..., 1::2])
    zk = np.concatenate([z, z[..., :1]], axis=-1)          # Z[k], k = 0..h (periodic)
    zc = np.conj(zk[..., ::-1])                            # conj(Z[h-k])
    even = 0.5 * (zk + zc)
    odd = -0.5j * (zk - zc)
    return even + np.exp(-2j * np.pi * np.arange(h + 1) / n) * odd


def power_spectrum(frame: np.ndarray, fft_size: int | None = None) -> np.ndarray:
    """|DFT|^2 of the zero-padded frame(s), bins 0..fft_size/2 along the last axis."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    if fft_size is None:
        fft_size = next_pow2(n)
    if fft_size < n or fft_size <= 0 or fft_size & (fft_size - 1):
        raise InvalidFftSize(f"fft_size {fft_size} must be a power of two >= frame length {n}")
    padded = np.zeros(frame.shape[:-1] + (fft_size,))
    padded[..., :n] = frame
    spec = rfft(padded) if fft_size >= 2 else fft(padded)
    return spec.real ** 2 + spec.imag ** 2


def autocorrelation(frame: np.ndarray, max_lag: int) -> np.ndarray:
    """r[k] = sum_n x[n] x[n+k] for k = 0..max_lag, along the last axis."""
    x = np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if max_lag >= n or max_lag < 0:
        raise LagTooLarge(f"max_lag {max_lag} must be below frame length {n}")
    return np.stack([np.sum(x[..., : n - k] * x[..., k:], axis=-1) for k in range(max_lag + 1)], axis=-1)
