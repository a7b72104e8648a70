"""MFCC, LPC, PLP, FBANK and MELSPEC features with regression deltas."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, atomic_write_bytes
from .errors import CorruptFeatureFile, IoFailure, KindMismatch, NegativeFrequency, TooFewBins
from .frontend import FrameConfig, FrameMatrix, autocorrelation, frame_signal, pre_emphasize


class FeatureKind(str, enum.Enum):
    MFCC = "mfcc"
    LPC = "lpc"
    PLP = "plp"
    FBANK = "fbank"
    MELSPEC = "melspec"

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown feature kind {value!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


# file-format tag byte for each kind
KIND_TAGS = {FeatureKind.MFCC: 1, FeatureKind.LPC: 2, FeatureKind.PLP: 3,
             FeatureKind.FBANK: 4, FeatureKind.MELSPEC: 5}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


@dataclass(frozen=True)
class FeatureConfig:
    kind: FeatureKind = FeatureKind.MFCC
    num_filters: int = 26
    num_ceps: int = 12
    lpc_order: int = 12
    include_deltas: int = 2
    energy_floor: float = 1e-10
    delta_window: int = 2
    use_energy: bool = True  # replace cepstral c0 by log frame energy (MFCC, PLP)
    frame: FrameConfig = field(default_factory=FrameConfig)

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind.parse(self.kind))
        if isinstance(self.frame, dict):
            object.__setattr__(self, "frame", FrameConfig(**self.frame))
        if self.kind in (FeatureKind.MFCC, FeatureKind.PLP) and self.num_ceps > self.num_filters:
            raise ValueError("num_ceps must not exceed num_filters")
        if self.num_filters < 2:
            raise ValueError("num_filters must be >= 2")
        if self.lpc_order < 1 or self.delta_window < 1:
            raise ValueError("lpc_order and delta_window must be >= 1")
        if self.include_deltas not in (0, 1, 2):
            raise ValueError("include_deltas must be 0, 1 or 2")
        if self.energy_floor <= 0:
            raise ValueError("energy_floor must be positive")

    @property
    def base_dim(self) -> int:
        if self.kind in (FeatureKind.MFCC, FeatureKind.PLP):
            return self.num_ceps + 1
        if self.kind == FeatureKind.LPC:
            return self.lpc_order
        return self.num_filters

    @property
    def dim(self) -> int:
        return self.base_dim * (1 + self.include_deltas)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray  # (n_frames, dim)
    kind: FeatureKind
    config: FeatureConfig | None = None
    frame_shift_us: int = 10000

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("feature rows must form a 2-D array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("non-finite feature values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "kind", FeatureKind.parse(self.kind))

    def __len__(self):
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def with_rows(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(rows, self.kind, self.config, self.frame_shift_us)


# -- scales and filterbanks -----------------------------------------------------------

def mel_scale(freq_hz):
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < 0):
        raise NegativeFrequency(f"negative frequency {freq_hz}")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def hz_to_bark(freq_hz):
    return 6.0 * np.arcsinh(np.asarray(freq_hz, dtype=np.float64) / 600.0)


def bark_to_hz(bark):
    return 600.0 * np.sinh(np.asarray(bark, dtype=np.float64) / 6.0)


def mel_filterbank_matrix(num_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, centers equally spaced in mel between 0 Hz and Nyquist."""
    if num_filters < 2:
        raise ValueError("num_filters must be >= 2")
    edges = mel_to_hz(np.linspace(0.0, mel_scale(sample_rate / 2.0), num_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(weights.sum(axis=1) <= 0.0):
        raise TooFewBins(f"{fft_size}-point FFT at {sample_rate} Hz cannot resolve {num_filters} mel filters")
    return weights


def mel_filterbank(spectrum: np.ndarray, sample_rate: int, num_filters: int) -> np.ndarray:
    spectrum = np.asarray(spectrum, dtype=np.float64)
    fft_size = 2 * (spectrum.shape[-1] - 1)
    return spectrum @ mel_filterbank_matrix(num_filters, fft_size, sample_rate).T


def bark_filterbank_matrix(num_filters: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Critical-band masking curves, centers equally spaced in bark inside (0, Nyquist)."""
    top = float(hz_to_bark(sample_rate / 2.0))
    centers = top * np.arange(1, num_filters + 1) / (num_filters + 1)
    z = hz_to_bark(np.arange(fft_size // 2 + 1) * sample_rate / fft_size)
    d = z[None, :] - centers[:, None]
    w = np.zeros_like(d)
    lo = (d >= -1.3) & (d < -0.5)
    w[lo] = 10.0 ** (2.5 * (d[lo] + 0.5))
    w[(d >= -0.5) & (d <= 0.5)] = 1.0
    hi = (d > 0.5) & (d <= 2.5)
    w[hi] = 10.0 ** (-(d[hi] - 0.5))
    if np.any(w.sum(axis=1) <= 0.0):
        raise TooFewBins(f"{fft_size}-point FFT at {sample_rate} Hz cannot resolve {num_filters} bark bands")
    return w, bark_to_hz(centers)


def equal_loudness(freq_hz) -> np.ndarray:
    w2 = (2.0 * np.pi * np.asarray(freq_hz, dtype=np.float64)) ** 2
    return (w2 + 56.8e6) * w2 ** 2 / ((w2 + 6.3e6) ** 2 * (w2 + 0.38e9))


def intensity_loudness(x):
    """Cube-root intensity-to-loudness compression."""
    return np.cbrt(x)


# -- transforms -----------------------------------------------------------------------

def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k holds the k-th cosine."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * m + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def dct_ii(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ dct_matrix(x.shape[-1]).T


def levinson_durbin(r: np.ndarray, order: int, eps: float = 0.0):
    """Solve the autocorrelation normal equations for each row of ``r``.

    Uses the A(z) = 1 + sum a_i z^-i convention. Returns ``(a, k, err)`` with
    predictor coefficients (..., order), reflection coefficients (..., order) and the
    final prediction-error power. Rows with r[0] <= eps give all-zero coefficients.
    """
    r = np.asarray(r, dtype=np.float64)
    squeeze = r.ndim == 1
    r = np.atleast_2d(r)
    n = r.shape[0]
    a = np.zeros((n, order))
    k = np.zeros((n, order))
    err = r[:, 0].copy()
    live = err > eps
    for i in range(order):
        acc = r[:, i + 1] + np.sum(a[:, :i] * r[:, i:0:-1], axis=1)
        ki = np.zeros(n)
        ok = live & (err > 0)
        ki[ok] = -acc[ok] / err[ok]
        # numerical guard: a PSD sequence can only give |k| <= 1
        ki = np.clip(ki, -1.0, 1.0)
        prev = a[:, :i].copy()
        a[:, :i] = prev + ki[:, None] * prev[:, ::-1]
        a[:, i] = ki
        k[:, i] = ki
        err = np.where(ok, err * (1.0 - ki ** 2), err)
        live = ok
    if squeeze:
        return a[0], k[0], err[0]
    return a, k, err


def lpc_to_cepstrum(a: np.ndarray, num_ceps: int) -> np.ndarray:
    """Cepstrum c_1..c_num_ceps of the all-pole model 1/A(z)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n, p = a.shape
    c = np.zeros((n, num_ceps + 1))
    for m in range(1, num_ceps + 1):
        acc = -a[:, m - 1] if m <= p else np.zeros(n)
        for j in range(max(1, m - p), m):
            acc = acc - (j / m) * c[:, j] * a[:, m - j - 1]
        c[:, m] = acc
    return c[:, 1:]


# -- extractors -----------------------------------------------------------------------

def _mel_energies(frames: FrameMatrix, config: FeatureConfig) -> np.ndarray:
    fb = mel_filterbank_matrix(config.num_filters, frames.fft_size, frames.sample_rate)
    return frames.power @ fb.T


def _log_energy(frames: FrameMatrix, config: FeatureConfig) -> np.ndarray:
    raw = frames.raw if frames.raw is not None else frames.frames
    return np.log(np.maximum(np.sum(raw ** 2, axis=1), config.energy_floor))


def _wrap(rows, kind, frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    shift_us = int(round(config.frame.frame_shift_ms * 1000))
    return FeatureMatrix(np.asarray(rows, dtype=np.float64).reshape(len(frames), -1),
                         kind, config, shift_us)


def extract_melspec(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    return _wrap(_mel_energies(frames, config), FeatureKind.MELSPEC, frames, config)


def log_floor(energies, floor: float) -> np.ndarray:
    return np.log(np.maximum(energies, floor))


def extract_fbank(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    rows = log_floor(_mel_energies(frames, config), config.energy_floor)
    return _wrap(rows, FeatureKind.FBANK, frames, config)


def extract_mfcc(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    fbank = log_floor(_mel_energies(frames, config), config.energy_floor)
    cep = dct_ii(fbank)
    head = _log_energy(frames, config) if config.use_energy else cep[:, 0]
    rows = np.column_stack([head, cep[:, 1: config.num_ceps + 1]])
    return _wrap(rows, FeatureKind.MFCC, frames, config)


def extract_lpc(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    if config.lpc_order >= frames.frame_length:
        raise ValueError("lpc_order must be smaller than the frame length")
    if len(frames) == 0:
        return _wrap(np.zeros((0, config.lpc_order)), FeatureKind.LPC, frames, config)
    r = autocorrelation(frames.frames, config.lpc_order)
    a, _, _ = levinson_durbin(r, config.lpc_order, eps=config.energy_floor)
    return _wrap(a, FeatureKind.LPC, frames, config)


def plp_autocorrelation(loudness: np.ndarray, max_lag: int) -> np.ndarray:
    """Inverse DFT of a real, even spectrum sampled at L points from 0 to Nyquist."""
    loudness = np.atleast_2d(loudness)
    L = loudness.shape[1]
    m = np.arange(L)
    w = np.full(L, 2.0)
    w[0] = w[-1] = 1.0
    basis = np.cos(np.pi * np.arange(max_lag + 1)[:, None] * m[None, :] / (L - 1)) * w
    return loudness @ basis.T / (2.0 * (L - 1))


def extract_plp(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    fb, centers = bark_filterbank_matrix(config.num_filters, frames.fft_size, frames.sample_rate)
    bands = frames.power @ fb.T
    bands = np.maximum(bands * equal_loudness(centers), config.energy_floor)
    loud = intensity_loudness(bands)
    # band edges at 0 Hz and Nyquist copy their neighbours
    curve = np.concatenate([loud[:, :1], loud, loud[:, -1:]], axis=1)
    order = min(config.lpc_order, curve.shape[1] - 1)
    r = plp_autocorrelation(curve, order)
    a, _, err = levinson_durbin(r, order)
    cep = lpc_to_cepstrum(a, config.num_ceps)
    head = _log_energy(frames, config) if config.use_energy else np.log(np.maximum(err, config.energy_floor))
    rows = np.column_stack([head, cep]) if len(frames) else np.zeros((0, config.num_ceps + 1))
    return _wrap(rows, FeatureKind.PLP, frames, config)


_EXTRACTORS = {
    FeatureKind.MFCC: extract_mfcc,
    FeatureKind.LPC: extract_lpc,
    FeatureKind.PLP: extract_plp,
    FeatureKind.FBANK: extract_fbank,
    FeatureKind.MELSPEC: extract_melspec,
}


def delta(rows: np.ndarray, window: int) -> np.ndarray:
    """Regression deltas with edge frames replicated."""
    rows = np.asarray(rows, dtype=np.float64)
    T = rows.shape[0]
    if T == 0:
        return rows.copy()
    padded = np.concatenate([np.repeat(rows[:1], window, 0), rows, np.repeat(rows[-1:], window, 0)])
    num = np.zeros_like(rows)
    for w in range(1, window + 1):
        num += w * (padded[window + w: window + w + T] - padded[window - w: window - w + T])
    return num / (2.0 * sum(w * w for w in range(1, window + 1)))


def append_deltas(features: FeatureMatrix, order: int, delta_window: int = 2) -> FeatureMatrix:
    if order not in (1, 2):
        raise ValueError("delta order must be 1 or 2")
    blocks = [features.rows]
    d = delta(features.rows, delta_window)
    blocks.append(d)
    if order == 2:
        blocks.append(delta(d, delta_window))
    return features.with_rows(np.concatenate(blocks, axis=1))


def extract_frames(frames: FrameMatrix, config: FeatureConfig) -> FeatureMatrix:
    feats = _EXTRACTORS[config.kind](frames, config)
    if config.include_deltas:
        feats = append_deltas(feats, config.include_deltas, config.delta_window)
    return feats


def analyze(buffer: AudioBuffer, frame: FrameConfig) -> FrameMatrix:
    """Pre-emphasis, framing and windowing."""
    emphasized = pre_emphasize(buffer, frame.pre_emphasis)
    return frame_signal(emphasized, frame, buffer.sample_rate)


def extract(buffer: AudioBuffer, config: FeatureConfig) -> FeatureMatrix:
    """Full pipeline: pre-emphasis, framing, windowing, the configured kind, deltas."""
    return extract_frames(analyze(buffer, config.frame), config)


def extract_many(buffer: AudioBuffer, configs) -> list[FeatureMatrix]:
    """Several feature configurations of one buffer, sharing frames and spectra."""
    analyses: dict[FrameConfig, FrameMatrix] = {}
    out = []
    for cfg in configs:
        if cfg.frame not in analyses:
            analyses[cfg.frame] = analyze(buffer, cfg.frame)
        out.append(extract_frames(analyses[cfg.frame], cfg))
    return out


# -- feature files --------------------------------------------------------------------

_MAGIC = b"DFE1"
_HEADER = struct.Struct("<4sBIII")


def encode_features(matrix: FeatureMatrix) -> bytes:
    header = _HEADER.pack(_MAGIC, KIND_TAGS[matrix.kind], matrix.dim, len(matrix), matrix.frame_shift_us)
    return header + matrix.rows.astype("<f4").tobytes()


def decode_features(data: bytes, expected_kind=None, source="<bytes>") -> FeatureMatrix:
    if len(data) < _HEADER.size:
        raise CorruptFeatureFile(f"{source}: header truncated")
    magic, tag, dim, n, shift = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise CorruptFeatureFile(f"{source}: bad magic {magic!r}")
    if tag not in _TAG_KINDS:
        raise CorruptFeatureFile(f"{source}: unknown kind tag {tag}")
    kind = _TAG_KINDS[tag]
    if expected_kind is not None and kind != FeatureKind.parse(expected_kind):
        raise KindMismatch(f"{source}: holds {kind.value}, expected {FeatureKind.parse(expected_kind).value}")
    body = data[_HEADER.size:]
    if len(body) != 4 * dim * n:
        raise CorruptFeatureFile(f"{source}: payload is {len(body)} bytes, header implies {4 * dim * n}")
    rows = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)
    return FeatureMatrix(rows, kind, None, shift)


def write_features(matrix: FeatureMatrix, path) -> None:
    atomic_write_bytes(path, encode_features(matrix))


def read_features(path, expected_kind=None, config: FeatureConfig | None = None) -> FeatureMatrix:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    m = decode_features(data, expected_kind, str(path))
    if config is not None:
        if config.kind != m.kind:
            raise KindMismatch(f"{path}: holds {m.kind.value}, config is {config.kind.value}")
        m = FeatureMatrix(m.rows, m.kind, config, m.frame_shift_us)
    return m
