import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from digitrec.audio_io import AudioBuffer
from digitrec.errors import CorruptFeatureFile, KindMismatch, NegativeFrequency, TooFewBins
from digitrec.features import (FeatureConfig, FeatureKind, FeatureMatrix, analyze, append_deltas, dct_ii,
                               decode_features, delta, encode_features, extract, extract_fbank, extract_many,
                               extract_melspec, extract_mfcc, intensity_loudness, levinson_durbin, lpc_to_cepstrum,
                               mel_filterbank, mel_filterbank_matrix, mel_scale, mel_to_hz, read_features,
                               write_features)
from digitrec.frontend import FrameConfig, autocorrelation

RATE = 16000


def tone(freq, seconds=0.3, amp=0.5, rate=RATE):
    t = np.arange(int(seconds * rate)) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate, 16)


def noise(seed=0, n=4000, amp=0.3, rate=RATE):
    return AudioBuffer(np.random.default_rng(seed).uniform(-amp, amp, n), rate, 16)


def frames_of(buffer, cfg=FrameConfig()):
    return analyze(buffer, cfg)


def static(kind, **kw):
    return FeatureConfig(kind=kind, include_deltas=0, **kw)


# -- scales and filterbank ------------------------------------------------------------

def test_mel_scale_values():
    assert mel_scale(0.0) == 0.0
    assert mel_scale(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-9)
    assert mel_scale(700.0) == pytest.approx(781.17, abs=0.01)
    assert mel_scale(8000.0) == pytest.approx(2840.03, abs=0.01)
    with pytest.raises(NegativeFrequency):
        mel_scale(-1.0)


@given(st.floats(0, 48000), st.floats(0.01, 1000))
def test_mel_scale_increasing_and_invertible(f, df):
    assert mel_scale(f + df) > mel_scale(f)
    assert mel_to_hz(mel_scale(f)) == pytest.approx(f, rel=1e-9, abs=1e-9)


def test_filterbank_zero_and_flat_spectrum():
    fb = mel_filterbank_matrix(26, 512, RATE)
    assert np.all(mel_filterbank(np.zeros(257), RATE, 26) == 0)
    areas = mel_filterbank(np.ones(257), RATE, 26)
    # direct triangle sums, one bin at a time
    edges = mel_to_hz(np.linspace(0, mel_scale(RATE / 2), 28))
    for j in range(26):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        s = 0.0
        for b in range(257):
            f = b * RATE / 512
            if lo <= f <= mid and mid > lo:
                s += (f - lo) / (mid - lo)
            elif mid < f <= hi:
                s += (hi - f) / (hi - mid)
        assert areas[j] == pytest.approx(s, abs=1e-9)
    assert np.all(areas > 0)
    assert fb.shape == (26, 257)


def test_filterbank_tone_at_center_peaks_there():
    edges = mel_to_hz(np.linspace(0, mel_scale(RATE / 2), 28))
    for j in (3, 10, 20):
        center = edges[j + 1]
        fm = frames_of(tone(center, amp=0.5))
        energies = mel_filterbank(fm.power, RATE, 26)
        assert np.all(np.argmax(energies, axis=1) == j)


def test_filterbank_too_few_bins():
    with pytest.raises(TooFewBins):
        mel_filterbank_matrix(80, 64, 8000)


# -- spectral kinds -------------------------------------------------------------------

def test_melspec_silence_is_zero():
    feats = extract(AudioBuffer(np.zeros(4000), RATE, 16), static("melspec"))
    assert np.all(feats.rows == 0)


@pytest.mark.parametrize("kind", ["melspec", "plp"])
def test_stationary_sine(kind):
    rows = extract(tone(1000.0, seconds=0.5), static(kind)).rows
    if kind == "melspec":
        mean = rows.mean(axis=0)
        strong = mean > 1e-6 * mean.max()
        assert np.all(rows[:, strong].var(axis=0) < 1e-3 * mean[strong])
    else:
        assert np.all(rows.var(axis=0) < 1e-3 * np.abs(rows).mean(axis=0) + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 1.0))
def test_fbank_is_log_of_floored_melspec(seed, amp):
    fm = frames_of(noise(seed, 2000, amp))
    cfg = static("fbank")
    mel = extract_melspec(fm, static("melspec")).rows
    fb = extract_fbank(fm, cfg).rows
    np.testing.assert_array_equal(fb, np.log(np.maximum(mel, cfg.energy_floor)))


def test_fbank_zero_frame_and_amplitude_shift():
    z = extract(AudioBuffer(np.zeros(800), RATE, 16), static("fbank")).rows
    assert np.all(z == math.log(1e-10))
    a = extract(noise(1, amp=0.2), static("fbank")).rows
    b = extract(noise(1, amp=0.4), static("fbank")).rows
    np.testing.assert_allclose(b - a, math.log(4.0), atol=1e-6)


def test_dct_matches_naive_cosine_sum():
    rng = np.random.default_rng(5)
    for n in (2, 13, 26, 40):
        x = rng.normal(size=(3, n))
        ref = np.zeros_like(x)
        for k in range(n):
            scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
            for m in range(n):
                ref[:, k] += x[:, m] * math.cos(math.pi * k * (2 * m + 1) / (2 * n))
            ref[:, k] *= scale
        np.testing.assert_allclose(dct_ii(x), ref, atol=1e-9)


@given(arrays(np.float64, 26, elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_dct_shift_changes_only_c0(row, c):
    d = dct_ii(row + c) - dct_ii(row)
    assert np.all(np.abs(d[1:]) < 1e-9)


def test_mfcc_zero_frame_and_scaling():
    z = extract(AudioBuffer(np.zeros(800), RATE, 16), static("mfcc")).rows
    assert np.all(z[:, 0] == math.log(1e-10))
    assert np.all(np.abs(z[:, 1:]) < 1e-12)
    a = extract(noise(2, amp=0.1), static("mfcc")).rows
    b = extract(noise(2, amp=0.3), static("mfcc")).rows
    np.testing.assert_allclose(b[:, 0] - a[:, 0], 2 * math.log(3.0), atol=1e-6)
    np.testing.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-6)


def test_mfcc_raw_c0_option():
    cfg = static("mfcc", use_energy=False)
    fm = frames_of(noise(3))
    rows = extract_mfcc(fm, cfg).rows
    fb = extract_fbank(fm, static("fbank")).rows
    np.testing.assert_allclose(rows, dct_ii(fb)[:, :13], atol=1e-12)


# -- LPC and PLP ----------------------------------------------------------------------

def toeplitz_solve(r, p):
    R = np.array([[r[abs(i - j)] for j in range(p)] for i in range(p)])
    return -np.linalg.solve(R, r[1: p + 1])


def test_lpc_matches_toeplitz_solve():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.normal(size=400)
        r = autocorrelation(x, 12)
        a, _, _ = levinson_durbin(r, 12)
        np.testing.assert_allclose(a, toeplitz_solve(r, 12), atol=1e-8)
        assert np.all(np.abs(a) < 0.5)


def test_lpc_ar1_ground_truth():
    rng = np.random.default_rng(7)
    e = 0.01 * rng.normal(size=8000)
    x = np.zeros_like(e)
    for n in range(1, len(x)):
        x[n] = 0.9 * x[n - 1] + e[n]
    a, _, _ = levinson_durbin(autocorrelation(x, 4), 4)
    assert a[0] == pytest.approx(-0.9, abs=0.05)


def test_lpc_zero_frame_gives_zero_row():
    rows = extract(AudioBuffer(np.zeros(800), RATE, 16), static("lpc")).rows
    assert rows.shape[1] == 12 and np.all(rows == 0)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(30, 200), elements=st.floats(-1, 1)))
def test_levinson_reflection_bounded(x):
    r = autocorrelation(x, 10)
    _, k, err = levinson_durbin(r, 10)
    assert np.all(np.abs(k) <= 1 + 1e-9)
    assert err >= -1e-12


def test_lpc_to_cepstrum_single_pole():
    # 1/(1 - b z^-1) has cepstrum c_n = b^n / n
    b = 0.6
    c = lpc_to_cepstrum(np.array([-b]), 6)[0]
    np.testing.assert_allclose(c, [b ** n / n for n in range(1, 7)], atol=1e-12)


def test_plp_cube_root_and_determinism():
    assert intensity_loudness(8.0) == pytest.approx(2.0)
    assert intensity_loudness(1.0) == 1.0
    z = AudioBuffer(np.zeros(1600), RATE, 16)
    a, b = extract(z, static("plp")).rows, extract(z, static("plp")).rows
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    # all rows of a silent input are identical
    assert np.all(a == a[0])


def test_plp_distinguishes_vowels():
    lo = extract(tone(400.0), static("plp")).rows.mean(axis=0)
    hi = extract(tone(2500.0), static("plp")).rows.mean(axis=0)
    assert np.linalg.norm(lo[1:] - hi[1:]) > 0.5


# -- deltas ---------------------------------------------------------------------------

def fm_rows(rows):
    return FeatureMatrix(np.asarray(rows, float), "fbank")


def test_delta_examples():
    const = fm_rows(np.full((10, 3), 2.5))
    out = append_deltas(const, 2).rows
    assert out.shape == (10, 9) and np.all(out[:, 3:] == 0)
    ramp = np.arange(12, dtype=float)[:, None]
    d = delta(ramp, 2)
    np.testing.assert_allclose(d[2:-2, 0], 1.0)
    single = append_deltas(fm_rows([[1.0, -2.0]]), 2).rows
    assert np.all(single[:, 2:] == 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 5)), elements=st.floats(-1e3, 1e3)),
       st.integers(1, 3), st.floats(-1e3, 1e3))
def test_delta_ignores_offset(rows, w, c):
    np.testing.assert_allclose(delta(rows + c, w), delta(rows, w), atol=1e-9)


@pytest.mark.parametrize("kind", list(FeatureKind))
@pytest.mark.parametrize("deltas", [0, 1, 2])
def test_dimension_law(kind, deltas):
    cfg = FeatureConfig(kind=kind, include_deltas=deltas)
    feats = extract(noise(4), cfg)
    assert feats.dim == cfg.base_dim * (1 + deltas) == cfg.dim
    assert len(feats) == 23


def test_extract_many_matches_single():
    cfgs = [FeatureConfig(kind=k) for k in FeatureKind]
    b = noise(5)
    for got, cfg in zip(extract_many(b, cfgs), cfgs):
        np.testing.assert_array_equal(got.rows, extract(b, cfg).rows)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(list(FeatureKind)), st.sampled_from([0.0, 1e-12, 1e-6, 0.5, 1.0]),
       st.integers(0, 2**32 - 1), st.sampled_from([8000, 16000, 44100]))
def test_features_always_finite(kind, amp, seed, rate):
    rng = np.random.default_rng(seed)
    x = amp * np.sign(rng.normal(size=rate // 5))  # full-scale square-ish noise or silence
    feats = extract(AudioBuffer(x, rate, 16), FeatureConfig(kind=kind))
    assert np.all(np.isfinite(feats.rows))


def test_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(kind="mfcc", num_ceps=30, num_filters=26)
    with pytest.raises(ValueError):
        FeatureConfig(include_deltas=3)
    with pytest.raises(ValueError):
        FeatureConfig(lpc_order=0)
    with pytest.raises(ValueError):
        FeatureKind.parse("cepstrum")
    cfg = FeatureConfig(kind="plp", num_filters=21)
    assert FeatureConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() != FeatureConfig(kind="plp").config_hash()


# -- files ----------------------------------------------------------------------------

@settings(max_examples=25)
@given(arrays(np.float32, st.tuples(st.integers(0, 20), st.integers(1, 8)),
              elements=st.floats(-1e6, 1e6, width=32)), st.sampled_from(list(FeatureKind)))
def test_feature_bytes_round_trip(rows, kind):
    m = FeatureMatrix(rows.astype(np.float64), kind, frame_shift_us=12500)
    back = decode_features(encode_features(m))
    assert back.kind == kind and back.frame_shift_us == 12500
    assert back.rows.astype(np.float32).tobytes() == rows.tobytes()


def test_feature_file_errors(tmp_path):
    m = extract(noise(6), FeatureConfig(kind="mfcc"))
    path = tmp_path / "a.dfe"
    write_features(m, path)
    back = read_features(path, "mfcc", m.config)
    np.testing.assert_array_equal(back.rows, m.rows.astype(np.float32).astype(np.float64))
    assert back.config == m.config
    with pytest.raises(KindMismatch):
        read_features(path, "lpc")
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(CorruptFeatureFile):
        read_features(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptFeatureFile):
        read_features(path)
    path.write_bytes(data[:5])
    with pytest.raises(CorruptFeatureFile):
        read_features(path)
