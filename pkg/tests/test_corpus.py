import filecmp
import json

import numpy as np
import pytest
from scipy import signal

from digitrec.audio_io import EncodingProfile, NoiseCondition, read_wav, resample, snr_db, write_wav
from digitrec.corpus import (NOISE_RMS, Manifest, ManifestEntry, SynthSpec, builtin_noise, degrade_buffer,
                             degrade_corpus, generate_synthetic_corpus, read_manifest, synthetic_tokens,
                             write_manifest)
from digitrec.scoring import DIGITS

SMALL = SynthSpec(seed=3, tokens_per_digit_train=2, tokens_per_digit_test=1)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(SMALL, root), root


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_byte_identical(corpus, tmp_path):
    _, root = corpus
    generate_synthetic_corpus(SMALL, tmp_path / "again")
    assert tree_equal(root, tmp_path / "again")


def test_manifest_counts_and_layout(corpus):
    manifest, root = corpus
    assert len(manifest.split("train")) == 20 and len(manifest.split("test")) == 10
    assert {e.label for e in manifest.entries} == set(DIGITS)
    assert len({e.path for e in manifest.entries}) == len(manifest)
    first = manifest.entries[0]
    assert first.path == root / "clean" / "24bit_48000Hz" / "one" / "train_000.wav"
    back = read_manifest(root / "manifest.jsonl")
    assert back.entries == manifest.entries


def test_five_train_tokens_give_fifty_entries():
    spec = SynthSpec(seed=0, tokens_per_digit_train=5, tokens_per_digit_test=0)
    assert sum(1 for t in synthetic_tokens(spec) if t[1] == "train") == 50


def test_manifest_relative_paths(tmp_path):
    wav = tmp_path / "a" / "x.wav"
    m = Manifest([ManifestEntry(wav, "one", "s", "train")])
    write_manifest(m, tmp_path / "m.jsonl")
    line = json.loads((tmp_path / "m.jsonl").read_text())
    assert line["path"] == "a/x.wav"
    assert read_manifest(tmp_path / "m.jsonl").entries[0].path == wav
    (tmp_path / "bad.jsonl").write_text('{"label": "one"}\n')
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.jsonl")


def centroid_track(buf, points=50):
    """Spectral centroid over the loud frames, resampled to a fixed number of points."""
    f, _, Z = signal.stft(buf.samples, buf.sample_rate, nperseg=1024)
    p = np.abs(Z) ** 2
    energy = p.sum(axis=0)
    loud = energy > 0.1 * energy.max()
    c = (f[:, None] * p).sum(axis=0)[loud] / energy[loud]
    return np.interp(np.linspace(0, 1, points), np.linspace(0, 1, len(c)), c)


def test_digits_have_distinct_centroids():
    spec = SynthSpec(seed=1, tokens_per_digit_train=3, tokens_per_digit_test=0)
    tokens = {}
    for digit, _, _, _, buf in synthetic_tokens(spec):
        tokens.setdefault(digit, []).append(buf)
    one = np.mean([centroid_track(b) for b in tokens["one"]], axis=0)
    two = np.mean([centroid_track(b) for b in tokens["two"]], axis=0)
    assert np.mean(np.abs(one - two)) > 200


def test_clean_at_master_is_identity(corpus):
    manifest, _ = corpus
    src = read_wav(manifest.entries[0].path)
    out, clipped = degrade_buffer(src, EncodingProfile(24, 48000), NoiseCondition("clean"))
    assert clipped == 0
    assert np.max(np.abs(out.samples - src.samples)) <= 2.0 ** -24


def test_degrade_to_telephone_profile(corpus, tmp_path):
    manifest, _ = corpus
    out = degrade_corpus(manifest, EncodingProfile(8, 8000), NoiseCondition("clean"), tmp_path)
    assert (tmp_path / "manifest_clean_8bit_8000Hz.jsonl").exists()
    for src, dst in zip(manifest.entries[:5], out.entries[:5]):
        a, b = read_wav(src.path), read_wav(dst.path)
        assert b.sample_rate == 8000 and b.source_bit_depth == 8
        assert abs(a.duration - b.duration) <= 1 / 8000
        assert (dst.label, dst.split, dst.profile) == (src.label, src.split, "8bit_8000Hz")
        assert dst.path == tmp_path / "clean" / "8bit_8000Hz" / src.label / src.path.name


@pytest.mark.parametrize("kind, snr", [("random", 10.0), ("fan", 20.0)])
def test_degraded_snr(corpus, kind, snr):
    manifest, _ = corpus
    profile = EncodingProfile(16, 16000)
    for e in manifest.entries[:6]:
        src = read_wav(e.path)
        clean, _ = degrade_buffer(src, profile, NoiseCondition("clean"))
        noisy, clipped = degrade_buffer(src, profile, NoiseCondition(kind, snr, seed=4), key=7)
        assert clipped == 0
        assert abs(snr_db(clean.samples, noisy.samples) - snr) < 0.5


def test_degradation_reproducible(corpus, tmp_path):
    manifest, _ = corpus
    cond = NoiseCondition("random", 10.0, seed=2)
    degrade_corpus(manifest, EncodingProfile(16, 16000), cond, tmp_path / "a")
    degrade_corpus(manifest, EncodingProfile(16, 16000), cond, tmp_path / "b")
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_recorded_noise_file(corpus, tmp_path):
    manifest, _ = corpus
    path = tmp_path / "fan.wav"
    write_wav(builtin_noise("fan", 2.0, 44100, 9), 16, path)
    cond = NoiseCondition("fan", 15.0, str(path), seed=1)
    src = read_wav(manifest.entries[0].path)
    clean, _ = degrade_buffer(src, EncodingProfile(16, 16000), NoiseCondition("clean"))
    noisy, _ = degrade_buffer(src, EncodingProfile(16, 16000), cond, key=3)
    assert abs(snr_db(clean.samples, noisy.samples) - 15.0) < 0.5


# -- built-in noise -------------------------------------------------------------------

def band_power(x, rate, lo, hi):
    f, p = signal.welch(x, rate, nperseg=1024, noverlap=0)  # averages len(x)/1024 segments
    sel = (f >= lo) & (f < hi)
    return p[sel].mean()


def test_noise_deterministic_and_scaled():
    a = builtin_noise("random", 1.0, 16000, 5)
    np.testing.assert_array_equal(a.samples, builtin_noise("random", 1.0, 16000, 5).samples)
    assert not np.array_equal(a.samples, builtin_noise("random", 1.0, 16000, 6).samples)
    assert a.rms() == pytest.approx(NOISE_RMS, rel=1e-9)
    assert builtin_noise("fan", 1.0, 16000, 5).rms() <= NOISE_RMS + 1e-12
    with pytest.raises(ValueError):
        builtin_noise("babble", 1.0, 16000, 0)


@pytest.mark.parametrize("rate", [16000, 48000])
def test_random_noise_is_flat(rate):
    x = builtin_noise("random", 102400 / rate, rate, 11).samples  # 100 frames of 1024
    edges = [100.0]
    while edges[-1] * 2 <= rate / 4:
        edges.append(edges[-1] * 2)
    powers = [band_power(x, rate, lo, hi) for lo, hi in zip(edges, edges[1:])]
    ref = np.mean(powers)
    assert all(abs(10 * np.log10(p / ref)) <= 3.0 for p in powers)


@pytest.mark.parametrize("rate", [16000, 48000])
def test_fan_noise_is_low_heavy(rate):
    x = builtin_noise("fan", 3.0, rate, 12).samples
    low = band_power(x, rate, 0, 500)
    high = band_power(x, rate, 2000, 4000)
    assert 10 * np.log10(low / high) >= 10.0


def test_noise_tracks_rate():
    x = builtin_noise("fan", 0.5, 48000, 1)
    assert x.sample_rate == 48000 and len(x) == 24000
    y = resample(x, 8000)
    assert len(y) == 4000
