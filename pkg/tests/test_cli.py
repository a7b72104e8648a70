import csv
import json

import pytest

from digitrec.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-corpus", "--seed", "2", "--out", str(root / "corpus"),
                 "--train-per-digit", "4", "--test-per-digit", "2"]) == 0
    manifest = root / "corpus" / "manifest.jsonl"
    assert main(["extract", "--manifest", str(manifest), "--feature", "mfcc", "--out", str(root / "feats")]) == 0
    assert main(["train", "--features", str(root / "feats"), "--manifest", str(manifest), "--states", "3",
                 "--iterations", "5", "--out", str(root / "models")]) == 0
    return root, manifest


def test_pipeline_outputs(pipeline, capsys):
    root, manifest = pipeline
    assert len(list((root / "models").glob("*.dhm"))) == 10
    sidecar = json.loads((root / "feats" / "feature_config.json").read_text())
    assert sidecar["kind"] == "mfcc" and sidecar["include_deltas"] == 2
    code, out, _ = run(capsys, "recognize", "--models", root / "models", "--features", root / "feats",
                       "--manifest", manifest, "--report", root / "res.csv")
    assert code == 0 and out.startswith("accuracy ")
    with open(root / "res.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and set(rows[0]) == {"path", "reference", "hypothesis", "log_likelihood"}
    code, out, _ = run(capsys, "score", "--results", root / "res.csv")
    assert code == 0 and "WER " in out


def test_degrade_subcommand(pipeline, tmp_path, capsys):
    _, manifest = pipeline
    code, out, _ = run(capsys, "degrade", "--manifest", manifest, "--profile", "8bit_8000Hz",
                       "--condition", "fan", "--snr", "20", "--seed", "1", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "manifest_fan_8bit_8000Hz.jsonl").exists()
    assert len(list((tmp_path / "fan" / "8bit_8000Hz").rglob("*.wav"))) == 60
    code, _, err = run(capsys, "degrade", "--manifest", manifest, "--profile", "8bit_8000Hz",
                       "--condition", "fan", "--out", tmp_path)
    assert code == 1 and err.startswith("error: ConfigError:")


def test_score_ref_hyp(tmp_path, capsys):
    (tmp_path / "ref").write_text("one two three\n")
    (tmp_path / "hyp").write_text("one tree three\n")
    code, out, _ = run(capsys, "score", "--ref", tmp_path / "ref", "--hyp", tmp_path / "hyp")
    assert code == 0
    assert "WER 0.3333" in out.split("\n")


def test_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["extract", "--manifest", "m", "--feature", "cepstrum", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--feature" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["score", "--ref", "r"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--out", str(tmp_path), "--threads", "0"])
    assert exc.value.code == 2 and "--threads" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_runtime_errors_are_one_line(tmp_path, capsys, pipeline):
    root, manifest = pipeline
    code, _, err = run(capsys, "train", "--features", tmp_path, "--manifest", manifest, "--out", tmp_path)
    assert code == 1 and err.count("\n") == 1 and err.startswith("error: IoFailure:")
    code, _, err = run(capsys, "recognize", "--models", tmp_path, "--features", root / "feats",
                       "--manifest", manifest, "--report", tmp_path / "r.csv")
    assert code == 1 and err.startswith("error: EmptyTrainingSet:")
    (tmp_path / "bad.toml").write_text("num_filters = 'x'\n")
    code, _, err = run(capsys, "extract", "--manifest", manifest, "--feature", "lpc", "--config",
                       tmp_path / "bad.toml", "--out", tmp_path / "f")
    assert code == 1 and err.startswith("error: ")


def test_signature_mismatch_reported(pipeline, tmp_path, capsys):
    root, manifest = pipeline
    assert main(["extract", "--manifest", str(manifest), "--feature", "plp", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code, _, err = run(capsys, "recognize", "--models", root / "models", "--features", tmp_path,
                       "--manifest", manifest, "--report", tmp_path / "r.csv")
    assert code == 1 and err.startswith("error: SignatureMismatch:")


def test_bench_small_grid(tmp_path, capsys):
    cfg = tmp_path / "grid.toml"
    cfg.write_text('profiles = ["16bit_16000Hz"]\nfeatures = ["mfcc"]\n'
                   '[[conditions]]\nkind = "clean"\n[[conditions]]\nkind = "fan"\nsnr_db = 20.0\n'
                   '[[conditions]]\nkind = "random"\nsnr_db = 10.0\n'
                   '[hmm]\nnum_states = 3\nmax_iters = 3\n[corpus]\ntrain_per_digit = 3\ntest_per_digit = 1\n')
    code, out, _ = run(capsys, "bench", "--config", cfg, "--out", tmp_path / "out", "--seed", 1)
    assert code == 0 and "ranking: MFCC" in out
    tables = sorted(p.name for p in (tmp_path / "out").glob("table_*.txt"))
    assert tables == ["table_clean.txt", "table_fan.txt", "table_random.txt"]
    assert len(list((tmp_path / "out").glob("plot_*.csv"))) == 3
    assert (tmp_path / "out" / "results_long.csv").exists()
