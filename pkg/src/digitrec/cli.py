"""Command-line entry point: ``digitrec <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure (one line on stderr of the
form ``error: <Kind>: <message>``) and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from .audio_io import NoiseCondition, atomic_write_bytes, profile_from_label, read_wav
from .corpus import SynthSpec, degrade_corpus, generate_synthetic_corpus, read_manifest
from .errors import ConfigError, DigitRecError, EmptyTrainingSet, IoFailure
from .features import FeatureConfig, FeatureKind, extract, read_features, write_features
from .frontend import FrameConfig
from .grid import emit_reports, grid_config_from_dict, load_grid_config, run_grid
from .hmm import WordModelSet, load_model_set, recognize_batch, save_model_set, train_word_model
from .scoring import DIGITS, score_sequences, tabulate, wer

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

FEATURE_CONFIG_NAME = "feature_config.json"


def _feature_path(root, entry) -> Path:
    return Path(root) / entry.split / entry.label / f"{Path(entry.path).stem}.dfe"


def load_feature_config(path, kind) -> FeatureConfig:
    """Feature settings from a TOML file: shared keys, a [frame] table, per-kind tables."""
    kind = FeatureKind.parse(kind)
    if path is None:
        return FeatureConfig(kind=kind)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    kinds = {k.value for k in FeatureKind}
    params = {k: v for k, v in doc.items() if k != "frame" and k not in kinds}
    params.update(doc.get(kind.value, {}))
    try:
        return FeatureConfig(kind=kind, frame=FrameConfig(**doc.get("frame", {})), **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _read_sidecar(features_dir) -> FeatureConfig:
    path = Path(features_dir) / FEATURE_CONFIG_NAME
    try:
        return FeatureConfig.from_dict(json.loads(path.read_text()))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _load_split(features_dir, manifest_path, split):
    fcfg = _read_sidecar(features_dir)
    entries = [e for e in read_manifest(manifest_path).entries if split is None or e.split == split]
    feats = [read_features(_feature_path(features_dir, e), fcfg.kind, fcfg) for e in entries]
    return entries, feats


# -- subcommands ----------------------------------------------------------------------

def cmd_synth_corpus(args) -> None:
    spec = SynthSpec(seed=args.seed, tokens_per_digit_train=args.train_per_digit,
                     tokens_per_digit_test=args.test_per_digit)
    manifest = generate_synthetic_corpus(spec, args.out)
    print(f"wrote {len(manifest)} utterances; manifest {Path(args.out) / 'manifest.jsonl'}")


def cmd_degrade(args) -> None:
    profile = profile_from_label(args.profile)
    snr = math.inf if args.condition == "clean" else args.snr
    if snr is None:
        raise ConfigError(f"condition {args.condition!r} needs --snr")
    condition = NoiseCondition(args.condition, snr, args.noise_wav, args.seed)
    manifest = read_manifest(args.manifest)
    out = degrade_corpus(manifest, profile, condition, args.out)
    name = f"manifest_{condition.kind}_{profile.label}.jsonl"
    print(f"wrote {len(out)} utterances; manifest {Path(args.out) / name}")


def cmd_extract(args) -> None:
    fcfg = load_feature_config(args.config, args.feature)
    manifest = read_manifest(args.manifest)
    for e in manifest.entries:
        write_features(extract(read_wav(e.path), fcfg), _feature_path(args.out, e))
    atomic_write_bytes(Path(args.out) / FEATURE_CONFIG_NAME,
                       (json.dumps(fcfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {len(manifest)} {fcfg.kind.value} feature files (dim {fcfg.dim}) under {args.out}")


def cmd_train(args) -> None:
    entries, feats = _load_split(args.features, args.manifest, args.split)
    if not entries:
        raise EmptyTrainingSet(f"no '{args.split}' utterances in {args.manifest}")
    by_label: dict[str, list] = {}
    for e, f in zip(entries, feats):
        by_label.setdefault(e.label, []).append(f)
    models = {}
    for label, fs in sorted(by_label.items()):
        model, traces = train_word_model(label, fs, args.states, args.mixtures, args.iterations, args.tol,
                                         args.variance_floor)
        models[label] = model
        print(f"{label}: {len(fs)} utterances, final log-likelihood {traces[-1][-1]:.3f}")
    save_model_set(WordModelSet(models), args.out)


def cmd_recognize(args) -> None:
    models = load_model_set(args.models)
    if not models.models:
        raise IoFailure(f"no models in {args.models}")
    entries, feats = _load_split(args.features, args.manifest, args.split)
    winners, scores = recognize_batch(models, feats)
    vocab = [d for d in DIGITS if d in models.models] + sorted(set(models.models) - set(DIGITS))
    report = tabulate(zip([e.label for e in entries], winners), vocabulary=vocab)
    rows = [["path", "reference", "hypothesis", "log_likelihood"]]
    for e, w, s in zip(entries, winners, scores):
        rows.append([str(e.path), e.label, w or "", "" if w is None else repr(s[w])])
    _write_csv(args.report, rows)
    print(f"accuracy {report.accuracy_pct:.2f}% WER {report.wer:.4f} ({len(entries)} utterances)")


def _read_lines(path) -> list[list[str]]:
    try:
        return [line.split() for line in Path(path).read_text().splitlines()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def cmd_score(args) -> None:
    if args.results:
        try:
            with open(args.results, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if rows and not {"reference", "hypothesis"} <= set(rows[0]):
            raise ConfigError(f"{args.results}: needs 'reference' and 'hypothesis' columns")
        refs = [r["reference"].split() for r in rows]
        hyps = [r["hypothesis"].split() for r in rows]
    else:
        refs, hyps = _read_lines(args.ref), _read_lines(args.hyp)
        if len(refs) != len(hyps):
            raise ConfigError(f"{len(refs)} reference lines but {len(hyps)} hypothesis lines")
    S, D, I, N = score_sequences(refs, hyps)
    print(f"S {S} D {D} I {I} N {N}")
    print(f"WER {wer(S, D, I, N):.4f}")


def cmd_bench(args) -> None:
    overrides = {"seed": args.seed, "train_condition": args.train_condition, "workers": args.threads}
    config = load_grid_config(args.config, overrides) if args.config else grid_config_from_dict({}, overrides)
    report = run_grid(config, args.out, args.threads)
    paths = emit_reports(report, args.out)
    failed = [c for c in report.cells.values() if not c.ok]
    for c in failed:
        print(f"failed cell {c.condition}/{c.profile}/{c.feature}: {c.error}", file=sys.stderr)
    print(f"{len(report.cells)} cells ({len(failed)} failed); {len(paths)} report files under {args.out}")
    print("ranking: " + " > ".join(k.upper() for k in report.ranking))


def _write_csv(path, rows) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="digitrec", description="Isolated-digit recognition experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-corpus", help="write the seeded synthetic digit corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--train-per-digit", type=int, default=20)
    s.add_argument("--test-per-digit", type=int, default=10)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("degrade", help="resample, add noise and requantize a corpus")
    s.add_argument("--manifest", required=True)
    s.add_argument("--profile", required=True, help="e.g. 16bit_44100Hz or compact_disc")
    s.add_argument("--condition", choices=["clean", "fan", "random"], default="clean")
    s.add_argument("--snr", type=float, help="signal-to-noise ratio in dB")
    s.add_argument("--noise-wav", help="recorded noise instead of the built-in generator")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("extract", help="compute feature files for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--feature", required=True, choices=[k.value for k in FeatureKind])
    s.add_argument("--config", help="feature settings (TOML)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train one HMM per word")
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--states", type=int, default=5)
    s.add_argument("--mixtures", type=int, default=1)
    s.add_argument("--iterations", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--variance-floor", type=float, default=1e-4, help="fraction of the global variance")
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("recognize", help="decode feature files with a model set")
    s.add_argument("--models", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--report", required=True, help="CSV of per-utterance results")
    s.set_defaults(func=cmd_recognize)

    s = sub.add_parser("score", help="WER of hypothesis word sequences")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--results", help="CSV with reference and hypothesis columns")
    g.add_argument("--ref", help="reference file, one utterance per line")
    s.add_argument("--hyp", help="hypothesis file, line-aligned with --ref")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("bench", help="run the condition x profile x feature grid")
    s.add_argument("--config", help="grid description (TOML)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, help="worker processes (overrides config and DIGITREC_THREADS)")
    s.add_argument("--train-condition")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "score" and args.ref and not args.hyp:
        parser.error("argument --hyp: required with --ref")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("argument --threads: must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DigitRecError as exc:
        _fail(exc.kind, exc)
        return 1
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, exc)
        return 1
    return 0


def _fail(kind: str, exc: Exception) -> None:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
