"""Grid runner over (noise condition, encoding profile, feature kind) and its reports."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .audio_io import GRID_PROFILES, MASTER_PROFILE, EncodingProfile, NoiseCondition, atomic_write_bytes, \
    profile_from_label, read_wav
from .corpus import SynthSpec, degrade_buffer, entry_key, generate_synthetic_corpus, read_manifest, \
    synthetic_tokens, ManifestEntry
from .errors import ConfigError, EmptyReport
from .features import FeatureConfig, FeatureKind, extract, extract_many
from .frontend import FrameConfig
from .hmm import WordModelSet, recognize_batch, train_word_model
from .scoring import CORRECT, DIGITS, EvalReport, tabulate

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

THREADS_ENV = "DIGITREC_THREADS"


@dataclass(frozen=True)
class HmmConfig:
    num_states: int = 5
    num_mixtures: int = 1
    max_iters: int = 20
    tol: float = 1e-4
    variance_floor_ratio: float = 1e-4


def default_conditions() -> list[NoiseCondition]:
    return [NoiseCondition("clean"), NoiseCondition("fan", 20.0), NoiseCondition("random", 10.0)]


def default_features(frame: FrameConfig | None = None) -> list[FeatureConfig]:
    frame = frame or FrameConfig()
    return [FeatureConfig(kind=k, frame=frame) for k in FeatureKind]


@dataclass
class GridConfig:
    profiles: list[EncodingProfile] = field(default_factory=lambda: list(GRID_PROFILES))
    conditions: list[NoiseCondition] = field(default_factory=default_conditions)
    features: list[FeatureConfig] = field(default_factory=default_features)
    hmm: HmmConfig = field(default_factory=HmmConfig)
    seed: int = 0
    corpus_manifest: str | None = None      # None -> seeded synthetic corpus
    train_per_digit: int = 20
    test_per_digit: int = 10
    train_condition: str = "clean"
    table_profile: str = MASTER_PROFILE.label
    verdict_threshold: float = 0.5
    workers: int | None = None
    write_corpus: bool = False

    def __post_init__(self):
        for name in ("profiles", "conditions", "features"):
            if not getattr(self, name):
                raise ConfigError(f"grid needs at least one entry in '{name}'")
        kinds = [c.kind for c in self.conditions]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("noise conditions must be distinct")
        if self.train_condition not in {"clean", *kinds}:
            raise ConfigError(f"train_condition {self.train_condition!r} is not a configured condition")

    def condition(self, kind: str) -> NoiseCondition:
        for c in self.conditions:
            if c.kind == kind:
                return c
        return NoiseCondition(kind)


def load_grid_config(path, overrides: dict | None = None) -> GridConfig:
    """Read a TOML grid description; ``overrides`` replaces top-level keys."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return grid_config_from_dict(doc, overrides, base=Path(path).parent)


def grid_config_from_dict(doc: dict, overrides: dict | None = None, base=None) -> GridConfig:
    doc = dict(doc)
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = Path(base) if base is not None else Path.cwd()
    kw = {}
    try:
        frame = FrameConfig(**doc.get("frame", {}))
        if "profiles" in doc:
            kw["profiles"] = [profile_from_label(p) if isinstance(p, str)
                              else EncodingProfile(int(p["bit_depth"]), int(p["sample_rate"]), p.get("label", ""))
                              for p in doc["profiles"]]
        if "conditions" in doc:
            conds = []
            for c in doc["conditions"]:
                c = {"kind": c} if isinstance(c, str) else dict(c)
                noise = c.get("noise_wav") or None
                if noise and not Path(noise).is_absolute():
                    noise = str(base / noise)
                snr = c.get("snr_db", math.inf)
                conds.append(NoiseCondition(c["kind"], float(snr), noise, int(c.get("seed", doc.get("seed", 0)))))
            kw["conditions"] = conds
        else:
            kw["conditions"] = [dataclasses.replace(c, seed=int(doc.get("seed", 0))) for c in default_conditions()]
        if "features" in doc:
            feats = []
            for f in doc["features"]:
                f = {"kind": f} if isinstance(f, str) else dict(f)
                feats.append(FeatureConfig(frame=frame, **f))
            kw["features"] = feats
        else:
            kw["features"] = default_features(frame)
        if "hmm" in doc:
            kw["hmm"] = HmmConfig(**doc["hmm"])
        corpus = doc.get("corpus", {})
        if corpus.get("manifest"):
            m = Path(corpus["manifest"])
            kw["corpus_manifest"] = str(m if m.is_absolute() else base / m)
        for key in ("train_per_digit", "test_per_digit", "write_corpus"):
            if key in corpus:
                kw[key] = corpus[key]
        for key in ("seed", "train_condition", "table_profile", "verdict_threshold", "workers"):
            if key in doc:
                kw[key] = doc[key]
        return GridConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad grid config: {exc}") from exc


# -- running --------------------------------------------------------------------------

@dataclass
class CellResult:
    condition: str
    profile: str
    feature: str
    report: EvalReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class GridReport:
    cells: dict[tuple[str, str, str], CellResult]
    conditions: list[str]
    profiles: list[str]
    features: list[str]
    table_profile: str

    @property
    def ranking(self) -> list[str]:
        """Feature kinds by mean Percentage (then mean accuracy) over completed cells."""
        def key(feature):
            done = [c.report for c in self.cells.values() if c.feature == feature and c.ok]
            if not done:
                return (math.inf, math.inf, self.features.index(feature))
            pct = sum(r.percentage for r in done) / len(done)
            acc = sum(r.accuracy_pct for r in done) / len(done)
            return (-pct, -acc, self.features.index(feature))
        return sorted(self.features, key=key)


def _master_utterances(config: GridConfig):
    """(entry, AudioBuffer) pairs of the master corpus, in manifest order."""
    if config.corpus_manifest:
        manifest = read_manifest(config.corpus_manifest)
        return [(e, read_wav(e.path)) for e in manifest.entries]
    spec = SynthSpec(seed=config.seed, tokens_per_digit_train=config.train_per_digit,
                     tokens_per_digit_test=config.test_per_digit)
    out = []
    for digit, split, i, speaker, buf in synthetic_tokens(spec):
        entry = ManifestEntry(Path(digit) / f"{split}_{i:03d}.wav", digit, speaker, split)
        out.append((entry, buf))
    return out


def _run_profile(config: GridConfig, profile: EncodingProfile, utterances) -> list[CellResult]:
    """All cells of one encoding profile; models are trained once per feature kind."""
    cells = []
    train = [(e, b) for e, b in utterances if e.split == "train"]
    test = [(e, b) for e, b in utterances if e.split == "test"]

    def audio(cond_kind, items):
        cond = config.condition(cond_kind)
        return [degrade_buffer(b, profile, cond, _noise_key(config.seed, e))[0] for e, b in items]

    try:
        train_audio = audio(config.train_condition, train)
    except Exception as exc:  # a broken profile fails its own cells only
        msg = _describe(exc)
        return [CellResult(c.kind, profile.label, f.kind.value, error=msg)
                for f in config.features for c in config.conditions]

    train_feats = _extract_all(train_audio, config.features)
    models_by_kind = {}
    for fcfg in config.features:
        kind = fcfg.kind.value
        try:
            feats = train_feats[kind]
            if isinstance(feats, Exception):
                raise feats
            by_digit: dict[str, list] = {}
            for (e, _), f in zip(train, feats):
                by_digit.setdefault(e.label, []).append(f)
            models_by_kind[kind] = WordModelSet({
                label: train_word_model(label, fs, config.hmm.num_states, config.hmm.num_mixtures,
                                        config.hmm.max_iters, config.hmm.tol,
                                        config.hmm.variance_floor_ratio)[0]
                for label, fs in sorted(by_digit.items())})
        except Exception as exc:
            models_by_kind[kind] = _describe(exc)
    del train_feats

    truth = [e.label for e, _ in test]
    for cond in config.conditions:
        try:
            test_feats = _extract_all(audio(cond.kind, test), config.features)
        except Exception as exc:
            msg = _describe(exc)
            test_feats = {f.kind.value: RuntimeError(msg) for f in config.features}
        for fcfg in config.features:
            kind = fcfg.kind.value
            models = models_by_kind[kind]
            if isinstance(models, str):
                cells.append(CellResult(cond.kind, profile.label, kind, error=models))
                continue
            try:
                feats = test_feats[kind]
                if isinstance(feats, Exception):
                    raise feats
                winners, _ = recognize_batch(models, feats)
                vocab = [d for d in DIGITS if d in models.models] + \
                    sorted(set(models.models) - set(DIGITS))
                report = tabulate(zip(truth, winners), config.verdict_threshold, vocab)
                cells.append(CellResult(cond.kind, profile.label, kind, report))
            except Exception as exc:
                cells.append(CellResult(cond.kind, profile.label, kind, error=_describe(exc)))
    return cells


def _extract_all(buffers, configs) -> dict:
    """Feature lists per kind; spectra are shared across kinds. A failing kind maps to its exception."""
    out: dict = {}
    try:
        per_buf = [extract_many(b, configs) for b in buffers]
        for i, cfg in enumerate(configs):
            out[cfg.kind.value] = [fs[i] for fs in per_buf]
        return out
    except Exception:
        pass
    for cfg in configs:
        try:
            out[cfg.kind.value] = [extract(b, cfg) for b in buffers]
        except Exception as exc:
            out[cfg.kind.value] = exc
    return out


def _noise_key(seed: int, entry) -> int:
    return (entry_key(entry) + 1_000_003 * seed) % (1 << 32)


def _describe(exc: Exception) -> str:
    log.debug("cell failed:\n%s", traceback.format_exc())
    return f"{type(exc).__name__}: {exc}"


def _profile_job(args):
    config, profile, utterances = args
    return _run_profile(config, profile, utterances)


def resolve_workers(config: GridConfig, override: int | None = None) -> int:
    if override:
        return max(1, int(override))
    if config.workers:
        return max(1, int(config.workers))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def run_grid(config: GridConfig, out_dir=None, workers: int | None = None) -> GridReport:
    """Train and test every (condition, profile, feature) cell.

    Results do not depend on the worker count: each profile is an independent
    job and cells are keyed, never order-reduced.
    """
    utterances = _master_utterances(config)
    if out_dir is not None and config.write_corpus and not config.corpus_manifest:
        generate_synthetic_corpus(SynthSpec(seed=config.seed, tokens_per_digit_train=config.train_per_digit,
                                            tokens_per_digit_test=config.test_per_digit),
                                  Path(out_dir) / "corpus")
    n = resolve_workers(config, workers)
    jobs = [(config, p, utterances) for p in config.profiles]
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
            results = list(pool.map(_profile_job, jobs))
    else:
        results = [_profile_job(j) for j in jobs]
    cells = {}
    for batch in results:
        for c in batch:
            cells[(c.condition, c.profile, c.feature)] = c
    labels = [p.label for p in config.profiles]
    table_profile = config.table_profile
    if table_profile not in labels:
        log.warning("table profile %s is not in the grid; tables use %s", table_profile, labels[-1])
        table_profile = labels[-1]
    return GridReport(cells, [c.kind for c in config.conditions], labels,
                      [f.kind.value for f in config.features], table_profile)


# -- reports --------------------------------------------------------------------------

def _csv(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


def condition_table(report: GridReport, condition: str, profile: str | None = None) -> str:
    """Digits as rows, feature kinds as columns, closing Percentage row."""
    profile = profile or report.table_profile
    header = ["Digit"] + [f.upper() for f in report.features]
    rows = [header]
    cells = [report.cells.get((condition, profile, f)) for f in report.features]
    for digit in DIGITS:
        row = [digit.capitalize()]
        for c in cells:
            if c is None or not c.ok:
                row.append("Failed")
            else:
                st = c.report.per_digit.get(digit)
                row.append(st.verdict if st is not None else "In-Correct")
        rows.append(row)
    pct = ["Percentage"]
    for c in cells:
        pct.append("Failed" if c is None or not c.ok else f"{_pct(c.report.percentage)}%")
    rows.append(pct)
    return "".join("\t".join(r) + "\n" for r in rows)


def _pct(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.1f}"


def emit_reports(report: GridReport, out_dir) -> list[Path]:
    """Write condition tables, the long CSV, plot-data CSVs, a summary and the ranking."""
    if not report.cells:
        raise EmptyReport("grid report has no cells")
    out = Path(out_dir)
    written = []

    def put(name, data: bytes):
        atomic_write_bytes(out / name, data)
        written.append(out / name)

    for cond in report.conditions:
        put(f"table_{cond}.txt", condition_table(report, cond).encode())

    long_rows = [["condition", "profile", "feature", "digit", "verdict", "trials", "correct", "rate", "status"]]
    summary = [["condition", "profile", "feature", "status", "S", "D", "I", "N", "wer",
                "accuracy_pct", "percentage", "error"]]
    for cond in report.conditions:
        for prof in report.profiles:
            for feat in report.features:
                c = report.cells.get((cond, prof, feat))
                if c is None:
                    continue
                if not c.ok:
                    long_rows.append([cond, prof, feat, "", "Failed", 0, 0, "", "failed"])
                    summary.append([cond, prof, feat, "failed", "", "", "", "", "", "", "", c.error])
                    continue
                r = c.report
                for digit, st in r.per_digit.items():
                    long_rows.append([cond, prof, feat, digit, st.verdict, st.trials, st.correct,
                                      f"{st.rate:.4f}", "ok"])
                summary.append([cond, prof, feat, "ok", r.S, r.D, r.I, r.N, f"{r.wer:.4f}",
                                f"{r.accuracy_pct:.2f}", _pct(r.percentage), ""])
    put("results_long.csv", _csv(long_rows))
    put("summary.csv", _csv(summary))

    for cond in report.conditions:
        rows = [["feature"] + report.profiles]
        for feat in report.features:
            row = [feat]
            for prof in report.profiles:
                c = report.cells.get((cond, prof, feat))
                row.append(f"{c.report.accuracy_pct:.2f}" if c is not None and c.ok else "")
            rows.append(row)
        put(f"plot_{cond}.csv", _csv(rows))

    ranking = report.ranking
    lines = ["# feature kinds by mean Percentage over completed cells (informational)\n",
             " > ".join(k.upper() for k in ranking) + "\n"]
    put("ranking.txt", "".join(lines).encode())
    return written


def percentage_from_table(text: str) -> dict[str, float]:
    """Recompute each column's Percentage from its verdict rows."""
    lines = [ln.split("\t") for ln in text.strip().splitlines()]
    header, body = lines[0], lines[1:-1]
    out = {}
    for j, name in enumerate(header[1:], 1):
        out[name] = 100.0 * sum(r[j] == CORRECT for r in body) / len(body)
    return out
