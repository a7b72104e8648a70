"""Left-to-right diagonal-covariance GMM-HMMs for isolated word recognition.

State indexing follows the usual convention: transition matrices are
(N+2) x (N+2) with a non-emitting entry state 0 and exit state N+1; emitting
states are 1..N. Emission parameters are indexed 0..N-1. All probability math is
in the natural-log domain.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import atomic_write_bytes
from .errors import (CorruptModel, DimMismatch, EmptyObservation, EmptyTrainingSet, IoFailure,
                     NoLegalPath, SignatureMismatch, VersionMismatch)
from .features import FeatureMatrix

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureSignature:
    kind: str
    dim: int
    config_hash: str = ""

    @classmethod
    def of(cls, features: FeatureMatrix) -> "FeatureSignature":
        h = features.config.config_hash() if features.config is not None else ""
        return cls(features.kind.value, features.dim, h)

    def accepts(self, other: "FeatureSignature") -> bool:
        if (self.kind, self.dim) != (other.kind, other.dim):
            return False
        return not (self.config_hash and other.config_hash and self.config_hash != other.config_hash)


@dataclass(eq=False)
class HmmModel:
    word_label: str
    transitions: np.ndarray      # (N+2, N+2)
    weights: np.ndarray          # (N, M)
    means: np.ndarray            # (N, M, D)
    variances: np.ndarray        # (N, M, D)
    signature: FeatureSignature
    variance_floor: np.ndarray   # (D,)

    @property
    def num_states(self) -> int:
        return self.weights.shape[0]

    @property
    def num_mixtures(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def copy(self) -> "HmmModel":
        return HmmModel(self.word_label, self.transitions.copy(), self.weights.copy(), self.means.copy(),
                        self.variances.copy(), self.signature, self.variance_floor.copy())

    def relabel(self, label: str) -> "HmmModel":
        m = self.copy()
        m.word_label = label
        return m

    def check(self, atol: float = 1e-9) -> None:
        """Assert the structural invariants; raises ValueError."""
        N = self.num_states
        A = self.transitions
        if A.shape != (N + 2, N + 2):
            raise ValueError("transition matrix shape mismatch")
        if not np.allclose(A.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("transition rows must sum to 1")
        allowed = left_to_right_mask(N)
        if np.any(A[~allowed] != 0.0):
            raise ValueError("transition outside the left-to-right topology")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances < self.variance_floor - 1e-300):
            raise ValueError("variance below floor")


@dataclass
class WordModelSet:
    models: dict[str, HmmModel]

    def __post_init__(self):
        if not self.models:
            raise EmptyTrainingSet("a word model set needs at least one model")
        sigs = {m.signature for m in self.models.values()}
        if len({(s.kind, s.dim, s.config_hash) for s in sigs}) != 1:
            raise SignatureMismatch("all word models must share one feature signature")
        for label, m in self.models.items():
            if m.word_label != label:
                raise ValueError(f"model keyed {label!r} is labelled {m.word_label!r}")

    @property
    def signature(self) -> FeatureSignature:
        return next(iter(self.models.values())).signature

    @property
    def labels(self) -> list[str]:
        return sorted(self.models)


@dataclass
class TrainResult:
    model: HmmModel
    trace: list[float]
    degenerate_states: set[int] = field(default_factory=set)


# -- topology -------------------------------------------------------------------------

def left_to_right_mask(num_states: int) -> np.ndarray:
    N = num_states
    mask = np.zeros((N + 2, N + 2), dtype=bool)
    mask[0, 1] = True
    for i in range(1, N + 1):
        mask[i, i] = True
        mask[i, i + 1] = True
    mask[N + 1, N + 1] = True  # absorbing exit keeps every row stochastic
    return mask


def uniform_transitions(num_states: int) -> np.ndarray:
    mask = left_to_right_mask(num_states)
    A = mask.astype(np.float64)
    return A / A.sum(axis=1, keepdims=True)


# -- numerics -------------------------------------------------------------------------

def logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def component_log_densities(model: HmmModel, X: np.ndarray) -> np.ndarray:
    """log(w_m N(x_t; mu_jm, var_jm)) as a (..., N, M) array for X of shape (..., D)."""
    X = np.asarray(X, dtype=np.float64)
    N, M, D = model.means.shape
    # expanded quadratic form as matrix products; centering first limits cancellation
    center = model.means.reshape(-1, D).mean(axis=0)
    mu = (model.means - center).reshape(-1, D)
    prec = 1.0 / model.variances.reshape(-1, D)
    Xc = X.reshape(-1, D) - center
    quad = (Xc * Xc) @ prec.T - 2.0 * Xc @ (mu * prec).T + np.sum(mu * mu * prec, axis=-1)
    quad = np.maximum(quad, 0.0).reshape(X.shape[:-1] + (N, M))
    norm = np.sum(np.log(model.variances), axis=-1) + model.dim * LOG_2PI
    return _log(model.weights) - 0.5 * (norm + quad)


def state_log_densities(model: HmmModel, X: np.ndarray) -> np.ndarray:
    return _mix(component_log_densities(model, X))


def _mix(comp: np.ndarray) -> np.ndarray:
    return comp[..., 0] if comp.shape[-1] == 1 else logsumexp(comp, axis=-1)


def _split_transitions(model: HmmModel):
    logA = _log(model.transitions)
    N = model.num_states
    return logA[0, 1:N + 1], logA[1:N + 1, 1:N + 1], logA[1:N + 1, N + 1]


def _check(model: HmmModel, features: FeatureMatrix) -> np.ndarray:
    if not model.signature.accepts(FeatureSignature.of(features)):
        raise SignatureMismatch(
            f"model {model.word_label!r} expects {model.signature}, got {FeatureSignature.of(features)}")
    if len(features) == 0:
        raise EmptyObservation("observation sequence has no frames")
    return features.rows


def _pad(seqs: list[np.ndarray]):
    lengths = np.array([s.shape[0] for s in seqs])
    D = seqs[0].shape[1]
    X = np.zeros((len(seqs), int(lengths.max()), D))
    for b, s in enumerate(seqs):
        X[b, : s.shape[0]] = s
    return X, lengths


def _band(logA):
    """(self-loop, advance) log-probabilities when logA is upper bidiagonal, else None."""
    N = logA.shape[0]
    off = np.triu(np.ones((N, N), dtype=bool), 2) | np.tril(np.ones((N, N), dtype=bool), -1)
    if np.any(np.isfinite(logA[off])):
        return None
    return np.diag(logA).copy(), np.append(np.diag(logA, 1), -np.inf)


def _forward(log_pi, logA, log_exit, logb, lengths):
    """Batched forward pass. logb: (B, T, N). Returns (alpha (B,T,N), loglik (B,))."""
    B, T, N = logb.shape
    alpha = np.full((B, T, N), -np.inf)
    alpha[:, 0] = log_pi + logb[:, 0]
    band = _band(logA)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        if band is None:
            alpha[:, t] = logsumexp(prev[:, :, None] + logA, axis=1) + logb[:, t]
        else:
            stay, adv = band
            moved = np.full((B, N), -np.inf)
            moved[:, 1:] = prev[:, :-1] + adv[:-1]
            alpha[:, t] = np.logaddexp(prev + stay, moved) + logb[:, t]
    last = alpha[np.arange(B), lengths - 1]
    return alpha, logsumexp(last + log_exit, axis=1)


def _backward(logA, log_exit, logb, lengths):
    B, T, N = logb.shape
    beta = np.full((B, T, N), -np.inf)
    band = _band(logA)
    for t in range(T - 1, -1, -1):
        at_end = (lengths - 1) == t
        inner = lengths - 1 > t
        if np.any(inner):
            nxt = logb[:, t + 1] + beta[:, t + 1] if t + 1 < T else np.zeros((B, N))
            if band is None:
                rec = logsumexp(logA + nxt[:, None, :], axis=2)
            else:
                stay, adv = band
                ahead = np.full((B, N), -np.inf)
                ahead[:, :-1] = nxt[:, 1:]
                rec = np.logaddexp(stay + nxt, adv + ahead)
            beta[inner, t] = rec[inner]
        beta[at_end, t] = log_exit
    return beta


def log_likelihood(model: HmmModel, features: FeatureMatrix) -> float:
    """Total log-probability over all state paths (forward algorithm)."""
    X = _check(model, features)
    return float(log_likelihood_batch(model, [X])[0])


def log_likelihood_batch(model: HmmModel, seqs: list[np.ndarray]) -> np.ndarray:
    X, lengths = _pad([np.asarray(s, float) for s in seqs])
    log_pi, logA, log_exit = _split_transitions(model)
    logb = state_log_densities(model, X)
    _, ll = _forward(log_pi, logA, log_exit, logb, lengths)
    return ll


def viterbi(model: HmmModel, features: FeatureMatrix):
    """Best state path (emitting indices 0..N-1) and its log-probability."""
    X = _check(model, features)
    T = X.shape[0]
    log_pi, logA, log_exit = _split_transitions(model)
    logb = state_log_densities(model, X)
    N = model.num_states
    delta = log_pi + logb[0]
    back = np.zeros((T, N), dtype=np.intp)
    for t in range(1, T):
        scores = delta[:, None] + logA
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(N)] + logb[t]
    final = delta + log_exit
    best = int(np.argmax(final))
    score = float(final[best])
    if not np.isfinite(score):
        raise NoLegalPath(f"no path of {T} frames through {model.num_states} states reaches the exit")
    path = [best]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1], score


# -- training -------------------------------------------------------------------------

def _variance_floor(global_var: np.ndarray, ratio: float) -> np.ndarray:
    return np.maximum(ratio * global_var, 1e-12)


def flat_start(training_features, num_states: int = 5, num_mixtures: int = 1,
               variance_floor_ratio: float = 1e-4, label: str = "") -> HmmModel:
    """Every state gets the global mean and variance of the training frames."""
    feats = list(training_features)
    if not feats:
        raise EmptyTrainingSet("flat start needs at least one utterance")
    dims = {f.dim for f in feats}
    if len(dims) != 1:
        raise DimMismatch(f"training utterances have differing dims {sorted(dims)}")
    sigs = {FeatureSignature.of(f) for f in feats}
    if len(sigs) != 1:
        raise SignatureMismatch("training utterances come from different feature configurations")
    data = np.concatenate([f.rows for f in feats], axis=0)
    if data.shape[0] == 0:
        raise EmptyTrainingSet("training utterances contain no frames")
    mean = data.mean(axis=0)
    var = data.var(axis=0)
    floor = _variance_floor(var, variance_floor_ratio)
    var = np.maximum(var, floor)
    D = data.shape[1]
    offsets = np.linspace(-0.2, 0.2, num_mixtures) if num_mixtures > 1 else np.zeros(1)
    means = np.broadcast_to(mean + offsets[:, None] * np.sqrt(var), (num_states, num_mixtures, D)).copy()
    variances = np.broadcast_to(var, (num_states, num_mixtures, D)).copy()
    weights = np.full((num_states, num_mixtures), 1.0 / num_mixtures)
    return HmmModel(label, uniform_transitions(num_states), weights, means, variances,
                    sigs.pop(), floor)


def split_mixtures(model: HmmModel, perturb: float = 0.2) -> HmmModel:
    """Double every state's mixture count by splitting each component along +/- perturb * sigma."""
    sd = np.sqrt(model.variances)
    means = np.concatenate([model.means + perturb * sd, model.means - perturb * sd], axis=1)
    variances = np.concatenate([model.variances, model.variances], axis=1)
    weights = np.concatenate([model.weights, model.weights], axis=1) / 2.0
    return HmmModel(model.word_label, model.transitions.copy(), weights, means, variances,
                    model.signature, model.variance_floor.copy())


def _e_step(model: HmmModel, X, lengths):
    """Accumulate sufficient statistics over a padded batch."""
    B, T, D = X.shape
    N, M = model.num_states, model.num_mixtures
    log_pi, logA, log_exit = _split_transitions(model)
    comp = component_log_densities(model, X)              # (B, T, N, M)
    logb = _mix(comp)                                     # (B, T, N)
    alpha, ll = _forward(log_pi, logA, log_exit, logb, lengths)
    beta = _backward(logA, log_exit, logb, lengths)
    valid = np.arange(T)[None, :] < lengths[:, None]      # (B, T)
    with np.errstate(invalid="ignore"):
        lgamma = alpha + beta - ll[:, None, None]
    gamma = np.where(valid[..., None], np.exp(lgamma), 0.0)
    gamma = np.nan_to_num(gamma, nan=0.0)
    # transitions between emitting states at t -> t+1
    with np.errstate(invalid="ignore"):
        lxi = (alpha[:, :-1, :, None] + logA + (logb[:, 1:] + beta[:, 1:])[:, :, None, :]
               - ll[:, None, None, None])
    step_valid = np.arange(T - 1)[None, :] < (lengths - 1)[:, None]
    xi = np.where(step_valid[..., None, None], np.nan_to_num(np.exp(lxi), nan=0.0), 0.0)
    with np.errstate(invalid="ignore"):
        comp_post = np.exp(comp - logb[..., None])        # (B, T, N, M)
    comp_post = np.nan_to_num(comp_post, nan=0.0)
    gm = gamma[..., None] * comp_post                     # (B, T, N, M)
    stats = {
        "ll": float(np.sum(ll)),
        "occ_state": gamma.sum(axis=(0, 1)),              # (N,)
        "entry": gamma[:, 0].sum(axis=0),                 # (N,)
        "exit": gamma[np.arange(B), lengths - 1].sum(axis=0),
        "xi": xi.sum(axis=(0, 1)),                        # (N, N)
        "occ_mix": gm.sum(axis=(0, 1)),                   # (N, M)
        "gm": gm,
        "X": X,
    }
    return stats


def _m_step(model: HmmModel, stats, min_occupancy: float) -> tuple[HmmModel, set[int]]:
    N, M = model.num_states, model.num_mixtures
    new = model.copy()
    occ = stats["occ_state"]
    degenerate = {int(j) for j in np.nonzero(occ < min_occupancy)[0]}
    total_entry = stats["entry"].sum()
    if total_entry > 0:
        new.transitions[0, 1:N + 1] = stats["entry"] / total_entry
    gm, X = stats["gm"], stats["X"]
    occ_mix = stats["occ_mix"]
    for j in range(N):
        if j in degenerate:
            continue
        row = np.zeros(N + 2)
        row[1:N + 1] = stats["xi"][j]
        row[N + 1] = stats["exit"][j]
        new.transitions[j + 1] = row / row.sum()
        new.weights[j] = occ_mix[j] / occ_mix[j].sum()
        for m in range(M):
            w = occ_mix[j, m]
            if w < min_occupancy:
                continue
            g = gm[:, :, j, m]
            mu = np.einsum("bt,btd->d", g, X) / w
            diff = X - mu
            var = np.einsum("bt,btd->d", g, diff * diff) / w
            new.means[j, m] = mu
            new.variances[j, m] = np.maximum(var, new.variance_floor)
    return new, degenerate


def baum_welch(model: HmmModel, training_features, max_iters: int = 20, tol: float = 1e-4,
               min_occupancy: float = 1e-3) -> TrainResult:
    """EM re-estimation of all parameters.

    ``trace[i]`` is the total training log-likelihood of the i-th model
    (trace[0] is the input model). Stops after ``max_iters`` updates or once an
    update improves the log-likelihood by less than ``tol``. States whose
    occupancy falls below ``min_occupancy`` keep their parameters (logged).
    """
    feats = list(training_features)
    if not feats:
        raise EmptyTrainingSet("Baum-Welch needs at least one utterance")
    seqs = [_check(model, f) for f in feats]
    usable = [s for s in seqs if s.shape[0] >= model.num_states]
    if len(usable) < len(seqs):
        log.warning("model %r: %d utterances shorter than %d frames skipped",
                    model.word_label, len(seqs) - len(usable), model.num_states)
    if not usable:
        raise EmptyTrainingSet("no training utterance is long enough to traverse the model")
    X, lengths = _pad(usable)
    current = model
    stats = _e_step(current, X, lengths)
    trace = [stats["ll"]]
    degenerate_all: set[int] = set()
    for _ in range(max_iters):
        candidate, degenerate = _m_step(current, stats, min_occupancy)
        if degenerate:
            log.warning("model %r: degenerate states %s held fixed", model.word_label, sorted(degenerate))
            degenerate_all |= degenerate
        new_stats = _e_step(candidate, X, lengths)
        improvement = new_stats["ll"] - trace[-1]
        current, stats = candidate, new_stats
        trace.append(stats["ll"])
        if improvement < tol:
            break
    return TrainResult(current, trace, degenerate_all)


def train_word_model(label: str, training_features, num_states: int = 5, num_mixtures: int = 1,
                     max_iters: int = 20, tol: float = 1e-4, variance_floor_ratio: float = 1e-4):
    """Flat start, Baum-Welch, then binary mixture splitting up to ``num_mixtures``."""
    feats = list(training_features)
    model = flat_start(feats, num_states, 1, variance_floor_ratio, label)
    result = baum_welch(model, feats, max_iters, tol)
    traces = [result.trace]
    while result.model.num_mixtures < num_mixtures:
        split = split_mixtures(result.model)
        if split.num_mixtures > num_mixtures:
            # trim to the requested count, renormalizing the weights
            split.weights = split.weights[:, :num_mixtures] / split.weights[:, :num_mixtures].sum(1, keepdims=True)
            split.means = split.means[:, :num_mixtures].copy()
            split.variances = split.variances[:, :num_mixtures].copy()
        result = baum_welch(split, feats, max_iters, tol)
        traces.append(result.trace)
    return result.model, traces


# -- recognition ----------------------------------------------------------------------

def recognize(models: WordModelSet, features: FeatureMatrix):
    """Maximum-likelihood word; exact ties go to the lexicographically first label."""
    scores = {}
    for label in models.labels:
        scores[label] = log_likelihood(models.models[label], features)
    return _argmax(scores), scores


def _argmax(scores: dict[str, float]) -> str:
    best, best_score = None, -np.inf
    for label in sorted(scores):
        if best is None or scores[label] > best_score:
            best, best_score = label, scores[label]
    if not np.isfinite(best_score):
        raise NoLegalPath("no model can explain the utterance")
    return best


def recognize_batch(models: WordModelSet, features: list[FeatureMatrix]):
    """Recognize many utterances; a None winner marks an undecodable utterance."""
    if not features:
        return [], []
    seqs = [_check(models.models[models.labels[0]], f) for f in features]
    table = {label: log_likelihood_batch(models.models[label], seqs) for label in models.labels}
    winners, all_scores = [], []
    for i in range(len(seqs)):
        s = {label: float(table[label][i]) for label in models.labels}
        try:
            winners.append(_argmax(s))
        except NoLegalPath:
            winners.append(None)
        all_scores.append(s)
    return winners, all_scores


def sample_sequence(model: HmmModel, rng: np.random.Generator, max_frames: int = 10_000):
    """Draw (observations, state path) from the model's generative process."""
    N = model.num_states
    A = model.transitions
    state = rng.choice(N + 2, p=A[0])
    obs, path = [], []
    while state != N + 1 and len(obs) < max_frames:
        j = state - 1
        m = rng.choice(model.num_mixtures, p=model.weights[j])
        obs.append(model.means[j, m] + np.sqrt(model.variances[j, m]) * rng.standard_normal(model.dim))
        path.append(j)
        state = rng.choice(N + 2, p=A[state])
    return np.array(obs), path


# -- model files ----------------------------------------------------------------------

_MAGIC = b"DHM1"


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_model(model: HmmModel) -> bytes:
    sig = model.signature
    parts = [
        _MAGIC, struct.pack("<H", MODEL_VERSION),
        _pack_str(model.word_label),
        _pack_str(sig.kind), struct.pack("<I", sig.dim), _pack_str(sig.config_hash),
        struct.pack("<III", model.num_states, model.num_mixtures, model.dim),
    ]
    for arr in (model.transitions, model.weights, model.means, model.variances, model.variance_floor):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptModel(f"{self.source}: truncated model file")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptModel(f"{self.source}: bad string") from exc

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def decode_model(data: bytes, source: str = "<bytes>") -> HmmModel:
    r = _Reader(data, source)
    if r.take(4) != _MAGIC:
        raise CorruptModel(f"{source}: bad magic")
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{source}: model format version {version}, this build reads {MODEL_VERSION}")
    label = r.string()
    kind = r.string()
    (sig_dim,) = r.unpack("<I")
    chash = r.string()
    N, M, D = r.unpack("<III")
    if sig_dim != D:
        raise CorruptModel(f"{source}: signature dim {sig_dim} != parameter dim {D}")
    A = r.floats((N + 2, N + 2))
    w = r.floats((N, M))
    mu = r.floats((N, M, D))
    var = r.floats((N, M, D))
    floor = r.floats((D,))
    if r.pos != len(data):
        raise CorruptModel(f"{source}: {len(data) - r.pos} trailing bytes")
    return HmmModel(label, A, w, mu, var, FeatureSignature(kind, D, chash), floor)


def save_model(model: HmmModel, path) -> None:
    atomic_write_bytes(path, encode_model(model))


def load_model(path) -> HmmModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_model(data, str(path))


def save_model_set(models: WordModelSet, directory) -> None:
    d = Path(directory)
    for label in models.labels:
        save_model(models.models[label], d / f"{label}.dhm")


def load_model_set(directory) -> WordModelSet:
    paths = sorted(Path(directory).glob("*.dhm"))
    models = {}
    for p in paths:
        m = load_model(p)
        models[m.word_label] = m
    return WordModelSet(models)
