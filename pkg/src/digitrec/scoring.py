"""Word error rate, edit-distance alignment and per-digit verdict tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import EmptyResults, ZeroReference

DIGITS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "zero")

CORRECT = "Correct"
INCORRECT = "In-Correct"


def align(reference, hypothesis) -> tuple[int, int, int]:
    """Minimum-edit (S, D, I) with unit costs.

    Among equally cheap alignments the one with the most substitutions wins; since
    D - I is fixed by the lengths, this also fixes D and I. The DP minimizes the
    single integer W*(S+D+I) - S with W larger than any possible S.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    W = n + m + 1
    sub, gap = W - 1, W
    prev = [j * gap for j in range(m + 1)]
    for i in range(1, n + 1):
        r = ref[i - 1]
        cur = [i * gap]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if r == hyp[j - 1] else sub)
            other = min(cur[j - 1], prev[j]) + gap
            cur.append(best if best < other else other)
        prev = cur
    cost, neg_s = divmod(prev[m], W)
    # prev[m] = W*cost - S with 0 <= S < W
    S = (W - neg_s) % W
    cost += S > 0
    D = (cost - S + (n - m)) // 2
    I = cost - S - D
    return S, D, I


def wer(S: int, D: int, I: int, N: int) -> float:
    """(S + D + I) / N; may exceed 1 when insertions dominate."""
    if N < 1:
        raise ZeroReference("WER is undefined for an empty reference")
    return (S + D + I) / N


@dataclass
class DigitStats:
    trials: int = 0
    correct: int = 0
    verdict: str = INCORRECT

    @property
    def rate(self) -> float:
        return self.correct / self.trials if self.trials else 0.0


@dataclass
class EvalReport:
    S: int
    D: int
    I: int
    N: int
    per_digit: dict[str, DigitStats] = field(default_factory=dict)
    verdict_threshold: float = 0.5

    @property
    def wer(self) -> float:
        return wer(self.S, self.D, self.I, self.N)

    @property
    def accuracy_pct(self) -> float:
        """Per-sample accuracy: share of utterances recognized correctly."""
        trials = sum(d.trials for d in self.per_digit.values())
        correct = sum(d.correct for d in self.per_digit.values())
        return 100.0 * correct / trials if trials else 0.0

    @property
    def percentage(self) -> float:
        """Share of digits whose verdict is Correct, as in the per-digit tables."""
        if not self.per_digit:
            return 0.0
        good = sum(d.verdict == CORRECT for d in self.per_digit.values())
        return float(Fraction(100 * good, len(self.per_digit)))


def tabulate(results, verdict_threshold: float = 0.5, vocabulary=DIGITS) -> EvalReport:
    """Fold (true, predicted) pairs into an EvalReport.

    ``predicted`` may be None for an utterance the recognizer rejected; it counts
    as a deletion. A digit is Correct when its correct-rate reaches the threshold.
    """
    results = list(results)
    if not results:
        raise EmptyResults("no recognition results to tabulate")
    labels = list(vocabulary) + sorted({t for t, _ in results} - set(vocabulary))
    per = {label: DigitStats() for label in labels}
    S = D = I = 0
    for truth, pred in results:
        st = per[truth]
        st.trials += 1
        s, d, i = align([truth], [] if pred is None else [pred])
        S, D, I = S + s, D + d, I + i
        if pred == truth:
            st.correct += 1
    per = {k: v for k, v in per.items() if v.trials or k in vocabulary}
    for st in per.values():
        st.verdict = CORRECT if st.trials and st.rate >= verdict_threshold else INCORRECT
    return EvalReport(S, D, I, len(results), per, verdict_threshold)


def score_sequences(references, hypotheses):
    """Corpus-level (S, D, I, N) over paired word sequences."""
    S = D = I = N = 0
    for ref, hyp in zip(references, hypotheses, strict=True):
        s, d, i = align(ref, hyp)
        S, D, I, N = S + s, D + d, I + i, N + len(ref)
    return S, D, I, N


def report_csv(report: EvalReport, feature: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["digit", "feature", "verdict", "trials", "correct", "rate"])
    for digit, st in report.per_digit.items():
        w.writerow([digit, feature, st.verdict, st.trials, st.correct, f"{st.rate:.4f}"])
    return buf.getvalue()
