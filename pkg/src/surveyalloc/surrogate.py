"""Surrogate paired survey dataset.

Builds a 68-question, 1271-respondent table of (human, LLM) answers on
[0, 1] whose per-question rectification difficulties follow a fixed target
profile: range 0.024 to 0.239, CV about 0.63, and 26 questions (38%) where
the LLM column carries no usable signal (clipped coefficient exactly 0).

Each question uses a k-level response scale (k = 3, 5 or 7), either
symmetric or, for about half the low-variance questions, piled on one end
with a geometric tail.  The human column is a deterministic multiset of
levels, shuffled; the LLM column copies the human
answer for a fraction ``pi`` of respondents and is a permutation of the
remaining human answers otherwise.  Both columns therefore share one marginal,
the full-sample coefficient is close to ``pi`` and the difficulty is close to
``Var(Y) (1 - pi^2)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

N_QUESTIONS = 68
N_RESPONDENTS = 1271
A_MIN, A_MAX = 0.024, 0.239

# difficulty profile: low-signal group then useful group, log-quantile curves
_WEAK = dict(count=32, lo=0.02541421, hi=A_MAX, curve=0.38102749)
_USEFUL = dict(count=36, lo=A_MIN, hi=0.239, curve=1.63482651)
N_ZERO_SIGNAL = 26
N_FAINT_SIGNAL = 6
MAX_VARIANCE = 0.245
MAX_COUPLING = 0.72
SKEW_SHARE = 0.5  # share of eligible questions answered on a skewed scale

# module label of each question (in generation order); sizes 16,8,6,6,5,5,4,4,3,3,3,2,2,1
MODULE_LABELS = (
    7, 0, 3, 6, 1, 13, 2, 5, 2, 0, 6, 2, 6, 7, 2, 10, 4, 0, 3, 3, 0, 1, 0, 0, 0, 0, 4, 7, 0,
    4, 0, 0, 1, 5, 8, 7, 4, 3, 5, 9, 1, 12, 10, 2, 0, 2, 5, 11, 8, 11, 6, 12, 10, 1, 9, 8,
    5, 3, 3, 9, 1, 1, 0, 1, 4, 0, 0, 0,
)


def _profile(count, lo, hi, curve):
    u = (np.arange(count) + 0.5) / count
    return np.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * u**curve)


def target_difficulties() -> np.ndarray:
    weak = _profile(**_WEAK)
    useful = _profile(**_USEFUL)
    weak[-1] = A_MAX
    useful[0] = A_MIN
    return np.concatenate([weak, useful])


def _level_probs(levels, shape, skewed=False):
    if skewed:
        # geometric decay away from the bottom level
        p = np.exp(-shape * (levels - levels[0]))
        return p / p.sum()
    z = (levels - 0.5) ** 2
    logits = shape * (z - z.max())
    p = np.exp(logits - logits.max())
    return p / p.sum()


def _level_counts(k: int, variance: float, n: int, skewed: bool = False) -> np.ndarray:
    """Counts over k equally spaced levels with total ``n`` and variance near target.

    The probabilities are a one-parameter family tilted toward the ends
    (shape > 0) or the middle (shape < 0); both end levels get at least one
    respondent so the observed range is exactly [0, 1].  The skewed family
    piles answers on the bottom level with a geometric tail; it only reaches
    variances below that of the uniform distribution over the levels.
    """
    levels = np.linspace(0.0, 1.0, k)

    def var_of(shape):
        p = _level_probs(levels, shape, skewed)
        m = p @ levels
        return p @ (levels - m) ** 2 - variance

    lo = 0.0 if skewed else -200.0
    shape = brentq(var_of, lo, 200.0, xtol=1e-12)
    p = _level_probs(levels, shape, skewed)
    counts = np.floor(p * n).astype(int)
    # largest remainder to reach n
    rest = n - counts.sum()
    order = np.argsort(-(p * n - counts), kind="stable")
    counts[order[:rest]] += 1
    for end in (0, k - 1):
        if counts[end] == 0:
            counts[end] = 1
            counts[int(np.argmax(counts))] -= 1
    return counts


@dataclass(frozen=True)
class SurrogateQuestion:
    question_id: str
    module_id: str
    target_A: float
    coupling: float
    human: np.ndarray
    llm: np.ndarray


def generate_surrogate(seed: int = 0, n_respondents: int = N_RESPONDENTS,
                       scales=(3, 5, 7), skew_share: float = SKEW_SHARE) -> list[SurrogateQuestion]:
    rng = np.random.default_rng(seed)
    A = target_difficulties()
    n_weak = _WEAK["count"]
    coupling = np.zeros(N_QUESTIONS)
    faint = rng.choice(n_weak, N_FAINT_SIGNAL, replace=False)
    coupling[faint] = rng.uniform(0.01, 0.04, N_FAINT_SIGNAL)
    for q in range(n_weak, N_QUESTIONS):
        top = min(MAX_COUPLING, float(np.sqrt(1.0 - A[q] / MAX_VARIANCE)))
        coupling[q] = rng.uniform(0.05, top)

    out = []
    for q in range(N_QUESTIONS):
        var_y = A[q] / (1.0 - coupling[q] ** 2)
        k = int(rng.choice(scales))
        flat = np.linspace(0.0, 1.0, k).var()
        skewed = bool(skew_share > 0 and var_y < 0.9 * flat and rng.uniform() < skew_share)
        counts = _level_counts(k, var_y, n_respondents, skewed)
        y = rng.permutation(np.repeat(np.linspace(0.0, 1.0, k), counts))
        n_copy = int(round(coupling[q] * n_respondents))
        while True:
            s = y.copy()
            free = rng.permutation(n_respondents)[n_copy:]
            s[free] = y[rng.permutation(free)]
            # zero-signal questions need cov <= 0 and faint ones cov > 0
            if (np.cov(y, s)[0, 1] > 0) == (coupling[q] > 0):
                break
        out.append(
            SurrogateQuestion(
                question_id=f"Q{q + 1:02d}",
                module_id=f"M{MODULE_LABELS[q] + 1:02d}",
                target_A=float(A[q]),
                coupling=float(coupling[q]),
                human=y,
                llm=s,
            )
        )
    return out


def write_surrogate(out_path, modules_path=None, seed: int = 0) -> list[SurrogateQuestion]:
    """Write the dataset (and optionally the module map) as CSV."""
    questions = generate_surrogate(seed)
    out_path = Path(out_path)
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["question_id", "respondent_id", "human", "llm"])
        for sq in questions:
            for i, (y, s) in enumerate(zip(sq.human, sq.llm)):
                wr.writerow([sq.question_id, f"R{i + 1:04d}", repr(float(y)), repr(float(s))])
    if modules_path is not None:
        with Path(modules_path).open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["question_id", "module_id"])
            for sq in questions:
                wr.writerow([sq.question_id, sq.module_id])
    return questions
