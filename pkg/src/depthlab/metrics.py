"""Text and vector metrics shared by every experiment: ROUGE-L, cosine
similarity, and mean/confidence-interval aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_Z_95 = 1.95996


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f: float


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Length of the longest common subsequence of two token sequences."""
    m, n = len(a), len(b)
    if m == 0 or n == 0:
        return 0
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ai = a[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[n]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = 1.0) -> RougeScore:
    """LCS-based ROUGE-L over token sequences.

    P = LCS/|candidate|, R = LCS/|reference|; F is the beta-weighted harmonic
    mean (beta=1 by default; pass a larger beta for the recall-weighted
    variant). Empty candidate or reference yields all zeros.
    """
    if len(candidate) == 0 or len(reference) == 0:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    if p + r == 0:
        return RougeScore(p, r, 0.0)
    b2 = beta * beta
    f = (1 + b2) * p * r / (r + b2 * p)
    return RougeScore(p, r, f)


def tokenize_for_rouge(text: str) -> list[str]:
    """Lowercase, split on whitespace, and drop punctuation-only tokens."""
    tokens = []
    for tok in text.lower().split():
        if any(ch.isalnum() for ch in tok):
            tokens.append(tok)
    return tokens


def rouge_l_text(candidate: str, reference: str, beta: float = 1.0) -> RougeScore:
    """ROUGE-L on raw strings using the shared whitespace tokenization."""
    return rouge_l(tokenize_for_rouge(candidate), tokenize_for_rouge(reference), beta=beta)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; if either vector has norm < 1e-12 the result is 0."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"cosine: dimension mismatch {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def mean_ci(samples: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of the normal-approximation confidence interval.

    Uses z * s / sqrt(n) with the n-1 sample standard deviation. Requires at
    least two samples.
    """
    n = len(samples)
    if n < 2:
        raise ValueError(f"mean_ci needs >= 2 samples, got {n}")
    arr = np.asarray(samples, dtype=np.float64)
    if level == 0.95:
        z = _Z_95
    else:
        from scipy.special import ndtri

        z = float(ndtri(0.5 + level / 2.0))
    mean = float(arr.mean())
    s = float(arr.std(ddof=1))
    return mean, z * s / math.sqrt(n)
