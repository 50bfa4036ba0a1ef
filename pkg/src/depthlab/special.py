"""Regularized incomplete gamma functions and the chi-square survival
function, implemented with the classic series / continued-fraction split so
the statistics layer has no runtime dependency beyond the stdlib."""

from __future__ import annotations

import math

_MAX_ITER = 500
_EPS = 1e-15
_FPMIN = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Lower regularized gamma P(a, x) by series expansion; x < a + 1."""
    gln = math.lgamma(a)
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - gln)


def _gamma_cf(a: float, x: float) -> float:
    """Upper regularized gamma Q(a, x) by continued fraction; x >= a + 1."""
    gln = math.lgamma(a)
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - gln) * h


def gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma P(a, x) = gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError(f"gamma_p: shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"gamma_p: x must be nonnegative, got {x}")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0:
        raise ValueError(f"gamma_q: shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"gamma_q: x must be nonnegative, got {x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi2_sf(x: float, dof: int) -> float:
    """Survival function P(X > x) of the chi-square distribution."""
    if dof < 1:
        raise ValueError(f"chi2_sf: dof must be >= 1, got {dof}")
    if x <= 0:
        return 1.0
    return gamma_q(dof / 2.0, x / 2.0)


def chi2_cdf(x: float, dof: int) -> float:
    """CDF of the chi-square distribution."""
    return 1.0 - chi2_sf(x, dof)
