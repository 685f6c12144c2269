"""Two-sample significance tests (Levene, Mann-Whitney U) and the special
functions behind their p-values. Pure Python, no scipy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

LEVENE = "levene"
MANN_WHITNEY_U = "mann_whitney_u"
EXACT_MAX_TOTAL = 32

_FPMIN = 1e-300
_EPS = 1e-16


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    test: str
    statistic: float
    p_value: float
    n1: int
    n2: int
    method_note: str

    __test__ = False  # keep pytest from collecting this class


def _two_groups(a: Sequence[float], b: Sequence[float]) -> tuple[list[float], list[float]]:
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    if len(a) < 2 or len(b) < 2:
        raise StatsError("each group needs at least 2 values")
    return a, b


# -- special functions -------------------------------------------------------


def std_normal_cdf(z: float) -> float:
    # erfc keeps full relative precision in the lower tail
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _betacf(x: float, a: float, b: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _FPMIN else _FPMIN)
        c = 1.0 + aa / c
        c = c if abs(c) > _FPMIN else _FPMIN
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return min(1.0, front * _betacf(x, a, b) / a)
    return max(0.0, 1.0 - front * _betacf(1.0 - x, b, a) / b)


def f_cdf(x: float, d1: float, d2: float) -> float:
    if x <= 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    return reg_inc_beta(d1 * x / (d1 * x + d2), d1 / 2.0, d2 / 2.0)


def f_sf(x: float, d1: float, d2: float) -> float:
    """Upper tail 1 - F_cdf, evaluated directly for accuracy at small p."""
    if x <= 0.0:
        return 1.0
    if math.isinf(x):
        return 0.0
    return reg_inc_beta(d2 / (d2 + d1 * x), d2 / 2.0, d1 / 2.0)


# -- Levene ------------------------------------------------------------------


def levene(group_a: Sequence[float], group_b: Sequence[float]) -> TestResult:
    """Classical (mean-centred) Levene test for equal variances, two groups."""
    groups = _two_groups(group_a, group_b)
    z = []
    for g in groups:
        centre = math.fsum(g) / len(g)
        z.append([abs(v - centre) for v in g])
    k = 2
    n_total = sum(len(g) for g in z)
    z_means = [math.fsum(g) / len(g) for g in z]
    z_grand = math.fsum(v for g in z for v in g) / n_total
    between = math.fsum(len(g) * (m - z_grand) ** 2 for g, m in zip(z, z_means))
    within = math.fsum((v - m) ** 2 for g, m in zip(z, z_means) for v in g)
    n1, n2 = len(groups[0]), len(groups[1])
    note = "mean-centred Levene (classical)"
    # Z carries rounding error of order eps * |Y|; a within-group sum below
    # that floor is zero in exact arithmetic (e.g. any two-value group)
    z_err = 8.0 * _EPS * max(abs(v) for g in groups for v in g)
    if within <= n_total * z_err * z_err:
        within = 0.0
        between = 0.0 if between <= n_total * z_err * z_err else between
    if within == 0.0:
        if between == 0.0:
            return TestResult(LEVENE, 0.0, 1.0, n1, n2, note + "; degenerate: no spread in either group")
        return TestResult(LEVENE, math.inf, 0.0, n1, n2, note + "; degenerate: zero within-group spread")
    w = (n_total - k) / (k - 1) * between / within
    return TestResult(LEVENE, w, f_sf(w, k - 1, n_total - k), n1, n2, note)


# -- Mann-Whitney U ----------------------------------------------------------


def u_statistics(group_a: Sequence[float], group_b: Sequence[float]) -> tuple[float, float]:
    """(U_a, U_b): pairs won by each side, ties counting one half."""
    pooled = sorted([(v, 0) for v in group_a] + [(v, 1) for v in group_b])
    rank_sum_a2 = 0  # doubled mid-rank sum keeps everything integral
    i = 0
    while i < len(pooled):
        j = i
        while j < len(pooled) and pooled[j][0] == pooled[i][0]:
            j += 1
        doubled_rank = i + j + 1
        rank_sum_a2 += doubled_rank * sum(1 for _, side in pooled[i:j] if side == 0)
        i = j
    n1, n2 = len(group_a), len(group_b)
    u_a2 = rank_sum_a2 - n1 * (n1 + 1)
    return u_a2 / 2.0, (2 * n1 * n2 - u_a2) / 2.0


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """counts[u] = number of orderings of n1 + n2 distinct values giving U_a = u.

    Recurrence on the largest value: it belongs to group a (beating all n2
    values of b) or to group b.
    """
    if n1 == 0 or n2 == 0:
        return (1,)
    with_a = _u_counts(n1 - 1, n2)
    with_b = _u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(with_a):
        out[u + n2] += c
    for u, c in enumerate(with_b):
        out[u] += c
    return tuple(out)


def exact_u_pvalue(u: float, n1: int, n2: int) -> float:
    """Two-sided exact p = 2 * P(U <= min(u, n1*n2 - u)), capped at 1."""
    counts = _u_counts(n1, n2)
    u_low = min(u, n1 * n2 - u)
    tail = sum(counts[: int(math.floor(u_low)) + 1])
    return min(1.0, 2.0 * tail / math.comb(n1 + n2, n1))


def mann_whitney_u(group_a: Sequence[float], group_b: Sequence[float]) -> TestResult:
    """Two-sided Mann-Whitney U test; statistic is min(U_a, U_b)."""
    a, b = _two_groups(group_a, group_b)
    n1, n2 = len(a), len(b)
    n = n1 + n2
    u_a, u_b = u_statistics(a, b)
    u = min(u_a, u_b)
    tie_sizes = [t for t in Counter(a + b).values() if t > 1]
    if n <= EXACT_MAX_TOTAL and not tie_sizes:
        return TestResult(MANN_WHITNEY_U, u, exact_u_pvalue(u, n1, n2), n1, n2, "exact (dynamic programming)")
    tie_term = sum(t**3 - t for t in tie_sizes) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    note = "normal approximation, tie and continuity corrected"
    if var <= 0.0:
        return TestResult(MANN_WHITNEY_U, u, 1.0, n1, n2, note + "; degenerate: all values tied")
    z = max(0.0, abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return TestResult(MANN_WHITNEY_U, u, min(1.0, 2.0 * std_normal_cdf(-z)), n1, n2, note)
