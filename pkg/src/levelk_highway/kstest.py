"""Kolmogorov-Smirnov goodness-of-fit test for step (discontinuous) CDFs.

The classical K-S critical values are wrong (conservative in an unknown
amount) when the hypothesized distribution has jumps, so the one-sided
critical levels are computed exactly from the geometry of the hypothesized
step CDF: horizontal lines at the reachable levels of the empirical CDF are
intersected with the hypothesized graph, and a recursion over the resulting
boundary masses yields P(D- >= d) and P(D+ >= d).  The two-sided level is
their (slightly conservative) sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_ORD_TOL = 1e-12  # tolerance for "intersects exactly at a jump limit"


class MismatchedSupportError(ValueError):
    """Empirical samples fall outside the hypothesized support."""


@dataclass(frozen=True)
class StepCDF:
    """Right-continuous step CDF: support points with cumulative values."""

    xs: tuple[float, ...]
    cum: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) != len(self.cum) or not self.xs:
            raise ValueError("support and cumulative values must align and be non-empty")
        if any(b < a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("support must be ascending")
        if any(b < a - 1e-12 for a, b in zip(self.cum, self.cum[1:])):
            raise ValueError("cumulative values must be non-decreasing")
        if abs(self.cum[-1] - 1.0) > 1e-6:
            raise ValueError(f"final cumulative value must be 1, got {self.cum[-1]}")

    @staticmethod
    def from_pdf(xs, probs) -> "StepCDF":
        probs = np.asarray(probs, dtype=float)
        if np.any(probs < -1e-12):
            raise ValueError("probabilities must be non-negative")
        total = probs.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities must sum to 1, got {total}")
        cum = np.cumsum(probs / total)
        cum[-1] = 1.0
        return StepCDF(tuple(float(x) for x in xs), tuple(cum))

    @staticmethod
    def from_samples(samples, support=None) -> "StepCDF":
        samples = np.asarray(samples, dtype=float)
        if samples.size == 0:
            raise ValueError("need at least one sample")
        if support is None:
            support = np.unique(samples)
        support = np.asarray(support, dtype=float)
        counts = np.array([(samples <= x).sum() for x in support], dtype=float)
        return StepCDF(tuple(support), tuple(counts / samples.size))

    def value_at(self, x: float) -> float:
        """Right-limit value H(x)."""
        v = 0.0
        for xi, ci in zip(self.xs, self.cum):
            if xi <= x:
                v = ci
            else:
                break
        return v

    def jump_points(self) -> tuple[float, ...]:
        return self.xs


def ks_statistics(s_n: StepCDF, h_c: StepCDF) -> tuple[float, float, float]:
    """Observed (d, d_minus, d_plus) between empirical S_n and hypothesized H_c.

    Suprema are taken over the union of both supports; the plateau values of
    two step functions cover every left and right limit, plus the zero level
    left of the supports.
    """
    for x, c in zip(s_n.xs, np.diff([0.0, *s_n.cum])):
        if c > 1e-12 and not any(abs(x - hx) <= 1e-9 for hx in h_c.xs):
            raise MismatchedSupportError(
                f"sample value {x} is not in the hypothesized support"
            )
    grid = sorted(set(s_n.xs) | set(h_c.xs))
    d_minus = 0.0
    d_plus = 0.0
    for x in grid:
        h = h_c.value_at(x)
        s = s_n.value_at(x)
        d_minus = max(d_minus, h - s)
        d_plus = max(d_plus, s - h)
    return max(d_minus, d_plus), d_minus, d_plus


def _achieved_levels(h_c: StepCDF) -> list[float]:
    levels = [0.0]
    for c in h_c.cum:
        if c - levels[-1] > 1e-15:
            levels.append(c)
    return levels


def _mass_above(levels: list[float], ordinate: float) -> float:
    """1 - (smallest achieved level >= ordinate); the left-limit rule at jumps.

    A line running exactly along a plateau (within tolerance) uses that
    plateau's level, i.e. the left limit of the jump it touches; a line
    strictly inside a jump uses the jump's upper (right-limit) level.
    """
    for lv in levels:
        if lv >= ordinate - _ORD_TOL:
            return 1.0 - lv
    return 0.0


def _mass_below(levels: list[float], ordinate: float) -> float:
    """Largest achieved level <= ordinate; the right-limit rule at jumps."""
    best = 0.0
    for lv in levels:
        if lv <= ordinate + _ORD_TOL:
            best = lv
        else:
            break
    return best


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _weighted_sum(n: int, imax: int, cs: list[float], bs: list[float]) -> float:
    """sum over i <= imax of C(n, i) * cs[i]^(n-i) * bs[i], overflow-safe."""
    total = 0.0
    for i in range(imax + 1):
        c = cs[i]
        b = bs[i]
        if b == 0.0:
            continue
        k = n - i
        if c == 0.0:
            if k == 0:
                total += b
            continue
        if n <= 30:
            total += math.comb(n, i) * c**k * b
        else:
            log_mag = _log_comb(n, i) + k * math.log(c) + math.log(abs(b))
            total += math.copysign(math.exp(log_mag), b)
    return total


def _one_sided_level(levels: list[float], n: int, d: float, upper: bool) -> float:
    """Shared machinery of the two one-sided critical levels.

    ``upper=False`` computes P(D- >= d): lines at d + i/n against the
    mass above; ``upper=True`` computes P(D+ >= d): lines at 1 - d - i/n
    against the mass below.
    """
    if d <= 0.0:
        return 1.0
    if d > 1.0:
        return 0.0
    imax = int(math.floor(n * (1.0 - d) + 1e-9))
    cs: list[float] = []
    for i in range(imax + 1):
        if upper:
            cs.append(_mass_below(levels, 1.0 - d - i / n))
        else:
            cs.append(_mass_above(levels, d + i / n))
    bs = [1.0]
    for i in range(1, imax + 1):
        bs.append(1.0 - _weighted_sum(i, i - 1, cs, bs))
    p = _weighted_sum(n, imax, cs, bs)
    return min(1.0, max(0.0, p))


def critical_level_minus(h_c: StepCDF, n: int, d_minus: float) -> float:
    """P(D- >= d_minus) under the null, exact for the step CDF ``h_c``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _one_sided_level(_achieved_levels(h_c), n, d_minus, upper=False)


def critical_level_plus(h_c: StepCDF, n: int, d_plus: float) -> float:
    """P(D+ >= d_plus) under the null, exact for the step CDF ``h_c``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _one_sided_level(_achieved_levels(h_c), n, d_plus, upper=True)


def two_sided_critical(h_c: StepCDF, n: int, d: float) -> float:
    """P(D >= d) approximated by the sum of the one-sided levels, clamped."""
    p = critical_level_minus(h_c, n, d) + critical_level_plus(h_c, n, d)
    return min(1.0, max(0.0, p))


def mae(p, q) -> float:
    """Mean absolute error between two pdfs over the same outcomes."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"pdf lengths differ: {p.shape} vs {q.shape}")
    for name, arr in (("p", p), ("q", q)):
        if abs(arr.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} must sum to 1, got {arr.sum()}")
    return float(np.mean(np.abs(p - q)))


@dataclass(frozen=True)
class KSOutcome:
    """Result of one hypothesized-vs-empirical pdf comparison."""

    n: int
    d: float
    d_minus: float
    d_plus: float
    p_minus: float
    p_plus: float
    p_two_sided: float
    rejected: bool
    mae: float


def compare_pdfs(
    hypothesized: np.ndarray,
    empirical: np.ndarray,
    n: int,
    alpha: float = 0.05,
    support: np.ndarray | None = None,
) -> KSOutcome:
    """Run the discontinuous K-S test of an empirical pdf against a model pdf.

    The empirical pdf stands in for the cumulative of the n observed samples;
    both pdfs must live on the same ordered support (action indices by
    default).
    """
    hypothesized = np.asarray(hypothesized, dtype=float)
    empirical = np.asarray(empirical, dtype=float)
    if support is None:
        support = np.arange(len(hypothesized), dtype=float)
    h_c = StepCDF.from_pdf(support, hypothesized)
    s_n = StepCDF.from_pdf(support, empirical)
    d, d_minus, d_plus = ks_statistics(s_n, h_c)
    p_minus = critical_level_minus(h_c, n, d_minus)
    p_plus = critical_level_plus(h_c, n, d_plus)
    p_two = two_sided_critical(h_c, n, d)
    return KSOutcome(
        n=n,
        d=d,
        d_minus=d_minus,
        d_plus=d_plus,
        p_minus=p_minus,
        p_plus=p_plus,
        p_two_sided=p_two,
        rejected=p_two < alpha,
        mae=mae(hypothesized, empirical),
    )
