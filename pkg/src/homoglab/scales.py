"""Decreasing scale sequences with closed-form tails.

A schedule is the infinite sequence 1 = e_0 > e_1 > e_2 > ... -> 0 of
oscillation lengths.  Internally every generator is reduced to a finite
prefix of consecutive ratios e_j/e_{j-1} followed by a constant tail
ratio, which makes suprema and tail conditions decidable exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_HORIZON = 64

# non-strict inequalities in the separation conditions: boundary equality
# counts as a pass within this absolute tolerance
BOUNDARY_TOL = 1e-12


class ScheduleError(ValueError):
    """A scale sequence failed validation (not strictly decreasing to 0)."""


@dataclass(frozen=True)
class DecayBoundReport:
    """Outcome of the exponential-decay consequence of the sum condition."""

    K: float
    mmax: int
    horizon: int
    hypothesis_ok: bool
    hypothesis_failure_m: int | None
    pairs: np.ndarray          # columns: k, m, ratio, bound, ok(0/1); empty if skipped
    passed: bool

    def worst_margin(self):
        """Most negative value of bound - ratio (positive means safe)."""
        if self.pairs.size == 0:
            return math.nan
        return float(np.min(self.pairs[:, 3] - self.pairs[:, 2]))


@dataclass(frozen=True)
class SeparationReport:
    passed: bool
    first_violation: tuple[int, int] | None
    worst_margin: float
    two_sided: bool
    N: float
    kmax: int


@dataclass(frozen=True)
class LogSeparationReport:
    passed: bool
    worst_margin: float        # max over k of lhs - rhs; <= 0 passes
    rhs: float
    m: int
    horizon: int


@dataclass(frozen=True)
class ScaleSchedule:
    """Scale sequence given by prefix ratios plus a constant tail ratio.

    ``ratios[j-1]`` is e_j/e_{j-1} for j up to the prefix length; beyond
    that every consecutive ratio equals ``tail_ratio``.
    """

    ratios: tuple[float, ...] = ()
    tail_ratio: float = 0.5
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        for j, r in enumerate(self.ratios, start=1):
            if not (0.0 < r < 1.0):
                raise ScheduleError(
                    f"ratio e_{j}/e_{j - 1} = {r} outside (0, 1); "
                    "schedule must be strictly decreasing"
                )
        if not (0.0 < self.tail_ratio < 1.0):
            raise ScheduleError(
                f"tail ratio {self.tail_ratio} outside (0, 1); "
                "schedule must tend to zero"
            )
        if self.horizon < 1:
            raise ScheduleError("horizon must be >= 1")

    # -- constructors ---------------------------------------------------

    @staticmethod
    def geometric(eps1: float, horizon: int = DEFAULT_HORIZON) -> "ScaleSchedule":
        """Pure geometric schedule e_j = eps1**j."""
        return ScaleSchedule((), eps1, horizon)

    @staticmethod
    def explicit(values, tail_ratio: float, horizon: int = DEFAULT_HORIZON) -> "ScaleSchedule":
        """Explicit prefix (e_1, e_2, ...) continued by a geometric tail."""
        vals = [1.0] + list(values)
        ratios = tuple(vals[i + 1] / vals[i] for i in range(len(vals) - 1))
        return ScaleSchedule(ratios, tail_ratio, horizon)

    @staticmethod
    def power_rule(eps1: float, increments, tail_increment: float | None = None,
                   horizon: int = DEFAULT_HORIZON) -> "ScaleSchedule":
        """Schedule e_j = eps1**beta_j with beta_j built from exponent increments.

        ``increments[i]`` is beta_{i+1} - beta_i (beta_0 = 0); after the
        listed increments the last one (or ``tail_increment``) repeats.
        """
        if not (0.0 < eps1 < 1.0):
            raise ScheduleError(f"eps1 = {eps1} outside (0, 1)")
        incs = list(increments)
        if not incs and tail_increment is None:
            tail_increment = 1.0
        if tail_increment is None:
            tail_increment = incs[-1]
        ratios = tuple(eps1 ** inc for inc in incs)
        return ScaleSchedule(ratios, eps1 ** tail_increment, horizon)

    # -- basic access ---------------------------------------------------

    def ratio(self, k: int) -> float:
        """Consecutive ratio e_k/e_{k-1} for k >= 1."""
        if k < 1:
            raise ScheduleError("ratio index must be >= 1")
        if k <= len(self.ratios):
            return self.ratios[k - 1]
        return self.tail_ratio

    def epsilon(self, j: int) -> float:
        """Value e_j, with e_0 = 1 exactly."""
        if j < 0:
            raise ScheduleError("scale index must be >= 0")
        p = len(self.ratios)
        if j <= p:
            return math.prod(self.ratios[:j])
        return math.prod(self.ratios) * self.tail_ratio ** (j - p)

    def epsilons(self, jmax: int) -> np.ndarray:
        """Array [e_0, ..., e_jmax]."""
        r = np.array([self.ratio(k) for k in range(1, jmax + 1)])
        return np.concatenate([[1.0], np.cumprod(r)])

    # -- separation metrics ----------------------------------------------

    def separation_sup(self, kmax: int) -> float:
        """sup of e_k/e_{k-1} over 1 <= k <= kmax.

        When kmax reaches past the prefix the result equals the true
        supremum over all k, since the tail ratio is constant.
        """
        if kmax < 1:
            raise ScheduleError("kmax must be >= 1")
        return max(self.ratio(k) for k in range(1, kmax + 1))

    def sum_ratio(self, m: int) -> float:
        """Sum over j = 1..m of e_m/e_j."""
        if m < 1:
            raise ScheduleError("m must be >= 1")
        total = 1.0   # j = m term
        acc = 1.0
        for j in range(m - 1, 0, -1):
            acc *= self.ratio(j + 1)
            total += acc
        return total

    def sum_ratio_sup(self, mmax: int | None = None) -> float:
        """sup of sum_ratio(m) over m up to mmax (default: horizon)."""
        mmax = self.horizon if mmax is None else mmax
        return max(self.sum_ratio(m) for m in range(1, mmax + 1))

    def decay_bound_check(self, K: float, mmax: int | None = None) -> DecayBoundReport:
        """Check e_m/e_k <= K(1 - 1/K)**(m-k) for all 1 <= k <= m <= mmax.

        The hypothesis sum_ratio(m) <= K is verified first for every
        m <= mmax; if it fails the bound table is skipped and the report
        carries the first failing m.
        """
        if not (1.0 < K <= 2.0):
            raise ScheduleError(f"K = {K} outside (1, 2]")
        mmax = self.horizon if mmax is None else mmax
        for m in range(1, mmax + 1):
            if self.sum_ratio(m) > K + BOUNDARY_TOL:
                return DecayBoundReport(K, mmax, self.horizon, False, m,
                                        np.empty((0, 5)), False)
        eps = self.epsilons(mmax)
        mk = np.triu_indices(mmax, k=0)
        kk = mk[0] + 1                      # 1 <= k <= m
        mm = mk[1] + 1
        keep = mm >= kk
        kk, mm = kk[keep], mm[keep]
        ratio = eps[mm] / eps[kk]
        bound = K * (1.0 - 1.0 / K) ** (mm - kk)
        ok = ratio <= bound + BOUNDARY_TOL
        pairs = np.column_stack([kk, mm, ratio, bound, ok.astype(float)])
        return DecayBoundReport(K, mmax, self.horizon, True, None, pairs, bool(ok.all()))

    def power_separation_check(self, N: float, kmax: int | None = None,
                               two_sided: bool = False) -> SeparationReport:
        """Check (e_{k+1}/e_k)**N <= e_{i+1}/e_i for all kmax >= k > i >= 0.

        With ``two_sided`` the upper counterpart
        e_{i+1}/e_i <= (e_{k+1}/e_k)**(1/N) is required as well.  For a
        constant tail the answer is exact for all k once kmax covers the
        prefix.
        """
        if N < 1.0:
            raise ScheduleError(f"N = {N} must be >= 1")
        kmax = max(self.horizon, len(self.ratios) + 1) if kmax is None else kmax
        rho = [self.ratio(k + 1) for k in range(kmax + 1)]   # rho[i] = e_{i+1}/e_i
        worst = -math.inf
        first = None
        for k in range(1, kmax + 1):
            for i in range(k):
                margin = rho[k] ** N - rho[i]
                if two_sided:
                    margin = max(margin, rho[i] - rho[k] ** (1.0 / N))
                if margin > worst:
                    worst = margin
                if margin > BOUNDARY_TOL and first is None:
                    first = (k, i)
        return SeparationReport(first is None, first, worst, two_sided, N, kmax)

    def log_separation_check(self, m: int, c0: float, exponent: float) -> LogSeparationReport:
        """Check (e_k/e_{k-1})**exponent <= c0/|log(e_{m+1}/e_m)| for k >= m+2.

        Checked up to the horizon; exact for constant-tail generators
        once k passes the prefix.
        """
        if not (0.0 < c0 <= 1.0):
            raise ScheduleError(f"c0 = {c0} outside (0, 1]")
        if exponent <= 0.0:
            raise ScheduleError("exponent must be positive")
        anchor = self.ratio(m + 1)
        rhs = c0 / abs(math.log(anchor))
        kmax = max(self.horizon, len(self.ratios) + 1, m + 2)
        worst = -math.inf
        for k in range(m + 2, kmax + 1):
            worst = max(worst, self.ratio(k) ** exponent - rhs)
        return LogSeparationReport(worst <= BOUNDARY_TOL, worst, rhs, m, kmax)

    # -- rescaling --------------------------------------------------------

    def rescale(self, m: int) -> "ScaleSchedule":
        """Zoomed schedule with entries e_{j+m}/e_m.

        Composes additively: rescale(a).rescale(b) == rescale(a+b) with
        exact float equality, since rescaling only drops prefix ratios.
        """
        if m < 0:
            raise ScheduleError("m must be >= 0")
        return ScaleSchedule(self.ratios[m:], self.tail_ratio, self.horizon)
