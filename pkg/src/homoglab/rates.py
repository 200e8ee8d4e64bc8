"""Convergence-rate experiments and their log-log slope reports.

Each sweep point compares the truncated multiscale solution against the
homogenized solution of the same truncation level, so the common tail of
unresolved scales cancels from the measured difference; the retained
levels are chosen by a resolution policy (points per finest wavelength)
and the truncation bias is recorded per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bvp import BVProblem, Coefficient1D, solve_1d_exact
from .coefficients import ConfigurationError, weierstrass_builder

R2_TARGET = 0.98


@dataclass(frozen=True)
class ResolutionPolicy:
    """Grid and truncation choices for sweep solves."""

    ppw: int = 32                  # samples per finest retained wavelength
    max_panels: int = 1 << 19
    min_panels: int = 4096
    budget: int = 4                # deepest retained fast level
    matched: bool = True           # truncate both sides at the same level

    def level_for(self, h):
        """Deepest fast level whose scale the panel budget resolves."""
        floor = self.ppw / self.max_panels
        n = 0
        while n + 1 <= self.budget:
            if h.schedule.epsilon(n + 1) < floor:
                break
            try:
                h.layer(n + 1)
            except ConfigurationError:
                break
            n += 1
        return n

    def panels_for(self, h, n):
        if n == 0:
            return self.min_panels
        need = self.ppw / h.schedule.epsilon(n)
        m = max(self.min_panels, int(need))
        return min(self.max_panels, 1 << int(math.ceil(math.log2(m))))


@dataclass
class RateReport:
    """Per-point errors with the fitted slope and the theory predictor.

    ``predictor`` carries the bound shape Lambda [delta]_1 sup(e_k/e_{k-1})
    per point (data norms fixed per sweep, so constants cancel in the
    slope); ``empirical_c`` is the per-point ratio error/predictor.
    """

    kind: str
    param_name: str
    params: np.ndarray
    errors: np.ndarray
    predictor: np.ndarray
    empirical_c: np.ndarray
    slope: float | None
    intercept: float | None
    r2: float | None
    skipped: list = field(default_factory=list)
    point_meta: list = field(default_factory=list)
    c0: float = 1.0

    def rows(self):
        out = []
        for i in range(len(self.params)):
            out.append({
                "parameter": float(self.params[i]),
                "error": float(self.errors[i]),
                "predictor": float(self.predictor[i]),
                "empirical_C": float(self.empirical_c[i]),
            })
        return out

    def summary(self, slope_min=None, slope_range=None):
        ok = self.slope is not None and (self.r2 or 0.0) >= R2_TARGET
        if ok and slope_min is not None:
            ok = self.slope >= slope_min
        if ok and slope_range is not None:
            ok = slope_range[0] <= self.slope <= slope_range[1]
        return {
            "kind": self.kind,
            "slope": self.slope,
            "r2": self.r2,
            "points": int(len(self.params)),
            "skipped": len(self.skipped),
            "pass": bool(ok),
        }


def fit_loglog(params, errors):
    """Least-squares line through (log param, log error); returns
    (slope, intercept, r2), or Nones when fewer than three usable points."""
    params = np.asarray(params, dtype=float)
    errors = np.asarray(errors, dtype=float)
    usable = errors > 0.0
    if usable.sum() < 3:
        return None, None, None
    lx = np.log(params[usable])
    ly = np.log(errors[usable])
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(res[0]) if len(res) else 0.0
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


def solve_matched_pair(h, data, policy):
    """Matched-truncation solutions (u_eps, u_hom) of one hierarchy.

    Returns (None, meta) when even the leading scale is unresolvable.
    """
    f, g = data
    n = policy.level_for(h)
    tail = h.delta.tail_sum(n + 1)
    if n == 0 and tail > 0.0:
        return None, {"reason": "unresolved fast scale", "level": 0}
    panels = policy.panels_for(h, n)
    a_eps = Coefficient1D.multiscale(h, level=n)
    a_hom = Coefficient1D.homogenized(h, n)
    u_eps = solve_1d_exact(BVProblem("interval", a_eps, f, g), panels)
    u_hom = solve_1d_exact(BVProblem("interval", a_hom, f, g), panels)
    eps_next = h.schedule.epsilon(n + 1)
    bias = eps_next * h.delta.value(n + 1) + tail ** 2
    return (u_eps, u_hom), {"level": n, "panels": panels, "tail": tail,
                            "bias_certificate": bias}


def _solve_point(h, data, policy):
    """Matched-truncation error of one hierarchy; returns (err, meta)."""
    pair, meta = solve_matched_pair(h, data, policy)
    if pair is None:
        return None, meta
    return pair[0].diff(pair[1]).l2(), meta


def rate_sweep(family, eps1_values, data, policy=None, c0=1.0,
               kind="rate_sweep", param_name="eps1", mapper=None) -> RateReport:
    """Error against the leading scale for a family of hierarchies.

    ``family`` maps the sweep parameter to a coefficient hierarchy; the
    solves run on the 1d exact-quadrature oracle with the matched
    truncation policy.  Unresolvable points are skipped and flagged.
    Points are independent; ``mapper`` may distribute them, aggregation
    is sorted by parameter either way.
    """
    policy = policy or ResolutionPolicy()

    def work(value):
        h = family(value)
        err, meta = _solve_point(h, data, policy)
        if err is None:
            return float(value), None, None, meta
        summary = h.delta_norm(1.0, (c0,))
        lam = summary.lambda_table[c0][1]
        pred = lam * summary.bracket1 * h.schedule.separation_sup(h.schedule.horizon)
        return float(value), err, pred, meta

    results = sorted((mapper or map)(work, eps1_values), key=lambda t: t[0])
    params, errors, predictor, metas, skipped = [], [], [], [], []
    for value, err, pred, meta in results:
        if err is None:
            skipped.append((value, meta["reason"]))
            continue
        params.append(value)
        errors.append(err)
        predictor.append(pred)
        metas.append(meta)
    params = np.array(params)
    errors = np.array(errors)
    predictor = np.array(predictor)
    with np.errstate(divide="ignore", invalid="ignore"):
        emp = np.where(predictor > 0, errors / predictor, 0.0)
    slope, intercept, r2 = fit_loglog(params, errors)
    return RateReport(kind, param_name, params, errors, predictor, emp,
                      slope, intercept, r2, skipped, metas, c0)


def weierstrass_rate_sweep(tau, eps1_values, data, base=None, levels=6,
                           policy=None, c0=1.0, mapper=None) -> RateReport:
    """Leading-scale sweep for the geometric self-similar family."""
    return rate_sweep(
        lambda e1: weierstrass_builder(tau, e1, levels=levels, base=base),
        eps1_values, data, policy, c0, mapper=mapper)


def weierstrass_tau_sweep(eps1, tau_values, data, base=None, levels=6,
                          policy=None, c0=1.0, mapper=None) -> RateReport:
    """Amplitude sweep at a fixed leading scale; expected slope near one."""
    return rate_sweep(
        lambda t: weierstrass_builder(t, eps1, levels=levels, base=base),
        tau_values, data, policy, c0,
        kind="tau_sweep", param_name="tau", mapper=mapper)


@dataclass(frozen=True)
class PredictorVerdict:
    spread: float              # max/min over positive empirical constants
    max_c: float
    passed: bool
    spread_limit: float


def predictor_compare(report: RateReport, spread_limit=4.0) -> PredictorVerdict:
    """Stability of the empirical constant error/predictor across a sweep.

    Zero-error points contribute a vanishing constant and never fail the
    comparison; the verdict requires the positive constants to stay
    within the spread limit.
    """
    cs = report.empirical_c[report.empirical_c > 0.0]
    if cs.size == 0:
        return PredictorVerdict(0.0, 0.0, True, spread_limit)
    spread = float(cs.max() / cs.min())
    return PredictorVerdict(spread, float(cs.max()), spread <= spread_limit,
                            spread_limit)
