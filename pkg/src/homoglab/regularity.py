"""Large-scale regularity diagnostics: affine-fit flatness, the scale
series controlling the iteration, and Dini moduli of the coefficients.

The per-radius quantity H(r) measures how far the solution is from
affine on the ball of radius r (plus the source term), h(r) is the slope
of the best affine fit; their boundedness across radii, uniformly in the
scale family, is the numerical face of large-scale Lipschitz regularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .bvp import BVProblem, Coefficient1D, FieldSolution1D, FieldSolution2D, solve_1d_exact
from .coefficients import DeltaModel, GeometricTail
from .rates import ResolutionPolicy


class GeometryError(ValueError):
    """Probe ball leaves the computational domain."""


class ProfileError(ValueError):
    """Profile lacks the radii needed by a check."""


# ---------------------------------------------------------------------------
# affine fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineFit:
    center: tuple
    r: float
    coeffs: np.ndarray          # constant, then gradient components
    H: float
    h: float
    residual: float
    nodes: int


def fit_affine(sol, center, r, f=None, p=2.0) -> AffineFit:
    """Least-squares affine fit on the ball B_r(center).

    H(r) is the normalized fit residual (1/r) ||u - P||_{L2 avg} plus the
    source term r (avg |f|^p)^(1/p); h(r) is the fitted slope magnitude.
    The fit minimizes the discrete L2 residual with trapezoid weights, so
    it realizes the affine infimum exactly on the grid.
    """
    if isinstance(sol, FieldSolution1D):
        c = float(np.atleast_1d(center)[0])
        if c - r < -1e-12 or c + r > 1.0 + 1e-12:
            raise GeometryError(f"ball of radius {r} at {c} exits the interval")
        mask = np.abs(sol.x - c) <= r
        x = sol.x[mask]
        u = sol.u[mask]
        if x.size < 3:
            raise GeometryError(f"radius {r} below the grid resolution")
        w = np.full(x.size, 1.0)
        w[0] = w[-1] = 0.5
        basis = np.column_stack([np.ones_like(x), x - c])
        fvals = _source_on(f, x) if f is not None else None
        cen = (c,)
    elif isinstance(sol, FieldSolution2D):
        cx, cy = (float(v) for v in center)
        if min(cx - r, cy - r) < -1e-12 or max(cx + r, cy + r) > 1.0 + 1e-12:
            raise GeometryError(f"ball of radius {r} at {center} exits the square")
        X, Y = np.meshgrid(sol.x, sol.x, indexing="ij")
        mask = (X - cx) ** 2 + (Y - cy) ** 2 <= r ** 2
        if mask.sum() < 8:
            raise GeometryError(f"radius {r} below the grid resolution")
        x = np.column_stack([X[mask] - cx, Y[mask] - cy])
        u = sol.u[mask]
        w = np.full(u.size, 1.0)
        basis = np.column_stack([np.ones_like(u), x])
        fvals = _source_on(f, (X[mask], Y[mask])) if f is not None else None
        cen = (cx, cy)
    else:
        raise TypeError("unsupported solution type for affine fitting")

    sw = np.sqrt(w)
    coeffs, *_ = np.linalg.lstsq(basis * sw[:, None], u * sw, rcond=None)
    resid_sq = float(np.sum(w * (u - basis @ coeffs) ** 2) / np.sum(w))
    residual = math.sqrt(max(resid_sq, 0.0))
    H = residual / r
    if fvals is not None:
        favg = float(np.sum(w * np.abs(fvals) ** p) / np.sum(w))
        H += r * favg ** (1.0 / p)
    slope = float(np.linalg.norm(coeffs[1:]))
    return AffineFit(cen, float(r), coeffs, H, slope, residual, int(u.size))


def _source_on(f, coords):
    if callable(f):
        if isinstance(coords, tuple):
            return np.asarray(f(*coords), dtype=float)
        return np.asarray(f(coords), dtype=float)
    if isinstance(coords, tuple):
        return np.full_like(coords[0], float(f))
    return np.full_like(coords, float(f))


@dataclass
class RegularityProfile:
    """Affine-fit quantities per radius, largest radius first."""

    radii: np.ndarray
    H: np.ndarray
    h: np.ndarray
    fits: list
    center: tuple
    p: float

    def combined(self):
        return self.H + self.h


def profile_radii(r_base, schedule=None, r_min=1e-3, per_octave=2):
    """Dyadic radii below r_base, merged with the schedule scales."""
    radii = []
    k = 0
    while True:
        r = r_base * 2.0 ** (-k / per_octave)
        if r < r_min:
            break
        radii.append(r)
        k += 1
    if schedule is not None:
        m = 1
        while schedule.epsilon(m) >= r_min:
            if schedule.epsilon(m) <= r_base:
                radii.append(schedule.epsilon(m))
            m += 1
    return np.array(sorted(set(radii), reverse=True))


def build_profile(sol, center, radii, f=None, p=2.0) -> RegularityProfile:
    fits = [fit_affine(sol, center, r, f, p) for r in radii]
    return RegularityProfile(np.asarray(radii, dtype=float),
                             np.array([ft.H for ft in fits]),
                             np.array([ft.h for ft in fits]),
                             fits, tuple(np.atleast_1d(center)), p)


# ---------------------------------------------------------------------------
# uniform Lipschitz probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LipschitzProbeReport:
    params: np.ndarray
    sup_ratios: np.ndarray       # sup_r (H+h)(r) / (H+h)(r_base) per family member
    bounded: bool
    spread: float
    profiles: list
    r_base: float


def lipschitz_probe(family, params, data, center=0.5, r_base=0.4,
                    policy=None, p=2.0, r_min_nodes=64, spread_limit=2.0) -> LipschitzProbeReport:
    """Uniformity of the flatness profile across a scale family.

    For each parameter the Dirichlet problem is solved on the interval,
    profiled on dyadic and scale-aligned radii inside the interior ball,
    and summarized by sup_r (H+h)(r) normalized at the base radius.  The
    verdict is bounded when that summary varies by at most the spread
    limit across the family.
    """
    from .rates import solve_matched_pair

    policy = policy or ResolutionPolicy()
    f, g = data
    sups, profiles, used = [], [], []
    for value in params:
        h = family(value)
        pair, meta = solve_matched_pair(h, data, policy)
        if pair is None:
            continue
        u_eps = pair[0]
        r_min = max(r_min_nodes * (u_eps.x[1] - u_eps.x[0]), 1e-4)
        radii = profile_radii(r_base, h.schedule, r_min)
        prof = build_profile(u_eps, center, radii, f, p)
        comb = prof.combined()
        base = comb[0]
        if base <= 0.0:
            continue
        sups.append(float(comb.max() / base))
        profiles.append(prof)
        used.append(float(value))
    sups = np.array(sups)
    spread = float(sups.max() / sups.min()) if sups.size else math.nan
    return LipschitzProbeReport(np.array(used), sups,
                                bool(sups.size and spread <= spread_limit),
                                spread, profiles, r_base)


# ---------------------------------------------------------------------------
# doubling constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoublingReport:
    C_H: float
    C_h: float
    windows: int


def doubling_check(profile: RegularityProfile, rel_tol=1e-9) -> DoublingReport:
    """Smallest constants with max H over [r, 2r] <= C H(2r) and
    oscillation of h over [r, 2r] <= C H(2r); zero-over-zero counts as 0."""
    radii = profile.radii
    if radii.size < 8:
        raise ProfileError("doubling check needs at least 8 radii")
    c_h = 0.0
    c_osc = 0.0
    windows = 0
    for i, r2 in enumerate(radii):
        r = r2 / 2.0
        inside = (radii >= r * (1 - rel_tol)) & (radii <= r2 * (1 + rel_tol))
        if inside.sum() < 2 or radii.min() > r * (1 + rel_tol):
            continue
        windows += 1
        H2 = profile.H[i]
        maxH = float(profile.H[inside].max())
        hs = profile.h[inside]
        osc = float(hs.max() - hs.min())
        if H2 > 0.0:
            c_h = max(c_h, maxH / H2)
            c_osc = max(c_osc, osc / H2)
        elif maxH > 0.0 or osc > 0.0:
            c_h = math.inf
    if windows == 0:
        raise ProfileError("no dyadic windows found in the profile")
    return DoublingReport(c_h, c_osc, windows)


# ---------------------------------------------------------------------------
# scale series M_m
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MmSeries:
    """Per-scale error weights with their tails, by two routes.

    ``values``/``tails`` come from brute-force summation to the horizon;
    when schedule and decay are both pure geometric a closed-form route
    is computed as well and the maximum disagreement is recorded.
    """

    alpha: float
    T: float
    values: np.ndarray
    tails: np.ndarray
    m0: int | None
    closed_values: np.ndarray | None
    closed_tails: np.ndarray | None
    route_gap: float
    sum_condition_ok: bool
    weight_finite: bool


def _direct_mm(schedule, delta, alpha, mmax, horizon):
    """Brute-force M_m for m = 0..mmax, inner sums cut at the horizon."""
    ratios = np.array([schedule.ratio(k) for k in range(1, mmax + 1)])
    dv = np.array([delta.value(l) for l in range(mmax + horizon + 1)])
    tails = np.concatenate([np.cumsum(dv[:horizon + 1][::-1])[::-1],
                            np.zeros(mmax)])          # R_j summed to the horizon
    kw = np.arange(1, horizon + 1, dtype=float) ** alpha
    out = np.empty(mmax + 1)
    for m in range(mmax + 1):
        # w[j] = e_m/e_j by backward products; underflow saturates at zero
        w = np.concatenate([np.cumprod(ratios[:m][::-1])[::-1], [1.0]])
        s1 = float(w @ tails[:m + 1])
        s2 = float(w.sum() * (kw @ dv[m + 1:m + horizon + 1]))
        out[m] = max(s1, s2)
    return out


def _closed_mm(q, s, tau, alpha, m, polylog):
    wm = (1.0 - q ** (m + 1)) / (1.0 - q)
    if abs(q - tau) > 1e-14:
        s1 = s / (1.0 - tau) * (q ** (m + 1) - tau ** (m + 1)) / (q - tau)
    else:
        s1 = s / (1.0 - tau) * (m + 1) * q ** m
    s2 = wm * s * tau ** m * polylog
    return max(s1, s2)


def mm_series(schedule, delta, alpha=0.5, T=64.0, mmax=32, horizon=400) -> MmSeries:
    """Scale series from the rescaled decay bounds, with tails and the
    first index m0 where T times the remaining tail drops below one.

    The direct route nests the defining sums to the horizon; for pure
    geometric data the closed route uses geometric identities and the
    polylogarithm.  Tails are cumulative sums of the per-m maxima.
    """
    if not isinstance(delta, DeltaModel):
        delta = DeltaModel(tuple(float(v) for v in delta))
    weight_finite = delta.finite(1.0 + 2.0 * alpha)
    sum_ok = schedule.sum_ratio_sup(schedule.horizon) <= 2.0 + 1e-12

    far = mmax + horizon
    direct_all = _direct_mm(schedule, delta, alpha, far, horizon)
    tails = np.array([float(direct_all[m:].sum()) for m in range(mmax + 1)])
    values = direct_all[:mmax + 1]

    closed_vals = closed_tails = None
    gap = 0.0
    tail = delta.tail
    pure_geom = (not schedule.ratios and isinstance(tail, GeometricTail)
                 and all(abs(delta.value(l) - tail.value(l)) <= 1e-15 * max(tail.value(l), 1.0)
                         for l in range(len(delta.prefix))))
    if pure_geom:
        q = schedule.tail_ratio
        s, tau = tail.scale, tail.ratio
        poly = float(mpmath.polylog(-alpha, tau)) if tau > 0 else 0.0
        closed_all = np.array([_closed_mm(q, s, tau, alpha, m, poly)
                               for m in range(far + 1)])
        closed_vals = closed_all[:mmax + 1]
        closed_tails = np.array([float(closed_all[m:].sum()) for m in range(mmax + 1)])
        gap = float(max(np.max(np.abs(closed_vals - values)),
                        np.max(np.abs(closed_tails - tails))))

    m0 = None
    if weight_finite:
        for m in range(mmax + 1):
            if T * tails[m] <= 1.0 + 1e-12:
                m0 = m
                break
    return MmSeries(alpha, T, values, tails, m0, closed_vals, closed_tails,
                    gap, sum_ok, weight_finite)


# ---------------------------------------------------------------------------
# Dini modulus of the multiscale coefficient
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiniReport:
    radii: np.ndarray
    omega: np.ndarray
    fitted_c: float
    overlay: np.ndarray
    integral: float
    theta: float                 # largest theta with eps_j >= theta**j up front
    level: int
    tail: float
    rho: float

    @property
    def below_overlay(self):
        return bool(np.all(self.omega <= self.overlay * (1.0 + 1e-9)))


def dini_modulus(h, radii, rho=1.0, samples=2048, rng=None) -> DiniReport:
    """Sampled continuity modulus of the multiscale coefficient with the
    square-root-plus-log overlay.

    omega(r) maximizes |a(x1) - a(x2)| over sampled pairs at distance
    below r; the overlay constant is fitted as the largest ratio of
    omega to sqrt(r) + |log r|^(-1-rho).  The Dini integral is evaluated
    on the sampled range in log-radius with a Lipschitz extension at the
    bottom.
    """
    if h.d != 1:
        raise ValueError("the Dini probe is implemented on the interval")
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    r_min = float(radii.min())
    level = 0
    while h.schedule.epsilon(level + 1) >= r_min / 4.0:
        level += 1
        if level > 64:
            break
    try:
        h.layer(level)
    except Exception:
        level = h.materialized - 1
    coeff = Coefficient1D.multiscale(h, level=level)
    rng = np.random.default_rng(rng)
    xs = rng.random(samples)
    omega = np.empty(radii.size)
    for i, r in enumerate(radii):
        base = np.clip(xs, 0.0, 1.0 - r)
        a0 = coeff(base)
        worst = 0.0
        for frac in (0.25, 0.5, 0.75, 1.0 - 1e-9):
            worst = max(worst, float(np.max(np.abs(coeff(base + frac * r) - a0))))
        omega[i] = worst
    shape = np.sqrt(radii) + np.abs(np.log(radii)) ** (-1.0 - rho)
    fitted_c = float(np.max(omega / shape))
    overlay = fitted_c * shape
    order = np.argsort(radii)
    integral = float(np.trapezoid(omega[order], np.log(radii[order])))
    integral += omega[order][0]     # Lipschitz extension below the smallest radius
    theta = min(h.schedule.epsilon(j) ** (1.0 / j)
                for j in range(1, h.schedule.horizon + 1))
    return DiniReport(radii, omega, fitted_c, overlay, integral, theta,
                      level, h.delta.tail_sum(level + 1), rho)
