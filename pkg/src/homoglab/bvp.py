"""Dirichlet boundary value problems on the interval and the square.

The 1d solver integrates the quadrature identity for the flux exactly up
to composite-Simpson error and is the ground-truth oracle for the rate
experiments; the 2d solver is conservative second-order finite
differences.  Norm accessors include boundary-layer restrictions and the
module assembles the smoothed two-scale expansion defect in 1d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate as integrate
import scipy.sparse as sparse
import scipy.sparse.linalg as spla


class ResolutionError(RuntimeError):
    """Grid does not resolve the finest retained oscillation."""


# ---------------------------------------------------------------------------
# coefficient sources
# ---------------------------------------------------------------------------

class Coefficient1D:
    """Scalar coefficient a(x) on the unit interval.

    Sources: an explicit callable, the truncated multiscale sum of a
    hierarchy, or its homogenized matrix at a matching truncation level.
    """

    def __init__(self, fn, kind="explicit", level=None, finest_scale=None, meta=None):
        self._fn = fn
        self.kind = kind
        self.level = level
        self.finest_scale = finest_scale
        self.meta = meta or {}

    def __call__(self, x):
        return np.asarray(self._fn(np.asarray(x, dtype=float)), dtype=float)

    @staticmethod
    def explicit(fn):
        return Coefficient1D(fn)

    @staticmethod
    def multiscale(h, tol=None, level=None):
        """Truncated multiscale coefficient; level wins over tol."""
        if level is None:
            if tol is None:
                raise ValueError("need a tolerance or an explicit level")
            level = h.delta.truncation_level(tol)
        h.layer(level)
        eps = [h.schedule.epsilon(k) for k in range(1, level + 1)]

        def fn(x):
            args = [x] + [np.mod(x / e, 1.0) for e in eps]
            total = np.zeros_like(x)
            for l in range(level + 1):
                total = total + h.layer(l).eval(*[a[..., None] for a in args[:l + 1]])[..., 0, 0]
            return total

        finest = eps[-1] if eps else None
        return Coefficient1D(fn, "multiscale", level, finest,
                             {"tail": h.delta.tail_sum(level + 1)})

    @staticmethod
    def homogenized(h, level, cheb_degree=80):
        """Homogenized coefficient of the first ``level`` scales."""
        from .reiterate import SeparatedEffective1D
        sep = SeparatedEffective1D(h, level, cheb_degree=cheb_degree)
        return Coefficient1D(lambda x: sep(x), "homogenized", level, None)


@dataclass
class BVProblem:
    """Dirichlet problem description.

    On the interval ``g`` is the pair of endpoint values; on the square
    it is a callable of boundary points.  ``f`` is a callable or a
    constant.
    """

    domain: str
    coeff: object
    f: object = 0.0
    g: object = (0.0, 0.0)

    def source_values(self, *coords):
        if callable(self.f):
            return np.asarray(self.f(*coords), dtype=float)
        return np.full_like(coords[0], float(self.f))


# ---------------------------------------------------------------------------
# solutions and norms
# ---------------------------------------------------------------------------

def _indicator_integral(x, vals, lo, hi):
    """Trapezoid integral of the linear interpolant over [lo, hi]."""
    if hi <= lo:
        return 0.0
    cuts = [c for c in (lo, hi) if x[0] < c < x[-1]]
    xx = np.union1d(x, cuts)
    vv = np.interp(xx, x, vals)
    mask = (xx >= lo) & (xx <= hi)
    return float(integrate.trapezoid(vv[mask], xx[mask]))


@dataclass
class FieldSolution1D:
    """Solution samples on a uniform interval grid with exact slopes."""

    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    meta: dict = field(default_factory=dict)

    def l2(self):
        return math.sqrt(float(integrate.simpson(self.u ** 2, x=self.x)))

    def h1_semi(self):
        return math.sqrt(float(integrate.simpson(self.du ** 2, x=self.x)))

    def linf(self):
        return float(np.max(np.abs(self.u)))

    def layer_l2(self, t):
        """L2 norm over the boundary layer {dist(x, boundary) < t}."""
        if not (0.0 < t < 0.5):
            raise ValueError("layer width must lie in (0, 1/2)")
        sq = self.u ** 2
        total = _indicator_integral(self.x, sq, 0.0, t) \
            + _indicator_integral(self.x, sq, 1.0 - t, 1.0)
        return math.sqrt(max(total, 0.0))

    def complement_layer_l2(self, t):
        if not (0.0 < t < 0.5):
            raise ValueError("layer width must lie in (0, 1/2)")
        sq = self.u ** 2
        return math.sqrt(max(_indicator_integral(self.x, sq, t, 1.0 - t), 0.0))

    def resampled(self, x):
        return FieldSolution1D(x, np.interp(x, self.x, self.u),
                               np.interp(x, self.x, self.du),
                               dict(self.meta, resampled=True))

    def diff(self, other):
        o = other if np.array_equal(other.x, self.x) else other.resampled(self.x)
        return FieldSolution1D(self.x, self.u - o.u, self.du - o.du,
                               {"difference": True,
                                "resampled": o.meta.get("resampled", False)})


def solve_1d_exact(problem: BVProblem, npanels: int = 4096) -> FieldSolution1D:
    """Exact-quadrature solve of -(a u')' = f on (0,1), u(0), u(1) given.

    The flux identity a u' = c - F with F the antiderivative of f reduces
    the solve to cumulative quadrature; the result is exact up to the
    composite-Simpson error of the grid.  The returned slopes come from
    the flux formula, not from differencing.
    """
    if problem.domain != "interval":
        raise ValueError("solve_1d_exact expects an interval problem")
    coeff = problem.coeff
    if not isinstance(coeff, Coefficient1D):
        coeff = Coefficient1D.explicit(coeff)
    finest = coeff.finest_scale
    underresolved = bool(finest is not None and 1.0 / npanels > finest / 32.0)
    x = np.linspace(0.0, 1.0, npanels + 1)
    a = coeff(x)
    if np.any(a <= 0.0):
        raise ValueError("coefficient must be positive on the grid")
    fvals = problem.source_values(x)
    g0, g1 = problem.g
    F = integrate.cumulative_simpson(fvals, x=x, initial=0.0)
    inv_a = integrate.cumulative_simpson(1.0 / a, x=x, initial=0.0)
    F_over_a = integrate.cumulative_simpson(F / a, x=x, initial=0.0)
    c = (g1 - g0 + F_over_a[-1]) / inv_a[-1]
    u = g0 + c * inv_a - F_over_a
    du = (c - F) / a
    return FieldSolution1D(x, u, du, {
        "flux_constant": float(c),
        "npanels": npanels,
        "coefficient": coeff.kind,
        "level": coeff.level,
        "underresolved": underresolved,
    })


# ---------------------------------------------------------------------------
# two-dimensional solver
# ---------------------------------------------------------------------------

@dataclass
class FieldSolution2D:
    """Solution on the (N+1)^2 tensor grid of the unit square."""

    x: np.ndarray              # 1d axis, shared by both directions
    u: np.ndarray              # (N+1, N+1), u[i, j] at (x[i], x[j])
    meta: dict = field(default_factory=dict)

    def gradient(self):
        gx = np.gradient(self.u, self.x, axis=0)
        gy = np.gradient(self.u, self.x, axis=1)
        return gx, gy

    def l2(self):
        return math.sqrt(float(integrate.trapezoid(
            integrate.trapezoid(self.u ** 2, x=self.x, axis=1), x=self.x)))

    def h1_semi(self):
        gx, gy = self.gradient()
        sq = gx ** 2 + gy ** 2
        return math.sqrt(float(integrate.trapezoid(
            integrate.trapezoid(sq, x=self.x, axis=1), x=self.x)))

    def layer_l2(self, t):
        X, Y = np.meshgrid(self.x, self.x, indexing="ij")
        dist = np.minimum.reduce([X, 1.0 - X, Y, 1.0 - Y])
        sq = np.where(dist < t, self.u ** 2, 0.0)
        return math.sqrt(float(integrate.trapezoid(
            integrate.trapezoid(sq, x=self.x, axis=1), x=self.x)))

    def diff(self, other):
        return FieldSolution2D(self.x, self.u - other.u, {"difference": True})


def solve_2d(problem: BVProblem, N: int = 64) -> FieldSolution2D:
    """Conservative finite differences for -div(A grad u) = f, Dirichlet.

    A is a 2x2 matrix field; diagonal entries use face-averaged
    conservative differencing (an M-matrix stencil for scalar
    coefficients), the off-diagonal part centered cross differences.
    Direct sparse factorization keeps runs deterministic.
    """
    if problem.domain != "square":
        raise ValueError("solve_2d expects a square problem")
    if N < 16:
        raise ValueError("N must be at least 16")
    coeff = problem.coeff
    finest = getattr(coeff, "finest_scale", None)
    if finest is not None and N < 8.0 / finest:
        raise ResolutionError(
            f"N = {N} does not resolve the finest retained scale {finest:.3e}; "
            f"need N >= {math.ceil(8.0 / finest)}")
    x = np.linspace(0.0, 1.0, N + 1)
    h = 1.0 / N
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    A = np.asarray(coeff(pts), dtype=float)
    if A.shape != (N + 1, N + 1, 2, 2):
        raise ValueError("coefficient callable must return a 2x2 matrix per point")

    gfun = problem.g if callable(problem.g) else (lambda p: np.full(p.shape[:-1], float(problem.g)))
    u = np.zeros((N + 1, N + 1))
    for sl in (np.s_[0, :], np.s_[-1, :], np.s_[:, 0], np.s_[:, -1]):
        u[sl] = gfun(pts[sl])

    n_in = N - 1
    idx = lambda i, j: (i - 1) * n_in + (j - 1)
    rows, cols, vals = [], [], []
    rhs = problem.source_values(X[1:-1, 1:-1], Y[1:-1, 1:-1]).ravel().astype(float)

    a11, a22 = A[..., 0, 0], A[..., 1, 1]
    a12, a21 = A[..., 0, 1], A[..., 1, 0]

    def add(i, j, ii, jj, v):
        r = idx(i, j)
        if 1 <= ii <= N - 1 and 1 <= jj <= N - 1:
            rows.append(r)
            cols.append(idx(ii, jj))
            vals.append(v)
        else:
            rhs[r] -= v * u[ii, jj]

    inv_h2 = 1.0 / h ** 2
    inv_4h2 = 1.0 / (4.0 * h ** 2)
    for i in range(1, N):
        for j in range(1, N):
            ae = 0.5 * (a11[i, j] + a11[i + 1, j]) * inv_h2
            aw = 0.5 * (a11[i, j] + a11[i - 1, j]) * inv_h2
            an = 0.5 * (a22[i, j] + a22[i, j + 1]) * inv_h2
            as_ = 0.5 * (a22[i, j] + a22[i, j - 1]) * inv_h2
            add(i, j, i, j, ae + aw + an + as_)
            add(i, j, i + 1, j, -ae)
            add(i, j, i - 1, j, -aw)
            add(i, j, i, j + 1, -an)
            add(i, j, i, j - 1, -as_)
            # cross terms: -d_x(a12 u_y) - d_y(a21 u_x), centered
            if a12[i, j] or a21[i, j] or a12[i + 1, j] or a12[i - 1, j] \
                    or a21[i, j + 1] or a21[i, j - 1]:
                for di, dj, w in (
                    (1, 1, -(a12[i + 1, j] + a21[i, j + 1]) * inv_4h2),
                    (-1, -1, -(a12[i - 1, j] + a21[i, j - 1]) * inv_4h2),
                    (1, -1, (a12[i + 1, j] + a21[i, j - 1]) * inv_4h2),
                    (-1, 1, (a12[i - 1, j] + a21[i, j + 1]) * inv_4h2),
                ):
                    add(i, j, i + di, j + dj, w)
    mat = sparse.csc_matrix((vals, (rows, cols)), shape=(n_in ** 2, n_in ** 2))
    try:
        sol = spla.splu(mat).solve(rhs)
    except RuntimeError as exc:
        raise RuntimeError(f"singular linear system in 2d solve: {exc}") from exc
    u[1:-1, 1:-1] = sol.reshape(n_in, n_in)
    return FieldSolution2D(x, u, {"N": N})


# ---------------------------------------------------------------------------
# two-scale expansion defect (1d)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefectReport:
    eps: float
    w_l2: float
    grad_w_l2: float
    w_over_eps: float
    grad_over_sqrt_eps: float
    resampled: bool


def bump_kernel(x, eps):
    """Polynomial mollifier (1 - |2x/eps|^2)^4 on |x| < eps/2, unnormalized."""
    s = np.clip(1.0 - (2.0 * x / eps) ** 2, 0.0, None)
    return s ** 4


def cutoff(x, eps):
    """Cutoff vanishing within 3 eps of the boundary, one beyond 4 eps."""
    dist = np.minimum(x, 1.0 - x)
    s = np.clip((dist - 3.0 * eps) / eps, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def two_scale_defect(u_eps: FieldSolution1D, u0: FieldSolution1D, chi,
                     schedule, eps_index: int, width: float | None = None) -> DefectReport:
    """Defect of the smoothed first-order two-scale expansion.

    Subtracts eps * S(eta chi(x/eps) u0') from the solution difference,
    where S mollifies the slow factor at scale eps with a normalized
    polynomial bump supported in a ball of radius eps/2.  Interior
    cutoff: eta vanishes on the 3 eps collar and is one beyond 4 eps.
    """
    eps = schedule.epsilon(eps_index) if hasattr(schedule, "epsilon") else float(schedule)
    width = eps if width is None else width
    x = u_eps.x
    resampled = not np.array_equal(u0.x, x)
    v0 = u0.resampled(x) if resampled else u0

    if hasattr(chi, "chi"):
        ygrid = np.arange(chi.N) / chi.N
        chi_vals = chi.chi.values[:, 0]
        chi_slope = chi.grad_chi.values[:, 0, 0]
    else:
        ygrid, chi_vals, chi_slope = chi
    yper = np.concatenate([ygrid, [1.0]])
    cper = np.concatenate([chi_vals, chi_vals[:1]])
    sper = np.concatenate([chi_slope, chi_slope[:1]])
    phase = np.mod(x / eps, 1.0)
    chi_eps = np.interp(phase, yper, cper)
    slope_eps = np.interp(phase, yper, sper)

    h = x[1] - x[0]
    eta = cutoff(x, eps)
    slow = eta * v0.du
    half = int(math.floor(0.5 * width / h))
    ker = bump_kernel(np.arange(-half, half + 1) * h, width)
    ker /= ker.sum() * h
    smooth = np.convolve(slow, ker, mode="same") * h
    dsmooth = np.gradient(smooth, x)

    w = u_eps.u - v0.u - eps * chi_eps * smooth
    dw = u_eps.du - v0.du - slope_eps * smooth - eps * chi_eps * dsmooth
    wf = FieldSolution1D(x, w, dw)
    return DefectReport(eps, wf.l2(), wf.h1_semi(),
                        wf.l2() / eps, wf.h1_semi() / math.sqrt(eps), resampled)
