"""Backward recursion of intermediate matrices and homogenized limits.

Homogenizing one scale at a time, from the fastest upward, produces the
intermediate matrices A_n^k; their tails B_k^n obey a backward recursion
in which each level requires one periodic cell solve per frozen slow
point.  Slow-variable dependence is cached on a quantized grid with
multilinear interpolation (exact keys optional), since the intermediate
matrices are Lipschitz in the slow variables.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass

import numpy as np

from .cell import TorusField, effective_matrix, solve_corrector, torus_grid
from .coefficients import CoefficientHierarchy, DeltaModel, TrigLayer

_ULP = np.finfo(float).eps


class BudgetError(RuntimeError):
    """Requested nesting depth exceeds the configured budget."""


class StructureError(ValueError):
    """Hierarchy lacks the structure required by a fast path."""


@dataclass(frozen=True)
class TruncationReport:
    level: int
    certified_bound: float
    tol: float
    stability_constant: float


@dataclass(frozen=True)
class BknReport:
    n: int
    k: int
    samples: int
    max_norm: float
    denom: float               # sum of declared bounds from k to n
    ratio: float
    identity_gap: float        # max |(A_n^k - A_{k-1}) - B_k^n|


@dataclass(frozen=True)
class DeltaRecursionState:
    """Worst-case recursion values against the closed product bound."""

    n: int
    c0: float
    values: np.ndarray
    bounds: np.ndarray
    margins: np.ndarray

    @property
    def ok(self) -> bool:
        slack = 4.0 * _ULP * np.maximum(self.bounds, 1.0)
        return bool(np.all(self.values <= self.bounds + slack))


@dataclass(frozen=True)
class StabilityReport:
    tau: float
    mu: float
    bound: float
    max_difference: float
    measured_ratio: float
    passed: bool
    points: int


def _budget(d):
    return 4 if d == 1 else 2


class IntermediateEvaluator:
    """Evaluates A_n^k and B_k^n through cached nested cell solves.

    ``cache_resolution`` snaps slow-variable tuples to an M-point grid
    per axis and interpolates multilinearly between fully converged cell
    solves; ``None`` keeps exact keys (pure memoization).  At k = n the
    evaluator returns the plain partial sum, bit-equal by construction.
    """

    def __init__(self, h: CoefficientHierarchy, n: int, N: int = 64,
                 rtol: float = 1e-10, cache_resolution: int | None = 16,
                 budget: int | None = None):
        self.h = h
        self.n = n
        self.N = N
        self.rtol = rtol
        self.M = cache_resolution
        self.budget = _budget(h.d) if budget is None else budget
        self._memo = {}
        self._lock = threading.Lock()
        self._grid = torus_grid(N, h.d).reshape(-1, h.d)
        h.layer(n)   # materialize now; evaluation itself is then pure

    # -- public evaluation --------------------------------------------------

    def evaluate(self, k, point):
        """A_n^k at point = (y0, y1, ..., yk)."""
        point = self._as_point(point, k)
        if k == self.n:
            return self.h.eval_partial_sum(k, *point)
        if self.n - k > self.budget:
            raise BudgetError(
                f"depth {self.n - k} exceeds the nesting budget {self.budget}")
        head = (self.h.eval_partial_sum(k - 1, *point[:k]) if k >= 1
                else np.zeros((self.h.d, self.h.d)))
        return head + self.bkn(k, point)

    def bkn(self, k, point):
        """B_k^n at point = (y0, ..., yk)."""
        point = self._as_point(point, k)
        if k == self.n:
            return self.h.layer(k).eval(*point)
        if self.n - k > self.budget:
            raise BudgetError(
                f"depth {self.n - k} exceeds the nesting budget {self.budget}")
        return self.h.layer(k).eval(*point) + self._corr(k, point)

    def ahat(self, x):
        """Homogenized matrix of the first n scales at slow point x."""
        return self.evaluate(0, (x,))

    def _as_point(self, point, k):
        pts = [np.asarray(p, dtype=float).reshape(self.h.d) for p in point]
        if len(pts) != k + 1:
            raise ValueError(f"level-{k} evaluation takes {k + 1} variables")
        return tuple(pts)

    # -- recursion -----------------------------------------------------------

    def _corr(self, level, ys):
        """Averaged corrector correction at (y0..y_level); zero at level n."""
        if level >= self.n:
            return np.zeros((self.h.d, self.h.d))
        if self.M is None:
            key = tuple(round(float(c), 14) for y in ys for c in y)
            return self._corr_exact(level, key)
        # snap each coordinate to the M-grid and interpolate multilinearly
        coords = [float(c) for y in ys for c in y]
        anchors = []
        for c in coords:
            t = c * self.M
            i0 = min(int(math.floor(t)), self.M - 1) if t < self.M else self.M - 1
            i0 = max(i0, 0)
            anchors.append((i0, min(max(t - i0, 0.0), 1.0)))
        out = np.zeros((self.h.d, self.h.d))
        for corner in itertools.product((0, 1), repeat=len(anchors)):
            w = 1.0
            key = []
            for bit, (i0, frac) in zip(corner, anchors):
                w *= frac if bit else 1.0 - frac
                key.append((i0 + bit) / self.M)
            if w == 0.0:
                continue
            out += w * self._corr_exact(level, tuple(key))
        return out

    def _corr_exact(self, level, key):
        memo_key = (level, key)
        cached = self._memo.get(memo_key)
        if cached is not None:
            return cached
        d = self.h.d
        ys = [np.array(key[j * d:(j + 1) * d]) for j in range(level + 1)]
        nodes = self._grid                      # (N**d, d) nodes of y_{level+1}
        bvals = self.h.layer(level + 1).eval(*ys, nodes)
        if level + 1 < self.n:
            corr = np.empty_like(bvals)
            for i in range(nodes.shape[0]):
                corr[i] = self._corr(level + 1, tuple(ys) + (nodes[i],))
            bvals = bvals + corr
        head = self.h.eval_partial_sum(level, *ys)
        shape = (self.N,) * d
        bfield = TorusField(bvals.reshape(shape + (d, d)), d)
        afield = TorusField((head + bvals).reshape(shape + (d, d)), d)
        sol = solve_corrector(afield, self.h.mu, self.rtol, rhs_part=bfield)
        value = effective_matrix(afield, sol, e0=np.zeros((d, d)), e1=bfield)
        with self._lock:
            self._memo[memo_key] = value
        return value

    # -- persisted cache -------------------------------------------------------

    def save_cache(self, path):
        """Write converged corrections as sorted text records."""
        m = "exact" if self.M is None else str(self.M)
        with open(path, "w") as f:
            f.write("# homoglab reiterate cache v1\n")
            f.write(f"{self.h.d} {self.n} {self.M if self.M is not None else 0} "
                    f"{self.N} {self.rtol}\n")
            for (level, key) in sorted(self._memo, key=lambda t: (t[0], t[1])):
                val = self._memo[(level, key)]
                coords = " ".join(float(c).hex() for c in key)
                entries = " ".join(float(v).hex() for v in val.ravel())
                f.write(f"{level} {len(key)} {coords} {entries}\n")

    def load_cache(self, path):
        """Merge records written by :meth:`save_cache`; header must match."""
        with open(path) as f:
            f.readline()
            header = f.readline().split()
            d, n, m, N = (int(header[0]), int(header[1]), int(header[2]), int(header[3]))
            rtol = float(header[4])
            mode = None if m == 0 else m
            if (d, n, mode, N) != (self.h.d, self.n, self.M, self.N) or rtol != self.rtol:
                raise ValueError("cache header does not match this evaluator")
            for line in f:
                parts = line.split()
                level = int(parts[0])
                nk = int(parts[1])
                key = tuple(float.fromhex(c) for c in parts[2:2 + nk])
                vals = np.array([float.fromhex(v) for v in parts[2 + nk:]])
                self._memo[(level, key)] = vals.reshape(self.h.d, self.h.d)


def intermediate_eval(h, n, k, point, N=64, rtol=1e-10, cache_resolution=16):
    """One-shot A_n^k evaluation; see :class:`IntermediateEvaluator`."""
    return IntermediateEvaluator(h, n, N, rtol, cache_resolution).evaluate(k, point)


def homogenized_matrix(h, tol, x, N=64, rtol=1e-10, cache_resolution=16,
                       evaluator=None):
    """Homogenized matrix at x with a certified truncation level.

    The level n is the smallest whose remaining declared tail, scaled by
    the stability constant 1/mu**4, is at most tol; exceeding the nesting
    budget raises with a suggestion to loosen the tolerance.
    """
    c_stab = h.mu ** (-4)
    n = h.delta.truncation_level(tol / c_stab)
    if n > _budget(h.d):
        raise BudgetError(
            f"certified truncation needs {n} levels, beyond the budget "
            f"{_budget(h.d)}; increase tol")
    ev = evaluator or IntermediateEvaluator(h, n, N, rtol, cache_resolution)
    report = TruncationReport(n, c_stab * h.delta.tail_sum(n + 1), tol, c_stab)
    return ev.ahat(x), report


def cache_error_estimate(h, n, x, N=64, rtol=1e-10, cache_resolution=16):
    """Self-reported interpolation error: halve the cache grid and compare."""
    coarse = IntermediateEvaluator(h, n, N, rtol, max(cache_resolution // 2, 2))
    fine = IntermediateEvaluator(h, n, N, rtol, cache_resolution)
    return float(np.max(np.abs(fine.ahat(x) - coarse.ahat(x))))


# ---------------------------------------------------------------------------
# separated fast path (d = 1)
# ---------------------------------------------------------------------------

def _own_variable_values(layer, grid):
    """Values b_k(s) of a layer that depends only on its last variable."""
    if isinstance(layer, TrigLayer):
        for t in layer.terms:
            if any(any(k) for k in t.modes[:-1]):
                raise StructureError(
                    f"layer {layer.level} depends on an earlier variable")
    zeros = [np.zeros(1)] * layer.level
    return layer.eval(*zeros, grid)[..., 0, 0]


class SeparatedEffective1D:
    """Nested scalar homogenization for separated 1d hierarchies.

    Requires every fast layer to depend only on its own variable; the
    level-k effective map is then a scalar function of the accumulated
    slow value, represented by a Chebyshev interpolant, and the
    homogenized matrix of n scales is its composition with B_0(x).
    """

    def __init__(self, h: CoefficientHierarchy, n: int, N: int = 256,
                 cheb_degree: int = 80):
        if h.d != 1:
            raise StructureError("separated fast path requires d = 1")
        self.h = h
        self.n = n
        grid = torus_grid(N, 1).reshape(-1, 1)
        b0 = h.layer(0)
        c0 = float(b0.constant_part()[0, 0])
        lo = c0 - b0.oscillation_bound()
        hi = c0 + b0.oscillation_bound()
        self._maps = None
        if n == 0:
            return
        bvals = [_own_variable_values(h.layer(k), grid) for k in range(1, n + 1)]
        pad = 1e-9 + 1e-9 * abs(hi)
        intervals = []
        for b in bvals:
            intervals.append((lo - pad, hi + pad))
            lo += float(b.min())
            hi += float(b.max())
        if intervals[-1][0] + float(bvals[-1].min()) <= 0.0:
            raise StructureError("separated recursion loses ellipticity")
        coeffs = None
        dom = None
        for k in range(n, 0, -1):
            t_lo, t_hi = intervals[k - 1]
            nodes = 0.5 * (t_lo + t_hi) + 0.5 * (t_hi - t_lo) * \
                np.polynomial.chebyshev.chebpts2(cheb_degree + 1)
            args = nodes[:, None] + bvals[k - 1][None, :]
            if coeffs is None:
                inner = args
            else:
                u = 2.0 * (args - dom[0]) / (dom[1] - dom[0]) - 1.0
                inner = np.polynomial.chebyshev.chebval(u, coeffs)
            vals = 1.0 / np.mean(1.0 / inner, axis=1)
            u_nodes = np.polynomial.chebyshev.chebpts2(cheb_degree + 1)
            coeffs = np.polynomial.chebyshev.chebfit(u_nodes, vals, cheb_degree)
            dom = (t_lo, t_hi)
        self._coeffs = coeffs
        self._dom = dom

    def __call__(self, x):
        """Ahat_n at slow points x (array-valued)."""
        x = np.asarray(x, dtype=float)
        b0x = self.h.layer(0).eval(x[..., None])[..., 0, 0]
        if self.n == 0:
            return b0x
        u = 2.0 * (b0x - self._dom[0]) / (self._dom[1] - self._dom[0]) - 1.0
        return np.polynomial.chebyshev.chebval(u, self._coeffs)


# ---------------------------------------------------------------------------
# probes and arithmetic checks
# ---------------------------------------------------------------------------

def bkn_norm_probe(h, n, k, samples=32, rng=None, N=64, rtol=1e-10,
                   cache_resolution=None) -> BknReport:
    """Sample |B_k^n| against the summed declared bounds.

    Also reports the gap in the identity B_k^n = A_n^k - A_{k-1},
    evaluating both sides through their own paths.
    """
    rng = np.random.default_rng(rng)
    ev = IntermediateEvaluator(h, n, N, rtol, cache_resolution)
    denom = sum(h.delta.value(l) for l in range(k, n + 1))
    worst = 0.0
    gap = 0.0
    for _ in range(samples):
        point = tuple(rng.random(h.d) for _ in range(k + 1))
        b = ev.bkn(k, point)
        worst = max(worst, float(np.linalg.norm(b, 2)))
        a_k = ev.evaluate(k, point)
        head = (h.eval_partial_sum(k - 1, *point[:k]) if k >= 1
                else np.zeros((h.d, h.d)))
        gap = max(gap, float(np.max(np.abs((a_k - head) - b))))
    ratio = worst / denom if denom > 0 else 0.0
    return BknReport(n, k, samples, worst, denom, ratio, gap)


def delta_recursion(delta, n, c0) -> DeltaRecursionState:
    """Run the backward bound recursion as equality and compare with the
    closed product bound.

    ``delta`` is a DeltaModel or a plain sequence of nonnegative values;
    the closed bound multiplies the tail sum R_k^n by
    exp(c0 [delta]_1) (1 + c0 [delta]_0 [delta]_1).
    """
    if not isinstance(delta, DeltaModel):
        delta = DeltaModel(tuple(float(v) for v in delta))
    dk = np.array([delta.value(l) for l in range(n + 1)])
    b0 = delta.bracket(0.0)
    b1 = delta.bracket(1.0)
    if not math.isfinite(b1):
        raise ValueError("[delta]_1 must be finite for the closed bound")
    rkn = np.empty(n + 1)
    vals = np.empty(n + 1)
    rkn[n] = dk[n]
    vals[n] = dk[n]
    for k in range(n - 1, -1, -1):
        rkn[k] = dk[k] + rkn[k + 1]
        s = rkn[k + 1]
        vals[k] = dk[k] + vals[k + 1] + c0 * s * vals[k + 1] + c0 * b0 * s * s
    factor = math.exp(c0 * b1) * (1.0 + c0 * b0 * b1)
    if not math.isfinite(factor):
        raise OverflowError(f"closed bound overflows for C0 = {c0}")
    bounds = factor * rkn
    return DeltaRecursionState(n, c0, vals, bounds, bounds - vals)


def stability_probe(h1, h2, tau=None, points=100, tol=1e-9, N=64,
                    rtol=1e-10, cache_resolution=16) -> StabilityReport:
    """Compare homogenized matrices of two coefficient hierarchies.

    With a certified sup-norm difference tau, the homogenized matrices
    may differ by at most tau/mu**4; the measured ratio (difference over
    tau) is reported and is typically far below the constant.
    """
    from .coefficients import certified_sup_difference

    if h1.d != h2.d:
        raise ValueError("hierarchies must share the dimension")
    if h1.schedule != h2.schedule:
        raise ValueError("hierarchies must share the scale schedule")
    if tau is None:
        tau = certified_sup_difference(h1, h2)
    mu = min(h1.mu, h2.mu)
    bound = tau / mu ** 4
    n1 = h1.delta.truncation_level(tol * h1.mu ** 4)
    n2 = h2.delta.truncation_level(tol * h2.mu ** 4)
    if max(n1, n2) > _budget(h1.d):
        raise BudgetError("stability probe needs a looser tol for these tails")
    ev1 = IntermediateEvaluator(h1, n1, N, rtol, cache_resolution)
    ev2 = IntermediateEvaluator(h2, n2, N, rtol, cache_resolution)
    xs = np.linspace(0.0, 1.0, points)
    worst = 0.0
    for x in xs:
        a1 = ev1.ahat(np.full(h1.d, x))
        a2 = ev2.ahat(np.full(h2.d, x))
        worst = max(worst, float(np.max(np.abs(a1 - a2))))
    ratio = worst / tau if tau > 0 else 0.0
    passed = worst <= bound * (1.0 + 1e-9) + 1e-15
    return StabilityReport(tau, mu, bound, worst, ratio, passed, points)
