"""Layered coefficient hierarchies and their decay-norm bookkeeping.

A hierarchy is a sum of layers B_0(y0) + B_1(y0,y1) + ... where y0 is the
slow variable on the unit domain and each y_l lives on the torus.  Layers
are trigonometric-polynomial tables by default, so periodicity, sup
bounds and Lipschitz bounds are certified from coefficient sums rather
than sampled.  Amplitude decay is tracked by a prefix of explicit values
plus a geometric or power-law tail with closed-form weighted sums.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .scales import ScaleSchedule

BOUNDARY_TOL = 1e-12


class DomainError(ValueError):
    """Slow-variable argument outside the unit domain."""


class ConfigurationError(ValueError):
    """Hierarchy description is inconsistent or divergent."""


# ---------------------------------------------------------------------------
# decay sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometricTail:
    """delta_l = scale * ratio**l for l past the explicit prefix."""

    scale: float
    ratio: float

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ConfigurationError(f"geometric tail ratio {self.ratio} not in [0, 1)")
        if self.scale < 0.0:
            raise ConfigurationError("tail scale must be nonnegative")

    def value(self, l):
        return self.scale * self.ratio ** l

    def sum_from(self, k):
        """Sum of values for l >= k."""
        if self.scale == 0.0 or self.ratio == 0.0:
            return 0.0 if k > 0 or self.scale == 0.0 else self.scale
        return self.scale * self.ratio ** k / (1.0 - self.ratio)

    def weighted_sum_from(self, alpha, k):
        """Sum of l**alpha * value(l) for l >= k (k >= 1)."""
        if self.scale == 0.0 or self.ratio == 0.0:
            return 0.0
        full = self.scale * float(mpmath.polylog(-alpha, self.ratio))
        head = sum(l ** alpha * self.value(l) for l in range(1, k))
        return max(full - head, 0.0)

    def finite(self, alpha):
        return True


@dataclass(frozen=True)
class PowerTail:
    """delta_l = scale * l**(-p) for l past the explicit prefix."""

    scale: float
    p: float

    def __post_init__(self):
        if self.p <= 1.0:
            raise ConfigurationError("power tail needs p > 1 for summability")
        if self.scale < 0.0:
            raise ConfigurationError("tail scale must be nonnegative")

    def value(self, l):
        return self.scale * float(l) ** (-self.p)

    def sum_from(self, k):
        return self.scale * float(mpmath.zeta(self.p, max(k, 1)))

    def weighted_sum_from(self, alpha, k):
        if not self.finite(alpha):
            return math.inf
        return self.scale * float(mpmath.zeta(self.p - alpha, max(k, 1)))

    def finite(self, alpha):
        return self.p - alpha > 1.0


@dataclass(frozen=True)
class DeltaModel:
    """Decay bounds delta_0, delta_1, ... with a closed-form tail.

    ``prefix`` holds delta_0 .. delta_L; the tail rule (if any) gives the
    values for l > L.
    """

    prefix: tuple[float, ...]
    tail: GeometricTail | PowerTail | None = None

    def __post_init__(self):
        if not self.prefix:
            raise ConfigurationError("need at least delta_0")
        if any(v < 0 for v in self.prefix):
            raise ConfigurationError("delta values must be nonnegative")

    @property
    def last_explicit(self) -> int:
        return len(self.prefix) - 1

    def value(self, l: int) -> float:
        if l < 0:
            raise ConfigurationError("delta index must be >= 0")
        if l < len(self.prefix):
            return self.prefix[l]
        if self.tail is None:
            return 0.0
        return self.tail.value(l)

    def tail_sum(self, k: int) -> float:
        """R_k: sum of delta_l for l >= k."""
        L = self.last_explicit
        total = sum(self.prefix[max(k, 0): L + 1])
        if self.tail is not None:
            total += self.tail.sum_from(max(k, L + 1))
        return total

    def bracket(self, alpha: float) -> float:
        """Weighted norm: sum of l**alpha * delta_l over l >= 1.

        For alpha == 0 the l = 0 term is included, matching the
        convention that the zeroth norm sums every layer amplitude.
        """
        L = self.last_explicit
        total = self.prefix[0] if alpha == 0 else 0.0
        total += sum(l ** alpha * self.prefix[l] for l in range(1, L + 1))
        if self.tail is not None:
            if not self.tail.finite(alpha):
                return math.inf
            total += self.tail.weighted_sum_from(alpha, L + 1)
        return total

    def finite(self, alpha: float) -> bool:
        return self.tail is None or self.tail.finite(alpha)

    def truncation_level(self, tol: float) -> int:
        """Smallest n with tail_sum(n + 1) <= tol."""
        if tol < 0:
            raise ConfigurationError("tolerance must be nonnegative")
        n = 0
        while self.tail_sum(n + 1) > tol + BOUNDARY_TOL:
            n += 1
            if n > 100000:
                raise ConfigurationError("tail does not reach the tolerance")
        return n


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _coerce_points(y, d):
    arr = np.asarray(y, dtype=float)
    if d == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        arr = arr[..., None]
    if arr.shape[-1] != d:
        raise DomainError(f"expected points with {d} components, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class TrigTerm:
    """One separable term: matrix times a product of cosine factors.

    ``modes[j]`` is the integer mode vector of variable j and
    ``phases[j]`` its phase; the factor is cos(2 pi <k, y_j> + phase).
    """

    matrix: np.ndarray
    modes: tuple[tuple[int, ...], ...]
    phases: tuple[float, ...]

    def matrix_norm(self):
        return float(np.linalg.norm(self.matrix, 2))


class TrigLayer:
    """Trigonometric-polynomial layer with certified bounds."""

    def __init__(self, level: int, d: int, terms):
        self.level = level
        self.d = d
        self.periodic = True
        self.terms = []
        for matrix, modes, phases in terms:
            m = np.array(matrix, dtype=float).reshape(d, d)
            km = tuple(tuple(int(c) for c in np.atleast_1d(k)) for k in modes)
            ph = tuple(float(p) for p in phases)
            if len(km) != level + 1 or len(ph) != level + 1:
                raise ConfigurationError(
                    f"level-{level} term needs {level + 1} modes and phases")
            if any(len(k) != d for k in km):
                raise ConfigurationError("mode vectors must have d components")
            self.terms.append(TrigTerm(m, km, ph))
        self.sup_bound = sum(t.matrix_norm() for t in self.terms)
        lips = []
        for j in range(level + 1):
            lips.append(sum(
                t.matrix_norm() * 2.0 * math.pi * math.hypot(*t.modes[j])
                for t in self.terms))
        self.lip_bounds = tuple(lips)

    @property
    def delta(self) -> float:
        return max([self.sup_bound, *self.lip_bounds])

    def constant_part(self) -> np.ndarray:
        """Sum of the mode-zero terms (the mean in every variable)."""
        out = np.zeros((self.d, self.d))
        for t in self.terms:
            if all(not any(k) for k in t.modes):
                out += t.matrix * math.prod(math.cos(p) for p in t.phases)
        return out

    def oscillation_bound(self) -> float:
        """Sup bound of the layer minus its constant part."""
        return sum(t.matrix_norm() for t in self.terms
                   if any(any(k) for k in t.modes))

    def eval(self, *ys):
        if len(ys) != self.level + 1:
            raise DomainError(f"level-{self.level} layer takes {self.level + 1} arguments")
        pts = [_coerce_points(y, self.d) for y in ys]
        batch = np.broadcast_shapes(*[p.shape[:-1] for p in pts])
        out = np.zeros(batch + (self.d, self.d))
        for t in self.terms:
            fac = np.ones(batch)
            for j, p in enumerate(pts):
                k = np.array(t.modes[j], dtype=float)
                if k.any():
                    fac = fac * np.cos(2.0 * np.pi * (p @ k) + t.phases[j])
                elif t.phases[j]:
                    fac = fac * math.cos(t.phases[j])
            out += fac[..., None, None] * t.matrix
        return out


class FuncLayer:
    """Layer backed by a closure, with declared (not certified) bounds."""

    def __init__(self, level, d, fn, sup_bound, lip_bounds, periodic=False):
        self.level = level
        self.d = d
        self.fn = fn
        self.sup_bound = float(sup_bound)
        self.lip_bounds = tuple(float(b) for b in lip_bounds)
        self.periodic = periodic
        if len(self.lip_bounds) != level + 1:
            raise ConfigurationError("need one Lipschitz bound per variable")

    @property
    def delta(self):
        return max([self.sup_bound, *self.lip_bounds])

    def constant_part(self):
        z = np.zeros(self.d)
        return np.asarray(self.fn(*([z] * (self.level + 1))), dtype=float).reshape(self.d, self.d)

    def oscillation_bound(self):
        return self.sup_bound

    def eval(self, *ys):
        pts = [_coerce_points(y, self.d) for y in ys]
        return np.asarray(self.fn(*pts), dtype=float)


def constant_layer(d, matrix):
    """Level-0 layer holding a constant matrix."""
    m = np.asarray(matrix, dtype=float) * np.eye(d) if np.isscalar(matrix) else matrix
    zero = (tuple([0] * d),)
    return TrigLayer(0, d, [(m, zero, (0.0,))])


def scalar_trig_layer(level, d, entries):
    """Isotropic layer from (amplitude, mode_per_variable, phase_per_variable).

    Each entry contributes amplitude * cos(...) * I; modes are integer
    vectors (scalars accepted in 1d).
    """
    terms = []
    for amp, modes, phases in entries:
        mat = float(amp) * np.eye(d)
        km = []
        for k in modes:
            kv = np.atleast_1d(k)
            if kv.size == 1 and d > 1:
                kv = np.concatenate([kv, np.zeros(d - 1)])
            km.append(tuple(int(c) for c in kv))
        terms.append((mat, tuple(km), tuple(phases)))
    return TrigLayer(level, d, terms)


# ---------------------------------------------------------------------------
# hierarchy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiscaleReport:
    level: int
    tail_bound: float
    tol: float


@dataclass(frozen=True)
class EllipticityReport:
    mu: float
    min_quotient: float
    passed: bool
    witness: tuple | None
    samples: int


@dataclass(frozen=True)
class ValidationReport:
    ellipticity_certified: float
    bounded_ok: bool          # sum of deltas <= 1/mu
    delta_sum: float
    mu: float

    @property
    def ok(self):
        return self.bounded_ok and self.ellipticity_certified >= self.mu - BOUNDARY_TOL


@dataclass(frozen=True)
class DeltaSummary:
    """Weighted decay norm with the derived rate constants.

    ``lambda_table`` maps each configured C0 to (Lambda0, Lambda); these
    are conditional on C0, which the source analysis leaves
    non-constructive.
    """

    alpha: float
    value: float
    finite: bool
    bracket0: float
    bracket1: float
    lambda_table: dict
    r_tails: np.ndarray
    sandwich: tuple
    sandwich_ok: bool


class CoefficientHierarchy:
    """Slow layer plus fast periodic layers with declared decay bounds.

    ``mu`` is the declared ellipticity constant; construction never
    enforces the boundedness convention (sum of deltas <= 1/mu) so that
    deliberately inconsistent declarations can be probed, but
    :meth:`validate` reports it.
    """

    def __init__(self, d, layers, schedule, delta=None, mu=None, layer_factory=None):
        if d not in (1, 2):
            raise ConfigurationError("only d = 1 and d = 2 are supported")
        self.d = d
        self._layers = list(layers)
        self._lock = threading.Lock()
        self.schedule = schedule
        self.layer_factory = layer_factory
        for l, layer in enumerate(self._layers):
            if layer.level != l or layer.d != d:
                raise ConfigurationError("layers must be contiguous levels of matching dimension")
        if not self._layers:
            raise ConfigurationError("need at least the slow layer B_0")
        if delta is None:
            delta = DeltaModel(tuple(l.delta for l in self._layers))
        self.delta = delta
        self._cert_ellipticity = self._certify_ellipticity()
        if mu is None:
            bracket0 = self.delta.bracket(0.0)
            mu = min(self._cert_ellipticity, 1.0 / bracket0 if bracket0 > 0 else math.inf)
            if mu <= 0:
                raise ConfigurationError("cannot certify a positive ellipticity constant")
        self.mu = float(mu)

    # -- layer access -----------------------------------------------------

    def _certify_ellipticity(self):
        b0 = self._layers[0]
        const = 0.5 * (b0.constant_part() + b0.constant_part().T)
        lam = float(np.linalg.eigvalsh(const).min())
        lam -= b0.oscillation_bound()
        for layer in self._layers[1:]:
            lam -= layer.sup_bound
        lam -= self.delta.tail_sum(len(self._layers))
        return lam

    def layer(self, l: int):
        if l < len(self._layers):
            return self._layers[l]
        if self.layer_factory is None:
            raise ConfigurationError(
                f"layer {l} not materialized and no layer factory declared")
        with self._lock:
            while len(self._layers) <= l:
                nxt = self.layer_factory(len(self._layers))
                if nxt.level != len(self._layers) or nxt.d != self.d:
                    raise ConfigurationError("layer factory produced a mismatched layer")
                self._layers.append(nxt)
        return self._layers[l]

    @property
    def materialized(self) -> int:
        return len(self._layers)

    def validate(self) -> ValidationReport:
        s = self.delta.bracket(0.0)
        return ValidationReport(self._cert_ellipticity, s <= 1.0 / self.mu + BOUNDARY_TOL,
                                s, self.mu)

    # -- evaluation -------------------------------------------------------

    def _check_domain(self, y0):
        pts = _coerce_points(y0, self.d)
        if np.any(pts < -BOUNDARY_TOL) or np.any(pts > 1.0 + BOUNDARY_TOL):
            raise DomainError("slow variable outside the unit domain")
        return pts

    def eval_partial_sum(self, n, y0, *fast):
        """Partial sum of the first n+1 layers at (y0, y1, ..., yn)."""
        if len(fast) != n:
            raise DomainError(f"partial sum at level {n} takes {n} fast arguments")
        y0 = self._check_domain(y0)
        args = [y0] + [_coerce_points(y, self.d) for y in fast]
        batch = np.broadcast_shapes(*[a.shape[:-1] for a in args])
        out = np.zeros(batch + (self.d, self.d))
        for l in range(n + 1):
            out = out + self.layer(l).eval(*args[:l + 1])
        return out

    def eval_multiscale(self, x, tol):
        """Value of the full multiscale coefficient at x, within tol.

        Truncates at the smallest level whose remaining tail of declared
        bounds is at most tol; returns the matrix and a report carrying
        the level used and the certified tail.
        """
        n = self.delta.truncation_level(tol)
        self.layer(n)
        x = self._check_domain(x)
        fast = [np.mod(x / self.schedule.epsilon(k), 1.0) for k in range(1, n + 1)]
        value = self.eval_partial_sum(n, x, *fast)
        return value, MultiscaleReport(n, self.delta.tail_sum(n + 1), tol)

    def scalar_multiscale(self, x, tol):
        """1d convenience: coefficient values a(x) on an array of points."""
        if self.d != 1:
            raise ConfigurationError("scalar evaluation requires d = 1")
        value, report = self.eval_multiscale(x, tol)
        return value[..., 0, 0], report

    # -- diagnostics -------------------------------------------------------

    def delta_norm(self, alpha, c0_values=(1.0, 10.0), horizon=400) -> DeltaSummary:
        """Weighted decay norm with tail sums and the sandwich check.

        The sandwich states that the alpha-weighted sum of the tails R_k
        lies between [delta]_{alpha+1}/(alpha+1) and [delta]_{alpha+1};
        it is evaluated numerically at the horizon.
        """
        val = self.delta.bracket(alpha)
        b0 = self.delta.bracket(0.0)
        b1 = self.delta.bracket(1.0)
        table = {}
        for c0 in c0_values:
            if math.isfinite(b1):
                lam0 = math.exp(c0 * b1) * (1.0 + c0 * b0 * b1)
                table[c0] = (lam0, lam0 + b0)
            else:
                table[c0] = (math.inf, math.inf)
        r = np.array([self.delta.tail_sum(k) for k in range(horizon + 1)])
        upper = self.delta.bracket(alpha + 1.0)
        lower = upper / (alpha + 1.0) if math.isfinite(upper) else math.inf
        ks = np.arange(1, horizon + 1, dtype=float)
        middle = float(np.sum(ks ** alpha * r[1:]))
        ok = (math.isfinite(upper)
              and lower * (1.0 - 1e-9) <= middle <= upper * (1.0 + 1e-9))
        return DeltaSummary(alpha, val, math.isfinite(val), b0, b1, table,
                            r, (lower, middle, upper), ok)

    def ellipticity_probe(self, samples, rng=None) -> EllipticityReport:
        """Minimum sampled Rayleigh quotient against the declared mu."""
        if samples < 1:
            raise ConfigurationError("need at least one sample")
        rng = np.random.default_rng(rng)
        L = self.materialized - 1
        best = math.inf
        witness = None
        for _ in range(samples):
            n = int(rng.integers(0, L + 1))
            y0 = rng.random(self.d)
            fast = [rng.random(self.d) for _ in range(n)]
            xi = rng.standard_normal(self.d)
            xi /= np.linalg.norm(xi)
            a = self.eval_partial_sum(n, y0, *fast)
            q = float(xi @ a @ xi)
            if q < best:
                best = q
                witness = (n, tuple(y0), tuple(tuple(f) for f in fast), tuple(xi))
        passed = best >= self.mu * (1.0 - 1e-9)
        return EllipticityReport(self.mu, best, passed,
                                 None if passed else witness, samples)

    # -- rescaling ----------------------------------------------------------

    def rescale(self, m: int) -> "CoefficientHierarchy":
        """Zoom to the m-th scale: collapse the first m+1 layers into the
        slow one, shift the rest, and rebook the decay bounds.

        The new bound for the collapsed layer is S * (delta_0 + ... +
        delta_m) and for the shifted layers S * delta_{l+m}, where S sums
        e_m/e_j over j <= m.
        """
        if m < 0:
            raise ConfigurationError("m must be >= 0")
        if m == 0:
            return self
        eps = [self.schedule.epsilon(j) for j in range(m + 1)]
        scales = [eps[m] / e for e in eps]
        S = float(sum(scales))
        slow_layers = [self.layer(j) for j in range(m + 1)]

        def collapsed(x):
            out = slow_layers[0].eval(scales[0] * x)
            for j in range(1, m + 1):
                out = out + slow_layers[j].eval(*[scales[i] * x for i in range(j + 1)])
            return out

        head = sum(self.delta.value(l) for l in range(m + 1))
        lip0 = sum(scales[i] * sl.lip_bounds[i]
                   for sl in slow_layers for i in range(sl.level + 1))
        new_layers = [FuncLayer(0, self.d, collapsed,
                                sup_bound=sum(sl.sup_bound for sl in slow_layers),
                                lip_bounds=(lip0,))]
        for l in range(1, self.materialized - m):
            orig = self.layer(l + m)

            def shifted(x, *fast, _orig=orig):
                return _orig.eval(*[scales[i] * x for i in range(m + 1)], *fast)

            s_lip0 = sum(scales[i] * orig.lip_bounds[i] for i in range(m + 1))
            new_layers.append(FuncLayer(l, self.d, shifted, orig.sup_bound,
                                        (s_lip0,) + tuple(orig.lip_bounds[m + 1:]),
                                        periodic=orig.periodic))

        new_prefix = [S * head] + [S * self.delta.value(l + m)
                                   for l in range(1, self.materialized - m)]
        tail = self.delta.tail
        if isinstance(tail, GeometricTail):
            new_tail = GeometricTail(S * tail.scale * tail.ratio ** m, tail.ratio)
        elif tail is None:
            new_tail = None
        else:
            raise ConfigurationError("rescaling supports geometric or zero tails")
        factory = None
        if self.layer_factory is not None:
            def factory(l, _self=self, _scales=scales, _m=m):
                orig = _self.layer(l + _m)

                def shifted(x, *fast, _orig=orig):
                    return _orig.eval(*[_scales[i] * x for i in range(_m + 1)], *fast)

                s_lip0 = sum(_scales[i] * orig.lip_bounds[i] for i in range(_m + 1))
                return FuncLayer(l, _self.d, shifted, orig.sup_bound,
                                 (s_lip0,) + tuple(orig.lip_bounds[_m + 1:]),
                                 periodic=orig.periodic)

        return CoefficientHierarchy(self.d, new_layers, self.schedule.rescale(m),
                                    DeltaModel(tuple(new_prefix), new_tail),
                                    mu=self.mu, layer_factory=factory)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def weierstrass_builder(tau, ratio, levels, d=1, base=None, horizon=64):
    """Hierarchy of the form B_0(x) + sum_k tau**k g((x / ratio**k)) I.

    The fast generator is sin(2 pi y_1)/(2 pi), normalized so its
    certified bound is exactly one; level k then carries the declared
    bound tau**k.  ``tau`` must lie in (0, 1/2] by the smallness
    convention, ``ratio`` in (0, 1); ``levels`` fast layers are
    materialized eagerly and the rest come from a factory.
    """
    if not (0.0 < tau <= 0.5):
        raise ConfigurationError(f"tau = {tau} rejected; need tau in (0, 1/2]")
    if not (0.0 < ratio < 1.0):
        raise ConfigurationError(f"ratio = {ratio} outside (0, 1)")
    if levels < 0:
        raise ConfigurationError("levels must be >= 0")
    if base is None:
        base = constant_layer(d, 2.0)

    def fast_layer(k):
        amp = tau ** k / (2.0 * math.pi)
        modes = [[0] * d] * k + [[1] + [0] * (d - 1)]
        phases = [0.0] * k + [-math.pi / 2.0]
        return scalar_trig_layer(k, d, [(amp, modes, phases)])

    layers = [base] + [fast_layer(k) for k in range(1, levels + 1)]
    delta = DeltaModel((base.delta,), GeometricTail(1.0, tau))
    schedule = ScaleSchedule.geometric(ratio, horizon)
    return CoefficientHierarchy(d, layers, schedule, delta,
                                layer_factory=fast_layer)


def certified_sup_difference(h1: CoefficientHierarchy, h2: CoefficientHierarchy) -> float:
    """Certified sup-norm bound of the coefficient difference.

    Matches trig terms of equal modes and phases level by level and sums
    the norms of the matrix differences; unmatched terms and tails enter
    with their full bounds.
    """
    total = 0.0
    levels = max(h1.materialized, h2.materialized)
    for l in range(levels):
        l1 = h1.layer(l) if l < h1.materialized else None
        l2 = h2.layer(l) if l < h2.materialized else None
        if l1 is None or l2 is None:
            total += (l1 or l2).sup_bound
            continue
        if not (isinstance(l1, TrigLayer) and isinstance(l2, TrigLayer)):
            total += l1.sup_bound + l2.sup_bound
            continue
        t2 = {(t.modes, t.phases): t.matrix.copy() for t in l2.terms}
        for t in l1.terms:
            key = (t.modes, t.phases)
            if key in t2:
                total += float(np.linalg.norm(t.matrix - t2.pop(key), 2))
            else:
                total += t.matrix_norm()
        total += sum(float(np.linalg.norm(mat, 2)) for mat in t2.values())
    total += h1.delta.tail_sum(h1.materialized) + h2.delta.tail_sum(h2.materialized)
    return total
