"""Periodic cell problems on the torus: correctors, flux correctors and
effective matrices for a single fast scale.

d = 1 is solved in closed form through the harmonic mean; d = 2 uses
Fourier collocation with the constant-coefficient Laplacian as
preconditioner inside a Krylov iteration.  Averages over the torus use
the trapezoid rule on the periodic grid, which is spectrally accurate
for smooth integrands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla


class CellSolverError(RuntimeError):
    """Iteration failed to reach the requested residual."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CellInputError(ValueError):
    """Cell problem input violates a precondition."""


def torus_grid(N, d):
    """Uniform nodes of [0,1)^d; returns (N,)*d + (d,) coordinates."""
    axes = [np.arange(N) / N] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


@dataclass
class TorusField:
    """Samples on the uniform periodic grid of [0,1)^d.

    Grid axes come first; any matrix/vector component axes trail.
    """

    values: np.ndarray
    d: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim < self.d:
            raise CellInputError("field values need one axis per dimension")

    @property
    def N(self):
        return self.values.shape[0]

    def mean(self):
        return self.values.mean(axis=tuple(range(self.d)))

    def l2(self):
        sq = np.sum(self.values.reshape(self.values.shape[:self.d] + (-1,)) ** 2, axis=-1)
        return math.sqrt(float(sq.mean()))


def field_from_function(fn, N, d):
    """Sample a callable of torus points into a TorusField."""
    pts = torus_grid(N, d)
    return TorusField(np.asarray(fn(pts), dtype=float), d)


@dataclass
class CellSolution:
    """Correctors and derived quantities of one cell problem."""

    d: int
    N: int
    chi: TorusField            # (..., d): component j is the j-th corrector
    grad_chi: TorusField       # (..., d, d): [..., i, j] = d_i chi^j
    effective: np.ndarray | None = None
    flux: TorusField | None = None          # F_{ij}
    phi: TorusField | None = None           # (..., d, d, d): phi_{kij}
    residuals: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# spectral helpers
# ---------------------------------------------------------------------------

def _wavenumbers(N, d):
    """Integer wavenumber grids, Nyquist row zeroed for odd derivatives."""
    k = np.fft.fftfreq(N) * N
    if N % 2 == 0:
        k[N // 2] = 0.0
    mesh = np.meshgrid(*([k] * d), indexing="ij")
    return np.stack(mesh, axis=0)


def spectral_gradient(values, d):
    """Gradient of a scalar periodic grid function, shape (d,) + grid."""
    N = values.shape[0]
    k = _wavenumbers(N, d)
    vhat = np.fft.fftn(values)
    grads = [np.fft.ifftn(2j * np.pi * k[i] * vhat).real for i in range(d)]
    return np.stack(grads, axis=0)


def spectral_divergence(vec, d):
    """Divergence of a (d,) + grid vector field."""
    N = vec.shape[1]
    k = _wavenumbers(N, d)
    out = np.zeros(vec.shape[1:], dtype=complex)
    for i in range(d):
        out += 2j * np.pi * k[i] * np.fft.fftn(vec[i])
    return np.fft.ifftn(out).real


def spectral_poisson(rhs, d):
    """Mean-zero periodic solution of Laplace u = rhs (rhs mean-zero)."""
    N = rhs.shape[0]
    k = _wavenumbers(N, d)
    sym = -(2.0 * np.pi) ** 2 * np.sum(k ** 2, axis=0)
    rhat = np.fft.fftn(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        uhat = np.where(sym != 0.0, rhat / sym, 0.0)
    return np.fft.ifftn(uhat).real


def spectral_antiderivative_1d(values):
    """Mean-zero periodic antiderivative of a mean-zero 1d grid function."""
    N = values.shape[0]
    k = np.fft.fftfreq(N) * N
    if N % 2 == 0:
        k[N // 2] = 0.0
    vhat = np.fft.fft(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        uhat = np.where(k != 0.0, vhat / (2j * np.pi * k), 0.0)
    return np.fft.ifft(uhat).real


# ---------------------------------------------------------------------------
# corrector solves
# ---------------------------------------------------------------------------

def _check_inputs(A, mu):
    if A.values.shape[A.d:] != (A.d, A.d):
        raise CellInputError("coefficient field must be matrix valued")
    if A.d == 1:
        diag = A.values[..., 0, 0]
        if np.any(diag < mu * (1.0 - 1e-9)):
            raise CellInputError("coefficient drops below the declared ellipticity")
    else:
        sym = 0.5 * (A.values + np.swapaxes(A.values, -1, -2))
        lam = np.linalg.eigvalsh(sym).min()
        if lam < mu * (1.0 - 1e-9):
            raise CellInputError("coefficient drops below the declared ellipticity")


def solve_corrector(A: TorusField, mu: float, rtol: float = 1e-10,
                    rhs_part: TorusField | None = None, maxiter: int = 2000) -> CellSolution:
    """Periodic mean-zero correctors for the coefficient field A.

    Solves, for each direction j, the divergence-form cell equation whose
    right-hand side is the divergence of A e_j (or of the declared small
    part ``rhs_part`` e_j, which yields the same solution when the
    remainder is constant in the fast variable but preserves the
    smallness structure in the discrete system).

    d = 1 uses the closed form: the corrector slope is the harmonic mean
    over the cell divided by the coefficient, minus one.
    """
    _check_inputs(A, mu)
    d, N = A.d, A.N
    E = A if rhs_part is None else rhs_part
    if d == 1:
        # a chi' + e is constant; the constant is fixed by the zero mean of chi'
        a = A.values[:, 0, 0]
        e = E.values[:, 0, 0]
        c = np.mean(e / a) / np.mean(1.0 / a)
        grad = (c - e) / a
        chi = spectral_antiderivative_1d(grad)
        res = float(np.max(np.abs(a * grad + e - c)))
        return CellSolution(1, N, TorusField(chi[:, None], 1),
                            TorusField(grad[:, None, None], 1),
                            residuals={"corrector": res})

    if N & (N - 1):
        raise CellInputError("grid resolution must be a power of two")
    k = _wavenumbers(N, d)
    sym = (2.0 * np.pi) ** 2 * np.sum(k ** 2, axis=0)
    ref = float(np.trace(A.mean()) / d)
    n_dof = N ** d
    shape = (N,) * d

    def apply_op(u_flat):
        u = u_flat.reshape(shape)
        g = spectral_gradient(u, d)                       # (d,) + grid
        flux = np.einsum("...ij,j...->i...", A.values, g)
        return -spectral_divergence(flux, d).ravel()

    def apply_prec(r_flat):
        r = r_flat.reshape(shape)
        rhat = np.fft.fftn(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            uhat = np.where(sym != 0.0, rhat / (ref * sym), 0.0)
        return np.fft.ifftn(uhat).real.ravel()

    op = spla.LinearOperator((n_dof, n_dof), matvec=apply_op)
    prec = spla.LinearOperator((n_dof, n_dof), matvec=apply_prec)
    symmetric = np.allclose(A.values, np.swapaxes(A.values, -1, -2), atol=1e-13)

    chis = np.zeros(shape + (d,))
    grads = np.zeros(shape + (d, d))
    residuals = {}
    for j in range(d):
        rhs = spectral_divergence(np.moveaxis(E.values[..., :, j], -1, 0), d)
        rhs -= rhs.mean()
        history = []

        def cb(xk):
            history.append(float(np.linalg.norm(apply_op(xk) - rhs.ravel())))

        solver = spla.cg if symmetric else spla.bicgstab
        sol, info = solver(op, rhs.ravel(), rtol=rtol, atol=0.0, M=prec,
                           maxiter=maxiter, callback=cb if not symmetric else None)
        resid = float(np.linalg.norm(apply_op(sol) - rhs.ravel())
                      / max(np.linalg.norm(rhs), 1e-300))
        if info != 0 or resid > 10.0 * rtol:
            raise CellSolverError(
                f"cell solve for direction {j} stalled at residual {resid:.3e}",
                history)
        u = sol.reshape(shape)
        u -= u.mean()
        chis[..., j] = u
        g = spectral_gradient(u, d)
        for i in range(d):
            grads[..., i, j] = g[i]
        residuals[f"corrector_{j}"] = resid
    return CellSolution(d, N, TorusField(chis, d), TorusField(grads, d),
                        residuals=residuals)


def effective_matrix(A: TorusField, sol: CellSolution,
                     e0: np.ndarray | None = None,
                     e1: TorusField | None = None) -> np.ndarray:
    """Homogenized matrix: cell average of A(I + grad chi).

    With a declared split A = E0 + E1 the equivalent form
    E0 + mean(E1 (I + grad chi)) is used, so the output minus E0 depends
    only on the small part and the corrector.
    """
    if e0 is not None and e1 is not None:
        flux = e1.values + np.einsum("...il,...lj->...ij", e1.values, sol.grad_chi.values)
        return np.asarray(e0, dtype=float) + TorusField(flux, A.d).mean()
    flux = A.values + np.einsum("...il,...lj->...ij", A.values, sol.grad_chi.values)
    return TorusField(flux, A.d).mean()


def flux_corrector(A: TorusField, sol: CellSolution, ahat: np.ndarray,
                   tol: float = 1e-8) -> CellSolution:
    """Skew-symmetric potential of the mean-zero flux defect F.

    F_{ij} = A_{ij} + sum_l A_{il} d_l chi^j - ahat_{ij} must have zero
    cell average (guaranteed when ahat came from the same solution);
    phi_{kij} solves a periodic Poisson problem and satisfies
    sum_k d_k phi_{kij} = F_{ij} up to the solver residual.
    """
    d, N = A.d, A.N
    F = (A.values + np.einsum("...il,...lj->...ij", A.values, sol.grad_chi.values)
         - np.asarray(ahat, dtype=float))
    fmean = np.abs(F.mean(axis=tuple(range(d))))
    if fmean.max() > tol:
        raise CellInputError(
            f"flux defect has nonzero mean {fmean.max():.3e}; "
            "effective matrix inconsistent with the corrector solution")
    phi = np.zeros((N,) * d + (d, d, d))
    if d > 1:
        dF = np.stack([np.stack([spectral_gradient(F[..., i, j], d)
                                 for j in range(d)], axis=-1)
                       for i in range(d)], axis=-2)    # (d,) + grid + (d, d): [k, ..., i, j]
        for k in range(d):
            for i in range(k + 1, d):
                for j in range(d):
                    rhs = dF[k, ..., i, j] - dF[i, ..., k, j]
                    p = spectral_poisson(rhs, d)
                    phi[..., k, i, j] = p
                    phi[..., i, k, j] = -p
    div = np.zeros((N,) * d + (d, d))
    for i in range(d):
        for j in range(d):
            div[..., i, j] = spectral_divergence(
                np.stack([phi[..., k, i, j] for k in range(d)], axis=0), d)
    res = float(np.max(np.abs(div - F))) if d > 1 else float(np.max(np.abs(F)))
    sol.effective = np.asarray(ahat, dtype=float)
    sol.flux = TorusField(F, d)
    sol.phi = TorusField(phi, d)
    sol.residuals["flux_identity"] = res
    return sol


def solve_cell(A: TorusField, mu: float, rtol: float = 1e-10,
               rhs_part: TorusField | None = None, with_flux: bool = True) -> CellSolution:
    """Corrector, effective matrix and (optionally) flux corrector."""
    sol = solve_corrector(A, mu, rtol, rhs_part)
    ahat = effective_matrix(A, sol)
    sol.effective = ahat
    if with_flux:
        flux_corrector(A, sol, ahat)
    return sol


# ---------------------------------------------------------------------------
# size diagnostics for a slow/fast split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrectorSizeReport:
    """Measured corrector norms against the small-part bounds.

    ``ratio_static`` compares chi, phi and A - ahat against the sup of
    the small part; ``ratio_slow`` compares their slow derivatives
    against the combined slow-variation bound.  The reference constants
    are not asserted, only measured.
    """

    chi_norm: float
    phi_norm: float
    defect_norm: float
    e1_norm: float
    dx_chi_norm: float
    dx_phi_norm: float
    dx_defect_norm: float
    slow_bound: float
    ratio_static: float
    ratio_slow: float


def _h1(field: TorusField, d):
    total = field.l2() ** 2
    flat = field.values.reshape(field.values.shape[:d] + (-1,))
    for c in range(flat.shape[-1]):
        g = spectral_gradient(flat[..., c].reshape(field.values.shape[:d]), d)
        total += float(np.mean(np.sum(g ** 2, axis=0)))
    return math.sqrt(total)


def corrector_size_report(e0, e1, xs, N=64, mu=None, rtol=1e-10) -> CorrectorSizeReport:
    """Solve cells along a path of slow points and measure size ratios.

    ``e0(x)`` returns the slow d x d matrix, ``e1(x, pts)`` the fast part
    sampled on torus points; ``xs`` is a 1d array of slow coordinates
    along a probe segment, used for the slow-derivative differences.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.size < 2:
        raise CellInputError("need at least two slow points for slow derivatives")
    sols, defects, e1sups = [], [], []
    d = None
    for x in xs:
        E0 = np.asarray(e0(x), dtype=float)
        d = E0.shape[0]
        pts = torus_grid(N, d)
        E1 = TorusField(np.asarray(e1(x, pts), dtype=float), d)
        A = TorusField(E0 + E1.values, d)
        mu_x = mu
        if mu_x is None:
            if d == 1:
                mu_x = float(A.values.min())
            else:
                mu_x = float(np.linalg.eigvalsh(0.5 * (A.values + np.swapaxes(A.values, -1, -2))).min())
        sol = solve_cell(A, mu_x, rtol, rhs_part=E1)
        sols.append(sol)
        defects.append(TorusField(A.values - sol.effective, d))
        e1sups.append(float(np.max(np.linalg.norm(E1.values, 2, axis=(-2, -1)))))
    chi_n = max(_h1(s.chi, d) for s in sols)
    phi_n = max(_h1(s.phi, d) for s in sols)
    defect_n = max(float(np.max(np.abs(f.values))) for f in defects)
    e1_n = max(e1sups)

    dx = float(xs[1] - xs[0])
    def slope(fields):
        diffs = [TorusField((b.values - a.values) / dx, d)
                 for a, b in zip(fields, fields[1:])]
        return max(_h1(f, d) for f in diffs)

    dchi = slope([s.chi for s in sols])
    dphi = slope([s.phi for s in sols])
    ddef = max(float(np.max(np.abs((b.values - a.values) / dx)))
               for a, b in zip(defects, defects[1:]))

    # slow-variation reference: |d_x A| |E1| + |d_x E1|, measured by differences
    da = max(float(np.max(np.abs(
        (np.asarray(e0(b), dtype=float) - np.asarray(e0(a), dtype=float)) / dx)))
        for a, b in zip(xs, xs[1:]))
    pts = torus_grid(N, d)
    de1 = max(float(np.max(np.abs(
        (np.asarray(e1(b, pts), dtype=float) - np.asarray(e1(a, pts), dtype=float)) / dx)))
        for a, b in zip(xs, xs[1:]))
    slow_bound = (da + de1) * e1_n + de1
    static = (chi_n + phi_n + defect_n) / e1_n if e1_n > 0 else 0.0
    slow = (dchi + dphi + ddef) / slow_bound if slow_bound > 0 else 0.0
    if e1_n == 0.0:
        static = 0.0
        slow = 0.0
    return CorrectorSizeReport(chi_n, phi_n, defect_n, e1_n, dchi, dphi, ddef,
                               slow_bound, static, slow)


def dump_fields(path, sol: CellSolution):
    """Write corrector grids as columnar text for inspection."""
    pts = torus_grid(sol.N, sol.d).reshape(-1, sol.d)
    chi = sol.chi.values.reshape(-1, sol.d)
    cols = [pts, chi]
    header = " ".join([f"y{i}" for i in range(sol.d)]
                      + [f"chi{j}" for j in range(sol.d)])
    if sol.phi is not None:
        cols.append(sol.phi.values.reshape(len(pts), -1))
        header += " " + " ".join(f"phi{k}{i}{j}" for k in range(sol.d)
                                 for i in range(sol.d) for j in range(sol.d))
    np.savetxt(path, np.column_stack(cols), header=header)
