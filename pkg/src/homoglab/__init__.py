"""Numerical laboratory for elliptic homogenization with infinitely many
periodic scales: coefficient hierarchies, the scale-by-scale recursion
for effective matrices, multiscale Dirichlet solves, convergence-rate
benchmarks and large-scale regularity diagnostics."""

from .scales import ScaleSchedule, ScheduleError
from .coefficients import (
    CoefficientHierarchy,
    DeltaModel,
    GeometricTail,
    PowerTail,
    constant_layer,
    scalar_trig_layer,
    weierstrass_builder,
)
from .cell import (
    CellSolution,
    TorusField,
    effective_matrix,
    flux_corrector,
    solve_cell,
    solve_corrector,
    torus_grid,
)
from .reiterate import (
    IntermediateEvaluator,
    SeparatedEffective1D,
    delta_recursion,
    homogenized_matrix,
    intermediate_eval,
    stability_probe,
)
from .bvp import (
    BVProblem,
    Coefficient1D,
    FieldSolution1D,
    FieldSolution2D,
    solve_1d_exact,
    solve_2d,
    two_scale_defect,
)
from .rates import (
    RateReport,
    ResolutionPolicy,
    fit_loglog,
    predictor_compare,
    rate_sweep,
    weierstrass_rate_sweep,
    weierstrass_tau_sweep,
)
from .regularity import (
    build_profile,
    dini_modulus,
    doubling_check,
    fit_affine,
    lipschitz_probe,
    mm_series,
    profile_radii,
)

__version__ = "0.1.0"
