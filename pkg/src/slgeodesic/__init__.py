"""Weak geodesics between Lagrangian graphs over the flat torus.

The regularized problem on the time cylinder is solved by Newton continuation
anchored at an explicit subsolution; letting the regularization go to zero
yields the geodesic potential.
"""

from .barriers import BarrierPair, build_barriers, check_sandwich
from .config import RunConfig, load_config, parse_config
from .errors import (
    AdmissibilityViolation,
    BarrierFailure,
    ConfigError,
    GeodesicError,
    InputError,
    NoConvergence,
    StepCollapse,
)
from .fields import BoundaryPair, ChiField, CylinderGrid, PotentialSpec, TorusGrid, assemble_chi
from .solver import ContinuationSchedule, NewtonSettings, run_tau_sweep, run_zeta_path, solve_tau
from .spectral import (
    PhaseBranch,
    SymmetricMatrix,
    arctan_sum,
    arctan_sum_gradient,
    eigenvalues,
    elementary_symmetric,
    geodesic_operator_det,
    geodesic_operator_sigma,
    lagrangian_phase,
    select_branch,
)

__version__ = "0.1.0"
