"""Half-explicit drift-truncated Euler integration of constrained second-order SDEs."""

from holosde.errors import (
    GridMismatch,
    HolosdeError,
    InvalidResolution,
    KappaBoundViolation,
    MissingGrowthMeta,
    NewtonDivergence,
    NonFiniteState,
    SingularGram,
    StepError,
    StudyAborted,
)
from holosde.experiments import (
    ComparisonReport,
    ConvergenceReport,
    convergence_study,
    integrate,
    integrate_batch,
    pathwise_error,
    scheme_comparison,
)
from holosde.geometry import ConstraintGeometry, DerivedConstants, check_derivatives, estimate_cg
from holosde.model import (
    GrowthMeta,
    SdaeProblem,
    State,
    check_growth,
    make_fiber_chain,
    make_langevin,
    make_pendulum,
    make_sphere_langevin,
)
from holosde.reference import inherent_diffusion, inherent_drift, integrate_em, mu_quadrature
from holosde.stepper import (
    StepperConfig,
    StepRecord,
    lambda_leading_term,
    solve_position,
    solve_velocity,
    step,
    truncation_eta,
)
from holosde.stochastics import BrownianPath, increments_at, sample_path
from holosde.trajectory import Trajectory

__version__ = "0.1.0"
