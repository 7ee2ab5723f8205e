"""Phase-field topology optimization for 2D incompressible channel flow."""

from .backend import USING_NUMBA
from .config import BenchConfig, fit_loglog_slope
from .errors import (
    ConfigError,
    InvalidCoefficientError,
    NonconvergenceError,
    OutOfDomainError,
    SingularSystemError,
    StalledLineSearchError,
)
from .flow import (
    FlowProblemData,
    FlowState,
    SaddleSystem,
    SmallnessReport,
    Trajectory,
    assemble_penalized_operator,
    channel_problem,
    check_smallness,
    march_transient,
    poiseuille_profile,
    solve_linear,
    solve_stationary,
    solve_stationary_adjoint,
    solve_stationary_linearized,
    solve_transient,
)
from .mesh import (
    BoundaryTag,
    ScalarFieldP1,
    StructuredMesh,
    VelocityFieldMini,
    build_structured_mesh,
    evaluate_field,
    export_fields,
    sample_cross_section,
)
from .objective import (
    ObjectiveBreakdown,
    ObservationMask,
    ProblemSetup,
    eval_stationary_objective,
    eval_transient_objective,
    fd_directional_derivative,
    make_target_velocity,
    reduced_gradient_stationary,
    reduced_gradient_transient,
    solve_transient_adjoint,
)
from .optimizer import (
    OptimizationHistory,
    PdasResult,
    VmptConfig,
    pdas_project,
    run,
    vmpt_iterate,
)
from .phasefield import (
    GinzburgLandauParams,
    InterpolationParams,
    PhaseField,
    build_target_phasefield,
    clamp_to_admissible,
    gl_derivative,
    gl_energy,
    interpolation_fields,
)

__version__ = "0.1.0"
