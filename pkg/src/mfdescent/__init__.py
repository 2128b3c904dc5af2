"""Ensemble control of continuity-equation dynamics by exact-increment descent.

The package integrates characteristic flows of controlled vector fields,
solves the continuity equation in Lagrangian and Eulerian form, evaluates an
exact (residual-free) representation of cost increments between controls, and
iterates a line-search-free descent built on it.  The application layer
designs robust pulses for offset-distributed ensembles of Bloch equations.
"""

__version__ = "0.1.0"

from .bloch import (
    BlochField,
    ExperimentConfig,
    ExperimentResult,
    OffsetDistribution,
    bloch_cost,
    bloch_field,
    bloch_kernel,
    bloch_kernel_gradient,
    default_initial_density,
    distributed_bloch_field,
    offset_weighted_functional,
    run_experiment,
    stack_offset_ensemble,
)
from .core import (
    ControlSet,
    ControlSignal,
    GridAxis,
    GridMeasure,
    ParametricField,
    ParticleMeasure,
    TimePartition,
    moments,
    pushforward,
    sample_control,
)
from .descent import (
    DescentConfig,
    IterationResult,
    IterationTrace,
    feedback_minimize,
    pmp_residual,
    run_descent,
    run_iteration,
)
from .errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    MonotonicityError,
)
from .flows import (
    FlowRecord,
    flow_segment_to_anchor,
    integrate_flow,
    integrate_jacobian_to_anchor,
    inverse_flow_time_derivative,
)
from .functionals import (
    Functional,
    energy_cost,
    interaction_functional,
    sum_functionals,
    targeting_functional,
    tracking_functional,
)
from .increment import (
    IncrementReport,
    evaluate_increment,
    increment_integrand_profile,
    transported_gradients,
    write_report_csv,
)
from .transport import (
    EulerianTrajectory,
    solve_lagrangian,
    solve_lax_friedrichs,
)

__all__ = [name for name in dir() if not name.startswith("_")]
