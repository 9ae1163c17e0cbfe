"""Self-interacting Markov chains on a finite state space.

The kernel driving the next step is an affine function of the running
empirical measure. The package simulates such chains with reproducible
counter-based streams and bounds the large deviation rate of the empirical
measure from above by discretized optimal control. Controlled schedules
built from an optimized control realize those bounds in simulation.
"""

__version__ = "0.1.0"

from .construct import (
    Approximation,
    ControlSchedule,
    ScheduleConfig,
    approximate_control,
    build_schedule,
    mix_with_fixed_point,
    mollify,
    piecewise_const,
    time_reverse,
)
from .errors import (
    ConvergenceError,
    InfeasibleError,
    SelfInteractError,
    ValidationError,
)
from .model import (
    AdjacencySpec,
    ModelSpec,
    build_example,
    check_assumptions,
    constant_model,
    eval_kernel,
    fixed_point,
    model_from_dict,
    model_to_dict,
)
from .rate import (
    ControlPath,
    RateOptions,
    discretized_cost,
    dv_evaluate,
    dv_rate,
    ipf_project,
    pstar_feasible,
    rate_upper,
)
from .simulate import mc_hit_probability, run_chain, run_controlled
from .timescale import (
    TimeGrid,
    euler_mascheroni_brackets,
    harmonic_numbers,
    psi_limit_gap,
)

__all__ = [
    "AdjacencySpec",
    "Approximation",
    "ControlPath",
    "ControlSchedule",
    "ConvergenceError",
    "InfeasibleError",
    "ModelSpec",
    "RateOptions",
    "ScheduleConfig",
    "SelfInteractError",
    "TimeGrid",
    "ValidationError",
    "approximate_control",
    "build_example",
    "build_schedule",
    "check_assumptions",
    "constant_model",
    "discretized_cost",
    "dv_evaluate",
    "dv_rate",
    "euler_mascheroni_brackets",
    "eval_kernel",
    "fixed_point",
    "harmonic_numbers",
    "ipf_project",
    "mc_hit_probability",
    "mix_with_fixed_point",
    "model_from_dict",
    "model_to_dict",
    "mollify",
    "piecewise_const",
    "psi_limit_gap",
    "pstar_feasible",
    "rate_upper",
    "run_chain",
    "run_controlled",
    "time_reverse",
]
