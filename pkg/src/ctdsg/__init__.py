"""Continuous-time distributed stochastic gradient descent over switching digraphs.

Simulates the SDE by Euler--Maruyama, runs Monte Carlo ensembles, and checks
the consensus and convergence-rate bounds numerically.
"""

__version__ = "0.1.0"

from .analysis import (
    BoundReport,
    RateFit,
    consensus_bound_check,
    fit_rate,
    lemma3_bound_check,
    phi_integral,
    regime_table,
)
from .dynamics import (
    NoiseModel,
    SimConfig,
    StepSchedule,
    Trajectory,
    average_state,
    brownian_increments,
    euler_step,
    simulate_path,
)
from .ensemble import EnsembleStats, ito_isometry_check, run_ensemble
from .graph import (
    GraphSchedule,
    WeightedDigraph,
    check_delta_tc_connectivity,
    default_schedule,
    fit_decay_constants,
    is_balanced,
    laplacian,
    transition_matrix,
)
from .objective import (
    Box,
    ObjectiveSet,
    QuadraticObjective,
    certify_constants,
    global_minimizer,
    optimality_gap,
    reference_objectives,
)
