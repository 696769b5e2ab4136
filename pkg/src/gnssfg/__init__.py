"""GNSS positioning as factor-graph optimization.

Batch and fixed-lag MAP estimation over pseudorange and carrier-phase
factors, robust kernels (Huber, Cauchy, switch constraints, DCS,
max-mixtures, GNC), an EKF/IEKF baseline and a scenario simulator.
"""
from .ekf import FilterState, ekf_predict, ekf_update, ekf_update_factors
from .errors import *  # noqa: F401,F403
from .graph import (
    EpochState,
    Factor,
    FactorGraph,
    FactorKind,
    VariableKey,
    VariableKind,
    epoch_key,
    linearize,
    switch_key,
    total_cost,
    vector_key,
)
from .kernels import DCS, GNC, L2, Cauchy, GncSchedule, Huber, MaxMixture, SwitchLinked
from .models import (
    BetweenFactor,
    CarrierPhaseFactor,
    MotionKind,
    MotionModel,
    PriorFactor,
    PseudorangeFactor,
    SatelliteObservation,
    random_walk_model,
)
from .options import SolverOptions
from .robust import augment_with_switches, gnc_solve, irls_solve
from .sim import EstimatorConfig, OutlierModel, Scenario, ScenarioConfig, Trajectory, generate, to_graph
from .solver import SolveReport, gauss_newton, levenberg_marquardt, solve_normal_equations
from .window import FixedLagSmoother, MarginalPrior, WindowConfig, marginalize

__version__ = "0.1.0"
