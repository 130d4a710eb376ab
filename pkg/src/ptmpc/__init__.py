"""Set-erosion stochastic MPC with probabilistic-tube safety certificates.

The package computes per-step probabilistic-tube radii for nonlinear
systems under sub-Gaussian disturbances, erodes obstacle-complement safe
sets by those radii, solves the resulting deterministic surrogate MPC by
direct shooting, and certifies the trajectory-level safety guarantee
empirically by seeded Monte Carlo.
"""

__version__ = "0.1.0"

from .errors import (DimensionError, DomainError, InfeasibleAtStep,
                     InputSetError, ParameterError, PtmpcError, ScenarioError,
                     TerminalSetError)
from .geometry import (Box, Obstacle, SafeSet, disk, is_member_eroded,
                       min_corridor_width, rect, signed_margin)
from .mpc import (ControllerState, HeadingLevelController, MpcConfig,
                  MpcSolution, NormTerminalCost, QuadraticCost,
                  QuadraticTerminalCost, SolverConfig, TerminalSet,
                  WeightedL1Cost, ZeroInputController,
                  certify_terminal_invariance, run_receding_horizon,
                  shifted_candidate, solve_step, verify_plan,
                  verify_recursive_feasibility)
from .sim import (ClosedLoopTrace, MonteCarloReport, NoiseModel, monte_carlo,
                  rollout_pair, sample_noise, tube_containment,
                  wilson_interval)
from .systems import (LinearPlant, Plant, QuadrotorPlant, UnicyclePlant,
                      design_quadrotor_stabilizer, estimate_gain_at_scale,
                      estimate_lipschitz, step_nominal)
from .tube import (TubeParams, TubeSchedule, cost_gap_bound,
                   mean_sq_deviation_bound, optimize_tube_params, pt_radius,
                   tube_schedule)
