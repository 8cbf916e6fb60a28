"""Simulation and boundary control of a linear SDE actuated through a
boundary-controlled pair of counter-propagating transport equations.

The toolkit solves the transformation kernels that decouple the transport
pair, reduces the closed loop to an input-delayed SDE with a random drift,
stabilizes it through a delay-compensating predictor, minimizes the state
variance over a finite horizon with an LQ feedback, and verifies every
analytic identity it relies on by Monte Carlo.
"""

from .core import (BrownianPath, SpaceTimeGrid, SystemParams, Trajectory,
                   constant_profile, ito_isometry_check, make_grid,
                   sample_brownian, table_profile)
from .kernels import (KernelSet, NonConvergence, eval_kernel, kernel_residuals,
                      solve_kernels)
from .control import (ArtsteinState, FeedbackController, LqController,
                      LqSolution, LqWeights, NotControllable,
                      OpenLoopController, ScriptedController, artstein_predict,
                      compute_phi, feedback_controller, fundamental_matrix,
                      lq_controller, solve_riccati, stabilizing_gain, v_bs)
from .sim import (DelayedSdeModel, SimulationBlowUp, apply_transform,
                  beta_explicit, invert_transform, make_delayed_model,
                  simulate_coupled, simulate_delayed_sde)
from .analysis import (RunSpec, VarianceReport, cost_decomposition_check,
                       g_function, gamma_fn, monte_carlo, n_function,
                       rolling_G, v_min)
from .config import ScenarioConfig, emit_config, fig1_preset, parse_config

__version__ = "0.1.0"
