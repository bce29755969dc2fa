"""Neural motion-simulator toolkit.

Learns continuous-time rigid-body dynamics from trajectory data with a
structured predictor (Cholesky-factored mass-inverse times encoded forces)
plus residual correctors, integrated by an adaptive Dormand-Prince solver;
ships the oracle environments, rollout benchmark, multi-stage trainer,
Lyapunov analysis, and CEM-MPC planning that build on it.
"""

from .benchmark import BenchmarkReport, LceResult, estimate_lce, rollout_mse
from .checkpoint import load_dynamics, read_tensors, save_dynamics, write_tensors
from .control import PlannerConfig, cem_plan, zero_shot_eval
from .datagen import generate_policy_dataset, generate_random_dataset
from .datasets import (
    TrajectoryDataset,
    TrajectorySegment,
    add_observation_noise,
    read_dataset,
    sample_fragments,
    write_dataset,
)
from .dynamics import (
    DynamicsParams,
    StateVec,
    assemble_mass_inverse,
    dynamics_vjp,
    full_derivative,
    init_dynamics_params,
    predictor_derivative,
)
from .envs import ActionSamplerSpec, EnvSpec, env_names, generate_trajectory, \
    make_env, sample_actions
from .errors import (
    ConfigError,
    DensityFault,
    DimensionError,
    FormatError,
    IntegrationError,
    MotionSimError,
    TrainingFault,
)
from .flow import (
    FlowParams,
    PenaltyConfig,
    fit_flow,
    flow_forward,
    flow_log_density,
    penalized_reward,
)
from .nn import (
    AdamState,
    MlpParams,
    ResNetParams,
    adam_init,
    adam_step,
    init_mlp,
    init_resnet,
    mlp_forward,
    net_vjp,
    resnet_forward,
)
from .odeint import (
    IntegratorConfig,
    adjoint_backward,
    backprop_through_steps,
    dopri5_integrate,
    integrate_controlled,
    rk4_integrate,
)
from .training import (
    FewShotConfig,
    TrainConfig,
    TrainLog,
    few_shot_loop,
    segment_loss,
    train_end_to_end,
    train_multistage,
)

__version__ = "0.1.0"
