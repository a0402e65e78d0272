"""Virtual sensing for nonlinear truss structures.

Simulation of spring-mass-damper assemblies with geometric and material
nonlinearities, a physics-guided graph network trained from sparse noisy
accelerations, and an extended Kalman filter that runs the trained model
online to estimate the full structural state.
"""

from .datasets import TrajectoryDataset, corrupt_and_mask, load_dataset, save_dataset
from .dynamics import ForcingSpec, banded_white_noise, lowest_nodes, mechanical_energy, simulate
from .ekf import (
    FilterResult,
    GaussianBelief,
    NoiseConfig,
    default_epsilon_model,
    filter_trajectory,
    load_filter_result,
    save_filter_result,
)
from .graph import (
    GraphState,
    ObservationMask,
    StructuralGraph,
    corotational_kinematics,
    flatten_state,
    sparsity_mask,
    unflatten_state,
)
from .metrics import nmse, nmse_per_node
from .model import (
    FeatureScales,
    HybridDynamicsModel,
    blackbox_convolution,
    create_model,
    load_model,
    physics_convolution,
    rollout,
    save_model,
    verlet_step,
)
from .structures import (
    ParameterDistributions,
    TrussSystem,
    generate_bridge_truss,
    generate_sobol_array,
    load_system,
    nominal_graph,
    save_system,
)
from .training import TrainingConfig, TrainingResult, train

__version__ = "0.1.0"

__all__ = [
    "TrajectoryDataset",
    "corrupt_and_mask",
    "load_dataset",
    "save_dataset",
    "ForcingSpec",
    "banded_white_noise",
    "lowest_nodes",
    "mechanical_energy",
    "simulate",
    "FilterResult",
    "GaussianBelief",
    "NoiseConfig",
    "default_epsilon_model",
    "filter_trajectory",
    "load_filter_result",
    "save_filter_result",
    "GraphState",
    "ObservationMask",
    "StructuralGraph",
    "corotational_kinematics",
    "flatten_state",
    "sparsity_mask",
    "unflatten_state",
    "nmse",
    "nmse_per_node",
    "FeatureScales",
    "HybridDynamicsModel",
    "blackbox_convolution",
    "create_model",
    "load_model",
    "physics_convolution",
    "rollout",
    "save_model",
    "verlet_step",
    "ParameterDistributions",
    "TrussSystem",
    "generate_bridge_truss",
    "generate_sobol_array",
    "load_system",
    "nominal_graph",
    "save_system",
    "TrainingConfig",
    "TrainingResult",
    "train",
]
