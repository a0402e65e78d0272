"""Extended Kalman filtering with the hybrid model as transition function.

The state is the flattened node vector (u_x, u_y, v_x, v_y per node). The
mean propagates through the same Velocity Verlet step used everywhere
else; the covariance propagates through the exact step Jacobian. The
observation function is the force-balance acceleration map restricted to
measured nodes, and the update uses the Joseph form so the covariance
stays positive semi-definite under roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backprop import observation_jacobian, transition_jacobian
from .datasets import TrajectoryDataset
from .errors import (
    DivergedError,
    NonpositiveVarianceError,
    ShapeMismatchError,
    SingularInnovationError,
)
from .graph import FloatArray, StructuralGraph, flatten_state, unflatten_state
from .model import (
    GraphBinding,
    HybridDynamicsModel,
    bind,
    evaluate,
    interpolate_forces,
    verlet_step,
)

DIVERGENCE_LIMIT = 1e6
CONDITION_LIMIT = 1e12


@dataclass
class GaussianBelief:
    """Gaussian state estimate over the flattened node state."""

    mean: FloatArray
    covariance: FloatArray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.mean.size
        if self.covariance.shape != (n, n):
            raise ShapeMismatchError("covariance must be square and match the mean")

    def validate(self, tol: float = 1e-10) -> None:
        """Raise if the covariance is non-symmetric or indefinite."""
        asym = np.max(np.abs(self.covariance - self.covariance.T))
        if asym > tol:
            raise NonpositiveVarianceError(f"covariance asymmetry {asym:.3e}")
        min_eig = float(np.linalg.eigvalsh(self.covariance).min())
        if min_eig < -tol:
            raise NonpositiveVarianceError(f"covariance eigenvalue {min_eig:.3e}")


@dataclass
class NoiseConfig:
    """Diagonal process and measurement noise plus the initial spread.

    Parameters
    ----------
    process_diag : ndarray, shape (4 n_nodes,)
        Q diagonal in the flattened state layout.
    measurement_diag : ndarray, shape (2 n_measured,)
        R diagonal, x then y per measured node in ascending node order.
    initial_variance : float
        Diagonal of the initial covariance (wide prior, unknown z0).
    """

    process_diag: FloatArray
    measurement_diag: FloatArray
    initial_variance: float = 1.0

    def __post_init__(self) -> None:
        self.process_diag = np.asarray(self.process_diag, dtype=float)
        self.measurement_diag = np.asarray(self.measurement_diag, dtype=float)
        if np.any(self.process_diag < 0) or np.any(self.measurement_diag < 0):
            raise NonpositiveVarianceError("noise diagonals must be nonnegative")
        if self.initial_variance < 0:
            raise NonpositiveVarianceError("initial variance must be nonnegative")

    @classmethod
    def from_dataset(
        cls,
        graph: StructuralGraph,
        dataset: TrajectoryDataset,
        epsilon_model: float,
        initial_variance: float = 1.0,
        measurement_override: float | None = None,
    ) -> "NoiseConfig":
        """Assemble diagonals from a masked dataset and a model-error knob.

        Process noise follows the kinematic consistency of one step:
        q_u = (eps dt^2)^2 on displacements, q_v = (eps dt)^2 on
        velocities, with ``epsilon_model`` an acceleration scale. R comes
        from the dataset's recorded acceleration noise variances unless
        overridden.
        """
        if dataset.mask is None:
            raise ValueError("filtering requires a masked dataset")
        dt = dataset.dt
        n = graph.n_nodes
        q_u = (epsilon_model * dt * dt) ** 2
        q_v = (epsilon_model * dt) ** 2
        process = np.tile([q_u, q_u, q_v, q_v], n)
        measured = dataset.mask.measured_indices
        if measurement_override is not None:
            measurement = np.full(2 * measured.size, float(measurement_override))
        else:
            if dataset.acc_noise_var is None:
                raise ValueError("dataset records no acceleration noise variance")
            measurement = np.repeat(dataset.acc_noise_var[measured], 2)
        return cls(process, measurement, initial_variance)


def default_epsilon_model(training_truth: TrajectoryDataset) -> float:
    """Model-error scale: 10% of the RMS true acceleration of a reference run."""
    return 0.1 * float(np.sqrt(np.mean(training_truth.accelerations**2)))


def predict(
    belief: GaussianBelief,
    model: HybridDynamicsModel,
    graph,
    forces: FloatArray,
    dt: float,
    process_diag: FloatArray,
    forces_next: FloatArray | None = None,
    substeps: int = 1,
) -> GaussianBelief:
    """Propagate mean and covariance over one sample interval.

    With ``substeps`` above 1 the integrator and the covariance Jacobian
    are composed over that many internal steps (forces interpolated
    linearly); the process noise is added once per interval.
    """
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    n = binding.graph.n_nodes
    f_end = forces if forces_next is None else forces_next
    state = unflatten_state(belief.mean, n)
    cov = belief.covariance
    h = dt / substeps
    for f_lo, f_hi in interpolate_forces(
        np.asarray(forces, float), np.asarray(f_end, float), substeps
    ):
        a_mat = transition_jacobian(model, binding, state, f_lo, h, forces_next=f_hi)
        state = verlet_step(model, binding, state, f_lo, h, forces_next=f_hi)
        cov = a_mat @ cov @ a_mat.T
    mean = flatten_state(state)
    if not np.all(np.isfinite(mean)) or np.max(np.abs(mean)) > DIVERGENCE_LIMIT:
        raise DivergedError("filter prediction diverged")
    cov[np.diag_indices_from(cov)] += process_diag
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov)


def update(
    prior: GaussianBelief,
    observations: FloatArray,
    predicted_observations: FloatArray,
    h_matrix: FloatArray,
    measurement_diag: FloatArray,
) -> tuple[GaussianBelief, FloatArray, FloatArray]:
    """Joseph-form measurement update.

    Returns the posterior plus the innovation vector and the diagonal of
    the innovation covariance (useful for whiteness diagnostics).
    """
    sigma = prior.covariance
    innovation = np.asarray(observations, float) - np.asarray(
        predicted_observations, float
    )
    s_mat = h_matrix @ sigma @ h_matrix.T
    s_mat[np.diag_indices_from(s_mat)] += measurement_diag
    # tiny diagonal regularization keeps the solve well posed
    s_mat[np.diag_indices_from(s_mat)] += 1e-12 * np.trace(s_mat) / s_mat.shape[0]
    if np.linalg.cond(s_mat) > CONDITION_LIMIT:
        raise SingularInnovationError(
            "innovation covariance condition number exceeds 1e12"
        )
    gain = np.linalg.solve(s_mat, h_matrix @ sigma).T
    mean = prior.mean + gain @ innovation
    ikh = np.eye(sigma.shape[0]) - gain @ h_matrix
    cov = ikh @ sigma @ ikh.T + (gain * measurement_diag) @ gain.T
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean, cov), innovation, np.diag(s_mat).copy()


def observation_variance(
    posterior: GaussianBelief, h_matrix: FloatArray, measurement_diag: FloatArray
) -> FloatArray:
    """Per-channel variance of the predicted observation: diag(H S H^T + R)."""
    return np.einsum("ij,jk,ik->i", h_matrix, posterior.covariance, h_matrix) + (
        measurement_diag
    )


@dataclass
class FilterResult:
    """Posterior series from one filtering pass.

    Means are stored per node (displacements, velocities, and the
    accelerations the model implies at the posterior mean); standard
    deviations come from the covariance diagonal, so 95% bands are
    mean +- 2 std. Innovation rows are NaN at step 0, which has no update.
    """

    times: FloatArray
    displacements: FloatArray
    velocities: FloatArray
    accelerations: FloatArray
    displacement_std: FloatArray
    velocity_std: FloatArray
    observation_variance: FloatArray
    innovations: FloatArray
    innovation_variance: FloatArray
    measured: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.times.size


def filter_trajectory(
    model: HybridDynamicsModel,
    graph: StructuralGraph,
    dataset: TrajectoryDataset,
    noise: NoiseConfig,
    substeps: int = 1,
) -> FilterResult:
    """Run the filter over a masked dataset (Gaussian belief per step).

    The belief starts at zero mean with the configured wide diagonal
    covariance; each subsequent step predicts through the integrator and
    updates against the measured-node accelerations. All corotational
    features are recomputed from the posterior mean at every evaluation.
    """
    if dataset.mask is None or not dataset.has_observations:
        raise ValueError("filtering requires a corrupted, masked dataset")
    binding = bind(graph)
    n = graph.n_nodes
    measured = dataset.mask.measured
    measured_idx = dataset.mask.measured_indices
    n_steps = dataset.n_steps
    dt = dataset.dt
    forces = dataset.input_forces
    obs = dataset.observed_accelerations[:, measured_idx, :].reshape(n_steps, -1)

    belief = GaussianBelief(
        np.zeros(4 * n), noise.initial_variance * np.eye(4 * n)
    )

    u = np.zeros((n_steps, n, 2))
    v = np.zeros((n_steps, n, 2))
    a = np.zeros((n_steps, n, 2))
    su = np.zeros((n_steps, n, 2))
    sv = np.zeros((n_steps, n, 2))
    obs_var = np.zeros((n_steps, 2 * measured_idx.size))
    innovations = np.full((n_steps, 2 * measured_idx.size), np.nan)
    innovation_var = np.full((n_steps, 2 * measured_idx.size), np.nan)

    def record(step: int, bel: GaussianBelief, h_mat: FloatArray | None) -> None:
        state = unflatten_state(bel.mean, n)
        u[step] = state.displacements
        v[step] = state.velocities
        a[step] = evaluate(model, binding, state, forces[step]).accel
        std = np.sqrt(np.maximum(np.diag(bel.covariance), 0.0)).reshape(n, 4)
        su[step] = std[:, 0:2]
        sv[step] = std[:, 2:4]
        if h_mat is not None:
            obs_var[step] = observation_variance(bel, h_mat, noise.measurement_diag)

    h0, _ = observation_jacobian(
        model, binding, unflatten_state(belief.mean, n), forces[0], measured
    )
    record(0, belief, h0)

    for step in range(1, n_steps):
        belief = predict(
            belief,
            model,
            binding,
            forces[step - 1],
            dt,
            noise.process_diag,
            forces_next=forces[step],
            substeps=substeps,
        )
        h_mat, y_hat = observation_jacobian(
            model, binding, unflatten_state(belief.mean, n), forces[step], measured
        )
        belief, innov, s_diag = update(
            belief, obs[step], y_hat, h_mat, noise.measurement_diag
        )
        innovations[step] = innov
        innovation_var[step] = s_diag
        record(step, belief, h_mat)

    return FilterResult(
        times=dataset.times.copy(),
        displacements=u,
        velocities=v,
        accelerations=a,
        displacement_std=su,
        velocity_std=sv,
        observation_variance=obs_var,
        innovations=innovations,
        innovation_variance=innovation_var,
        measured=measured.copy(),
    )


def save_filter_result(path, result: FilterResult) -> None:
    """Write a filter pass as a labeled columnar text file."""
    path = Path(path)
    n = result.displacements.shape[1]
    midx = np.flatnonzero(result.measured)
    header = [
        "# filter-format 1",
        f"# samples {result.n_steps} nodes {n}",
        "# measured " + " ".join(str(int(i)) for i in midx),
        "# columns: t then per node [u_x u_y v_x v_y a_x a_y su_x su_y sv_x sv_y]"
        " then per measured channel [obs_var] then [innovation] then [innovation_var]",
    ]
    per_node = np.concatenate(
        [
            result.displacements,
            result.velocities,
            result.accelerations,
            result.displacement_std,
            result.velocity_std,
        ],
        axis=2,
    ).reshape(result.n_steps, -1)
    table = np.column_stack(
        [
            result.times,
            per_node,
            result.observation_variance,
            result.innovations,
            result.innovation_variance,
        ]
    )
    with path.open("w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, table, fmt="%.17g")


def load_filter_result(path) -> FilterResult:
    """Read a file produced by :func:`save_filter_result`."""
    path = Path(path)
    with path.open() as fh:
        magic = fh.readline().strip()
        if magic != "# filter-format 1":
            raise ValueError(f"not a filter file: {magic!r}")
        parts = fh.readline().split()
        n_steps, n = int(parts[2]), int(parts[4])
        midx = np.array([int(t) for t in fh.readline().split()[2:]], dtype=int)
        fh.readline()  # columns description
        table = np.loadtxt(fh, ndmin=2)
    if table.shape[0] != n_steps:
        raise ValueError("filter file row count mismatch")
    times = table[:, 0]
    per_node = table[:, 1 : 1 + 10 * n].reshape(n_steps, n, 10)
    rest = table[:, 1 + 10 * n :]
    n_ch = 2 * midx.size
    measured = np.zeros(n, dtype=bool)
    measured[midx] = True
    return FilterResult(
        times=times,
        displacements=per_node[:, :, 0:2].copy(),
        velocities=per_node[:, :, 2:4].copy(),
        accelerations=per_node[:, :, 4:6].copy(),
        displacement_std=per_node[:, :, 6:8].copy(),
        velocity_std=per_node[:, :, 8:10].copy(),
        observation_variance=rest[:, :n_ch].copy(),
        innovations=rest[:, n_ch : 2 * n_ch].copy(),
        innovation_variance=rest[:, 2 * n_ch : 3 * n_ch].copy(),
        measured=measured,
    )
