"""Hybrid graph dynamics model: physics and learned force convolutions.

The model predicts nodal accelerations from the current graph state:

    a_i = (f_i - xi_lin_i - xi_nonlin_i) / m_i

``xi_lin`` is the closed-form spring-damper aggregation over the nominal
graph (physics convolution). ``xi_nonlin`` is a learned correction: node
and edge features are encoded by small dense networks, a message head maps
each edge's latent triple to one (axial) or two (axial + perpendicular)
force scalars, and the scalars act along the current edge direction seen
from each receiver.

Messages are symmetrized over the two directed views of an edge, so both
endpoints share one scalar applied with opposite directions; together with
the physics convolution's paired construction this makes every internal
force obey Newton's third law exactly.

Feature conventions:

* node features ``x_i = (p0_x, p0_y, f_x, f_y, m)``: rest position, applied
  drive force, mass. State-independent.
* edge features ``e = (eps, eps_rate, cos th, sin th, cos phi, sin phi,
  k, c)``: corotational extension and rate, current and rest orientation
  (as seen by the receiving end), nominal stiffness and damping. The
  orientation entries flip sign between the two directed views.
* all features are divided by fixed scales chosen once per problem so
  encoder inputs are O(1); the message output is multiplied back to force
  units. Scales are stored in checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import TrajectoryDataset
from .errors import (
    DivergedError,
    NonpositiveVarianceError,
    ShapeMismatchError,
)
from .graph import (
    EdgeKinematics,
    EdgeOccurrences,
    FloatArray,
    GraphState,
    ObservationMask,
    StructuralGraph,
    build_occurrences,
    corotational_kinematics,
)
from .networks import DenseNetwork, NetCache, forward_cached, init_dense

NODE_FEATURES = 5
EDGE_FEATURES = 8
DIVERGENCE_LIMIT = 1e6


@dataclass
class FeatureScales:
    """Fixed normalization scales for features and the message output."""

    node: FloatArray  # (5,) for (p0_x, p0_y, f_x, f_y, m)
    edge: FloatArray  # (8,) for (eps, rate, cos, sin, cos, sin, k, c)
    message: float    # force scale multiplying the message head output

    def __post_init__(self) -> None:
        self.node = np.asarray(self.node, dtype=float)
        self.edge = np.asarray(self.edge, dtype=float)
        if self.node.shape != (NODE_FEATURES,) or self.edge.shape != (EDGE_FEATURES,):
            raise ShapeMismatchError("scale vector sizes are fixed by the features")
        if np.any(self.node <= 0) or np.any(self.edge <= 0) or self.message <= 0:
            raise ValueError("scales must be positive")

    @classmethod
    def for_problem(
        cls, graph: StructuralGraph, force_rms: float
    ) -> "FeatureScales":
        """Derive O(1) scales from a nominal graph and the drive amplitude."""
        extent = max(
            float(np.ptp(graph.positions[:, 0])),
            float(np.ptp(graph.positions[:, 1])),
            1.0,
        )
        k_ref = float(np.mean(graph.stiffness))
        c_ref = max(float(np.mean(graph.damping)), 1e-12)
        m_ref = float(np.mean(graph.masses))
        f_ref = force_rms if force_rms > 0 else 1.0
        eps_ref = f_ref / k_ref
        rate_ref = eps_ref * np.sqrt(k_ref / m_ref)
        return cls(
            node=np.array([extent, extent, f_ref, f_ref, m_ref]),
            edge=np.array([eps_ref, rate_ref, 1.0, 1.0, 1.0, 1.0, k_ref, c_ref]),
            message=f_ref,
        )


@dataclass
class HybridDynamicsModel:
    """Encoders, message head, scales, and training-time noise variances.

    The nominal graph is supplied per call (the same trained networks apply
    to any graph of the family); ``acc_noise_var``/``force_noise_var`` are
    the per-node measurement variances recorded by the training dataset,
    kept for residual-variance bookkeeping and filter configuration.
    """

    node_encoder: DenseNetwork
    edge_encoder: DenseNetwork
    message_net: DenseNetwork
    scales: FeatureScales
    acc_noise_var: FloatArray | None = None
    force_noise_var: FloatArray | None = None
    graph_ref: str = ""

    def __post_init__(self) -> None:
        lx = self.node_encoder.output_size
        le = self.edge_encoder.output_size
        if self.node_encoder.input_size != NODE_FEATURES:
            raise ShapeMismatchError(f"node encoder must take {NODE_FEATURES} inputs")
        if self.edge_encoder.input_size != EDGE_FEATURES:
            raise ShapeMismatchError(f"edge encoder must take {EDGE_FEATURES} inputs")
        if self.message_net.input_size != 2 * lx + le:
            raise ShapeMismatchError("message head must take 2*node + edge latents")
        if self.message_net.output_size not in (1, 2):
            raise ShapeMismatchError("message head must emit 1 or 2 scalars")

    @property
    def message_outputs(self) -> int:
        return self.message_net.output_size

    def networks(self) -> tuple[DenseNetwork, DenseNetwork, DenseNetwork]:
        return (self.node_encoder, self.edge_encoder, self.message_net)


def create_model(
    scales: FeatureScales,
    node_latent: int = 16,
    edge_latent: int = 16,
    hidden: tuple[int, ...] = (64, 64),
    message_outputs: int = 1,
    seed: int = 0,
    slope: float = 0.01,
    head_scale: float = 1e-2,
) -> HybridDynamicsModel:
    """Initialize a model with Glorot weights and a near-zero message head."""
    rng = np.random.default_rng(seed)
    node_encoder = init_dense(
        (NODE_FEATURES, node_latent), rng, slope=slope, activate_output=True
    )
    edge_encoder = init_dense(
        (EDGE_FEATURES, edge_latent), rng, slope=slope, activate_output=True
    )
    message_net = init_dense(
        (2 * node_latent + edge_latent, *hidden, message_outputs),
        rng,
        slope=slope,
        activate_output=False,
        final_scale=head_scale,
    )
    return HybridDynamicsModel(node_encoder, edge_encoder, message_net, scales)


@dataclass
class GraphBinding:
    """Per-graph precomputations reused across evaluations."""

    graph: StructuralGraph
    occ: EdgeOccurrences
    partner: np.ndarray        # occurrence index of the other directed view
    pair_weight: FloatArray    # 0.5 for paired occurrences, 1.0 for self-loops
    first_occurrence: np.ndarray  # one representative occurrence per edge
    cos_phi: FloatArray        # (n_edges,)
    sin_phi: FloatArray        # (n_edges,)
    inv_mass: FloatArray       # (n_nodes, 1)


def bind(graph: StructuralGraph) -> GraphBinding:
    """Build the reusable occurrence/partner tables for a graph."""
    occ = build_occurrences(graph)
    partner = np.arange(occ.n_occurrences)
    by_edge: dict[int, list[int]] = {}
    for k, e in enumerate(occ.edge):
        by_edge.setdefault(int(e), []).append(k)
    weight = np.ones(occ.n_occurrences)
    first = np.zeros(graph.n_edges, dtype=int)
    for e, members in by_edge.items():
        first[e] = members[0]
        if len(members) == 2:
            a, b = members
            partner[a], partner[b] = b, a
            weight[a] = weight[b] = 0.5
    return GraphBinding(
        graph=graph,
        occ=occ,
        partner=partner,
        pair_weight=weight,
        first_occurrence=first,
        cos_phi=np.cos(graph.rest_angles),
        sin_phi=np.sin(graph.rest_angles),
        inv_mass=1.0 / graph.masses[:, None],
    )


@dataclass
class EvalCache:
    """Everything one acceleration evaluation needs for exact adjoints."""

    state: GraphState
    forces: FloatArray
    kin: EdgeKinematics
    node_cache: NetCache
    edge_cache: NetCache
    message_cache: NetCache
    messages: FloatArray       # raw per-occurrence head outputs (n_occ, n_out)
    sym_messages: FloatArray   # per-edge symmetrized messages (n_edges, n_out)
    axial: FloatArray          # linear axial scalars per edge (n_edges,)
    xi_lin: FloatArray
    xi_nonlin: FloatArray
    accel: FloatArray


def node_feature_matrix(
    model: HybridDynamicsModel, graph: StructuralGraph, forces: FloatArray
) -> FloatArray:
    """Normalized node features (n_nodes, 5)."""
    raw = np.concatenate(
        [graph.positions, forces, graph.masses[:, None]], axis=1
    )
    return raw / model.scales.node


def edge_feature_matrix(
    model: HybridDynamicsModel, binding: GraphBinding, kin: EdgeKinematics
) -> FloatArray:
    """Normalized per-occurrence edge features (n_occ, 8)."""
    graph = binding.graph
    occ = binding.occ
    e = occ.edge
    sign = occ.sign[:, None]
    directed = kin.directions[e] * sign
    rest_dir = np.stack([binding.cos_phi[e], binding.sin_phi[e]], axis=1) * sign
    raw = np.concatenate(
        [
            kin.extensions[e][:, None],
            kin.extension_rates[e][:, None],
            directed,
            rest_dir,
            graph.stiffness[e][:, None],
            graph.damping[e][:, None],
        ],
        axis=1,
    )
    return raw / model.scales.edge


def _axial_scalars(graph: StructuralGraph, kin: EdgeKinematics) -> FloatArray:
    return graph.stiffness * kin.extensions + graph.damping * kin.extension_rates


def _scatter_forces(
    binding: GraphBinding,
    kin: EdgeKinematics,
    edge_scalars: FloatArray,
    perpendicular_scalars: FloatArray | None = None,
) -> FloatArray:
    """Sum per-edge scalars into per-node forces using occurrence directions."""
    occ = binding.occ
    e = occ.edge
    n_occ_dir = kin.directions[e] * occ.sign[:, None]
    contrib = edge_scalars[e][:, None] * n_occ_dir
    if perpendicular_scalars is not None:
        perp = np.stack([-n_occ_dir[:, 1], n_occ_dir[:, 0]], axis=1)
        contrib = contrib + perpendicular_scalars[e][:, None] * perp
    out = np.zeros((binding.graph.n_nodes, 2))
    np.add.at(out, occ.receiver, contrib)
    return out


def evaluate(
    model: HybridDynamicsModel,
    binding: GraphBinding,
    state: GraphState,
    forces: FloatArray,
) -> EvalCache:
    """One full acceleration evaluation with adjoint bookkeeping."""
    graph = binding.graph
    occ = binding.occ
    kin = corotational_kinematics(graph, state)

    axial = _axial_scalars(graph, kin)
    xi_lin = _scatter_forces(binding, kin, axial)

    node_in = node_feature_matrix(model, graph, forces)
    hx, node_cache = forward_cached(model.node_encoder, node_in)
    edge_in = edge_feature_matrix(model, binding, kin)
    he, edge_cache = forward_cached(model.edge_encoder, edge_in)
    msg_in = np.concatenate([hx[occ.sender], hx[occ.receiver], he], axis=1)
    messages, message_cache = forward_cached(model.message_net, msg_in)

    # symmetrize over the two directed views so endpoints share one scalar;
    # self-loops are their own partner and pass through unchanged
    sym_occ = 0.5 * (messages + messages[binding.partner])
    sym_messages = sym_occ[binding.first_occurrence]

    scaled = sym_messages * model.scales.message
    if model.message_outputs == 1:
        xi_nonlin = _scatter_forces(binding, kin, scaled[:, 0])
    else:
        xi_nonlin = _scatter_forces(binding, kin, scaled[:, 0], scaled[:, 1])

    accel = (forces - xi_lin - xi_nonlin) * binding.inv_mass
    return EvalCache(
        state=state,
        forces=forces,
        kin=kin,
        node_cache=node_cache,
        edge_cache=edge_cache,
        message_cache=message_cache,
        messages=messages,
        sym_messages=sym_messages,
        axial=axial,
        xi_lin=xi_lin,
        xi_nonlin=xi_nonlin,
        accel=accel,
    )


def physics_convolution(graph: StructuralGraph, state: GraphState) -> FloatArray:
    """Closed-form linear force aggregation xi_lin, shape (n_nodes, 2).

    Per receiver, each incident edge contributes ``(k eps + c eps_rate)``
    along the current direction from the other endpoint to the receiver, so
    a stretched member pulls its endpoints together under ``m a = f - xi``.
    """
    binding = bind(graph)
    kin = corotational_kinematics(graph, state)
    return _scatter_forces(binding, kin, _axial_scalars(graph, kin))


def blackbox_convolution(
    model: HybridDynamicsModel,
    graph: StructuralGraph,
    state: GraphState,
    forces: FloatArray,
) -> FloatArray:
    """Learned force aggregation xi_nonlin, shape (n_nodes, 2)."""
    return evaluate(model, bind(graph), state, np.asarray(forces, float)).xi_nonlin


def state_derivative(
    model: HybridDynamicsModel,
    graph: StructuralGraph | GraphBinding,
    state: GraphState,
    forces: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    """Time derivative of the state: (velocities, accelerations)."""
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    cache = evaluate(model, binding, state, np.asarray(forces, float))
    return state.velocities.copy(), cache.accel


def _check_magnitude(u: FloatArray, v: FloatArray) -> None:
    if (
        not (np.isfinite(u).all() and np.isfinite(v).all())
        or np.abs(u).max(initial=0.0) > DIVERGENCE_LIMIT
        or np.abs(v).max(initial=0.0) > DIVERGENCE_LIMIT
    ):
        raise DivergedError("state magnitude left the trusted range")


def verlet_step(
    model: HybridDynamicsModel,
    graph: StructuralGraph | GraphBinding,
    state: GraphState,
    forces: FloatArray,
    dt: float,
    forces_next: FloatArray | None = None,
) -> GraphState:
    """One Velocity Verlet transition.

    ``u+ = u + dt v + dt^2/2 a(u, v)``; the end acceleration is evaluated
    at the predictor velocity ``v + dt a(u, v)`` and, when given, at the
    end-of-step force sample; ``v+ = v + dt/2 (a + a+)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    forces = np.asarray(forces, dtype=float)
    f_end = forces if forces_next is None else np.asarray(forces_next, dtype=float)
    a1 = evaluate(model, binding, state, forces).accel
    u_next = state.displacements + dt * state.velocities + 0.5 * dt * dt * a1
    v_pred = state.velocities + dt * a1
    a2 = evaluate(model, binding, GraphState(u_next, v_pred), f_end).accel
    v_next = state.velocities + 0.5 * dt * (a1 + a2)
    _check_magnitude(u_next, v_next)
    return GraphState(u_next, v_next)


def interpolate_forces(f_start: FloatArray, f_end: FloatArray, substeps: int):
    """Substep force samples under the piecewise-linear drive convention.

    Yields ``substeps`` pairs (f at substep start, f at substep end).
    """
    for k in range(substeps):
        lo = k / substeps
        hi = (k + 1) / substeps
        yield f_start + (f_end - f_start) * lo, f_start + (f_end - f_start) * hi


def rollout(
    model: HybridDynamicsModel,
    graph: StructuralGraph,
    initial_state: GraphState,
    force_series: FloatArray,
    times: FloatArray,
    substeps: int = 1,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Autoregressive open-loop prediction over a uniform grid.

    Parameters
    ----------
    force_series : ndarray, shape (n_steps, n_nodes, 2)
        Known drive signal per sample.
    times : ndarray, shape (n_steps,)
        Uniform sample times.
    substeps : int
        Integrator steps per sample interval. Values above 1 suppress the
        integrator's phase dispersion at stiff modes; forces between
        samples are interpolated linearly.

    Returns
    -------
    displacements, velocities, accelerations : ndarray
        Shape (n_steps, n_nodes, 2); accelerations are force-balance values
        at each recorded state with that sample's force.
    """
    times = np.asarray(times, dtype=float)
    force_series = np.asarray(force_series, dtype=float)
    n_steps = times.shape[0]
    steps = np.diff(times)
    if n_steps < 2 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("need a uniform grid with at least 2 samples")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    dt = float(steps[0]) / substeps
    binding = bind(graph)
    n_nodes = graph.n_nodes
    if force_series.shape != (n_steps, n_nodes, 2):
        raise ShapeMismatchError("force series does not match grid/graph")
    u = np.zeros((n_steps, n_nodes, 2))
    v = np.zeros((n_steps, n_nodes, 2))
    a = np.zeros((n_steps, n_nodes, 2))
    state = initial_state.copy()
    u[0], v[0] = state.displacements, state.velocities
    a[0] = evaluate(model, binding, state, force_series[0]).accel
    for s in range(1, n_steps):
        for f_lo, f_hi in interpolate_forces(
            force_series[s - 1], force_series[s], substeps
        ):
            state = verlet_step(model, binding, state, f_lo, dt, f_hi)
        u[s], v[s] = state.displacements, state.velocities
        a[s] = evaluate(model, binding, state, force_series[s]).accel
    return u, v, a


def physics_residual(
    model: HybridDynamicsModel,
    graph: StructuralGraph | GraphBinding,
    state: GraphState,
    observed_forces: FloatArray,
    observed_accelerations: FloatArray,
    input_forces: FloatArray,
    mask: ObservationMask,
) -> FloatArray:
    """Force-balance residual r = m a* + xi(state) - f* on measured nodes.

    ``input_forces`` (the known drive) feeds the node features; the noisy
    measured channels enter only through ``a*`` and ``f*``. Rows for
    unmeasured nodes are zero.
    """
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    cache = evaluate(model, binding, state, np.asarray(input_forces, float))
    xi = cache.xi_lin + cache.xi_nonlin
    residual = np.zeros((binding.graph.n_nodes, 2))
    measured = mask.measured
    residual[measured] = (
        binding.graph.masses[measured, None] * observed_accelerations[measured]
        + xi[measured]
        - observed_forces[measured]
    )
    return residual


def residual_variance(
    masses: FloatArray, acc_noise_var: FloatArray, force_noise_var: FloatArray
) -> FloatArray:
    """Per-node residual variance m^2 var_acc + var_force."""
    masses = np.asarray(masses, dtype=float)
    return masses**2 * np.asarray(acc_noise_var, float) + np.asarray(
        force_noise_var, float
    )


def loss_physics_deterministic(
    residuals: FloatArray, mask: ObservationMask
) -> float:
    """Mean over steps of the summed squared residual norms (measured nodes)."""
    residuals = np.asarray(residuals, dtype=float)
    picked = residuals[:, mask.measured, :]
    return float(np.mean(np.sum(picked**2, axis=(1, 2))))


def loss_physics_nll(
    residuals: FloatArray, residual_var: FloatArray, mask: ObservationMask
) -> float:
    """Negative log Gaussian likelihood of the residuals, summed over steps.

    Each node-step-component contributes ``r^2 / (2 var) + ln(2 pi var)/2``
    with the node's residual variance.
    """
    residuals = np.asarray(residuals, dtype=float)
    var = np.asarray(residual_var, dtype=float)[mask.measured]
    if np.any(var <= 0):
        raise NonpositiveVarianceError("residual variances must be positive")
    picked = residuals[:, mask.measured, :]
    quad = 0.5 * np.sum(picked**2 / var[None, :, None])
    const = 0.5 * picked.shape[0] * 2 * np.sum(np.log(2.0 * np.pi * var))
    return float(quad + const)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1
_NET_KEYS = ("node", "edge", "message")


def save_model(path: str | Path, model: HybridDynamicsModel) -> None:
    """Write a versioned checkpoint (numpy .npz, 64-bit floats).

    Layout: per network, layer count, slope, output-activation flag and the
    weight/bias arrays; the feature scales; the training noise variances;
    the nominal-graph reference string.
    """
    payload: dict[str, object] = {"version": np.array(CHECKPOINT_VERSION)}
    for key, net in zip(_NET_KEYS, model.networks()):
        payload[f"{key}_layers"] = np.array(net.n_layers)
        payload[f"{key}_slope"] = np.array(net.slope)
        payload[f"{key}_activate_output"] = np.array(int(net.activate_output))
        for l in range(net.n_layers):
            payload[f"{key}_w{l}"] = net.weights[l]
            payload[f"{key}_b{l}"] = net.biases[l]
    payload["scale_node"] = model.scales.node
    payload["scale_edge"] = model.scales.edge
    payload["scale_message"] = np.array(model.scales.message)
    if model.acc_noise_var is not None:
        payload["acc_noise_var"] = model.acc_noise_var
    if model.force_noise_var is not None:
        payload["force_noise_var"] = model.force_noise_var
    payload["graph_ref"] = np.array(model.graph_ref)
    np.savez(path, **payload)


def load_model(path: str | Path) -> HybridDynamicsModel:
    """Read a checkpoint written by :func:`save_model`."""
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        nets = []
        for key in _NET_KEYS:
            n_layers = int(data[f"{key}_layers"])
            nets.append(
                DenseNetwork(
                    weights=[data[f"{key}_w{l}"] for l in range(n_layers)],
                    biases=[data[f"{key}_b{l}"] for l in range(n_layers)],
                    slope=float(data[f"{key}_slope"]),
                    activate_output=bool(int(data[f"{key}_activate_output"])),
                )
            )
        scales = FeatureScales(
            node=data["scale_node"],
            edge=data["scale_edge"],
            message=float(data["scale_message"]),
        )
        acc_var = data["acc_noise_var"] if "acc_noise_var" in data else None
        force_var = data["force_noise_var"] if "force_noise_var" in data else None
        graph_ref = str(data["graph_ref"])
    return HybridDynamicsModel(
        node_encoder=nets[0],
        edge_encoder=nets[1],
        message_net=nets[2],
        scales=scales,
        acc_noise_var=acc_var,
        force_noise_var=force_var,
        graph_ref=graph_ref,
    )
