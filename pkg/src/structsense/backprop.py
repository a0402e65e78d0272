"""Hand-written adjoints and Jacobians for the hybrid dynamics model.

Everything here is exact reverse-mode (or exact forward assembly) written
against the fixed architecture, no tape engine. The chain has three parts:

* dense networks: handled by ``networks.backward_cached``;
* corotational kinematics: closed-form derivative rows. With the stored
  (canonical) edge vector ``d`` and relative velocity ``w``,

      d eps     / d d = n                 (n = d / l)
      d rate    / d d = (w - rate n) / l,  d rate / d w = n
      d n       / d d = (I - n n^T) / l

  and the node scatter uses ``d d/d u_j = +I``, ``d d/d u_i = -I`` for a
  regular edge (i, j), or ``+I`` on the node for an anchored self-loop;
* force assembly: per-receiver contributions are the shared per-edge
  scalars times the signed direction, so adjoints collapse to per-edge
  accumulators (the signed sum of upstream rows over a pair of directed
  views).

Backpropagation through time recomputes per-step evaluation caches during
the backward sweep (states are kept, activations are not), so memory stays
flat in the window length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import TrajectoryDataset
from .errors import NonfiniteLossError, ShapeMismatchError
from .graph import FloatArray, GraphState
from .model import (
    EvalCache,
    GraphBinding,
    HybridDynamicsModel,
    bind,
    evaluate,
    loss_physics_deterministic,
    loss_physics_nll,
    residual_variance,
)
from .networks import GradientBundle, backward_cached


@dataclass
class ModelGradients:
    """Loss gradients for all three networks of a model."""

    node: GradientBundle
    edge: GradientBundle
    message: GradientBundle

    @classmethod
    def zeros_like(cls, model: HybridDynamicsModel) -> "ModelGradients":
        return cls(
            GradientBundle.zeros_like(model.node_encoder),
            GradientBundle.zeros_like(model.edge_encoder),
            GradientBundle.zeros_like(model.message_net),
        )

    def add_(self, other: "ModelGradients") -> None:
        self.node.add_(other.node)
        self.edge.add_(other.edge)
        self.message.add_(other.message)

    def bundles(self) -> tuple[GradientBundle, GradientBundle, GradientBundle]:
        return (self.node, self.edge, self.message)


def parameters_vector(model: HybridDynamicsModel) -> FloatArray:
    """All trainable parameters as one flat vector (fixed documented order)."""
    parts = []
    for net in model.networks():
        for arr in net.parameters():
            parts.append(arr.reshape(-1))
    return np.concatenate(parts)


def set_parameters(model: HybridDynamicsModel, vector: FloatArray) -> None:
    """Write a flat vector back into the model's parameter arrays."""
    vector = np.asarray(vector, dtype=float)
    total = sum(arr.size for net in model.networks() for arr in net.parameters())
    if vector.size != total:
        raise ShapeMismatchError("parameter vector length mismatch")
    cursor = 0
    for net in model.networks():
        for arr in net.parameters():
            arr[...] = vector[cursor : cursor + arr.size].reshape(arr.shape)
            cursor += arr.size


def gradients_vector(grads: ModelGradients) -> FloatArray:
    """Flatten a ModelGradients in the :func:`parameters_vector` order."""
    parts = []
    for bundle in grads.bundles():
        for w, b in zip(bundle.weight_grads, bundle.bias_grads):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
    return np.concatenate(parts)


def _feature_pullback(
    model: HybridDynamicsModel,
    binding: GraphBinding,
    cache: EvalCache,
    message_upstream: FloatArray,
    grads: ModelGradients | None,
) -> tuple[FloatArray, FloatArray]:
    """Pull upstream rows on the raw per-occurrence messages back to state.

    Accumulates network parameter gradients into ``grads`` when given and
    returns per-edge gradients with respect to the canonical edge vector
    and relative velocity, shapes (n_edges, 2).
    """
    occ = binding.occ
    lx = model.node_encoder.output_size
    msg_grads = backward_cached(model.message_net, cache.message_cache, message_upstream)
    g_in = msg_grads.input_grad
    g_hx_sender = g_in[:, :lx]
    g_hx_receiver = g_in[:, lx : 2 * lx]
    g_he = g_in[:, 2 * lx :]

    edge_grads = backward_cached(model.edge_encoder, cache.edge_cache, g_he)
    g_feat = edge_grads.input_grad / model.scales.edge  # to physical features

    n_nodes = binding.graph.n_nodes
    hx_upstream = np.zeros((n_nodes, lx))
    np.add.at(hx_upstream, occ.sender, g_hx_sender)
    np.add.at(hx_upstream, occ.receiver, g_hx_receiver)
    node_grads = backward_cached(model.node_encoder, cache.node_cache, hx_upstream)

    if grads is not None:
        grads.message.add_(msg_grads)
        grads.edge.add_(edge_grads)
        grads.node.add_(node_grads)

    # chain the physical edge features to canonical (d, w) coordinates
    kin = cache.kin
    e = occ.edge
    n_hat = kin.directions[e]
    length = kin.lengths[e][:, None]
    rate = kin.extension_rates[e][:, None]
    w_rel = kin.relative_velocities[e]
    sign = occ.sign[:, None]
    g_dir = g_feat[:, 2:4]  # upstream on the signed direction entries
    proj = g_dir - np.sum(g_dir * n_hat, axis=1, keepdims=True) * n_hat
    grad_d_occ = (
        g_feat[:, 0:1] * n_hat
        + g_feat[:, 1:2] * (w_rel - rate * n_hat) / length
        + sign * proj / length
    )
    grad_w_occ = g_feat[:, 1:2] * n_hat
    grad_d = np.zeros((binding.graph.n_edges, 2))
    grad_w = np.zeros((binding.graph.n_edges, 2))
    np.add.at(grad_d, e, grad_d_occ)
    np.add.at(grad_w, e, grad_w_occ)
    return grad_d, grad_w


def _scatter_edge_grads(
    binding: GraphBinding,
    grad_d: FloatArray,
    grad_w: FloatArray,
    grad_u: FloatArray,
    grad_v: FloatArray,
) -> None:
    """Accumulate canonical per-edge gradients onto node state gradients."""
    edges = binding.graph.edges
    i = edges[:, 0]
    j = edges[:, 1]
    regular = i != j
    np.add.at(grad_u, j, grad_d)
    np.add.at(grad_v, j, grad_w)
    if regular.any():
        np.add.at(grad_u, i[regular], -grad_d[regular])
        np.add.at(grad_v, i[regular], -grad_w[regular])


def xi_vjp(
    model: HybridDynamicsModel,
    binding: GraphBinding,
    cache: EvalCache,
    upstream: FloatArray,
    grads: ModelGradients | None,
) -> tuple[FloatArray, FloatArray]:
    """Adjoint of the total internal force xi = xi_lin + xi_nonlin.

    ``upstream`` has shape (n_nodes, 2). Returns gradients with respect to
    displacements and velocities and accumulates parameter gradients.
    """
    occ = binding.occ
    graph = binding.graph
    kin = cache.kin
    n_e = graph.n_edges
    # signed sum of upstream rows over each edge's directed views
    qa = np.zeros((n_e, 2))
    np.add.at(qa, occ.edge, occ.sign[:, None] * upstream[occ.receiver])

    n_hat = kin.directions
    length = kin.lengths[:, None]
    rate = kin.extension_rates[:, None]
    w_rel = kin.relative_velocities
    k = graph.stiffness[:, None]
    c = graph.damping[:, None]
    qn = np.sum(qa * n_hat, axis=1, keepdims=True)
    qa_perp = qa - qn * n_hat

    # linear axial part: scalar path plus direction path
    grad_d = qn * (k * n_hat + c * (w_rel - rate * n_hat) / length)
    grad_d += cache.axial[:, None] * qa_perp / length
    grad_w = qn * c * n_hat

    # learned part: direction path and the message-value path
    out_scale = model.scales.message
    sym = cache.sym_messages
    r_qa = np.stack([qa[:, 1], -qa[:, 0]], axis=1)  # R^T qa for the perp output
    m_up = np.empty((n_e, model.message_outputs))
    m_up[:, 0] = out_scale * qn[:, 0]
    grad_d += out_scale * sym[:, 0:1] * qa_perp / length
    if model.message_outputs == 2:
        qt = np.sum(r_qa * n_hat, axis=1, keepdims=True)
        m_up[:, 1] = out_scale * qt[:, 0]
        grad_d += out_scale * sym[:, 1:2] * (r_qa - qt * n_hat) / length
    msg_upstream = binding.pair_weight[:, None] * m_up[occ.edge]
    fd, fw = _feature_pullback(model, binding, cache, msg_upstream, grads)
    grad_d += fd
    grad_w += fw

    grad_u = np.zeros((graph.n_nodes, 2))
    grad_v = np.zeros((graph.n_nodes, 2))
    _scatter_edge_grads(binding, grad_d, grad_w, grad_u, grad_v)
    return grad_u, grad_v


def accel_vjp(
    model: HybridDynamicsModel,
    binding: GraphBinding,
    cache: EvalCache,
    upstream_accel: FloatArray,
    grads: ModelGradients | None,
) -> tuple[FloatArray, FloatArray]:
    """Adjoint of one acceleration evaluation with respect to the state."""
    q = -upstream_accel * binding.inv_mass
    return xi_vjp(model, binding, cache, q, grads)


def verlet_vjp(
    model: HybridDynamicsModel,
    binding: GraphBinding,
    cache_start: EvalCache,
    cache_end: EvalCache,
    dt: float,
    upstream_u: FloatArray,
    upstream_v: FloatArray,
    grads: ModelGradients | None,
) -> tuple[FloatArray, FloatArray]:
    """Adjoint of one Velocity Verlet step.

    ``cache_start`` is the evaluation at the step's entry state and
    ``cache_end`` the one at the predictor point (u+, v + dt a1); both are
    exactly the evaluations the forward step performed.
    """
    g_a2 = 0.5 * dt * upstream_v
    du2, dv2 = accel_vjp(model, binding, cache_end, g_a2, grads)
    g_u_plus = upstream_u + du2
    g_v_pred = dv2
    grad_v = upstream_v + dt * g_u_plus + g_v_pred
    g_a1 = dt * g_v_pred + 0.5 * dt * dt * g_u_plus + 0.5 * dt * upstream_v
    du1, dv1 = accel_vjp(model, binding, cache_start, g_a1, grads)
    grad_u = g_u_plus + du1
    grad_v = grad_v + dv1
    return grad_u, grad_v


def _fine_grid_forces(forces: FloatArray, substeps: int) -> FloatArray:
    """Linear interpolation of the drive onto the substep grid."""
    if substeps == 1:
        return forces
    n_t = forces.shape[0] - 1
    out = np.empty((n_t * substeps + 1,) + forces.shape[1:])
    for k in range(substeps):
        w = k / substeps
        out[k : n_t * substeps : substeps] = (1.0 - w) * forces[:-1] + w * forces[1:]
    out[-1] = forces[-1]
    return out


def loss_and_gradient(
    model: HybridDynamicsModel,
    graph,
    dataset: TrajectoryDataset,
    loss_kind: str = "deterministic",
    substeps: int = 1,
    return_rollout: bool = False,
):
    """Full-window physics loss and its exact parameter gradient.

    Rolls the model out from rest over the dataset grid driven by the known
    input forces, evaluates the force-balance residual against the noisy
    observations at every predicted sample, and backpropagates through the
    whole window (no truncation, no batching). With ``substeps`` above 1
    the integrator takes that many steps per sample interval (forces
    interpolated linearly) while residuals stay on the sample grid.

    Returns ``(loss, ModelGradients)``, plus the rollout arrays
    (displacements, velocities, accelerations) when requested.
    """
    if dataset.mask is None or not dataset.has_observations:
        raise ValueError("training requires a corrupted, masked dataset")
    if loss_kind not in ("deterministic", "nll"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    n_nodes = binding.graph.n_nodes
    mask = dataset.mask
    measured = mask.measured
    times = dataset.times
    step_sizes = np.diff(times)
    if not np.allclose(step_sizes, step_sizes[0], rtol=1e-9, atol=0.0):
        raise ValueError("training grid must be uniform")
    dt = float(step_sizes[0]) / substeps
    n_t = dataset.n_steps - 1  # sample transitions
    forces = _fine_grid_forces(dataset.input_forces, substeps)
    n_fine = n_t * substeps

    masses = binding.graph.masses
    if loss_kind == "nll":
        if dataset.acc_noise_var is None or dataset.force_noise_var is None:
            raise ValueError("nll loss requires recorded noise variances")
        res_var = residual_variance(
            masses, dataset.acc_noise_var, dataset.force_noise_var
        )
        if np.any(res_var[measured] <= 0):
            # noiseless channels carry no likelihood scale; fall back to a floor
            res_var = np.maximum(res_var, 1e-12)

    # forward sweep: keep states and sample residuals, drop activations
    states_u = np.zeros((n_fine + 1, n_nodes, 2))
    states_v = np.zeros((n_fine + 1, n_nodes, 2))
    residuals = np.zeros((n_t + 1, n_nodes, 2))
    accels = np.zeros((n_t + 1, n_nodes, 2)) if return_rollout else None

    state = GraphState.zero(n_nodes)
    cache = evaluate(model, binding, state, forces[0])
    if return_rollout:
        accels[0] = cache.accel
    for s in range(1, n_fine + 1):
        a1 = cache.accel
        u_next = state.displacements + dt * state.velocities + 0.5 * dt * dt * a1
        v_pred = state.velocities + dt * a1
        cache_end = evaluate(model, binding, GraphState(u_next, v_pred), forces[s])
        v_next = state.velocities + 0.5 * dt * (a1 + cache_end.accel)
        state = GraphState(u_next, v_next)
        states_u[s] = u_next
        states_v[s] = v_next
        cache = evaluate(model, binding, state, forces[s])  # also a1 of step s+1
        if s % substeps == 0:
            sample = s // substeps
            if return_rollout:
                accels[sample] = cache.accel
            xi = cache.xi_lin + cache.xi_nonlin
            residuals[sample, measured] = (
                masses[measured, None]
                * dataset.observed_accelerations[sample, measured]
                + xi[measured]
                - dataset.observed_forces[sample, measured]
            )

    window = residuals[1:]
    if loss_kind == "deterministic":
        loss = loss_physics_deterministic(window, mask)
    else:
        loss = loss_physics_nll(window, res_var, mask)
    if not np.isfinite(loss):
        raise NonfiniteLossError(f"loss evaluated to {loss}")

    # backward sweep with per-step recomputation
    grads = ModelGradients.zeros_like(model)
    lam_u = np.zeros((n_nodes, 2))
    lam_v = np.zeros((n_nodes, 2))
    cache_res = cache  # evaluation at the final fine state
    for s in range(n_fine, 0, -1):
        if s % substeps == 0:
            sample = s // substeps
            if loss_kind == "deterministic":
                w_up = (2.0 / n_t) * residuals[sample]
            else:
                w_up = residuals[sample] / res_var[:, None]
            du_r, dv_r = xi_vjp(model, binding, cache_res, w_up, grads)
            lam_u += du_r
            lam_v += dv_r
        # recompute the two evaluations of fine step s
        prev = GraphState(states_u[s - 1], states_v[s - 1])
        cache_start = evaluate(model, binding, prev, forces[s - 1])
        a1 = cache_start.accel
        u_next = prev.displacements + dt * prev.velocities + 0.5 * dt * dt * a1
        v_pred = prev.velocities + dt * a1
        cache_end = evaluate(model, binding, GraphState(u_next, v_pred), forces[s])
        lam_u, lam_v = verlet_vjp(
            model, binding, cache_start, cache_end, dt, lam_u, lam_v, grads
        )
        cache_res = cache_start  # equals the state evaluation at fine step s-1
    if return_rollout:
        return loss, grads, (states_u[::substeps], states_v[::substeps], accels)
    return loss, grads


# --- forward Jacobian assembly (for the filter) ------------------------------


def _edge_force_blocks(
    model: HybridDynamicsModel, binding: GraphBinding, cache: EvalCache
) -> tuple[FloatArray, FloatArray]:
    """Per-edge 2x2 blocks d(receiver contribution)/d(d, w), canonical view."""
    graph = binding.graph
    kin = cache.kin
    n_e = graph.n_edges
    n_hat = kin.directions
    length = kin.lengths[:, None, None]
    rate = kin.extension_rates[:, None]
    w_rel = kin.relative_velocities
    k = graph.stiffness
    c = graph.damping
    eye = np.eye(2)[None, :, :]
    nnT = n_hat[:, :, None] * n_hat[:, None, :]
    proj = (eye - nnT) / length

    d_axial_dd = k[:, None] * n_hat + c[:, None] * (w_rel - rate * n_hat) / kin.lengths[
        :, None
    ]
    blocks_d = n_hat[:, :, None] * d_axial_dd[:, None, :]
    blocks_d += cache.axial[:, None, None] * proj
    blocks_w = c[:, None, None] * nnT

    out_scale = model.scales.message
    n_out = model.message_outputs
    grad_rows = []
    for out in range(n_out):
        up = np.zeros((binding.occ.n_occurrences, n_out))
        up[:, out] = binding.pair_weight
        grad_rows.append(_feature_pullback(model, binding, cache, up, None))
    sym = cache.sym_messages
    gd0, gw0 = grad_rows[0]
    blocks_d += out_scale * (
        n_hat[:, :, None] * gd0[:, None, :] + sym[:, 0, None, None] * proj
    )
    blocks_w += out_scale * n_hat[:, :, None] * gw0[:, None, :]
    if n_out == 2:
        gd1, gw1 = grad_rows[1]
        r_n = np.stack([-n_hat[:, 1], n_hat[:, 0]], axis=1)
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        r_proj = np.einsum("ab,ebc->eac", rot, proj)
        blocks_d += out_scale * (
            r_n[:, :, None] * gd1[:, None, :] + sym[:, 1, None, None] * r_proj
        )
        blocks_w += out_scale * r_n[:, :, None] * gw1[:, None, :]
    return blocks_d, blocks_w


def accel_jacobian(
    model: HybridDynamicsModel, binding: GraphBinding, cache: EvalCache
) -> tuple[FloatArray, FloatArray]:
    """Dense Jacobians of the accelerations: (d a/d u, d a/d v), (2n, 2n)."""
    graph = binding.graph
    n = graph.n_nodes
    blocks_d, blocks_w = _edge_force_blocks(model, binding, cache)
    edges = graph.edges
    i = edges[:, 0]
    j = edges[:, 1]
    regular = i != j

    def assemble(blocks: FloatArray) -> FloatArray:
        out = np.zeros((n, n, 2, 2))
        np.add.at(out, (j, j), blocks)
        if regular.any():
            br = blocks[regular]
            np.add.at(out, (i[regular], i[regular]), br)
            np.add.at(out, (j[regular], i[regular]), -br)
            np.add.at(out, (i[regular], j[regular]), -br)
        return out.transpose(0, 2, 1, 3).reshape(2 * n, 2 * n)

    xi_u = assemble(blocks_d)
    xi_v = assemble(blocks_w)
    inv_m = np.repeat(binding.inv_mass[:, 0], 2)[:, None]
    return -inv_m * xi_u, -inv_m * xi_v


def interleave_permutation(n_nodes: int) -> np.ndarray:
    """Map flattened (u_x,u_y,v_x,v_y)-per-node indices to block (u|v) ones."""
    perm = np.zeros(4 * n_nodes, dtype=int)
    for node in range(n_nodes):
        perm[4 * node + 0] = 2 * node
        perm[4 * node + 1] = 2 * node + 1
        perm[4 * node + 2] = 2 * n_nodes + 2 * node
        perm[4 * node + 3] = 2 * n_nodes + 2 * node + 1
    return perm


def transition_jacobian(
    model: HybridDynamicsModel,
    graph,
    state: GraphState,
    forces: FloatArray,
    dt: float,
    forces_next: FloatArray | None = None,
) -> FloatArray:
    """Exact Jacobian of one Verlet step w.r.t. the flattened state."""
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    forces = np.asarray(forces, dtype=float)
    f_end = forces if forces_next is None else np.asarray(forces_next, dtype=float)
    cache1 = evaluate(model, binding, state, forces)
    a1u, a1v = accel_jacobian(model, binding, cache1)
    dt2 = 0.5 * dt * dt
    u_next = state.displacements + dt * state.velocities + dt2 * cache1.accel
    v_pred = state.velocities + dt * cache1.accel
    cache2 = evaluate(model, binding, GraphState(u_next, v_pred), f_end)
    a2u, a2v = accel_jacobian(model, binding, cache2)

    n2 = a1u.shape[0]
    eye = np.eye(n2)
    t_uu = eye + dt2 * a1u
    t_uv = dt * eye + dt2 * a1v
    da2_du = a2u @ t_uu + a2v @ (dt * a1u)
    da2_dv = a2u @ t_uv + a2v @ (eye + dt * a1v)
    t_vu = 0.5 * dt * (a1u + da2_du)
    t_vv = eye + 0.5 * dt * (a1v + da2_dv)
    block = np.block([[t_uu, t_uv], [t_vu, t_vv]])
    perm = interleave_permutation(binding.graph.n_nodes)
    return block[np.ix_(perm, perm)]


def observation_jacobian(
    model: HybridDynamicsModel,
    graph,
    state: GraphState,
    forces: FloatArray,
    measured: np.ndarray,
) -> tuple[FloatArray, FloatArray]:
    """Rows of the acceleration map for measured nodes, plus the prediction.

    Returns ``(H, y_hat)`` where H maps the flattened state to the measured
    acceleration channels (x then y per measured node, nodes ascending) and
    ``y_hat`` is the predicted observation at ``state``.
    """
    binding = graph if isinstance(graph, GraphBinding) else bind(graph)
    cache = evaluate(model, binding, state, np.asarray(forces, float))
    a_u, a_v = accel_jacobian(model, binding, cache)
    rows = np.concatenate(
        [[2 * int(n), 2 * int(n) + 1] for n in np.flatnonzero(measured)]
    )
    h_block = np.concatenate([a_u[rows], a_v[rows]], axis=1)
    perm = interleave_permutation(binding.graph.n_nodes)
    return h_block[:, perm], cache.accel[np.asarray(measured, bool)].reshape(-1)
