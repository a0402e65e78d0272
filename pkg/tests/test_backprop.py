"""Hand-written adjoints and Jacobians against central finite differences."""

import numpy as np
import pytest

from conftest import assemble_linear_matrices, build_graph, random_state
from structsense.backprop import (
    ModelGradients,
    accel_jacobian,
    gradients_vector,
    loss_and_gradient,
    observation_jacobian,
    parameters_vector,
    set_parameters,
    transition_jacobian,
    verlet_vjp,
    xi_vjp,
)
from structsense.datasets import corrupt_and_mask
from structsense.dynamics import simulate
from structsense.graph import (
    GraphState,
    ObservationMask,
    flatten_state,
    sparsity_mask,
    unflatten_state,
)
from structsense.model import (
    FeatureScales,
    bind,
    create_model,
    evaluate,
    rollout,
    verlet_step,
)
from structsense.structures import TrussSystem

FD_STEP = 1e-6


def tiny_model(message_outputs=1, seed=0, head_scale=0.5):
    """Small enough that sweeping every parameter with FD stays fast."""
    scales = FeatureScales(
        node=np.array([1.0, 1.0, 1.0, 1.0, 1.0]),
        edge=np.array([0.1, 0.1, 1.0, 1.0, 1.0, 1.0, 50.0, 0.05]),
        message=1.0,
    )
    return create_model(
        scales,
        node_latent=3,
        edge_latent=3,
        hidden=(8,),
        message_outputs=message_outputs,
        seed=seed,
        head_scale=head_scale,
    )


def fd_state_gradient(func, state, h=FD_STEP):
    """Central differences of a scalar in the state's u and v entries."""
    grad_u = np.zeros_like(state.displacements)
    grad_v = np.zeros_like(state.velocities)
    for arr, grad in ((state.displacements, grad_u), (state.velocities, grad_v)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = arr[idx]
            arr[idx] = keep + h
            hi = func(state)
            arr[idx] = keep - h
            lo = func(state)
            arr[idx] = keep
            grad[idx] = (hi - lo) / (2.0 * h)
    return grad_u, grad_v


def fd_parameter_gradient(func, model, h=FD_STEP):
    theta = parameters_vector(model)
    grad = np.zeros_like(theta)
    for p in range(theta.size):
        bumped = theta.copy()
        bumped[p] = theta[p] + h
        set_parameters(model, bumped)
        hi = func()
        bumped[p] = theta[p] - h
        set_parameters(model, bumped)
        lo = func()
        grad[p] = (hi - lo) / (2.0 * h)
    set_parameters(model, theta)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestXiVjp:
    @pytest.mark.parametrize("message_outputs", [1, 2])
    def test_state_gradient_matches_fd(self, triangle_graph, message_outputs):
        rng = np.random.default_rng(5)
        model = tiny_model(message_outputs)
        binding = bind(triangle_graph)
        forces = rng.standard_normal((3, 2))
        upstream = rng.standard_normal((3, 2))
        state = random_state(3, rng)

        def phi(s):
            cache = evaluate(model, binding, s, forces)
            return float(np.sum(upstream * (cache.xi_lin + cache.xi_nonlin)))

        cache = evaluate(model, binding, state, forces)
        grad_u, grad_v = xi_vjp(model, binding, cache, upstream, None)
        fd_u, fd_v = fd_state_gradient(phi, state)
        assert relative_error(grad_u, fd_u) < 1e-6
        assert relative_error(grad_v, fd_v) < 1e-6

    @pytest.mark.parametrize("message_outputs", [1, 2])
    def test_parameter_gradient_matches_fd(self, triangle_graph, message_outputs):
        rng = np.random.default_rng(6)
        model = tiny_model(message_outputs, seed=1)
        binding = bind(triangle_graph)
        forces = rng.standard_normal((3, 2))
        upstream = rng.standard_normal((3, 2))
        state = random_state(3, rng)

        grads = ModelGradients.zeros_like(model)
        cache = evaluate(model, binding, state, forces)
        xi_vjp(model, binding, cache, upstream, grads)

        def phi():
            c = evaluate(model, binding, state, forces)
            return float(np.sum(upstream * (c.xi_lin + c.xi_nonlin)))

        fd = fd_parameter_gradient(phi, model)
        assert relative_error(gradients_vector(grads), fd) < 1e-6


class TestVerletVjp:
    def test_one_step_state_adjoint_matches_fd(self, triangle_graph):
        rng = np.random.default_rng(9)
        model = tiny_model(seed=4)
        binding = bind(triangle_graph)
        f0 = rng.standard_normal((3, 2))
        f1 = rng.standard_normal((3, 2))
        wu = rng.standard_normal((3, 2))
        wv = rng.standard_normal((3, 2))
        dt = 0.02
        state = random_state(3, rng)

        def phi(s):
            out = verlet_step(model, binding, s, f0, dt, f1)
            return float(np.sum(wu * out.displacements) + np.sum(wv * out.velocities))

        cache_start = evaluate(model, binding, state, f0)
        a1 = cache_start.accel
        u_next = state.displacements + dt * state.velocities + 0.5 * dt * dt * a1
        v_pred = state.velocities + dt * a1
        cache_end = evaluate(model, binding, GraphState(u_next, v_pred), f1)
        grad_u, grad_v = verlet_vjp(
            model, binding, cache_start, cache_end, dt, wu, wv, None
        )
        fd_u, fd_v = fd_state_gradient(phi, state)
        assert relative_error(grad_u, fd_u) < 1e-6
        assert relative_error(grad_v, fd_v) < 1e-6


class TestAccelJacobian:
    @pytest.mark.parametrize("message_outputs", [1, 2])
    def test_dense_blocks_match_fd(self, triangle_graph, message_outputs):
        rng = np.random.default_rng(13)
        model = tiny_model(message_outputs, seed=2)
        binding = bind(triangle_graph)
        forces = rng.standard_normal((3, 2))
        state = random_state(3, rng)
        cache = evaluate(model, binding, state, forces)
        a_u, a_v = accel_jacobian(model, binding, cache)

        h = FD_STEP
        for target, jac in (("u", a_u), ("v", a_v)):
            fd = np.zeros((6, 6))
            arr = state.displacements if target == "u" else state.velocities
            for col in range(6):
                idx = (col // 2, col % 2)
                keep = arr[idx]
                arr[idx] = keep + h
                hi = evaluate(model, binding, state, forces).accel.ravel()
                arr[idx] = keep - h
                lo = evaluate(model, binding, state, forces).accel.ravel()
                arr[idx] = keep
                fd[:, col] = (hi - lo) / (2.0 * h)
            assert relative_error(jac, fd) < 1e-6


class TestTransitionJacobian:
    @pytest.mark.parametrize("message_outputs", [1, 2])
    def test_matches_fd_through_one_step(self, triangle_graph, message_outputs):
        rng = np.random.default_rng(17)
        model = tiny_model(message_outputs, seed=3)
        f0 = rng.standard_normal((3, 2))
        f1 = rng.standard_normal((3, 2))
        dt = 0.02
        state = random_state(3, rng)
        jac = transition_jacobian(model, triangle_graph, state, f0, dt, f1)

        z0 = flatten_state(state)
        fd = np.zeros((12, 12))
        h = FD_STEP
        for col in range(12):
            for sgn, store in ((1.0, "hi"), (-1.0, "lo")):
                z = z0.copy()
                z[col] += sgn * h
                out = verlet_step(
                    model, triangle_graph, unflatten_state(z, 3), f0, dt, f1
                )
                if store == "hi":
                    hi = flatten_state(out)
                else:
                    lo = flatten_state(out)
            fd[:, col] = (hi - lo) / (2.0 * h)
        assert relative_error(jac, fd) < 1e-6


class TestObservationJacobian:
    def test_rows_match_fd_and_prediction(self, triangle_graph):
        rng = np.random.default_rng(19)
        model = tiny_model(seed=7)
        forces = rng.standard_normal((3, 2))
        state = random_state(3, rng)
        measured = np.array([True, False, True])
        H, y_hat = observation_jacobian(model, triangle_graph, state, forces, measured)
        assert H.shape == (4, 12)

        cache = evaluate(model, bind(triangle_graph), state, forces)
        np.testing.assert_allclose(y_hat, cache.accel[measured].reshape(-1))

        z0 = flatten_state(state)
        fd = np.zeros((4, 12))
        h = FD_STEP
        for col in range(12):
            z = z0.copy()
            z[col] += h
            hi = evaluate(
                model, bind(triangle_graph), unflatten_state(z, 3), forces
            ).accel[measured].reshape(-1)
            z[col] -= 2.0 * h
            lo = evaluate(
                model, bind(triangle_graph), unflatten_state(z, 3), forces
            ).accel[measured].reshape(-1)
            fd[:, col] = (hi - lo) / (2.0 * h)
        assert relative_error(H, fd) < 1e-6

    def test_linear_structure_recovers_matrix_rows(self):
        # physics-only model on an unpretensioned triangle at rest: the
        # observation rows are exactly -m^-1 [K C] for the measured nodes
        g = build_graph(
            [(0.0, 0.0), (1.0, 0.0), (0.4, 0.8)],
            [(0, 1), (1, 2), (0, 2), (0, 0)],
            anchors={3: (-0.5, -0.5)},
            pretension=1.0,
            mass=2.0,
        )
        model = tiny_model(head_scale=0.0)
        K, C = assemble_linear_matrices(g)
        measured = np.array([True, True, False])
        H, _ = observation_jacobian(
            model, g, GraphState.zero(3), np.zeros((3, 2)), measured
        )
        expected = np.zeros((4, 12))
        for row in range(4):
            full = np.concatenate([-K[row] / 2.0, -C[row] / 2.0])
            # reorder (u | v) blocks into per-node (u_x,u_y,v_x,v_y)
            for node in range(3):
                expected[row, 4 * node + 0] = full[2 * node]
                expected[row, 4 * node + 1] = full[2 * node + 1]
                expected[row, 4 * node + 2] = full[6 + 2 * node]
                expected[row, 4 * node + 3] = full[6 + 2 * node + 1]
        np.testing.assert_allclose(H, expected, atol=1e-9)


def make_training_dataset(graph, n_steps=7, seed=0, sparsity=40.0):
    system = TrussSystem(graph=graph, kind="none")
    rng = np.random.default_rng(seed)
    forcing = 0.3 * rng.standard_normal((n_steps * 10 + 1, graph.n_nodes, 2))
    truth = simulate(
        system, forcing, t_end=n_steps * 0.01, dt=1e-3, record_every=10
    )
    mask = sparsity_mask(graph.n_nodes, sparsity)
    return corrupt_and_mask(truth, 25.0, mask, seed=seed + 1)


class TestLossGradient:
    @pytest.mark.parametrize("loss_kind", ["deterministic", "nll"])
    @pytest.mark.parametrize("substeps", [1, 2])
    def test_full_parameter_sweep_matches_fd(
        self, triangle_graph, loss_kind, substeps
    ):
        model = tiny_model(seed=11)
        dataset = make_training_dataset(triangle_graph, seed=3)
        loss, grads = loss_and_gradient(
            model, triangle_graph, dataset, loss_kind, substeps=substeps
        )
        assert np.isfinite(loss)

        def phi():
            value, _ = loss_and_gradient(
                model, triangle_graph, dataset, loss_kind, substeps=substeps
            )
            return value

        fd = fd_parameter_gradient(phi, model)
        assert relative_error(gradients_vector(grads), fd) < 1e-5

    def test_rollout_arrays_match_model_rollout(self, triangle_graph):
        model = tiny_model(seed=12)
        dataset = make_training_dataset(triangle_graph, seed=5)
        _, _, (u, v, a) = loss_and_gradient(
            model, triangle_graph, dataset, "deterministic", substeps=2,
            return_rollout=True,
        )
        ru, rv, ra = rollout(
            model,
            triangle_graph,
            GraphState.zero(3),
            dataset.input_forces,
            dataset.times,
            substeps=2,
        )
        np.testing.assert_allclose(u, ru, atol=1e-12)
        np.testing.assert_allclose(v, rv, atol=1e-12)
        np.testing.assert_allclose(a, ra, atol=1e-12)

    def test_requires_observations(self, triangle_graph):
        system = TrussSystem(graph=triangle_graph, kind="none")
        rng = np.random.default_rng(2)
        truth = simulate(
            system, 0.1 * rng.standard_normal((51, 3, 2)), t_end=0.05,
            dt=1e-3, record_every=10,
        )
        model = tiny_model()
        with pytest.raises(ValueError):
            loss_and_gradient(model, triangle_graph, truth, "deterministic")

    def test_unknown_loss_kind_rejected(self, triangle_graph):
        model = tiny_model()
        dataset = make_training_dataset(triangle_graph)
        with pytest.raises(ValueError):
            loss_and_gradient(model, triangle_graph, dataset, "huber")

    def test_parameter_vector_round_trip(self):
        model = tiny_model(seed=20)
        theta = parameters_vector(model)
        other = tiny_model(seed=21)
        set_parameters(other, theta)
        np.testing.assert_array_equal(parameters_vector(other), theta)
        from structsense.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            set_parameters(model, theta[:-1])
