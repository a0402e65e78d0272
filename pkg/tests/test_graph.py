"""Worked-example and property tests for graphs and edge kinematics."""

import numpy as np
import pytest

from structsense.errors import (
    AllUnmeasuredError,
    DegenerateEdgeError,
    ShapeMismatchError,
)
from structsense.graph import (
    GraphState,
    StructuralGraph,
    build_occurrences,
    corotational_kinematics,
    flatten_state,
    sparsity_mask,
    unflatten_state,
)

from conftest import build_graph, random_state


def two_node_graph(rest_length=1.0):
    return StructuralGraph(
        positions=np.array([[0.0, 0.0], [1.0, 0.0]]),
        masses=np.array([1.0, 2.0]),
        edges=np.array([[0, 1]]),
        stiffness=np.array([10.0]),
        damping=np.array([0.5]),
        rest_lengths=np.array([rest_length]),
        rest_angles=np.array([0.0]),
        anchors=np.full((1, 2), np.nan),
    )


class TestKinematics:
    def test_rest_configuration_has_zero_extension(self):
        g = two_node_graph()
        kin = corotational_kinematics(g, GraphState.zero(2))
        assert kin.lengths[0] == pytest.approx(1.0)
        np.testing.assert_allclose(kin.directions[0], [1.0, 0.0])
        assert kin.extensions[0] == 0.0
        assert kin.extension_rates[0] == 0.0

    def test_vertical_stretch_worked_example(self):
        # rotate the member to vertical and double its length
        g = two_node_graph()
        state = GraphState(np.array([[0.0, 0.0], [-1.0, 2.0]]), np.zeros((2, 2)))
        kin = corotational_kinematics(g, state)
        assert kin.lengths[0] == pytest.approx(2.0)
        assert kin.extensions[0] == pytest.approx(1.0)
        np.testing.assert_allclose(kin.directions[0], [0.0, 1.0], atol=1e-15)
        assert kin.angles[0] == pytest.approx(np.pi / 2)

    def test_extension_rate_is_projected_velocity(self):
        # 3-4-5 member: unit velocity along the axis gives rate exactly 1
        g = StructuralGraph(
            positions=np.array([[0.0, 0.0], [3.0, 4.0]]),
            masses=np.ones(2),
            edges=np.array([[0, 1]]),
            stiffness=np.array([1.0]),
            damping=np.array([0.0]),
            rest_lengths=np.array([5.0]),
            rest_angles=np.array([np.arctan2(4.0, 3.0)]),
            anchors=np.full((1, 2), np.nan),
        )
        state = GraphState(np.zeros((2, 2)), np.array([[0.0, 0.0], [0.6, 0.8]]))
        kin = corotational_kinematics(g, state)
        assert kin.extensions[0] == pytest.approx(0.0)
        assert kin.extension_rates[0] == pytest.approx(1.0)

    def test_self_loop_measures_from_anchor(self):
        g = build_graph([(0.0, 0.0)], [(0, 0)], anchors={0: (0.0, -2.0)},
                        pretension=1.0)
        kin = corotational_kinematics(g, GraphState.zero(1))
        assert kin.lengths[0] == pytest.approx(2.0)
        np.testing.assert_allclose(kin.directions[0], [0.0, 1.0])
        state = GraphState(np.zeros((1, 2)), np.array([[0.3, -0.7]]))
        kin = corotational_kinematics(g, state)
        # relative velocity of a self-loop is the node velocity itself
        assert kin.extension_rates[0] == pytest.approx(-0.7)

    def test_coincident_endpoints_raise(self):
        g = two_node_graph()
        state = GraphState(np.array([[0.0, 0.0], [-1.0, 0.0]]), np.zeros((2, 2)))
        with pytest.raises(DegenerateEdgeError):
            corotational_kinematics(g, state)

    def test_node_count_mismatch_raises(self):
        g = two_node_graph()
        with pytest.raises(ShapeMismatchError):
            corotational_kinematics(g, GraphState.zero(3))

    @pytest.mark.parametrize("seed", range(4))
    def test_translation_leaves_kinematics_unchanged(self, triangle_graph, seed):
        # exact invariance on a power-of-two lattice: the arithmetic is
        # identical bit for bit because the shifts are exactly representable
        rng = np.random.default_rng(seed)
        state = random_state(3, rng)
        shift = rng.integers(-8, 9, size=2) * 2.0**-20
        g2 = triangle_graph.copy()
        g2.positions = g2.positions + shift
        g2.anchors = g2.anchors + shift
        kin = corotational_kinematics(triangle_graph, state)
        kin2 = corotational_kinematics(g2, state)
        np.testing.assert_array_equal(kin.extensions, kin2.extensions)
        np.testing.assert_array_equal(kin.extension_rates, kin2.extension_rates)
        np.testing.assert_array_equal(kin.directions, kin2.directions)

    @pytest.mark.parametrize("seed", range(4))
    def test_rotation_rotates_directions(self, triangle_graph, seed):
        rng = np.random.default_rng(100 + seed)
        state = random_state(3, rng)
        phi = rng.uniform(0.0, 2 * np.pi)
        rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        g2 = triangle_graph.copy()
        g2.positions = triangle_graph.positions @ rot.T
        g2.anchors = triangle_graph.anchors @ rot.T
        state2 = GraphState(state.displacements @ rot.T, state.velocities @ rot.T)
        kin = corotational_kinematics(triangle_graph, state)
        kin2 = corotational_kinematics(g2, state2)
        np.testing.assert_allclose(kin2.extensions, kin.extensions, atol=1e-12)
        np.testing.assert_allclose(kin2.extension_rates, kin.extension_rates,
                                   atol=1e-12)
        np.testing.assert_allclose(kin2.directions, kin.directions @ rot.T,
                                   atol=1e-12)


class TestStateVector:
    def test_flatten_worked_example(self):
        state = GraphState(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
        np.testing.assert_array_equal(flatten_state(state), [1.0, 2.0, 3.0, 4.0])

    @pytest.mark.parametrize("seed", range(3))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(20)
        state = unflatten_state(z, 5)
        np.testing.assert_array_equal(flatten_state(state), z)

    def test_wrong_length_raises(self):
        with pytest.raises(ShapeMismatchError):
            unflatten_state(np.zeros(7), 2)


class TestSparsityMask:
    def test_sixteen_nodes_75_percent(self):
        mask = sparsity_mask(16, 75.0)
        np.testing.assert_array_equal(mask.measured_indices, [3, 7, 11, 15])

    def test_eight_nodes_87_5_percent(self):
        mask = sparsity_mask(8, 87.5)
        np.testing.assert_array_equal(mask.measured_indices, [7])

    def test_zero_sparsity_measures_everything(self):
        assert sparsity_mask(5, 0.0).measured.all()

    def test_full_sparsity_rejected(self):
        with pytest.raises(AllUnmeasuredError):
            sparsity_mask(4, 99.0)

    @pytest.mark.parametrize("n_nodes,sparsity", [(16, 75.0), (32, 75.0),
                                                  (64, 75.0), (8, 87.5),
                                                  (9, 75.0), (21, 87.5)])
    def test_unmeasured_count_matches_rounding(self, n_nodes, sparsity):
        mask = sparsity_mask(n_nodes, sparsity)
        expect = int(np.floor(n_nodes * sparsity / 100.0 + 0.5))
        assert mask.unmeasured_indices.size == expect

    def test_all_false_mask_rejected(self):
        from structsense.graph import ObservationMask

        with pytest.raises(AllUnmeasuredError):
            ObservationMask(np.zeros(3, dtype=bool))


class TestOccurrences:
    def test_regular_edges_appear_twice_self_loops_once(self, triangle_graph):
        occ = build_occurrences(triangle_graph)
        counts = np.bincount(occ.edge, minlength=triangle_graph.n_edges)
        loops = triangle_graph.is_self_loop
        np.testing.assert_array_equal(counts[~loops], 2)
        np.testing.assert_array_equal(counts[loops], 1)

    def test_signs_and_receivers(self):
        g = two_node_graph()
        occ = build_occurrences(g)
        # one occurrence per direction: +1 into j, -1 into i
        assert sorted(zip(occ.sign.tolist(), occ.receiver.tolist())) == [
            (-1.0, 0), (1.0, 1)
        ]
