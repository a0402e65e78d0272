"""Structure generation tests: Sobol points, triangulation, truss families."""

from itertools import combinations

import numpy as np
import pytest

from structsense.errors import DegenerateInputError
from structsense.structures import (
    ParameterDistributions,
    TrussSystem,
    bridge_layout,
    delaunay_triangulate,
    generate_bridge_truss,
    generate_sobol_array,
    load_system,
    nominal_graph,
    save_system,
    sobol_points,
)

BITS = 32


def sobol_reference(n: int) -> np.ndarray:
    """Independent 2-D Sobol implementation from first principles.

    Dimension 0 is the van der Corput sequence; dimension 1 uses the
    degree-one direction-number recurrence m_j = (2 m_{j-1}) xor m_{j-1}
    with m_1 = 1. Points follow Gray-code order starting at the origin.
    """
    v0 = [1 << (BITS - j) for j in range(1, BITS + 1)]
    m = [1]
    for _ in range(BITS - 1):
        m.append((2 * m[-1]) ^ m[-1])
    v1 = [m[j] << (BITS - 1 - j) for j in range(BITS)]
    points = np.zeros((n, 2))
    x = [0, 0]
    for k in range(1, n):
        low = (k & -k).bit_length() - 1  # trailing zero count
        x[0] ^= v0[low]
        x[1] ^= v1[low]
        points[k] = (x[0] / 2.0**BITS, x[1] / 2.0**BITS)
    return points


def delaunay_reference(points: np.ndarray) -> list:
    """Brute-force Delaunay edges via the empty-circumcircle property."""
    n = points.shape[0]
    edges = set()
    for i, j, k in combinations(range(n), 3):
        (ax, ay), (bx, by), (cx, cy) = points[i], points[j], points[k]
        d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        if abs(d) < 1e-12:
            continue
        a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
        ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
        uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
        r2 = (ax - ux) ** 2 + (ay - uy) ** 2
        if all(
            (points[q, 0] - ux) ** 2 + (points[q, 1] - uy) ** 2 > r2 * (1 - 1e-12)
            for q in range(n)
            if q not in (i, j, k)
        ):
            edges.update(
                (min(p), max(p)) for p in ((i, j), (j, k), (i, k))
            )
    return sorted(edges)


class TestSobolPoints:
    @pytest.mark.parametrize("n", [4, 16, 33])
    def test_matches_direction_number_reference(self, n):
        np.testing.assert_array_equal(sobol_points(n, domain=1.0),
                                      sobol_reference(n))

    def test_first_points_worked_example(self):
        pts = sobol_points(4, domain=1.0)
        np.testing.assert_array_equal(
            pts, [[0.0, 0.0], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75]]
        )

    def test_domain_scaling(self):
        np.testing.assert_allclose(sobol_points(8, domain=5.0),
                                   5.0 * sobol_points(8, domain=1.0))

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            sobol_points(3)


class TestDelaunay:
    def test_unit_square_has_five_edges(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        edges = delaunay_triangulate(pts)
        assert edges.shape == (5, 2)
        # both sides plus exactly one diagonal
        pairs = {tuple(e) for e in edges.tolist()}
        assert {(0, 1), (0, 2), (1, 3), (2, 3)} < pairs

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_empty_circumcircle_reference(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0.0, 1.0, size=(12, 2))
        edges = [tuple(e) for e in delaunay_triangulate(pts).tolist()]
        assert edges == delaunay_reference(pts)

    def test_collinear_points_rejected(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        with pytest.raises(DegenerateInputError):
            delaunay_triangulate(pts)

    def test_too_few_points_rejected(self):
        with pytest.raises(DegenerateInputError):
            delaunay_triangulate(np.zeros((2, 2)))


class TestSobolArray:
    def test_sixteen_node_layout(self):
        system = generate_sobol_array(16, seed=0)
        g = system.graph
        assert g.n_nodes == 16
        assert g.n_edges == 49
        # the 4 hull nodes are equidistant to two square sides, so each
        # carries two anchors: one per tied side
        assert int(g.is_self_loop.sum()) == 8
        assert system.kind == "cubic"
        assert system.cubic.shape == (49,)
        # anchors sit on the square half a metre outside the point domain
        loop_anchor = g.anchors[g.is_self_loop]
        on_boundary = np.isclose(loop_anchor, -0.5) | np.isclose(loop_anchor, 5.5)
        assert on_boundary.any(axis=1).all()

    def test_anchor_directions_block_rigid_translation(self):
        # projected anchor directions must span both axes, otherwise a
        # whole-structure translation is a zero-stiffness mechanism
        g = generate_sobol_array(16, seed=0).graph
        loops = g.is_self_loop
        d = g.positions[g.edges[loops, 0]] - g.anchors[loops]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        assert np.abs(d[:, 0]).max() > 0.5
        assert np.abs(d[:, 1]).max() > 0.5

    def test_same_seed_reproduces_everything(self):
        a = generate_sobol_array(16, seed=11)
        b = generate_sobol_array(16, seed=11)
        np.testing.assert_array_equal(a.graph.stiffness, b.graph.stiffness)
        np.testing.assert_array_equal(a.cubic, b.cubic)

    def test_different_seed_changes_parameters_not_geometry(self):
        a = generate_sobol_array(16, seed=1)
        b = generate_sobol_array(16, seed=2)
        np.testing.assert_array_equal(a.graph.positions, b.graph.positions)
        np.testing.assert_array_equal(a.graph.edges, b.graph.edges)
        assert not np.allclose(a.graph.stiffness, b.graph.stiffness)

    def test_zero_spread_gives_exact_means(self):
        dists = ParameterDistributions(
            stiffness=(200.0, 0.0), damping=(0.1, 0.0), cubic=(1000.0, 0.0)
        )
        system = generate_sobol_array(16, seed=4, dists=dists)
        np.testing.assert_array_equal(system.graph.stiffness, 200.0)
        np.testing.assert_array_equal(system.graph.damping, 0.1)
        np.testing.assert_array_equal(system.cubic, 1000.0)

    def test_rest_lengths_match_geometry(self):
        g = generate_sobol_array(16, seed=5).graph
        i, j = g.edges[:, 0], g.edges[:, 1]
        d = g.positions[j] - g.positions[i]
        loops = g.is_self_loop
        d[loops] = g.positions[i[loops]] - g.anchors[loops]
        np.testing.assert_allclose(g.rest_lengths, np.hypot(d[:, 0], d[:, 1]))


class TestBridge:
    def test_eight_metre_layout(self):
        positions, edges, anchors, supports = bridge_layout(8.0)
        assert positions.shape == (9, 2)
        assert edges.shape == (21, 2)
        assert int((edges[:, 0] == edges[:, 1]).sum()) == 11
        np.testing.assert_array_equal(
            supports, [[0.0, 0.0], [4.0, 0.0], [8.0, 0.0]]
        )

    def test_sixteen_metre_layout(self):
        positions, edges, _, _ = bridge_layout(16.0)
        assert positions.shape == (17, 2)
        assert edges.shape == (37, 2)

    @pytest.mark.parametrize("span", [0.0, 3.0, -8.0, 2.0, 6.0])
    def test_invalid_spans_rejected(self, span):
        with pytest.raises(ValueError):
            bridge_layout(span)

    def test_generated_system_is_clearance_kind(self):
        system = generate_bridge_truss(8.0, seed=0)
        assert system.kind == "clearance"
        assert system.rotational.shape == (21,)
        assert system.clearance.shape == (21,)
        assert (system.clearance > 0).all()

    def test_self_loop_anchors_are_support_points(self):
        g = generate_bridge_truss(8.0, seed=2).graph
        anchor_points = {tuple(a) for a in g.anchors[g.is_self_loop].tolist()}
        assert anchor_points == {(0.0, 0.0), (4.0, 0.0), (8.0, 0.0)}


class TestNominalAndIO:
    def test_nominal_graph_replaces_sampled_parameters(self):
        dists = ParameterDistributions.random_array_defaults()
        system = generate_sobol_array(16, seed=9, dists=dists)
        nominal = nominal_graph(system, dists)
        np.testing.assert_array_equal(nominal.stiffness, 200.0)
        np.testing.assert_array_equal(nominal.damping, 0.1)
        np.testing.assert_array_equal(nominal.positions, system.graph.positions)

    @pytest.mark.parametrize("maker,size", [(generate_sobol_array, 16),
                                            (generate_bridge_truss, 8.0)])
    def test_save_load_round_trip(self, tmp_path, maker, size):
        system = maker(size, seed=3)
        path = tmp_path / "system.txt"
        save_system(path, system)
        loaded = load_system(path)
        g, h = system.graph, loaded.graph
        np.testing.assert_array_equal(g.edges, h.edges)
        np.testing.assert_array_equal(g.positions, h.positions)
        np.testing.assert_array_equal(g.stiffness, h.stiffness)
        np.testing.assert_array_equal(g.anchors[~np.isnan(g.anchors)],
                                      h.anchors[~np.isnan(h.anchors)])
        assert loaded.kind == system.kind
        for field in ("cubic", "rotational", "clearance"):
            mine, theirs = getattr(system, field), getattr(loaded, field)
            if mine is None:
                assert theirs is None
            else:
                np.testing.assert_array_equal(mine, theirs)

    def test_unknown_kind_rejected(self):
        g = generate_sobol_array(16, seed=0).graph
        with pytest.raises(ValueError):
            TrussSystem(graph=g, kind="quadratic")
