"""Shared builders for small, well-conditioned test structures.

Chains of collinear springs at exact rest length have no transverse
stiffness, which makes observation Jacobians rank deficient. The builders
here either pretension members (rest length below geometric length) or
triangulate, so filters and Jacobian checks stay well posed.
"""

import numpy as np
import pytest

from structsense.graph import GraphState, StructuralGraph


def build_graph(positions, edges, anchors=None, stiffness=50.0, damping=0.05,
                mass=1.0, pretension=0.9):
    """Assemble a StructuralGraph with uniform parameters.

    ``anchors`` maps self-loop edge rows to anchor points. Rest lengths are
    ``pretension`` times the geometric length so nothing is slack.
    """
    positions = np.asarray(positions, dtype=float)
    edges = np.asarray(edges, dtype=int)
    n_nodes, n_edges = positions.shape[0], edges.shape[0]
    anchor_rows = np.full((n_edges, 2), np.nan)
    if anchors:
        for row, point in anchors.items():
            anchor_rows[row] = point
    lengths = np.zeros(n_edges)
    angles = np.zeros(n_edges)
    for e, (i, j) in enumerate(edges):
        if i == j:
            d = positions[i] - anchor_rows[e]
        else:
            d = positions[j] - positions[i]
        lengths[e] = np.hypot(*d)
        angles[e] = np.arctan2(d[1], d[0])
    return StructuralGraph(
        positions=positions,
        masses=np.full(n_nodes, float(mass)),
        edges=edges,
        stiffness=np.full(n_edges, float(stiffness)),
        damping=np.full(n_edges, float(damping)),
        rest_lengths=pretension * lengths,
        rest_angles=angles,
        anchors=anchor_rows,
    )


@pytest.fixture
def triangle_graph():
    """Three nodes in a triangle, one node tied to ground by a self-loop."""
    positions = [(0.0, 0.0), (1.0, 0.0), (0.4, 0.8)]
    edges = [(0, 1), (1, 2), (0, 2), (0, 0)]
    return build_graph(positions, edges, anchors={3: (-0.5, -0.5)})


@pytest.fixture
def chain_graph():
    """Four-node pretensioned chain anchored at both ends."""
    positions = [(float(k), 0.0) for k in range(4)]
    edges = [(0, 0), (0, 1), (1, 2), (2, 3), (3, 3)]
    anchors = {0: (-1.0, 0.0), 4: (4.0, 1.0)}
    return build_graph(positions, edges, anchors=anchors, pretension=0.8)


def random_state(n_nodes, rng, scale=0.05):
    return GraphState(
        scale * rng.standard_normal((n_nodes, 2)),
        scale * rng.standard_normal((n_nodes, 2)),
    )


def assemble_linear_matrices(graph):
    """Global stiffness and damping matrices of the linearized truss.

    Material tangent at the rest configuration: each member contributes
    k n n^T (and c n n^T) in the usual two-endpoint block pattern, with
    self-loops touching only their own node. Valid when rest lengths equal
    geometric lengths, where the geometric stiffness term vanishes.
    """
    n = graph.n_nodes
    k_mat = np.zeros((2 * n, 2 * n))
    c_mat = np.zeros((2 * n, 2 * n))
    for e, (i, j) in enumerate(graph.edges):
        if i == j:
            d = graph.positions[i] - graph.anchors[e]
        else:
            d = graph.positions[j] - graph.positions[i]
        direction = d / np.hypot(*d)
        block = np.outer(direction, direction)
        for mat, coef in ((k_mat, graph.stiffness[e]), (c_mat, graph.damping[e])):
            sl_i = slice(2 * i, 2 * i + 2)
            sl_j = slice(2 * j, 2 * j + 2)
            mat[sl_i, sl_i] += coef * block
            if i != j:
                mat[sl_j, sl_j] += coef * block
                mat[sl_i, sl_j] -= coef * block
                mat[sl_j, sl_i] -= coef * block
    return k_mat, c_mat
