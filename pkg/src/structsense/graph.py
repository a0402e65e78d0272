"""Truss graphs, states, and corotational edge kinematics.

Conventions used throughout the package:

* Nodes live in 2-D. Each node carries a rest position (metres) and a mass
  (kilograms). Degrees of freedom are the planar displacement and velocity.
* Undirected edges are stored once as index pairs ``(i, j)``. An edge with
  ``i == j`` is an anchored self-loop: a spring-damper from node ``i`` to a
  fixed anchor point, which is how supports and boundary connections are
  modelled after fixed nodes are dropped from the graph.
* Edge kinematics follow the corotational convention. For edge ``(i, j)``
  the stored separation is ``d = p_j - p_i`` (current positions); for a
  self-loop it is ``d = p_i - p_a`` with ``p_a`` the anchor. The unit
  direction is ``n = d / |d|``, the extension is ``|d| - L0`` and the
  extension rate is the relative velocity projected on ``n``.
* Flattened state vectors are node-major with per-node layout
  ``(u_x, u_y, v_x, v_y)``, giving ``4 * n_nodes`` entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import AllUnmeasuredError, DegenerateEdgeError, ShapeMismatchError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int_]

# Edges shorter than this are treated as degenerate (endpoints coincide).
MIN_EDGE_LENGTH = 1e-12


@dataclass
class StructuralGraph:
    """A 2-D truss graph with linear spring-damper edge parameters.

    Parameters
    ----------
    positions : ndarray, shape (n_nodes, 2)
        Rest positions of the nodes, m.
    masses : ndarray, shape (n_nodes,)
        Node masses, kg.
    edges : ndarray, shape (n_edges, 2)
        Node index pairs. ``edges[e, 0] == edges[e, 1]`` marks an anchored
        self-loop.
    stiffness, damping : ndarray, shape (n_edges,)
        Axial stiffness (N/m) and damping (N s/m) per edge.
    rest_lengths : ndarray, shape (n_edges,)
        Unstretched edge lengths, m.
    rest_angles : ndarray, shape (n_edges,)
        Edge orientation at rest, rad, measured with the stored direction
        convention (node ``i`` to node ``j``; anchor to node for self-loops).
    anchors : ndarray, shape (n_edges, 2)
        Anchor positions for self-loop rows; NaN elsewhere.
    """

    positions: FloatArray
    masses: FloatArray
    edges: IntArray
    stiffness: FloatArray
    damping: FloatArray
    rest_lengths: FloatArray
    rest_angles: FloatArray
    anchors: FloatArray

    def __post_init__(self) -> None:
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.masses = np.asarray(self.masses, dtype=float)
        self.edges = np.atleast_2d(np.asarray(self.edges, dtype=int))
        self.stiffness = np.asarray(self.stiffness, dtype=float)
        self.damping = np.asarray(self.damping, dtype=float)
        self.rest_lengths = np.asarray(self.rest_lengths, dtype=float)
        self.rest_angles = np.asarray(self.rest_angles, dtype=float)
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        n_n, n_e = self.n_nodes, self.n_edges
        if self.positions.shape != (n_n, 2):
            raise ShapeMismatchError("positions must be (n_nodes, 2)")
        if self.masses.shape != (n_n,):
            raise ShapeMismatchError("masses must be (n_nodes,)")
        for name in ("stiffness", "damping", "rest_lengths", "rest_angles"):
            if getattr(self, name).shape != (n_e,):
                raise ShapeMismatchError(f"{name} must be (n_edges,)")
        if self.anchors.shape != (n_e, 2):
            raise ShapeMismatchError("anchors must be (n_edges, 2)")
        if self.edges.min(initial=0) < 0 or self.edges.max(initial=0) >= n_n:
            raise ShapeMismatchError("edge indices out of range")

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def is_self_loop(self) -> NDArray[np.bool_]:
        return self.edges[:, 0] == self.edges[:, 1]

    def copy(self) -> "StructuralGraph":
        return StructuralGraph(
            self.positions.copy(),
            self.masses.copy(),
            self.edges.copy(),
            self.stiffness.copy(),
            self.damping.copy(),
            self.rest_lengths.copy(),
            self.rest_angles.copy(),
            self.anchors.copy(),
        )


@dataclass
class GraphState:
    """Displacements and velocities for every node.

    Both arrays have shape ``(n_nodes, 2)``; metres and metres per second.
    """

    displacements: FloatArray
    velocities: FloatArray

    def __post_init__(self) -> None:
        self.displacements = np.atleast_2d(np.asarray(self.displacements, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if self.displacements.shape != self.velocities.shape:
            raise ShapeMismatchError("displacement/velocity shapes differ")
        if self.displacements.ndim != 2 or self.displacements.shape[1] != 2:
            raise ShapeMismatchError("state arrays must be (n_nodes, 2)")

    @property
    def n_nodes(self) -> int:
        return self.displacements.shape[0]

    @classmethod
    def zero(cls, n_nodes: int) -> "GraphState":
        return cls(np.zeros((n_nodes, 2)), np.zeros((n_nodes, 2)))

    def copy(self) -> "GraphState":
        return GraphState(self.displacements.copy(), self.velocities.copy())


@dataclass
class EdgeKinematics:
    """Per-edge corotational quantities for one graph state.

    Attributes
    ----------
    lengths : ndarray, shape (n_edges,)
        Current edge lengths, m.
    directions : ndarray, shape (n_edges, 2)
        Current unit directions in the stored edge convention. The entries
        are (cos theta, sin theta) of the current edge angle.
    extensions : ndarray, shape (n_edges,)
        Current length minus rest length, m.
    extension_rates : ndarray, shape (n_edges,)
        Relative velocity projected on the direction, m/s.
    relative_velocities : ndarray, shape (n_edges, 2)
        Endpoint velocity difference in the stored convention (kept for
        derivative assembly).
    """

    lengths: FloatArray
    directions: FloatArray
    extensions: FloatArray
    extension_rates: FloatArray
    relative_velocities: FloatArray

    @property
    def angles(self) -> FloatArray:
        """Current edge angles theta = atan2(n_y, n_x), rad."""
        return np.arctan2(self.directions[:, 1], self.directions[:, 0])


def corotational_kinematics(graph: StructuralGraph, state: GraphState) -> EdgeKinematics:
    """Compute current edge lengths, directions, extensions and rates.

    Parameters
    ----------
    graph : StructuralGraph
    state : GraphState
        Must have the same node count as the graph.

    Returns
    -------
    EdgeKinematics

    Raises
    ------
    DegenerateEdgeError
        If any current edge length falls to ``MIN_EDGE_LENGTH`` or below.
    """
    if state.n_nodes != graph.n_nodes:
        raise ShapeMismatchError("state does not match graph node count")
    pos = graph.positions + state.displacements
    i = graph.edges[:, 0]
    j = graph.edges[:, 1]
    d = pos[j] - pos[i]
    dv = state.velocities[j] - state.velocities[i]
    loops = graph.is_self_loop
    if np.any(loops):
        d[loops] = pos[i[loops]] - graph.anchors[loops]
        dv[loops] = state.velocities[i[loops]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    if np.any(lengths <= MIN_EDGE_LENGTH):
        bad = int(np.argmin(lengths))
        raise DegenerateEdgeError(
            f"edge {bad} has length {lengths[bad]:.3e} m; endpoints coincide"
        )
    directions = d / lengths[:, None]
    extensions = lengths - graph.rest_lengths
    rates = np.einsum("ed,ed->e", dv, directions)
    return EdgeKinematics(lengths, directions, extensions, rates, dv)


def flatten_state(state: GraphState) -> FloatArray:
    """Pack a GraphState into the node-major (u_x, u_y, v_x, v_y) vector."""
    return np.concatenate(
        [state.displacements, state.velocities], axis=1
    ).reshape(-1)


def unflatten_state(vector: FloatArray, n_nodes: int) -> GraphState:
    """Invert :func:`flatten_state` exactly."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (4 * n_nodes,):
        raise ShapeMismatchError(f"expected length {4 * n_nodes}, got {vector.shape}")
    block = vector.reshape(n_nodes, 4)
    return GraphState(block[:, :2].copy(), block[:, 2:].copy())


@dataclass
class ObservationMask:
    """Boolean per-node measured flags."""

    measured: NDArray[np.bool_]

    def __post_init__(self) -> None:
        self.measured = np.asarray(self.measured, dtype=bool)
        if self.measured.ndim != 1:
            raise ShapeMismatchError("mask must be one-dimensional")
        if not self.measured.any():
            raise AllUnmeasuredError("mask leaves no measured node")

    @property
    def n_nodes(self) -> int:
        return self.measured.shape[0]

    @property
    def measured_indices(self) -> IntArray:
        return np.flatnonzero(self.measured)

    @property
    def unmeasured_indices(self) -> IntArray:
        return np.flatnonzero(~self.measured)


def sparsity_mask(n_nodes: int, sparsity: float) -> ObservationMask:
    """Build the deterministic observation mask for a sparsity percentage.

    ``round(n_nodes * sparsity / 100)`` nodes are unmeasured, placed at
    evenly spaced indices starting from index 0: unmeasured index ``k`` is
    ``floor(k * n_nodes / count)``.

    Parameters
    ----------
    n_nodes : int
        Node count, at least 2.
    sparsity : float
        Percentage of unmeasured nodes, ``0 <= sparsity < 100``.

    Raises
    ------
    AllUnmeasuredError
        If rounding would leave zero measured nodes.
    """
    if n_nodes < 2:
        raise ValueError("need at least 2 nodes")
    if not 0.0 <= sparsity < 100.0:
        raise ValueError("sparsity must lie in [0, 100)")
    count = int(np.floor(n_nodes * sparsity / 100.0 + 0.5))
    measured = np.ones(n_nodes, dtype=bool)
    if count >= n_nodes:
        raise AllUnmeasuredError(f"{count} unmeasured of {n_nodes} nodes")
    if count > 0:
        unmeasured = (np.arange(count) * n_nodes) // count
        measured[unmeasured] = False
    return ObservationMask(measured)


@dataclass(frozen=True)
class EdgeOccurrences:
    """Directed views of the undirected edge list for message passing.

    Every regular edge ``(i, j)`` appears twice: once with receiver ``j``
    (sign +1 on the stored direction) and once with receiver ``i``
    (sign -1). Self-loops appear once with sign +1; their sender slot
    reuses the node itself for feature purposes, but ``mobile_sender`` is
    False because the anchor end carries no degrees of freedom.
    """

    edge: IntArray
    sender: IntArray
    receiver: IntArray
    sign: FloatArray
    mobile_sender: NDArray[np.bool_]

    @property
    def n_occurrences(self) -> int:
        return self.edge.shape[0]


def build_occurrences(graph: StructuralGraph) -> EdgeOccurrences:
    """Expand the edge list into directed occurrences (see EdgeOccurrences)."""
    edge_ids = []
    sender = []
    receiver = []
    sign = []
    mobile = []
    for e, (i, j) in enumerate(graph.edges):
        if i == j:
            edge_ids.append(e)
            sender.append(i)
            receiver.append(i)
            sign.append(1.0)
            mobile.append(False)
        else:
            edge_ids.append(e)
            sender.append(i)
            receiver.append(j)
            sign.append(1.0)
            mobile.append(True)
            edge_ids.append(e)
            sender.append(j)
            receiver.append(i)
            sign.append(-1.0)
            mobile.append(True)
    return EdgeOccurrences(
        edge=np.asarray(edge_ids, dtype=int),
        sender=np.asarray(sender, dtype=int),
        receiver=np.asarray(receiver, dtype=int),
        sign=np.asarray(sign, dtype=float),
        mobile_sender=np.asarray(mobile, dtype=bool),
    )
