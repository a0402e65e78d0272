"""Generation of truss systems: quasi-random arrays and bridge trusses.

Two families are produced:

* ``generate_sobol_array``: nodes from a base-2 Sobol sequence over a square
  domain, members from a Delaunay triangulation, convex-hull nodes anchored
  to the nearest point of a surrounding fixed square. Members carry a cubic
  stiffness nonlinearity.
* ``generate_bridge_truss``: a Warren truss (2 m panels, 2 m height) with
  supports at the two ends and midspan. Support nodes are removed from the
  graph; members that reached a support become anchored self-loops on the
  remaining endpoint. Members carry a rotational clearance nonlinearity.

Edge parameters are drawn from normal distributions around prescribed means
(5% relative spread by default); the model side of the package uses the
means as its nominal values.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError
from scipy.stats import qmc

from .errors import DegenerateInputError, ShapeMismatchError
from .graph import FloatArray, IntArray, StructuralGraph

PANEL_WIDTH = 2.0
PANEL_HEIGHT = 2.0
DEFAULT_DOMAIN = 5.0

# Uniform nodal masses. Chosen so the lower structural modes of each family
# fall inside the default 0.5 to 4 rad/s forcing band: the response is then
# resonance-dominated and parameter spread produces visible phase drift.
DEFAULT_ARRAY_MASS = 10.0
DEFAULT_BRIDGE_MASS = 100.0

NONLINEARITY_KINDS = ("none", "cubic", "clearance")


@dataclass(frozen=True)
class ParameterDistributions:
    """Normal (mean, std) pairs for the edge parameters of a truss family.

    Units: stiffness N/m, damping N s/m, cubic N/m^3, rotational N/rad,
    clearance rad.
    """

    stiffness: tuple[float, float]
    damping: tuple[float, float]
    cubic: tuple[float, float] | None = None
    rotational: tuple[float, float] | None = None
    clearance: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        for name in ("stiffness", "damping", "cubic", "rotational", "clearance"):
            pair = getattr(self, name)
            if pair is None:
                continue
            mean, std = pair
            if mean <= 0 or std < 0:
                raise ValueError(f"{name}: mean must be positive, std non-negative")

    @classmethod
    def random_array_defaults(cls) -> "ParameterDistributions":
        """Reference values for the random truss array (cubic members)."""
        return cls(
            stiffness=(200.0, 10.0),
            damping=(0.1, 0.005),
            cubic=(1000.0, 50.0),
        )

    @classmethod
    def bridge_defaults(cls) -> "ParameterDistributions":
        """Reference values for the bridge truss (clearance members)."""
        return cls(
            stiffness=(2000.0, 100.0),
            damping=(0.1, 0.005),
            rotational=(100.0, 5.0),
            clearance=(math.radians(1.0), math.radians(0.05)),
        )


@dataclass
class TrussSystem:
    """A StructuralGraph plus its true per-edge nonlinear parameters."""

    graph: StructuralGraph
    kind: str = "none"
    cubic: FloatArray | None = None
    rotational: FloatArray | None = None
    clearance: FloatArray | None = None

    def __post_init__(self) -> None:
        if self.kind not in NONLINEARITY_KINDS:
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        n_e = self.graph.n_edges
        if self.kind == "cubic":
            self.cubic = np.asarray(self.cubic, dtype=float)
            if self.cubic.shape != (n_e,):
                raise ShapeMismatchError("cubic coefficients must be (n_edges,)")
        if self.kind == "clearance":
            self.rotational = np.asarray(self.rotational, dtype=float)
            self.clearance = np.asarray(self.clearance, dtype=float)
            if self.rotational.shape != (n_e,) or self.clearance.shape != (n_e,):
                raise ShapeMismatchError("clearance parameters must be (n_edges,)")


def sobol_points(n: int, domain: float = DEFAULT_DOMAIN) -> FloatArray:
    """First ``n`` points of the unscrambled base-2 Sobol sequence in 2-D.

    The sequence starts at the origin; points are scaled to the square
    ``[0, domain]^2``. Deterministic.
    """
    if n < 4:
        raise ValueError("need at least 4 points")
    with warnings.catch_warnings():
        # drawing a non power of two count is fine here; balance is not needed
        warnings.simplefilter("ignore", UserWarning)
        sampler = qmc.Sobol(d=2, scramble=False)
        unit = sampler.random(n)
    return unit * domain


def delaunay_triangulate(points: FloatArray) -> IntArray:
    """Unique undirected edge list of the Delaunay triangulation.

    Returns an array of shape (n_edges, 2) with each pair sorted and the
    list sorted lexicographically.

    Raises
    ------
    DegenerateInputError
        For fewer than 3 points or (near-)collinear input.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 3:
        raise DegenerateInputError("need at least 3 planar points")
    try:
        tri = Delaunay(points)
    except QhullError as exc:
        raise DegenerateInputError(f"triangulation failed: {exc}") from exc
    if tri.simplices.size == 0:
        raise DegenerateInputError("points are collinear")
    pairs = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            pairs.add((min(i, j), max(i, j)))
    return np.asarray(sorted(pairs), dtype=int)


def _nearest_square_points(point: FloatArray, lo: float, hi: float) -> FloatArray:
    """Closest points on the boundary of the axis-aligned square [lo, hi]^2.

    Returns every boundary point achieving the minimal distance (within a
    relative tolerance), one row per point. Sobol coordinates are dyadic, so
    exact two-way ties are common; anchoring a node to all tied points keeps
    the boundary restraint direction-complete and the assembly free of
    rigid-body mechanisms.
    """
    x, y = float(point[0]), float(point[1])
    cx = min(max(x, lo), hi)
    cy = min(max(y, lo), hi)
    candidates = np.array(
        [[cx, lo], [cx, hi], [lo, cy], [hi, cy]], dtype=float
    )
    dist = np.hypot(candidates[:, 0] - x, candidates[:, 1] - y)
    near = candidates[dist <= dist.min() * (1.0 + 1e-9)]
    return np.unique(near, axis=0)


def _rest_geometry(
    positions: FloatArray, edges: IntArray, anchors: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Rest lengths and rest angles from the rest configuration."""
    i = edges[:, 0]
    j = edges[:, 1]
    d = positions[j] - positions[i]
    loops = i == j
    if np.any(loops):
        d[loops] = positions[i[loops]] - anchors[loops]
    lengths = np.hypot(d[:, 0], d[:, 1])
    if np.any(lengths <= 0):
        raise DegenerateInputError("coincident edge endpoints at rest")
    angles = np.arctan2(d[:, 1], d[:, 0])
    return lengths, angles


def _sample(rng: np.random.Generator, pair: tuple[float, float], n: int) -> FloatArray:
    mean, std = pair
    return rng.normal(mean, std, size=n)


def generate_sobol_array(
    n_nodes: int,
    seed: int,
    dists: ParameterDistributions | None = None,
    domain: float = DEFAULT_DOMAIN,
    node_mass: float = DEFAULT_ARRAY_MASS,
) -> TrussSystem:
    """Random truss array: Sobol nodes, Delaunay members, cubic stiffness.

    Convex-hull nodes are anchored by self-loop springs to the nearest
    point of a fixed square extending 0.5 m beyond the node domain on every
    side; when two boundary points tie for nearest, the node is anchored to
    both. Per-edge parameters (k, c, kappa) are sampled from ``dists`` with
    the given seed; the same seed always yields the same system.

    ``node_mass`` sets the uniform nodal mass. The default places the
    lower structural modes inside the default forcing band, so the
    response is dynamic rather than quasi-static.
    """
    if n_nodes < 8:
        raise ValueError("need at least 8 nodes")
    if dists is None:
        dists = ParameterDistributions.random_array_defaults()
    if dists.cubic is None:
        raise ValueError("random array requires a cubic distribution")
    points = sobol_points(n_nodes, domain)
    member_edges = delaunay_triangulate(points)
    hull = Delaunay(points).convex_hull
    boundary = np.unique(hull)
    lo, hi = -0.5, domain + 0.5
    edge_rows = [tuple(e) for e in member_edges]
    anchor_rows = [(np.nan, np.nan)] * len(edge_rows)
    for node in boundary:
        for anchor in _nearest_square_points(points[node], lo, hi):
            edge_rows.append((int(node), int(node)))
            anchor_rows.append(tuple(anchor))
    edges = np.asarray(edge_rows, dtype=int)
    anchors = np.asarray(anchor_rows, dtype=float)
    rest_lengths, rest_angles = _rest_geometry(points, edges, anchors)
    rng = np.random.default_rng(seed)
    n_e = edges.shape[0]
    graph = StructuralGraph(
        positions=points,
        masses=np.full(n_nodes, float(node_mass)),
        edges=edges,
        stiffness=_sample(rng, dists.stiffness, n_e),
        damping=_sample(rng, dists.damping, n_e),
        rest_lengths=rest_lengths,
        rest_angles=rest_angles,
        anchors=anchors,
    )
    return TrussSystem(graph=graph, kind="cubic", cubic=_sample(rng, dists.cubic, n_e))


def bridge_layout(span: float) -> tuple[FloatArray, IntArray, FloatArray, FloatArray]:
    """Warren-truss node/member layout for a span, before parameter sampling.

    Returns ``(positions, edges, anchors, support_positions)`` for the free
    nodes. Supports sit at the two ends and at midspan of the bottom chord;
    they are removed from the graph, and every member that reached a support
    becomes a self-loop on its remaining endpoint, anchored at the support.
    """
    n_panels = span / PANEL_WIDTH
    if span <= 0 or abs(n_panels - round(n_panels)) > 1e-9:
        raise ValueError(f"span must be a positive multiple of {PANEL_WIDTH} m")
    n_panels = int(round(n_panels))
    if n_panels % 2:
        raise ValueError("span must place a bottom-chord node at midspan")
    bottom_x = [PANEL_WIDTH * k for k in range(n_panels + 1)]
    support_x = {0.0, span / 2.0, span}
    top_x = sorted({PANEL_WIDTH * k + 1.0 for k in range(n_panels)} | support_x)
    nodes: list[tuple[float, float]] = []
    for x in bottom_x:
        nodes.append((x, 0.0))
    for x in top_x:
        nodes.append((x, PANEL_HEIGHT))
    index = {pos: k for k, pos in enumerate(nodes)}

    members: list[tuple[int, int]] = []

    def connect(a: tuple[float, float], b: tuple[float, float]) -> None:
        members.append((index[a], index[b]))

    for xa, xb in zip(bottom_x[:-1], bottom_x[1:]):
        connect((xa, 0.0), (xb, 0.0))
    for xa, xb in zip(top_x[:-1], top_x[1:]):
        connect((xa, PANEL_HEIGHT), (xb, PANEL_HEIGHT))
    for k in range(n_panels):
        x = PANEL_WIDTH * k
        connect((x, 0.0), (x + 1.0, PANEL_HEIGHT))
        connect((x + 1.0, PANEL_HEIGHT), (x + PANEL_WIDTH, 0.0))
    for x in sorted(support_x):
        connect((x, 0.0), (x, PANEL_HEIGHT))

    supports = [index[(x, 0.0)] for x in sorted(support_x)]
    support_set = set(supports)
    keep = [k for k in range(len(nodes)) if k not in support_set]
    remap = {old: new for new, old in enumerate(keep)}
    positions = np.asarray([nodes[k] for k in keep], dtype=float)

    edge_rows: list[tuple[int, int]] = []
    anchor_rows: list[tuple[float, float]] = []
    for i, j in members:
        if i in support_set and j in support_set:
            continue
        if i in support_set or j in support_set:
            free, fixed = (j, i) if i in support_set else (i, j)
            edge_rows.append((remap[free], remap[free]))
            anchor_rows.append(nodes[fixed])
        else:
            a, b = remap[i], remap[j]
            edge_rows.append((min(a, b), max(a, b)))
            anchor_rows.append((np.nan, np.nan))
    edges = np.asarray(edge_rows, dtype=int)
    anchors = np.asarray(anchor_rows, dtype=float)
    support_positions = np.asarray([nodes[s] for s in supports], dtype=float)
    return positions, edges, anchors, support_positions


def generate_bridge_truss(
    span: float,
    seed: int = 0,
    dists: ParameterDistributions | None = None,
    node_mass: float = DEFAULT_BRIDGE_MASS,
) -> TrussSystem:
    """Bridge truss with rotational clearance nonlinearity on every member.

    See :func:`bridge_layout` for the geometry. Per-edge parameters
    (k, c, k_rot, clearance angle) are sampled from ``dists``. ``node_mass``
    sets the uniform nodal mass; as for the random array, the default puts
    the lower modes inside the default forcing band.
    """
    if dists is None:
        dists = ParameterDistributions.bridge_defaults()
    if dists.rotational is None or dists.clearance is None:
        raise ValueError("bridge truss requires rotational and clearance distributions")
    positions, edges, anchors, _ = bridge_layout(span)
    rest_lengths, rest_angles = _rest_geometry(positions, edges, anchors)
    rng = np.random.default_rng(seed)
    n_e = edges.shape[0]
    graph = StructuralGraph(
        positions=positions,
        masses=np.full(positions.shape[0], float(node_mass)),
        edges=edges,
        stiffness=_sample(rng, dists.stiffness, n_e),
        damping=_sample(rng, dists.damping, n_e),
        rest_lengths=rest_lengths,
        rest_angles=rest_angles,
        anchors=anchors,
    )
    return TrussSystem(
        graph=graph,
        kind="clearance",
        rotational=_sample(rng, dists.rotational, n_e),
        clearance=_sample(rng, dists.clearance, n_e),
    )


def nominal_graph(system: TrussSystem, dists: ParameterDistributions) -> StructuralGraph:
    """Copy of the system's graph with stiffness/damping set to the means.

    This is the graph a model sees: true topology and geometry, nominal
    linear parameters, no knowledge of the nonlinear terms.
    """
    graph = system.graph.copy()
    graph.stiffness[:] = dists.stiffness[0]
    graph.damping[:] = dists.damping[0]
    return graph


# --- text serialization ----------------------------------------------------

FORMAT_TAG = "truss-format"
FORMAT_VERSION = 1


def save_system(target, system: TrussSystem) -> None:
    """Write a TrussSystem in the documented line-oriented text format.

    ``target`` is a path or an open text stream. Layout: a format line;
    ``nodes <n>`` followed by ``<id> <x> <y> <mass>`` rows;
    ``edges <m> <kind>`` followed by per-edge rows
    ``<i> <j> <k> <c> <L0> <phi> [<kappa> | <k_rot> <clearance>]``;
    ``anchors <a>`` followed by ``<edge-row> <x> <y>`` rows for self-loops.
    """
    if not hasattr(target, "write"):
        with Path(target).open("w") as fh:
            save_system(fh, system)
        return
    stream = target

    def r(value) -> str:
        return format(float(value), ".17g")

    g = system.graph
    stream.write(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
    stream.write(f"nodes {g.n_nodes}\n")
    for k in range(g.n_nodes):
        stream.write(
            f"{k} {r(g.positions[k, 0])} {r(g.positions[k, 1])} {r(g.masses[k])}\n"
        )
    stream.write(f"edges {g.n_edges} {system.kind}\n")
    for e in range(g.n_edges):
        row = (
            f"{g.edges[e, 0]} {g.edges[e, 1]} {r(g.stiffness[e])} "
            f"{r(g.damping[e])} {r(g.rest_lengths[e])} {r(g.rest_angles[e])}"
        )
        if system.kind == "cubic":
            row += f" {r(system.cubic[e])}"
        elif system.kind == "clearance":
            row += f" {r(system.rotational[e])} {r(system.clearance[e])}"
        stream.write(row + "\n")
    loops = np.flatnonzero(g.is_self_loop)
    stream.write(f"anchors {loops.size}\n")
    for e in loops:
        stream.write(f"{e} {r(g.anchors[e, 0])} {r(g.anchors[e, 1])}\n")


def load_system(source) -> TrussSystem:
    """Read a TrussSystem written by :func:`save_system`.

    ``source`` is a path or an open text stream.
    """
    if not hasattr(source, "read"):
        with Path(source).open() as fh:
            return load_system(fh)
    tokens = source.read().split("\n")
    cursor = 0

    def next_line() -> list[str]:
        nonlocal cursor
        while cursor < len(tokens) and not tokens[cursor].strip():
            cursor += 1
        if cursor >= len(tokens):
            raise ValueError("unexpected end of truss file")
        line = tokens[cursor].split()
        cursor += 1
        return line

    head = next_line()
    if head[0] != FORMAT_TAG or int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"not a {FORMAT_TAG} {FORMAT_VERSION} file")
    tag, n_nodes = next_line()
    if tag != "nodes":
        raise ValueError("expected nodes section")
    n_n = int(n_nodes)
    positions = np.zeros((n_n, 2))
    masses = np.zeros(n_n)
    for _ in range(n_n):
        k, x, y, m = next_line()
        positions[int(k)] = (float(x), float(y))
        masses[int(k)] = float(m)
    tag, n_edges, kind = next_line()
    if tag != "edges":
        raise ValueError("expected edges section")
    n_e = int(n_edges)
    edges = np.zeros((n_e, 2), dtype=int)
    stiffness = np.zeros(n_e)
    damping = np.zeros(n_e)
    rest_lengths = np.zeros(n_e)
    rest_angles = np.zeros(n_e)
    cubic = np.zeros(n_e) if kind == "cubic" else None
    rotational = np.zeros(n_e) if kind == "clearance" else None
    clearance = np.zeros(n_e) if kind == "clearance" else None
    for e in range(n_e):
        fields = next_line()
        edges[e] = (int(fields[0]), int(fields[1]))
        stiffness[e] = float(fields[2])
        damping[e] = float(fields[3])
        rest_lengths[e] = float(fields[4])
        rest_angles[e] = float(fields[5])
        if kind == "cubic":
            cubic[e] = float(fields[6])
        elif kind == "clearance":
            rotational[e] = float(fields[6])
            clearance[e] = float(fields[7])
    anchors = np.full((n_e, 2), np.nan)
    tag, n_anchors = next_line()
    if tag != "anchors":
        raise ValueError("expected anchors section")
    for _ in range(int(n_anchors)):
        e, x, y = next_line()
        anchors[int(e)] = (float(x), float(y))
    graph = StructuralGraph(
        positions, masses, edges, stiffness, damping, rest_lengths, rest_angles, anchors
    )
    return TrussSystem(
        graph=graph, kind=kind, cubic=cubic, rotational=rotational, clearance=clearance
    )
