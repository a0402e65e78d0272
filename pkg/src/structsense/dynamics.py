"""True-system dynamics: nonlinear force laws, forcing synthesis, RK4.

The equations of motion integrated here are, per node i,

    m_i * a_i = f_i - xi_i(u, v)

where ``xi_i`` collects the internal member forces. Axial member forces act
along the current edge direction; the clearance nonlinearity additionally
applies a force perpendicular to the member (the direction of increasing
edge angle), engaged only when the angle deviates from its rest value by
more than the clearance.

Ground truth is integrated with classical RK4 on a fine grid (default
1 ms). Forcing is defined on the same grid and treated as piecewise linear
in time between samples; RK4 midpoint stages therefore use the average of
the two bracketing samples, which is exact for that convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import TrajectoryDataset
from .errors import BandOutsideNyquistError, DivergedError, ShapeMismatchError
from .graph import (
    EdgeKinematics,
    EdgeOccurrences,
    FloatArray,
    GraphState,
    StructuralGraph,
    build_occurrences,
    corotational_kinematics,
)
from .structures import TrussSystem

DEFAULT_SIM_DT = 1e-3
DEFAULT_RECORD_EVERY = 10  # 1 ms integration, 100 Hz dataset rate
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class ForcingSpec:
    """Banded white-noise forcing description.

    Attributes
    ----------
    nodes : tuple of int
        Forced node indices; both planar components are driven.
    band : (float, float)
        Passband in rad/s.
    amplitude : float
        Per-channel RMS of the synthesized force, N.
    seed : int
        Seed for the noise realization.
    duration : float or None
        Informational window length, s; the sample grid passed to
        :func:`banded_white_noise` is authoritative.
    """

    nodes: tuple[int, ...]
    band: tuple[float, float] = (0.5, 4.0)
    amplitude: float = 1.0
    seed: int = 0
    duration: float | None = None

    def __post_init__(self) -> None:
        lo, hi = self.band
        if not 0.0 < lo < hi:
            raise ValueError("passband must satisfy 0 < lo < hi")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if len(self.nodes) == 0:
            raise ValueError("at least one forced node required")


def lowest_nodes(graph: StructuralGraph, count: int = 4) -> tuple[int, ...]:
    """Indices of the ``count`` nodes with smallest rest y (ties by x)."""
    if count > graph.n_nodes:
        raise ValueError("count exceeds node count")
    order = np.lexsort(
        (np.arange(graph.n_nodes), graph.positions[:, 0], graph.positions[:, 1])
    )
    return tuple(int(k) for k in order[:count])


def banded_white_noise(
    times: FloatArray, spec: ForcingSpec, n_nodes: int
) -> FloatArray:
    """Synthesize band-limited Gaussian forcing on a uniform sample grid.

    White noise is drawn per forced channel (node by component, x first),
    masked in the frequency domain to the passband, inverse-transformed and
    rescaled so each channel has RMS equal to ``spec.amplitude``. Unforced
    nodes carry exactly zero force.

    Returns an array of shape ``(len(times), n_nodes, 2)``.
    """
    times = np.asarray(times, dtype=float)
    n = times.shape[0]
    if n < 4:
        raise ValueError("need at least 4 samples")
    steps = np.diff(times)
    dt = steps[0]
    if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ValueError("time grid must be uniform")
    lo, hi = spec.band
    nyquist = np.pi / dt
    if hi > nyquist * (1 + 1e-12):
        raise BandOutsideNyquistError(
            f"band edge {hi} rad/s exceeds Nyquist {nyquist:.6g} rad/s"
        )
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, dt)
    keep = (omega >= lo) & (omega <= hi)
    if not keep.any():
        raise ValueError("passband contains no resolvable frequency bin")
    if max(spec.nodes) >= n_nodes or min(spec.nodes) < 0:
        raise ShapeMismatchError("forced node index out of range")
    rng = np.random.default_rng(spec.seed)
    out = np.zeros((n, n_nodes, 2))
    for node in spec.nodes:
        for comp in range(2):
            white = rng.standard_normal(n)
            spectrum = np.fft.rfft(white)
            spectrum[~keep] = 0.0
            signal = np.fft.irfft(spectrum, n)
            rms = float(np.sqrt(np.mean(signal**2)))
            out[:, node, comp] = signal * (spec.amplitude / rms)
    return out


def edge_force_cubic(
    stiffness: FloatArray,
    damping: FloatArray,
    cubic: FloatArray,
    kin: EdgeKinematics,
) -> FloatArray:
    """Axial member force k*eps + c*eps_dot + kappa*eps^3, per edge, N."""
    return (
        stiffness * kin.extensions
        + damping * kin.extension_rates
        + cubic * kin.extensions**3
    )


def edge_force_clearance(
    stiffness: FloatArray,
    damping: FloatArray,
    rotational: FloatArray,
    clearance: FloatArray,
    rest_angles: FloatArray,
    kin: EdgeKinematics,
) -> tuple[FloatArray, FloatArray]:
    """Axial and angular member forces for the clearance nonlinearity.

    The axial part ``k*eps + c*eps_dot`` always acts; the angular part is
    zero while ``|theta - phi| < clearance`` and ``k_rot*(theta - phi)``
    beyond it. The angle difference is wrapped to (-pi, pi].
    """
    axial = stiffness * kin.extensions + damping * kin.extension_rates
    raw = kin.angles - rest_angles
    dtheta = np.arctan2(np.sin(raw), np.cos(raw))
    angular = np.where(np.abs(dtheta) >= clearance, rotational * dtheta, 0.0)
    return axial, angular


def perpendicular(directions: FloatArray) -> FloatArray:
    """Rotate unit vectors by +90 degrees: (x, y) -> (-y, x)."""
    return np.stack([-directions[:, 1], directions[:, 0]], axis=1)


def internal_forces(
    system: TrussSystem,
    state: GraphState,
    occurrences: EdgeOccurrences | None = None,
) -> FloatArray:
    """Per-node internal force xi (the EOM subtracts it), shape (n_n, 2).

    Every directed edge occurrence contributes its axial scalar along the
    occurrence direction (sender to receiver), so a stretched member pulls
    its endpoints together under ``m a = f - xi``. Paired occurrences make
    Newton's third law exact for regular edges.
    """
    graph = system.graph
    kin = corotational_kinematics(graph, state)
    if occurrences is None:
        occurrences = build_occurrences(graph)
    e = occurrences.edge
    n_occ = kin.directions[e] * occurrences.sign[:, None]
    if system.kind == "cubic":
        axial = edge_force_cubic(graph.stiffness, graph.damping, system.cubic, kin)
        contrib = axial[e][:, None] * n_occ
    elif system.kind == "clearance":
        axial, angular = edge_force_clearance(
            graph.stiffness,
            graph.damping,
            system.rotational,
            system.clearance,
            graph.rest_angles,
            kin,
        )
        contrib = axial[e][:, None] * n_occ + angular[e][:, None] * perpendicular(n_occ)
    else:
        axial = graph.stiffness * kin.extensions + graph.damping * kin.extension_rates
        contrib = axial[e][:, None] * n_occ
    xi = np.zeros((graph.n_nodes, 2))
    np.add.at(xi, occurrences.receiver, contrib)
    return xi


def accelerations(
    system: TrussSystem,
    state: GraphState,
    forces: FloatArray,
    occurrences: EdgeOccurrences | None = None,
) -> FloatArray:
    """Force-balance accelerations (f - xi) / m, shape (n_n, 2)."""
    xi = internal_forces(system, state, occurrences)
    return (forces - xi) / system.graph.masses[:, None]


def mechanical_energy(system: TrussSystem, state: GraphState) -> float:
    """Kinetic plus elastic potential energy, J (linear and cubic systems).

    The clearance force is not the gradient of a continuous potential, so
    no energy function is defined for that kind.
    """
    if system.kind == "clearance":
        raise ValueError("no potential is defined for the clearance nonlinearity")
    graph = system.graph
    kin = corotational_kinematics(graph, state)
    kinetic = 0.5 * float(
        np.sum(graph.masses[:, None] * state.velocities**2)
    )
    elastic = 0.5 * float(np.sum(graph.stiffness * kin.extensions**2))
    if system.kind == "cubic":
        elastic += 0.25 * float(np.sum(system.cubic * kin.extensions**4))
    return kinetic + elastic


def simulate(
    system: TrussSystem,
    forcing: ForcingSpec | FloatArray | None,
    t_end: float,
    dt: float = DEFAULT_SIM_DT,
    record_every: int = DEFAULT_RECORD_EVERY,
    initial_state: GraphState | None = None,
) -> TrajectoryDataset:
    """Integrate the true dynamics with classical RK4 and record a dataset.

    Parameters
    ----------
    system : TrussSystem
    forcing : ForcingSpec, ndarray or None
        Either a spec (synthesized on the integration grid), a precomputed
        array of shape ``(n_steps + 1, n_nodes, 2)`` on the integration
        grid, or None for an unforced run.
    t_end : float
        Window length, s.
    dt : float
        Integration step, s.
    record_every : int
        Subsampling factor from the integration grid to the dataset grid.
    initial_state : GraphState, optional
        Defaults to rest (zero state).

    Returns
    -------
    TrajectoryDataset
        Truth-only dataset (no observation fields) at the recording rate,
        with accelerations from the force balance and the applied forcing
        stored as the known input.

    Raises
    ------
    DivergedError
        If any displacement or velocity magnitude exceeds 1e6.
    """
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    if record_every < 1:
        raise ValueError("record_every must be at least 1")
    graph = system.graph
    n_nodes = graph.n_nodes
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt")
    if n_steps % record_every:
        raise ValueError("t_end must cover a whole number of recording intervals")
    times_sim = np.arange(n_steps + 1) * dt
    if forcing is None:
        force_series = np.zeros((n_steps + 1, n_nodes, 2))
    elif isinstance(forcing, ForcingSpec):
        force_series = banded_white_noise(times_sim, forcing, n_nodes)
    else:
        force_series = np.asarray(forcing, dtype=float)
        if force_series.shape != (n_steps + 1, n_nodes, 2):
            raise ShapeMismatchError(
                f"forcing must have shape {(n_steps + 1, n_nodes, 2)}"
            )
    state = initial_state.copy() if initial_state is not None else GraphState.zero(n_nodes)
    if state.n_nodes != n_nodes:
        raise ShapeMismatchError("initial state does not match graph")
    occ = build_occurrences(graph)
    masses = graph.masses[:, None]

    def acc(u: FloatArray, v: FloatArray, f: FloatArray) -> FloatArray:
        xi = internal_forces(system, GraphState(u, v), occ)
        return (f - xi) / masses

    n_records = n_steps // record_every + 1
    rec_times = np.zeros(n_records)
    rec_u = np.zeros((n_records, n_nodes, 2))
    rec_v = np.zeros((n_records, n_nodes, 2))
    rec_a = np.zeros((n_records, n_nodes, 2))
    rec_f = np.zeros((n_records, n_nodes, 2))

    u = state.displacements.copy()
    v = state.velocities.copy()

    def record(slot: int, step: int) -> None:
        rec_times[slot] = times_sim[step]
        rec_u[slot] = u
        rec_v[slot] = v
        rec_a[slot] = acc(u, v, force_series[step])
        rec_f[slot] = force_series[step]

    record(0, 0)
    for k in range(n_steps):
        f0 = force_series[k]
        f1 = force_series[k + 1]
        fm = 0.5 * (f0 + f1)
        k1u = v
        k1v = acc(u, v, f0)
        k2u = v + 0.5 * dt * k1v
        k2v = acc(u + 0.5 * dt * k1u, v + 0.5 * dt * k1v, fm)
        k3u = v + 0.5 * dt * k2v
        k3v = acc(u + 0.5 * dt * k2u, v + 0.5 * dt * k2v, fm)
        k4u = v + dt * k3v
        k4v = acc(u + dt * k3u, v + dt * k3v, f1)
        u = u + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        v = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not np.isfinite(u).all() or np.abs(u).max() > DIVERGENCE_LIMIT or np.abs(
            v
        ).max() > DIVERGENCE_LIMIT:
            raise DivergedError(f"simulation diverged at t={times_sim[k + 1]:.6g} s")
        if (k + 1) % record_every == 0:
            record((k + 1) // record_every, k + 1)

    return TrajectoryDataset(
        times=rec_times,
        displacements=rec_u,
        velocities=rec_v,
        accelerations=rec_a,
        input_forces=rec_f,
    )
