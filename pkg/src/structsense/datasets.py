"""Trajectory datasets: truth records, noisy sparse observations, text IO.

A dataset always carries the full ground truth (displacements, velocities,
accelerations) and the applied drive signal (``input_forces``: the known
forcing on every node, exactly zero where nothing is applied). Corruption
adds the measurement side: per-channel Gaussian noise on accelerations and
forces at a prescribed signal-to-noise power ratio, with observations kept
only at measured nodes (NaN elsewhere). The injected per-node noise
variances are recorded; they drive both the residual-variance bookkeeping
and the filter's measurement covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError
from .graph import FloatArray, ObservationMask


@dataclass
class TrajectoryDataset:
    """Uniformly sampled trajectory with optional noisy observations.

    Truth fields have shape ``(n_steps, n_nodes, 2)``; observation fields
    are NaN at unmeasured nodes; noise variances are per node (both planar
    components share a variance).
    """

    times: FloatArray
    displacements: FloatArray
    velocities: FloatArray
    accelerations: FloatArray
    input_forces: FloatArray
    mask: ObservationMask | None = None
    observed_accelerations: FloatArray | None = None
    observed_forces: FloatArray | None = None
    acc_noise_var: FloatArray | None = None
    force_noise_var: FloatArray | None = None
    snr: float | None = None

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.shape[0] < 2:
            raise ShapeMismatchError("times must be a 1-D array of at least 2 samples")
        if np.any(np.diff(self.times) <= 0):
            raise ShapeMismatchError("times must be strictly increasing")
        shape = (self.n_steps, self.n_nodes, 2)
        for name in ("displacements", "velocities", "accelerations", "input_forces"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} must have shape {shape}")
        for name in ("observed_accelerations", "observed_forces"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                setattr(self, name, arr)
                if arr.shape != shape:
                    raise ShapeMismatchError(f"{name} must have shape {shape}")
        for name in ("acc_noise_var", "force_noise_var"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                setattr(self, name, arr)
                if arr.shape != (self.n_nodes,):
                    raise ShapeMismatchError(f"{name} must have shape (n_nodes,)")
        if self.mask is not None and self.mask.n_nodes != self.n_nodes:
            raise ShapeMismatchError("mask node count does not match data")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def n_nodes(self) -> int:
        return np.asarray(self.displacements).shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def has_observations(self) -> bool:
        return self.observed_accelerations is not None


def corrupt_and_mask(
    truth: TrajectoryDataset,
    snr: float,
    mask: ObservationMask,
    seed: int = 0,
) -> TrajectoryDataset:
    """Add measurement noise and drop unmeasured nodes' observations.

    Per node, the noise variance on a quantity is its mean signal power
    (averaged over time and both components) divided by ``snr``; channels
    with zero signal power receive no noise. ``snr=inf`` gives noiseless
    observations. Noise is drawn for accelerations first, then forces, so
    a fixed seed yields a reproducible dataset.

    The drive signal (``input_forces``) is left untouched: it is the known
    input, while ``observed_forces`` is its noisy measured counterpart at
    measured nodes.
    """
    if not snr > 0:
        raise ValueError("snr must be positive (may be inf)")
    if mask.n_nodes != truth.n_nodes:
        raise ShapeMismatchError("mask does not match dataset")
    rng = np.random.default_rng(seed)

    def corrupt(signal: FloatArray) -> tuple[FloatArray, FloatArray]:
        power = np.mean(signal**2, axis=(0, 2))
        variance = np.zeros_like(power) if np.isinf(snr) else power / snr
        noise = rng.standard_normal(signal.shape) * np.sqrt(variance)[None, :, None]
        return signal + noise, variance

    noisy_acc, acc_var = corrupt(truth.accelerations)
    noisy_force, force_var = corrupt(truth.input_forces)
    unmeasured = mask.unmeasured_indices
    noisy_acc[:, unmeasured, :] = np.nan
    noisy_force[:, unmeasured, :] = np.nan
    return replace(
        truth,
        mask=mask,
        observed_accelerations=noisy_acc,
        observed_forces=noisy_force,
        acc_noise_var=acc_var,
        force_noise_var=force_var,
        snr=snr,
    )


# --- text serialization ----------------------------------------------------

FORMAT_TAG = "trajectory-format"
FORMAT_VERSION = 1

_NODE_COLUMNS = ("u_x", "u_y", "v_x", "v_y", "a_x", "a_y", "f_x", "f_y")
_OBS_COLUMNS = ("oa_x", "oa_y", "of_x", "of_y")


def _fmt(values: FloatArray) -> str:
    return " ".join(format(v, ".17g") for v in np.asarray(values, dtype=float))


def save_dataset(target, dataset: TrajectoryDataset) -> None:
    """Write a dataset in the documented columnar text format.

    ``target`` is a path or an open text stream. Header lines carry
    sample/node counts, the SNR, the measured-node flags and the per-node
    noise variances; the body is one row per sample with time followed by
    per-node column groups (u_x u_y v_x v_y a_x a_y f_x f_y, plus
    oa_x oa_y of_x of_y when observations are present). Observation
    entries at unmeasured nodes are NaN.
    """
    if not hasattr(target, "write"):
        with Path(target).open("w") as fh:
            save_dataset(fh, dataset)
        return
    stream = target
    n_s, n_n = dataset.n_steps, dataset.n_nodes
    stream.write(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
    stream.write(f"samples {n_s} nodes {n_n}\n")
    stream.write(f"snr {dataset.snr if dataset.snr is not None else 'none'}\n")
    if dataset.mask is None:
        stream.write("mask none\n")
    else:
        stream.write("mask " + " ".join(str(int(m)) for m in dataset.mask.measured) + "\n")
    for name, arr in (
        ("acc-noise-var", dataset.acc_noise_var),
        ("force-noise-var", dataset.force_noise_var),
    ):
        stream.write(f"{name} {'none' if arr is None else _fmt(arr)}\n")
    cols = _NODE_COLUMNS + (_OBS_COLUMNS if dataset.has_observations else ())
    stream.write("columns time " + " ".join(cols) + "\n")
    blocks = [
        dataset.displacements,
        dataset.velocities,
        dataset.accelerations,
        dataset.input_forces,
    ]
    if dataset.has_observations:
        blocks += [dataset.observed_accelerations, dataset.observed_forces]
    # (n_s, n_n, 2 * n_blocks) with per-node column groups in declared order
    table = np.concatenate(blocks, axis=2).reshape(n_s, -1)
    for s in range(n_s):
        stream.write(format(dataset.times[s], ".17g") + " " + _fmt(table[s]) + "\n")


def load_dataset(source) -> TrajectoryDataset:
    """Read a dataset written by :func:`save_dataset`.

    ``source`` is a path or an open text stream.
    """
    if not hasattr(source, "read"):
        with Path(source).open() as fh:
            return load_dataset(fh)
    lines = [line for line in source.read().splitlines() if line.strip()]
    head = lines[0].split()
    if head[0] != FORMAT_TAG or int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"not a {FORMAT_TAG} {FORMAT_VERSION} file")
    tag, n_s, tag2, n_n = lines[1].split()
    if tag != "samples" or tag2 != "nodes":
        raise ValueError("malformed counts line")
    n_s, n_n = int(n_s), int(n_n)
    snr_token = lines[2].split()[1]
    snr = None if snr_token == "none" else float(snr_token)
    mask_tokens = lines[3].split()[1:]
    mask = (
        None
        if mask_tokens == ["none"]
        else ObservationMask(np.asarray([t == "1" for t in mask_tokens], dtype=bool))
    )

    def var_line(line: str) -> FloatArray | None:
        tokens = line.split()[1:]
        return None if tokens == ["none"] else np.asarray(tokens, dtype=float)

    acc_var = var_line(lines[4])
    force_var = var_line(lines[5])
    columns = lines[6].split()[1:]
    has_obs = "oa_x" in columns
    data = np.asarray([row.split() for row in lines[7:]], dtype=float)
    if data.shape[0] != n_s:
        raise ValueError("row count does not match header")
    times = data[:, 0]
    n_blocks = 6 if has_obs else 4
    body = data[:, 1:].reshape(n_s, n_n, 2 * n_blocks)
    parts = [body[:, :, 2 * b : 2 * b + 2].copy() for b in range(n_blocks)]
    return TrajectoryDataset(
        times=times,
        displacements=parts[0],
        velocities=parts[1],
        accelerations=parts[2],
        input_forces=parts[3],
        mask=mask,
        observed_accelerations=parts[4] if has_obs else None,
        observed_forces=parts[5] if has_obs else None,
        acc_noise_var=acc_var,
        force_noise_var=force_var,
        snr=snr,
    )
