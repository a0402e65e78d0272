"""Normalized mean-square error in the exact form used for reporting.

The reported figure divides each node-direction error energy by the plain
Euclidean norm of the true time series (not its square) and averages with
the fixed prefactor 1/(2 n_nodes):

    NMSE = 1/(2 n_n) * sum_j sum_d ||uhat_jd - u_jd||^2 / ||u_jd||

A conventional squared-denominator variant is available behind a flag;
model orderings are identical under either choice.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError, ZeroReferenceError
from .graph import FloatArray


def _as_series(values) -> FloatArray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None, None]
    elif arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatchError("series must be (steps,), (steps, nodes) or (steps, nodes, dims)")
    return arr


def nmse_per_node(
    predicted, true, squared_denominator: bool = False
) -> FloatArray:
    """Per-node NMSE over a time window; shape (n_nodes,).

    Each node's value is half the sum over directions of error energy
    divided by the true-series norm, so the global figure is exactly the
    mean of these.
    """
    pred = _as_series(predicted)
    ref = _as_series(true)
    if pred.shape != ref.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape} != reference shape {ref.shape}"
        )
    err_energy = np.sum((pred - ref) ** 2, axis=0)
    ref_norm = np.sqrt(np.sum(ref**2, axis=0))
    if np.any(ref_norm == 0.0):
        raise ZeroReferenceError("true series has a zero-norm node-direction channel")
    denom = ref_norm**2 if squared_denominator else ref_norm
    return 0.5 * np.sum(err_energy / denom, axis=1)


def nmse(predicted, true, squared_denominator: bool = False) -> float:
    """Scalar NMSE over all nodes and directions of a window."""
    return float(np.mean(nmse_per_node(predicted, true, squared_denominator)))
