"""Offline training of the hybrid model from sparse noisy observations.

One epoch is one full-window recurrent rollout from rest plus exact
backpropagation through every step; there is no batching and no window
truncation. The optimizer is adaptive-moment gradient descent on the flat
parameter vector. Early stopping triggers when the relative loss decrease
over a trailing window of epochs falls below tolerance, and the returned
model always carries the best parameters seen.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .backprop import (
    gradients_vector,
    loss_and_gradient,
    parameters_vector,
    set_parameters,
)
from .datasets import TrajectoryDataset
from .graph import FloatArray, StructuralGraph
from .model import HybridDynamicsModel, bind


@dataclass
class TrainingConfig:
    """Training hyperparameters plus the model-assembly knobs the driver uses.

    Parameters
    ----------
    loss : str
        "deterministic" for the plain squared residual, "nll" for the
        Gaussian likelihood with the per-channel residual variances.
    learning_rate : float
        Adaptive-moment step size.
    max_epochs : int
        Hard epoch cap.
    tolerance : float
        Relative loss decrease over ``patience`` epochs below which
        training stops.
    patience : int
        Trailing window length for the early-stopping comparison.
    window_length : float
        Training window duration, s (used by the experiment driver when
        generating data, not by :func:`train` itself).
    dt : float
        Sample spacing of the training grid, s.
    node_latent, edge_latent : int
        Encoder output widths.
    hidden : tuple of int
        Hidden layer widths of the message network.
    message_outputs : int
        1 for a purely axial learned force, 2 to add a perpendicular
        component.
    substeps : int
        Integrator steps per observation interval during the training
        rollout; residuals stay on the observation grid.
    seed : int
        Model initialization seed.
    """

    loss: str = "deterministic"
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    tolerance: float = 1e-6
    patience: int = 25
    window_length: float = 4.0
    dt: float = 0.01
    node_latent: int = 16
    edge_latent: int = 16
    hidden: tuple = (64, 64)
    message_outputs: int = 1
    substeps: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in ("deterministic", "nll"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("nonpositive training hyperparameter")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_file(cls, path) -> "TrainingConfig":
        """Load from a flat key-value text file (YAML mapping)."""
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            return cls()
        if not isinstance(raw, dict):
            raise ValueError("training config must be a flat key-value mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_file(self, path) -> None:
        data = {
            f.name: getattr(self, f.name)
            if f.name != "hidden"
            else list(self.hidden)
            for f in fields(self)
        }
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


@dataclass
class AdamState:
    """Moment accumulators for adaptive-moment gradient descent."""

    first: FloatArray
    second: FloatArray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(
    theta: FloatArray,
    grad: FloatArray,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> FloatArray:
    """One adaptive-moment update; mutates ``state``, returns new parameters."""
    state.step += 1
    state.first = beta1 * state.first + (1.0 - beta1) * grad
    state.second = beta2 * state.second + (1.0 - beta2) * grad * grad
    m_hat = state.first / (1.0 - beta1**state.step)
    v_hat = state.second / (1.0 - beta2**state.step)
    return theta - learning_rate * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainingResult:
    """Per-epoch loss history and convergence bookkeeping."""

    loss_history: FloatArray
    best_loss: float
    best_epoch: int
    converged: bool

    @property
    def epochs_run(self) -> int:
        return len(self.loss_history)


def train(
    model: HybridDynamicsModel,
    graph: StructuralGraph,
    dataset: TrajectoryDataset,
    config: TrainingConfig | None = None,
    callback=None,
) -> TrainingResult:
    """Fit the model's networks to a masked noisy dataset.

    The model is mutated in place and ends up holding the best parameters
    encountered. ``callback(epoch, loss)`` is invoked after each epoch when
    given.
    """
    config = config or TrainingConfig()
    binding = bind(graph)
    theta = parameters_vector(model)
    adam = AdamState.zeros(theta.size)
    history: list[float] = []
    best_loss = np.inf
    best_theta = theta.copy()
    best_epoch = 0
    converged = False

    for epoch in range(config.max_epochs):
        loss, grads = loss_and_gradient(
            model, binding, dataset, config.loss, substeps=config.substeps
        )
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_theta = parameters_vector(model)
            best_epoch = epoch
        if callback is not None:
            callback(epoch, loss)
        if epoch >= config.patience:
            ref = history[epoch - config.patience]
            if (ref - loss) / max(abs(ref), 1e-30) <= config.tolerance:
                converged = True
                break
        theta = adam_step(theta, gradients_vector(grads), adam, config.learning_rate)
        set_parameters(model, theta)

    set_parameters(model, best_theta)
    return TrainingResult(np.asarray(history), float(best_loss), best_epoch, converged)
