"""Minimal dense-network kernel with hand-written reverse-mode gradients.

There is deliberately no tape or graph engine here: the architecture used
by the model is fixed (two feature encoders and a message head), so exact
reverse-mode derivatives are written out by hand for a stack of affine
layers with LeakyReLU activations. Inputs may be batched along the leading
axis; parameter gradients are accumulated over the batch while input
gradients stay per-row.

``activate_output`` controls whether the final layer's output passes
through the activation. Encoders use an activated output (their latents
feed further nonlinear stages); force-valued heads keep a linear output so
the prediction is sign-indefinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatchError
from .graph import FloatArray

DEFAULT_SLOPE = 0.01


@dataclass
class DenseNetwork:
    """Affine layer stack with LeakyReLU activations.

    ``weights[l]`` has shape (fan_in, fan_out); ``biases[l]`` has shape
    (fan_out,). All hidden layers are activated; the output layer is
    activated only when ``activate_output`` is set.
    """

    weights: list[FloatArray]
    biases: list[FloatArray]
    slope: float = DEFAULT_SLOPE
    activate_output: bool = False

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("need matching, non-empty weight/bias lists")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {l}: bias does not match weight")
            if l and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ShapeMismatchError(f"layer {l}: fan-in does not chain")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeMismatchError(f"layer {l}: non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_size] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[FloatArray]:
        """Live parameter arrays, weights and biases interleaved per layer."""
        out: list[FloatArray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class NetCache:
    """Layer inputs and pre-activations recorded by a cached forward pass."""

    inputs: list[FloatArray]
    preactivations: list[FloatArray]
    output: FloatArray


@dataclass
class GradientBundle:
    """Gradients mirroring a network's parameter arrays.

    ``weight_grads[l]``/``bias_grads[l]`` match the network layer shapes;
    ``input_grad`` is the gradient with respect to the (batched) input.
    """

    weight_grads: list[FloatArray]
    bias_grads: list[FloatArray]
    input_grad: FloatArray | None = None

    def add_(self, other: "GradientBundle") -> None:
        """Accumulate another bundle's parameter gradients in place."""
        for mine, theirs in zip(self.weight_grads, other.weight_grads):
            mine += theirs
        for mine, theirs in zip(self.bias_grads, other.bias_grads):
            mine += theirs

    @classmethod
    def zeros_like(cls, net: DenseNetwork) -> "GradientBundle":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )


def _leaky(z: FloatArray, slope: float) -> FloatArray:
    return np.where(z >= 0.0, z, slope * z)


def _leaky_grad(z: FloatArray, slope: float) -> FloatArray:
    return np.where(z >= 0.0, 1.0, slope)


def forward(net: DenseNetwork, x: FloatArray) -> FloatArray:
    """Evaluate the network; accepts a single vector or a batch."""
    return forward_cached(net, x)[0]


def forward_cached(net: DenseNetwork, x: FloatArray) -> tuple[FloatArray, NetCache]:
    """Evaluate the network and keep what backward needs.

    Returns the output and a cache of per-layer inputs/pre-activations.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[-1] != net.input_size:
        raise ShapeMismatchError(
            f"input size {a.shape[-1]} != expected {net.input_size}"
        )
    inputs: list[FloatArray] = []
    preacts: list[FloatArray] = []
    for l in range(net.n_layers):
        inputs.append(a)
        z = a @ net.weights[l] + net.biases[l]
        preacts.append(z)
        if l < net.n_layers - 1 or net.activate_output:
            a = _leaky(z, net.slope)
        else:
            a = z
    out = a[0] if single else a
    return out, NetCache(inputs=inputs, preactivations=preacts, output=out)


def backward_cached(
    net: DenseNetwork, cache: NetCache, upstream: FloatArray
) -> GradientBundle:
    """Exact reverse-mode gradients of ``sum(upstream * output)``.

    Parameter gradients are summed over the batch; the input gradient keeps
    the batch shape of the forward input.
    """
    upstream = np.asarray(upstream, dtype=float)
    single = upstream.ndim == 1
    delta = upstream[None, :] if single else upstream
    if delta.shape[-1] != net.output_size:
        raise ShapeMismatchError("upstream does not match output size")
    weight_grads: list[FloatArray] = [np.empty(0)] * net.n_layers
    bias_grads: list[FloatArray] = [np.empty(0)] * net.n_layers
    delta = delta.copy()
    for l in range(net.n_layers - 1, -1, -1):
        if l < net.n_layers - 1 or net.activate_output:
            delta = delta * _leaky_grad(cache.preactivations[l], net.slope)
        weight_grads[l] = cache.inputs[l].T @ delta
        bias_grads[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l].T
    input_grad = delta[0] if single else delta
    return GradientBundle(weight_grads, bias_grads, input_grad)


def backward(net: DenseNetwork, x: FloatArray, upstream: FloatArray) -> GradientBundle:
    """Recompute the forward pass for ``x`` and run :func:`backward_cached`."""
    _, cache = forward_cached(net, x)
    return backward_cached(net, cache, upstream)


def init_dense(
    sizes: Sequence[int],
    rng: np.random.Generator,
    slope: float = DEFAULT_SLOPE,
    activate_output: bool = False,
    final_scale: float = 1.0,
) -> DenseNetwork:
    """Glorot-uniform initialization; biases zero.

    ``final_scale`` multiplies the last layer's weights, letting
    force-valued heads start near zero so the closed-form physics term
    dominates early training.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights = []
    biases = []
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if l == len(sizes) - 2:
            w = w * final_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return DenseNetwork(weights, biases, slope=slope, activate_output=activate_output)


def fd_jacobian(
    f: Callable[[FloatArray], FloatArray], x: FloatArray, h: float = 1e-6
) -> FloatArray:
    """Central-difference Jacobian of a vector function at ``x``.

    Entry (r, c) is ``(f(x + h e_c)[r] - f(x - h e_c)[r]) / (2 h)``.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    flat = x.reshape(-1)
    for c in range(flat.size):
        step = np.zeros_like(flat)
        step[c] = h
        hi = np.asarray(f((flat + step).reshape(x.shape)), dtype=float)
        lo = np.asarray(f((flat - step).reshape(x.shape)), dtype=float)
        jac[:, c] = (hi - lo).reshape(-1) / (2.0 * h)
    return jac
