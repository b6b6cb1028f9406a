"""Fully connected networks built on :mod:`mfrnp.nn.autodiff`."""

from __future__ import annotations

import numpy as np

from mfrnp.errors import ConfigurationError
from mfrnp.nn import autodiff as ad

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": ad.identity,
}


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseNet:
    """A stack of affine layers with a fixed hidden activation.

    Weights are stored as ``(out, in)`` matrices; the activation is applied
    after every layer except the last.
    """

    def __init__(self, layers, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        if not layers:
            raise ConfigurationError("a DenseNet needs at least one layer")
        self.layers = []
        prev_out = None
        for weight, bias in layers:
            weight = weight if isinstance(weight, ad.Tensor) else ad.parameter(weight)
            bias = bias if isinstance(bias, ad.Tensor) else ad.parameter(bias)
            if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                raise ConfigurationError(
                    f"layer shapes inconsistent: weight {weight.shape}, bias {bias.shape}"
                )
            if prev_out is not None and weight.shape[1] != prev_out:
                raise ConfigurationError(
                    f"layer input {weight.shape[1]} does not chain with previous output {prev_out}"
                )
            if not (np.all(np.isfinite(weight.data)) and np.all(np.isfinite(bias.data))):
                raise ConfigurationError("non-finite parameter values")
            prev_out = weight.shape[0]
            self.layers.append((weight, bias))
        self.activation = activation

    @classmethod
    def initialize(cls, sizes, rng, activation="relu"):
        """Glorot-uniform weights and zero biases for layer widths ``sizes``."""
        layers = [
            (glorot_uniform(rng, n_in, n_out), np.zeros(n_out))
            for n_in, n_out in zip(sizes[:-1], sizes[1:])
        ]
        return cls(layers, activation)

    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, x):
        return net_forward(self, x)


def net_forward(net, x):
    """Evaluate ``net`` on a vector ``(in,)`` or a batch ``(N, in)``.

    Gradients are recorded whenever the net's parameters or ``x`` require them.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != net.in_dim:
        raise ConfigurationError(f"input dimension {x.shape[-1]} != net input {net.in_dim}")
    act = ACTIVATIONS[net.activation]
    h = x
    last = len(net.layers) - 1
    for i, (weight, bias) in enumerate(net.layers):
        h = ad.matmul(h, ad.transpose(weight)) + bias
        if i < last:
            h = act(h)
    return h
