from __future__ import annotations

import numpy as np

from .layers import (Conv2d, Dense, DimensionError, Dropout, Flatten, Layer, MaxPool2d, ReLU,
                     Sigmoid, StateError, ToSequence, Unsqueeze)
from .recurrent import RecurrentStack


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    simple = {"Flatten": Flatten, "ToSequence": ToSequence, "Unsqueeze": Unsqueeze,
              "ReLU": ReLU, "Sigmoid": Sigmoid}
    if kind in simple:
        return simple[kind]()
    if kind == "Conv2d":
        return Conv2d(**spec)
    if kind == "MaxPool2d":
        return MaxPool2d(**spec)
    if kind == "Dense":
        return Dense(**spec)
    if kind == "Dropout":
        return Dropout(**spec)
    for cell, name in (("rnn", "RNNCellStack"), ("gru", "GRUCellStack"), ("lstm", "LSTMCellStack")):
        if kind == name:
            return RecurrentStack(cell, **spec)
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """A sequential stack of layers built from plain-dict layer specs.

    Parameters are initialised deterministically from ``seed``.  Shapes are
    traced through every layer at construction so misfits surface early,
    with the offending layer named.
    """

    def __init__(self, layer_specs, input_shape, seed=0, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.layers = [layer_from_spec(s) for s in layer_specs]
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            layer.name = f"layer{i}:{layer.kind}"
            shape = layer.output_shape(shape)
            layer.init_params(rng, self.dtype)
            self.shapes.append(shape)
        self.output_shape = shape

    def layer_specs(self):
        return [layer.spec() for layer in self.layers]

    # ------------------------------------------------------------ params

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                if name not in layer.grads:
                    raise StateError(f"{layer.name}: no gradient for {name}; run backward first")
                yield f"{i}.{name}", layer.grads[name]

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def grads(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                key = f"{i}.{name}"
                v = np.asarray(values[key])
                if v.shape != layer.params[name].shape:
                    raise DimensionError(f"{layer.name}.{name}: shape {v.shape} != {layer.params[name].shape}")
                layer.params[name] = v.astype(self.dtype, copy=True)

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def astype(self, dtype) -> "Network":
        """Copy of this network with parameters cast to ``dtype``."""
        clone = Network(self.layer_specs(), self.input_shape, self.seed, dtype)
        clone.set_params(self.params())
        return clone

    # ------------------------------------------------------------ passes

    def forward(self, x, training=False, seed=None, rng=None):
        """Run the stack.  ``seed`` (or ``rng``) drives dropout in training mode."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0].name if self.layers else "network"
            raise DimensionError(f"{first}: expected input {self.input_shape}, got {x.shape[1:]}")
        if training and rng is None:
            rng = np.random.default_rng(seed)
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    __call__ = forward

    def backward(self, dout, input_grad=True):
        """Backpropagate ``dout`` (gradient w.r.t. the output).

        Returns the gradient w.r.t. the network input, or None when
        ``input_grad`` is false and the first layer can skip computing it.
        """
        d = np.asarray(dout, dtype=self.dtype)
        first = self.layers[0] if self.layers else None
        if isinstance(first, Conv2d):
            first.input_grad = input_grad
        for layer in reversed(self.layers):
            d = layer.backward(d)
        if isinstance(first, Conv2d):
            first.input_grad = True
        return d

    def predict(self, x, batch_size=256):
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        return np.concatenate(out)
