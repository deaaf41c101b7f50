"""Sequential networks with a retained activation tape."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NoTape, NonFiniteActivation, ShapeError
from .layers import LAYER_TYPES, Layer, LayerSpec
from .params import GradientUpdate, ParameterSet


class Network:
    """A stack of layers sharing one :class:`ParameterSet`.

    ``forward`` records a tape that a single ``backward`` call consumes.
    ``predict`` runs without recording.
    """

    def __init__(self, specs: Sequence[LayerSpec], params: ParameterSet, input_shape: tuple[int, ...] | None,
                 dtype=np.float32):
        self.specs = tuple(specs)
        self.layers: list[Layer] = [LAYER_TYPES[s.kind](s, i) for i, s in enumerate(self.specs)]
        self.params = params
        self.input_shape = input_shape
        self.dtype = np.dtype(dtype)
        self._tape: list | None = None
        self._check_params(params)

    def _check_params(self, params: ParameterSet) -> None:
        expected = {}
        for layer in self.layers:
            for short in layer.param_names:
                expected[layer.pname(short)] = None
        if set(expected) != set(params.names()):
            raise ShapeError("parameter names do not match the layer stack")

    @property
    def output_shape(self) -> tuple[int, ...] | None:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def _layer_params(self, layer: Layer) -> dict[str, np.ndarray]:
        return {short: self.params[layer.pname(short)] for short in layer.param_names}

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(self._layer_params(layer), x)
            if not np.all(np.isfinite(x)):
                self._tape = None
                raise NonFiniteActivation(f"non-finite output from layer {layer.index} ({layer.spec.kind})")
            tape.append(cache)
        self._tape = tape
        return x

    def predict(self, x: np.ndarray, batch_size: int | None = None) -> np.ndarray:
        x = self._check_input(x)
        if batch_size is not None and len(x) > batch_size:
            return np.concatenate([self.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
        for layer in self.layers:
            x, _ = layer.forward(self._layer_params(layer), x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivation("non-finite network output")
        return x

    __call__ = predict

    def backward(self, output_grad: np.ndarray) -> GradientUpdate:
        """Gradients for every parameter; the input gradient rides along as ``input_grad``."""
        if self._tape is None:
            raise NoTape("backward called without a preceding forward")
        tape, self._tape = self._tape, None
        dy = np.asarray(output_grad, dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            dy, g = layer.backward(self._layer_params(layer), cache, dy)
            for short, v in g.items():
                grads[layer.pname(short)] = v
        ordered = {name: grads[name] for name in self.params.names()}
        return GradientUpdate(ordered, input_grad=dy)

    @property
    def has_tape(self) -> bool:
        return self._tape is not None

    def clone(self) -> "Network":
        return Network(self.specs, self.params.copy(), self.input_shape, self.dtype)

    def load_params(self, params: ParameterSet) -> None:
        """Copy values from ``params``; shapes must agree exactly."""
        if params.shapes() != self.params.shapes():
            raise ShapeError("parameter table does not match this architecture")
        self.params.assign(params)


def build_network(specs: Sequence[LayerSpec], seed: int, dtype=np.float32,
                  input_shape: tuple[int, ...] | None = None) -> Network:
    """Check the dimension chain and initialize parameters deterministically from ``seed``."""
    layers = [LAYER_TYPES[s.kind](s, i) for i, s in enumerate(specs)]
    if input_shape is None:
        for s in specs:
            if s.kind == "dense":
                input_shape = (s.in_dim,)
                break
            if s.kind == "reshape":
                input_shape = (int(np.prod(s.shape)),)
                break
            if s.kind in ("conv1d", "conv_transpose1d"):
                break
    shape = input_shape
    for layer in layers:
        shape = layer.out_shape(shape)
    rng = np.random.default_rng(seed)
    tensors = []
    for layer in layers:
        for short, arr in layer.init_params(rng, np.dtype(dtype)).items():
            tensors.append((layer.pname(short), arr))
    return Network(specs, ParameterSet(tensors), input_shape, dtype)
