"""Named parameter containers and gradient updates."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..errors import MisalignedUpdate, ShapeError


class ParameterSet:
    """Ordered, named weight tensors with a version counter.

    Shapes are fixed once a name is registered.  Assigning through ``[]``
    copies values into the existing array, so networks holding a reference
    to that array see the change.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = (), version: int = 0):
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        for name, arr in items:
            if name in self._tensors:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._tensors[name] = np.asarray(arr)
        self.version = version

    @classmethod
    def merge(cls, parts: Mapping[str, "ParameterSet"]) -> "ParameterSet":
        """View several sets as one, prefixing names with ``"<part>/"``.

        The merged set shares arrays with its parts.
        """
        return cls((f"{prefix}/{name}", arr) for prefix, ps in parts.items() for name, arr in ps.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        target = self._tensors[name]
        value = np.asarray(value)
        if value.shape != target.shape:
            raise ShapeError(f"{name}: expected shape {target.shape}, got {value.shape}")
        target[...] = value

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet(((k, v.copy()) for k, v in self._tensors.items()), version=self.version)

    def subset(self, prefix: str) -> "ParameterSet":
        """Shared view of the names under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return ParameterSet((k[len(p):], v) for k, v in self._tensors.items() if k.startswith(p))

    def assign(self, other: "ParameterSet") -> None:
        check_aligned(self, other)
        for k in self._tensors:
            self._tensors[k][...] = other[k]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self._tensors.items():
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: "ParameterSet") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(v, other[k]) for k, v in self._tensors.items())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.n_params} values, v{self.version})"


@dataclass
class GradientUpdate:
    """Per-parameter gradients, the unit a client sends to the server."""

    grads: dict[str, np.ndarray]
    source_client: str | None = None
    round: int | None = None
    # gradient with respect to the network input; never serialized
    input_grad: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def names(self) -> list[str]:
        return list(self.grads)

    @classmethod
    def zeros_like(cls, params: ParameterSet, **kw) -> "GradientUpdate":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, **kw)

    @classmethod
    def merge(cls, parts: Mapping[str, "GradientUpdate"], **kw) -> "GradientUpdate":
        return cls({f"{p}/{k}": v for p, g in parts.items() for k, v in g.grads.items()}, **kw)

    def subset(self, prefix: str) -> "GradientUpdate":
        p = prefix + "/"
        return GradientUpdate({k[len(p):]: v for k, v in self.grads.items() if k.startswith(p)},
                              self.source_client, self.round)

    def scaled(self, factor: float) -> "GradientUpdate":
        return GradientUpdate({k: v * factor for k, v in self.grads.items()}, self.source_client, self.round)

    def __add__(self, other: "GradientUpdate") -> "GradientUpdate":
        if self.grads.keys() != other.grads.keys():
            raise MisalignedUpdate("gradient name sets differ")
        return GradientUpdate({k: v + other.grads[k] for k, v in self.grads.items()}, self.source_client, self.round)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in self.grads.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.grads.values())


def check_aligned(params: ParameterSet, grads: GradientUpdate | ParameterSet) -> None:
    g_shapes = grads.shapes() if isinstance(grads, ParameterSet) else {k: v.shape for k, v in grads.grads.items()}
    if set(g_shapes) != set(params.names()):
        missing = set(params.names()) ^ set(g_shapes)
        raise MisalignedUpdate(f"names differ: {sorted(missing)[:5]}")
    for k, shape in params.shapes().items():
        if g_shapes[k] != shape:
            raise MisalignedUpdate(f"{k}: expected {shape}, got {g_shapes[k]}")
