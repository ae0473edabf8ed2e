"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a C-contiguous float64 ndarray plus an optional backward
closure recorded by the primitive that produced it.  Graphs are built
define-by-run: every primitive in :mod:`pamt.autodiff.functional` returns a
new Tensor that remembers its parents, and ``Tensor.backward()`` walks the
tape in reverse topological order.

``Parameter`` is a named leaf with a ``trainable`` flag.  Frozen parameters
never receive gradient accumulation and are never touched by optimizers;
their ``grad`` buffer stays all-zero.  Gradients on trainable parameters
accumulate across backward calls until the owning registry zeroes them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..errors import PamtError, ShapeMismatchError


def as_f64(data) -> np.ndarray:
    """Coerce input to a C-ordered float64 ndarray, keeping 0-d scalars 0-d."""
    return np.asarray(data, dtype=np.float64, order="C")


class Tensor:
    """A node in the computation graph.

    Parameters
    ----------
    data : array-like
        Values, converted to float64 row-major storage.
    requires_grad : bool
        Whether backward passes should accumulate a gradient here.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def is_finite(self) -> bool:
        """Explicit NaN/Inf check over every entry."""
        return bool(np.isfinite(self.data).all())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatchError("grad", g.shape, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output.

        Accumulates into ``grad`` of every upstream tensor with
        ``requires_grad``; everything else is skipped.
        """
        if self.size != 1:
            raise PamtError(f"backward requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Convenience operators; these delegate to the functional primitives.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.mul(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.sub(self, other)

    def __neg__(self) -> "Tensor":
        from . import functional as F

        return F.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.matmul(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def constant(data) -> Tensor:
    """A graph leaf that never receives gradients."""
    return Tensor(data, requires_grad=False)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor.

    The ``grad`` buffer always exists and matches ``data`` in shape; for a
    frozen parameter it stays all-zero because backward never routes anything
    into a node with ``requires_grad == False``.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=bool(trainable))
        self.name = str(name)
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = bool(trainable)
        self.requires_grad = self.trainable

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {kind})"


class ParamRegistry:
    """Ordered, unique-name collection of parameters.

    Iteration follows insertion order, which makes optimizer sweeps,
    serialization, and checksums deterministic.
    """

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise PamtError(f"duplicate parameter name: {param.name!r}")
        self._params[param.name] = param
        return param

    def create(self, name: str, data, trainable: bool = True) -> Parameter:
        return self.add(Parameter(name, data, trainable=trainable))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def n_scalars(self, trainable_only: bool = False) -> int:
        params: Iterable[Parameter] = self.trainable() if trainable_only else self
        return sum(p.size for p in params)

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, keyed by name."""
        return {p.name: p.data.copy() for p in self}

    def load_state(self, state: dict[str, np.ndarray], names: Sequence[str] | None = None) -> None:
        """Overwrite parameter values in place from ``state``."""
        for name in names if names is not None else state:
            p = self._params[name]
            value = as_f64(state[name])
            if value.shape != p.data.shape:
                raise ShapeMismatchError("load_state", value.shape, p.data.shape, detail=name)
            p.data[...] = value
