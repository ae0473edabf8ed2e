"""Gradient verification against central finite differences."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import PamtError
from .tensor import ParamRegistry, Tensor


def forward_backward(graph_fn: Callable[..., tuple], inputs: Sequence[Tensor],
                     registry: ParamRegistry) -> tuple:
    """Run a graph builder and backpropagate its scalar loss.

    ``graph_fn(*inputs, registry)`` must return ``(outputs, loss)`` where
    ``loss`` is a scalar Tensor.  Gradients accumulate on trainable
    parameters; the caller zeroes them explicitly.
    """
    outputs, loss = graph_fn(*inputs, registry)
    loss.backward()
    return outputs, loss


def grad_check(loss_fn: Callable[[], Tensor], registry: ParamRegistry,
               epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from current parameter values and returns
    the scalar loss.  Every scalar entry of every trainable parameter is
    perturbed by +/- epsilon; frozen parameters are skipped entirely.  The
    relative error is |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise PamtError("epsilon must be positive")
    base = loss_fn().data.item()
    again = loss_fn().data.item()
    if base != again:
        raise PamtError(f"loss_fn is not deterministic: {base} != {again}")

    registry.zero_grad()
    loss_fn().backward()
    analytic = {p.name: p.grad.copy() for p in registry.trainable()}

    worst = 0.0
    for p in registry.trainable():
        flat_value = p.data.reshape(-1)
        flat_grad = analytic[p.name].reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + epsilon
            hi = loss_fn().data.item()
            flat_value[i] = orig - epsilon
            lo = loss_fn().data.item()
            flat_value[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = flat_grad[i]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
