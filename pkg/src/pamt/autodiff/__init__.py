"""Minimal dense-tensor math with reverse-mode differentiation."""

from . import functional
from .checking import forward_backward, grad_check
from .serialize import (
    array_checksum,
    file_checksum,
    load_arrays,
    load_registry,
    registry_checksums,
    save_arrays,
    save_registry,
)
from .tensor import Parameter, ParamRegistry, Tensor, as_f64, constant

__all__ = [
    "Tensor",
    "Parameter",
    "ParamRegistry",
    "constant",
    "as_f64",
    "functional",
    "forward_backward",
    "grad_check",
    "save_arrays",
    "load_arrays",
    "save_registry",
    "load_registry",
    "array_checksum",
    "registry_checksums",
    "file_checksum",
]
