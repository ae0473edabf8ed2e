"""Input validation helpers shared by the estimators and pipeline stages."""

from __future__ import annotations

import numpy as np

from .errors import DataError, EmptyBagError, ShapeMismatchError


def check_features_2d(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 (n_samples, n_features) matrix."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(name, arr.shape, detail="expected a 2-D feature matrix")
    if arr.size and not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_feature_vector(x, dim: int | None = None, name: str = "feature") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(name, arr.shape, detail="expected a 1-D vector")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeMismatchError(name, arr.shape, (dim,))
    return arr


def check_binary_labels(y, n: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ShapeMismatchError("labels", arr.shape, detail="expected a 1-D label vector")
    if n is not None and arr.shape[0] != n:
        raise ShapeMismatchError("labels", arr.shape, (n,))
    if not np.isin(arr, (0, 1)).all():
        raise DataError("labels must be binary 0/1")
    return arr.astype(np.int64)


def check_both_classes(y, context: str = "input") -> np.ndarray:
    arr = check_binary_labels(y)
    if arr.size == 0 or arr.min() == arr.max():
        raise DataError(f"{context} must contain both classes")
    return arr


def check_patch_stack(patches, name: str = "patches") -> np.ndarray:
    """Coerce a bag of patches to (M, C, H, W); all patches same size."""
    if isinstance(patches, (list, tuple)):
        if not patches:
            raise EmptyBagError(f"{name}: empty bag")
        shapes = {np.asarray(p).shape for p in patches}
        if len(shapes) != 1:
            raise DataError(f"{name}: inconsistent patch shapes {sorted(shapes)}")
        patches = np.stack([np.asarray(p, dtype=np.float64) for p in patches])
    try:
        arr = np.asarray(patches, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{name}: not a rectangular numeric stack ({exc})") from None
    if arr.ndim != 4:
        raise ShapeMismatchError(name, arr.shape, detail="expected (M, C, H, W)")
    if arr.shape[0] == 0:
        raise EmptyBagError(f"{name}: empty bag")
    return arr


def check_scores(scores, name: str = "scores") -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError(f"{name} must be a non-empty 1-D vector")
    return arr


def check_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise DataError(f"{type(estimator).__name__} is not fitted (missing {attribute})")
