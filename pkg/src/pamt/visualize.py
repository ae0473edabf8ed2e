"""Cluster gallery export: the patches closest to each prototype.

One grid row per cluster, holding the 8 member patches nearest to that
cluster's centroid (padded with black cells when a cluster has fewer
members).  Ordering is fully deterministic: ties on distance fall back to
(bag id, patch index), so the same inputs always produce the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .kmeans import Centroids
from .prompts import Assignment
from .sampling import SampledBag

PATCHES_PER_ROW = 8


def _to_uint8(patch: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0,1] -> (H, W, 3) uint8."""
    return np.clip(np.rint(patch * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def export_cluster_panel(centroids: Centroids, assignment: Assignment,
                         sampled: list[SampledBag], patches_by_bag: dict[int, np.ndarray],
                         out_path) -> Path:
    """Write the per-cluster nearest-patch grid as a PNG; returns the path."""
    if len(assignment) == 0:
        raise DataError("no assignments to visualize")
    members: dict[int, list[tuple[float, int, int]]] = {c: [] for c in range(centroids.n_clusters)}
    for bag in sampled:
        for idx in bag.selected_indices:
            key = (bag.bag_id, int(idx))
            cluster = assignment.cluster_of(*key)
            members[cluster].append((assignment.distances[key], bag.bag_id, int(idx)))

    sizes = {patches_by_bag[b.bag_id].shape[-2:] for b in sampled if b.bag_id in patches_by_bag}
    if len(sizes) != 1:
        raise DataError(f"patches must share one size, got {sorted(sizes)}")
    h, w = sizes.pop()

    grid = np.zeros((centroids.n_clusters * h, PATCHES_PER_ROW * w, 3), dtype=np.uint8)
    for cluster in range(centroids.n_clusters):
        nearest = sorted(members[cluster])[:PATCHES_PER_ROW]
        for col, (_, bag_id, idx) in enumerate(nearest):
            cell = _to_uint8(patches_by_bag[bag_id][idx])
            grid[cluster * h:(cluster + 1) * h, col * w:(col + 1) * w] = cell

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="RGB").save(out_path, format="PNG")
    return out_path
