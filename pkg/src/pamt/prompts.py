"""Trainable border prompts applied to patches by cluster membership.

Each cluster owns a full-size prompt parameter with a fixed binary border
mask of width S.  Applying a prompt zero-pads the patch by S and adds the
masked prompt, so the interior stays exactly the padded original no matter
what values training writes into the prompt tensor, and gradients reach
border entries only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter, ParamRegistry, Tensor, constant, functional as F
from .errors import ConfigError, DataError, ShapeMismatchError
from .sampling import SampledBag


def border_mask(height: int, width: int, pad: int) -> np.ndarray:
    """(H+2S, W+2S) mask: 1 on the S-wide border, 0 in the interior."""
    if height < 1 or width < 1:
        raise ConfigError("patch size must be positive")
    if pad < 1:
        raise ConfigError("padding size must be at least 1")
    mask = np.ones((height + 2 * pad, width + 2 * pad))
    mask[pad:-pad, pad:-pad] = 0.0
    return mask


@dataclass
class PromptBank:
    """One trainable prompt per cluster, all sharing a border mask."""

    registry: ParamRegistry
    n_clusters: int
    patch_size: int
    pad_size: int
    channels: int = 3
    prompts: list[Parameter] = field(default_factory=list)
    mask: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be positive")
        self.mask = border_mask(self.patch_size, self.patch_size, self.pad_size)
        if not self.prompts:
            side = self.patch_size + 2 * self.pad_size
            for c in range(self.n_clusters):
                self.prompts.append(self.registry.create(
                    f"pvp.prompt.{c}", np.zeros((self.channels, side, side))))

    @property
    def prompted_size(self) -> int:
        return self.patch_size + 2 * self.pad_size

    def prompt(self, cluster: int) -> Parameter:
        if not 0 <= cluster < self.n_clusters:
            raise ConfigError(f"cluster {cluster} outside [0, {self.n_clusters})")
        return self.prompts[cluster]

    def masks(self) -> list[np.ndarray]:
        """Per-prompt update masks, aligned with :attr:`prompts`."""
        return [np.broadcast_to(self.mask, p.shape).copy() for p in self.prompts]

    def enforce_interior_zero(self) -> None:
        for p in self.prompts:
            p.data *= self.mask


def apply_prompt(patch, prompt: Parameter, mask: np.ndarray, pad: int) -> Tensor:
    """Zero-pad a (C, H, W) patch by ``pad`` and add the masked prompt."""
    if not isinstance(patch, Tensor):
        patch = constant(np.asarray(patch, dtype=np.float64))
    if patch.ndim != 3:
        raise ShapeMismatchError("apply_prompt", patch.shape, detail="expects (C, H, W)")
    expected = (patch.shape[0], patch.shape[1] + 2 * pad, patch.shape[2] + 2 * pad)
    if prompt.shape != expected:
        raise ShapeMismatchError("apply_prompt", prompt.shape, expected,
                                 detail="prompt size must match padded patch")
    return F.add(F.pad2d(patch, pad), F.mul(constant(mask), prompt))


@dataclass
class Assignment:
    """Cluster membership (and centroid distance) per selected patch."""

    clusters: dict[tuple[int, int], int] = field(default_factory=dict)
    distances: dict[tuple[int, int], float] = field(default_factory=dict)

    def put(self, bag_id: int, patch_index: int, cluster: int, distance: float) -> None:
        self.clusters[(bag_id, patch_index)] = int(cluster)
        self.distances[(bag_id, patch_index)] = float(distance)

    def cluster_of(self, bag_id: int, patch_index: int) -> int:
        key = (int(bag_id), int(patch_index))
        if key not in self.clusters:
            raise DataError(f"no cluster assignment for bag {key[0]}, patch {key[1]}")
        return self.clusters[key]

    def __len__(self) -> int:
        return len(self.clusters)

    def save(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bag_id", "patch_index", "cluster", "distance"])
            for (bag_id, idx) in sorted(self.clusters):
                writer.writerow([bag_id, idx, self.clusters[(bag_id, idx)],
                                 repr(self.distances[(bag_id, idx)])])

    @classmethod
    def load(cls, path) -> "Assignment":
        out = cls()
        with open(Path(path), newline="") as fh:
            for row in csv.DictReader(fh):
                out.put(int(row["bag_id"]), int(row["patch_index"]),
                        int(row["cluster"]), float(row["distance"]))
        return out


def build_prompted_bag(sampled: SampledBag, assignment: Assignment,
                       bank: PromptBank, raw_patches) -> Tensor:
    """Prompted patches for one bag, stacked (K, C, H+2S, W+2S).

    Row order follows ``sampled.selected_indices``; row j carries the prompt
    of patch j's assigned cluster.
    """
    patches = np.asarray(raw_patches, dtype=np.float64)
    if patches.ndim != 4:
        raise ShapeMismatchError("build_prompted_bag", patches.shape,
                                 detail="expects (M, C, H, W)")
    clusters = [assignment.cluster_of(sampled.bag_id, idx)
                for idx in sampled.selected_indices]
    selected = constant(patches[sampled.selected_indices])
    padded = F.pad2d(selected, bank.pad_size)
    prompt_rows = F.stack([bank.prompt(c) for c in clusters], axis=0)
    mask = constant(bank.mask[None, :, :])  # broadcast over rows and channels
    return F.add(padded, F.mul(mask, prompt_rows))
