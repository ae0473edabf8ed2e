"""Synthetic bag-labeled image data with planted rare witnesses.

A bag models one slide: a few dozen small RGB patches of smooth background
texture.  Positive bags additionally contain a small number of witness
patches (at least one) carrying a localized bright blob whose amplitude is
``signal_strength``; a bag's label is 1 exactly when it has a witness.  All
randomness is drawn from generators derived per bag, so generating bags in
any order, or in parallel, yields bit-identical data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.serialize import load_arrays, save_arrays
from .errors import ConfigError, DataError
from .rng import derive_rng

N_TEXTURE_MODES = 4


@dataclass(frozen=True)
class SyntheticConfig:
    n_bags: int = 300
    patches_min: int = 30
    patches_max: int = 60
    patch_size: int = 32
    witness_rate: float = 0.08
    signal_strength: float = 0.5
    noise_std: float = 0.06
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags < 1:
            raise ConfigError("n_bags must be positive")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError(
                f"patch count range [{self.patches_min}, {self.patches_max}] invalid")
        if self.patch_size < 4:
            raise ConfigError("patch_size must be at least 4")
        if not 0.0 < self.witness_rate < 1.0:
            raise ConfigError("witness_rate must lie in (0, 1)")
        if not 0.0 <= self.signal_strength <= 1.0:
            # 0 is the null-signal control: witnesses become indistinguishable
            raise ConfigError("signal_strength must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_bags": self.n_bags, "patches_min": self.patches_min,
            "patches_max": self.patches_max, "patch_size": self.patch_size,
            "witness_rate": self.witness_rate, "signal_strength": self.signal_strength,
            "noise_std": self.noise_std, "seed": self.seed,
        }


@dataclass
class WsiBag:
    bag_id: int
    patches: np.ndarray          # (M, 3, H, W) in [0, 1]
    label: int
    instance_labels: np.ndarray  # diagnostics only; never consumed by training

    @property
    def n_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def n_witnesses(self) -> int:
        return int(self.instance_labels.sum())


def witness_count(witness_rate: float, n_patches: int) -> int:
    """Half-up rounding of rate * count, floored at one witness."""
    return max(1, int(np.floor(witness_rate * n_patches + 0.5)))


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a small square grid to (size, size) by bilinear interpolation."""
    g = grid.shape[0]
    pos = np.linspace(0.0, g - 1.0, size)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, g - 1)
    frac = pos - lo
    rows = grid[lo][:, lo] * np.outer(1 - frac, 1 - frac) \
        + grid[lo][:, hi] * np.outer(1 - frac, frac) \
        + grid[hi][:, lo] * np.outer(frac, 1 - frac) \
        + grid[hi][:, hi] * np.outer(frac, frac)
    return rows


def _texture_modes(seed: int) -> list[dict]:
    rng = derive_rng(seed, "modes")
    modes = []
    for _ in range(N_TEXTURE_MODES):
        modes.append({
            "base": rng.uniform(0.3, 0.55, size=3),
            "contrast": float(rng.uniform(0.08, 0.2)),
            "grid": int(rng.integers(3, 6)),
        })
    return modes


def _background_patch(rng: np.random.Generator, size: int, mode: dict,
                      noise_std: float) -> np.ndarray:
    coarse = _bilinear_upsample(rng.normal(size=(mode["grid"], mode["grid"])), size)
    patch = mode["base"][:, None, None] + mode["contrast"] * coarse[None, :, :]
    if noise_std > 0:
        patch = patch + noise_std * rng.normal(size=(3, size, size))
    return np.clip(patch, 0.0, 1.0)


def _plant_blob(patch: np.ndarray, rng: np.random.Generator, amplitude: float) -> None:
    """Add a localized Gaussian bump, brightest in the red channel, in place."""
    size = patch.shape[1]
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    sigma = size / 8.0
    yy, xx = np.mgrid[0:size, 0:size]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
    color = np.array([1.0, 0.55, 0.25])
    patch += amplitude * color[:, None, None] * bump[None, :, :]
    np.clip(patch, 0.0, 1.0, out=patch)


def generate_bag(config: SyntheticConfig, bag_id: int, modes: list[dict]) -> WsiBag:
    rng = derive_rng(config.seed, "bag", bag_id)
    label = bag_id % 2
    m = int(rng.integers(config.patches_min, config.patches_max + 1))
    instance_labels = np.zeros(m, dtype=np.int64)
    if label:
        n_wit = witness_count(config.witness_rate, m)
        instance_labels[rng.choice(m, size=n_wit, replace=False)] = 1
    patches = np.empty((m, 3, config.patch_size, config.patch_size))
    for j in range(m):
        mode = modes[int(rng.integers(N_TEXTURE_MODES))]
        patches[j] = _background_patch(rng, config.patch_size, mode, config.noise_std)
        if instance_labels[j]:
            _plant_blob(patches[j], rng, config.signal_strength)
    return WsiBag(bag_id, patches, label, instance_labels)


def generate_dataset(config: SyntheticConfig) -> list[WsiBag]:
    """All bags for a config; alternating labels give an exact 50/50 balance."""
    config.validate()
    modes = _texture_modes(config.seed)
    return [generate_bag(config, bag_id, modes) for bag_id in range(config.n_bags)]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    ratios: tuple[float, float, float]

    def all_ids(self) -> tuple[int, ...]:
        return self.train + self.val + self.test


def split_dataset(bags: list[WsiBag], ratios: tuple[float, float, float], seed: int,
                  allow_empty_test: bool = False) -> DatasetSplit:
    """Deterministic bag-level partition into train/val/test.

    Every non-empty split must contain both classes; otherwise the caller is
    told to pick a different seed.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(bags)
    if n < 2:
        raise DataError("need at least 2 bags to split")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if n_test == 0 and not allow_empty_test:
        raise DataError("test split is empty; pass allow_empty_test=True to permit")

    ids = np.array([b.bag_id for b in bags])
    label_of = {b.bag_id: b.label for b in bags}
    perm = derive_rng(seed, "split").permutation(n)
    shuffled = ids[perm]
    parts = (tuple(int(i) for i in shuffled[:n_train]),
             tuple(int(i) for i in shuffled[n_train:n_train + n_val]),
             tuple(int(i) for i in shuffled[n_train + n_val:]))
    for name, part in zip(("train", "val", "test"), parts):
        if not part:
            continue
        classes = {label_of[i] for i in part}
        if classes != {0, 1}:
            raise DataError(
                f"{name} split is single-class; resample with a different split seed")
    return DatasetSplit(*parts, ratios=tuple(float(r) for r in ratios))


def save_dataset(directory, bags: list[WsiBag], config: SyntheticConfig) -> None:
    """dataset.bin (patch tensors) + manifest.csv + dataset_config.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for bag in bags:
        arrays[f"bag.{bag.bag_id:05d}.patches"] = bag.patches
        arrays[f"bag.{bag.bag_id:05d}.instance_labels"] = bag.instance_labels.astype(np.float64)
    save_arrays(directory / "dataset.bin", arrays)
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "n_patches", "label", "n_witnesses"])
        for bag in bags:
            writer.writerow([bag.bag_id, bag.n_patches, bag.label, bag.n_witnesses])
    (directory / "dataset_config.json").write_text(
        json.dumps(config.to_dict(), indent=2) + "\n")


def load_dataset(directory) -> tuple[list[WsiBag], SyntheticConfig]:
    directory = Path(directory)
    for required in ("dataset.bin", "manifest.csv", "dataset_config.json"):
        if not (directory / required).exists():
            raise DataError(f"{directory} is not a dataset directory (missing {required})")
    config = SyntheticConfig(**json.loads((directory / "dataset_config.json").read_text()))
    arrays = load_arrays(directory / "dataset.bin")
    bags = []
    with open(directory / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            bag_id = int(row["bag_id"])
            patches = arrays[f"bag.{bag_id:05d}.patches"]
            instance_labels = arrays[f"bag.{bag_id:05d}.instance_labels"].astype(np.int64)
            bag = WsiBag(bag_id, patches, int(row["label"]), instance_labels)
            if bag.n_patches != int(row["n_patches"]) or bag.n_witnesses != int(row["n_witnesses"]):
                raise DataError(f"manifest disagrees with dataset.bin for bag {bag_id}")
            if bag.label != int(bag.n_witnesses > 0):
                raise DataError(f"bag {bag_id} label inconsistent with witnesses")
            bags.append(bag)
    return bags, config
