"""Four-stage training pipeline over a frozen convolutional backbone.

Stage 1 runs every patch through the frozen backbone once and caches the
feature vectors.  Stage 2 pretrains an attention scorer on the training
split and keeps each bag's top-K patches.  Stage 3 clusters the selected
training features into prototypes and assigns every selected patch to its
nearest one.  Stage 4 trains the chosen strategy's trainable parameters
end to end, one optimizer step per bag, and reports the test metrics of
the epoch with the best validation AUC.

Two optimizers share stage 4: Adam updates every trainable non-prompt
parameter, while prompts follow plain SGD under a per-epoch cosine
schedule, with their interior entries pinned to zero by the border mask.
Strategies that leave the convolution stack frozen and use neither
prompts nor adapters never need a backbone pass in stage 4; they train
the head directly on the cached stage-1 features.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamRegistry, Tensor
from .autodiff.serialize import array_checksum, registry_checksums, save_registry
from .backbone import Backbone, BackboneConfig, extract_features, init_backbone
from .data import WsiBag, split_dataset
from .errors import ConfigError, DataError, NonFiniteError
from .kmeans import Centroids, assign_many, kmeans_fit
from .metrics import MetricsRecord, evaluate
from .mil import MIL_HEAD_KINDS, MilHead, bag_forward, bag_loss, init_head
from .optim import Adam, SGDCosine
from .prompts import Assignment, PromptBank, build_prompted_bag
from .rng import derive_rng
from .sampling import SampledBag, pretrain_scorer, save_sampled, score_bag, select_topk

STRATEGIES = ("frozen_baseline", "pamt", "fully_tuning", "partial_last_layer", "bias_only")


@dataclass(frozen=True)
class Components:
    """Pipeline component toggles; all three are on for the full method."""

    rps: bool = True
    pvp: bool = True
    amt: bool = True

    def to_dict(self) -> dict:
        return {"rps": self.rps, "pvp": self.pvp, "amt": self.amt}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    adam_lr: float = 1e-4
    adam_weight_decay: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    prompt_sgd_lr0: float = 40.0
    top_k: int | None = 64
    n_clusters: int = 4
    pad_size: int = 2
    seed: int = 0
    train_fraction: float = 1.0
    mil_head: str = "gated_attention"
    attention_dim: int = 128
    rps_epochs: int = 25
    rps_lr: float = 1e-3
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    split_ratios: tuple[float, float, float] = (0.65, 0.10, 0.25)
    backbone: BackboneConfig = BackboneConfig()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.adam_lr <= 0 or self.rps_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.prompt_sgd_lr0 < 0:
            raise ConfigError("prompt_sgd_lr0 must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be at least 1 (or None to keep all patches)")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be at least 1")
        if self.pad_size < 1:
            raise ConfigError("pad_size must be at least 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction {self.train_fraction} outside (0, 1]")
        if self.mil_head not in MIL_HEAD_KINDS:
            raise ConfigError(f"unknown MIL head {self.mil_head!r}, expected {MIL_HEAD_KINDS}")
        if self.rps_epochs < 1:
            raise ConfigError("rps_epochs must be at least 1")
        self.backbone.validate()

    def to_dict(self) -> dict:
        out = {
            "epochs": self.epochs, "adam_lr": self.adam_lr,
            "adam_weight_decay": self.adam_weight_decay,
            "adam_betas": list(self.adam_betas), "adam_eps": self.adam_eps,
            "prompt_sgd_lr0": self.prompt_sgd_lr0, "top_k": self.top_k,
            "n_clusters": self.n_clusters, "pad_size": self.pad_size,
            "seed": self.seed, "train_fraction": self.train_fraction,
            "mil_head": self.mil_head, "attention_dim": self.attention_dim,
            "rps_epochs": self.rps_epochs, "rps_lr": self.rps_lr,
            "kmeans_max_iter": self.kmeans_max_iter, "kmeans_tol": self.kmeans_tol,
            "split_ratios": list(self.split_ratios),
            "backbone": {
                "block_channels": list(self.backbone.block_channels),
                "input_size": self.backbone.input_size,
                "input_channels": self.backbone.input_channels,
                "adapter_positions": None if self.backbone.adapter_positions is None
                else list(self.backbone.adapter_positions),
                "adapter_bottleneck_ratio": self.backbone.adapter_bottleneck_ratio,
            },
        }
        return out


def resolve_components(strategy: str, components: Components | None) -> Components:
    """Effective toggles for a strategy.

    Only the full method carries prompts and adapters; every other strategy
    runs without them, so their pvp/amt toggles are forced off.  The rps
    toggle applies to all strategies.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    if components is None:
        components = Components()
    if strategy != "pamt":
        return Components(rps=components.rps, pvp=False, amt=False)
    return components


def _strategy_trains(strategy: str, name: str, n_blocks: int) -> bool:
    if name.startswith("mil."):
        return True
    if strategy == "frozen_baseline":
        return False
    if strategy == "pamt":
        return name.startswith(("adapter.", "pvp.prompt."))
    if strategy == "fully_tuning":
        return True
    if strategy == "partial_last_layer":
        return name.startswith(f"backbone.{n_blocks - 1}.")
    if strategy == "bias_only":
        return name.endswith(".bias")
    raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")


def apply_strategy_mask(registry: ParamRegistry, strategy: str,
                        n_blocks: int) -> tuple[str, ...]:
    """Set every parameter's trainable flag; returns the trainable names."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    names = []
    for p in registry:
        wanted = _strategy_trains(strategy, p.name, n_blocks)
        p.set_trainable(wanted)
        if wanted:
            names.append(p.name)
    return tuple(names)


@dataclass
class PipelineModel:
    """Stage-4 parameters: backbone (with optional adapters), prompts, head."""

    registry: ParamRegistry
    backbone: Backbone
    bank: PromptBank | None
    head: MilHead
    trainable_names: tuple[str, ...]

    @property
    def n_trainable(self) -> int:
        return self.registry.n_scalars(trainable_only=True)


def build_model(config: TrainConfig, strategy: str, components: Components,
                patch_size: int) -> PipelineModel:
    """Registry with backbone, optional adapters/prompts, and MIL head.

    Registration order (backbone, adapters, prompts, head) fixes snapshot
    layout and optimizer sweep order.
    """
    registry = ParamRegistry()
    backbone = init_backbone(config.backbone, config.seed, registry,
                             with_adapters=components.amt)
    bank = None
    if components.pvp:
        bank = PromptBank(registry, config.n_clusters, patch_size, config.pad_size,
                          channels=config.backbone.input_channels)
    head = init_head(registry, backbone.feature_dim, seed=config.seed,
                     kind=config.mil_head, attention_dim=config.attention_dim)
    names = apply_strategy_mask(registry, strategy, config.backbone.n_blocks)
    return PipelineModel(registry, backbone, bank, head, names)


def dataset_digest(bags: list[WsiBag]) -> str:
    """Content hash of bag ids, labels, and patch pixels."""
    h = hashlib.sha256()
    for bag in bags:
        h.update(f"{bag.bag_id}:{bag.label}:".encode())
        h.update(np.ascontiguousarray(bag.patches, dtype=np.float64).tobytes())
    return h.hexdigest()


def _reduce_train(train_ids: tuple[int, ...], labels_by_bag: dict[int, int],
                  fraction: float, seed: int) -> tuple[int, ...]:
    """Stratified deterministic subsample of the training split."""
    if fraction >= 1.0:
        return train_ids
    keep: list[int] = []
    for label in (0, 1):
        ids = [i for i in train_ids if labels_by_bag[i] == label]
        if not ids:
            raise DataError(f"training split lost class {label} before subsampling")
        k = max(1, int(round(fraction * len(ids))))
        order = derive_rng(seed, "fraction", label).permutation(len(ids))
        keep.extend(ids[j] for j in order[:k])
    return tuple(sorted(keep))


def _extract_all_features(bags: list[WsiBag], config: TrainConfig) -> dict[int, np.ndarray]:
    """Stage 1: (M, D) frozen features per bag, adapters and prompts excluded."""
    backbone = init_backbone(config.backbone, config.seed)
    return {bag.bag_id: extract_features(bag.patches, backbone, use_adapters=False).data
            for bag in bags}


def _scorer_checksum(registry: ParamRegistry) -> str:
    return array_checksum(np.concatenate([p.data.ravel() for p in registry]))


def _select_patches(
        features: dict[int, np.ndarray], labels_by_bag: dict[int, int],
        train_ids: tuple[int, ...], config: TrainConfig, rps_on: bool,
) -> tuple[dict[int, SampledBag], tuple[MilHead, ParamRegistry] | None, str | None]:
    """Stage 2: per-bag top-K selection; without rps every patch is kept."""
    sampled: dict[int, SampledBag] = {}
    if not rps_on or config.top_k is None:
        for bag_id, feats in features.items():
            m = feats.shape[0]
            sampled[bag_id] = SampledBag(bag_id, np.arange(m), np.zeros(m),
                                         labels_by_bag[bag_id])
        return sampled, None, None
    head, registry, _ = pretrain_scorer(
        [features[i] for i in train_ids], [labels_by_bag[i] for i in train_ids],
        seed=config.seed, epochs=config.rps_epochs, lr=config.rps_lr,
        attention_dim=config.attention_dim)
    for bag_id, feats in features.items():
        scores = score_bag(feats, head)
        idx = select_topk(scores, config.top_k)
        sampled[bag_id] = SampledBag(bag_id, idx, scores[idx], labels_by_bag[bag_id])
    return sampled, (head, registry), _scorer_checksum(registry)


def _build_prototypes(features: dict[int, np.ndarray], sampled: dict[int, SampledBag],
                      train_ids: tuple[int, ...],
                      config: TrainConfig) -> tuple[Centroids, Assignment]:
    """Stage 3: prototypes from training features, assignment for every bag."""
    train_selected = np.concatenate(
        [features[i][sampled[i].selected_indices] for i in train_ids])
    centroids, _, _ = kmeans_fit(train_selected, config.n_clusters, config.seed,
                                 max_iter=config.kmeans_max_iter, tol=config.kmeans_tol)
    assignment = Assignment()
    for bag_id, bag in sampled.items():
        labels, dists = assign_many(features[bag_id][bag.selected_indices], centroids)
        for idx, cluster, dist in zip(bag.selected_indices, labels, dists):
            assignment.put(bag_id, int(idx), int(cluster), float(dist))
    return centroids, assignment


def _bag_logit(model: PipelineModel, components: Components, fast: bool,
               patches: np.ndarray, frozen_feats: np.ndarray, bag: SampledBag,
               assignment: Assignment | None) -> tuple[Tensor, Tensor]:
    """(logit, probability) for one bag under the configured forward path."""
    if fast:
        feats = Tensor(frozen_feats[bag.selected_indices].copy())
    else:
        if components.pvp:
            stack = build_prompted_bag(bag, assignment, model.bank, patches)
        else:
            stack = Tensor(patches[bag.selected_indices])
        feats = extract_features(stack, model.backbone, use_adapters=components.amt)
    return bag_forward(feats, model.head)


@dataclass
class FittedPipeline:
    """Everything needed to score unseen bags after stage 4."""

    config: TrainConfig
    strategy: str
    components: Components
    model: PipelineModel
    scorer: tuple[MilHead, ParamRegistry] | None
    centroids: Centroids | None
    fast_forward: bool
    best_epoch: int
    val: MetricsRecord
    test: MetricsRecord | None
    history: list[tuple[int, float, float]]
    changed_params: tuple[str, ...]
    scorer_checksum: str | None

    def predict_bag(self, patches: np.ndarray) -> float:
        """Positive-bag probability for a raw (M, C, H, W) patch stack."""
        frozen = init_backbone(self.config.backbone, self.config.seed)
        feats = extract_features(patches, frozen, use_adapters=False).data
        m = feats.shape[0]
        if self.scorer is not None:
            scores = score_bag(feats, self.scorer[0])
            idx = select_topk(scores, self.config.top_k)
        else:
            scores, idx = np.zeros(m), np.arange(m)
        bag = SampledBag(0, idx, scores[idx], 0)
        assignment = None
        if self.components.pvp:
            labels, dists = assign_many(feats[idx], self.centroids)
            assignment = Assignment()
            for i, cluster, dist in zip(idx, labels, dists):
                assignment.put(0, int(i), int(cluster), float(dist))
        _, prob = _bag_logit(self.model, self.components, self.fast_forward,
                             np.asarray(patches, dtype=np.float64), feats, bag, assignment)
        return prob.item()


@dataclass
class RunResult:
    """Outcome of one pipeline run, ready for aggregation and persistence."""

    strategy: str
    seed: int
    train_fraction: float
    components: Components
    n_trainable_params: int
    best_epoch: int
    val: MetricsRecord
    test: MetricsRecord
    history: list[tuple[int, float, float]]
    changed_params: tuple[str, ...]
    trainable_names: tuple[str, ...]
    scorer_checksum: str | None
    run_dir: Path | None = None

    def payload(self) -> dict:
        """The metrics.json content; also what reporting consumes."""
        return {
            "strategy": self.strategy, "seed": self.seed,
            "train_fraction": self.train_fraction,
            "components": self.components.to_dict(),
            "n_trainable_params": self.n_trainable_params,
            "best_epoch": self.best_epoch,
            "val": self.val.to_dict(), "test": self.test.to_dict(),
        }


def _cached(cache: dict | None, key: tuple, compute):
    if cache is None:
        return compute()
    if key not in cache:
        cache[key] = compute()
    return cache[key]


def fit_pipeline(bags: list[WsiBag], train_ids: tuple[int, ...], val_ids: tuple[int, ...],
                 config: TrainConfig, strategy: str,
                 components: Components | None = None,
                 stage_cache: dict | None = None,
                 test_ids: tuple[int, ...] = ()) -> tuple[FittedPipeline, dict, Assignment | None]:
    """Run stages 1 through 4; returns the fitted model plus per-bag selections.

    ``stage_cache`` may be shared between runs on the same bag list; entries
    are keyed by the config fields each stage depends on, so runs that differ
    only in strategy or later-stage toggles reuse the earlier stages.
    """
    config.validate()
    components = resolve_components(strategy, components)
    if not train_ids or not val_ids:
        raise DataError("training and validation splits must be non-empty")
    bags_by_id = {bag.bag_id: bag for bag in bags}
    labels_by_bag = {bag.bag_id: bag.label for bag in bags}
    sizes = {bag.patches.shape[-2:] for bag in bags}
    if len(sizes) != 1 or len({s[0] for s in sizes} | {s[1] for s in sizes}) != 1:
        raise DataError(f"bags must share one square patch size, got {sorted(sizes)}")
    patch_size = sizes.pop()[0]
    if {labels_by_bag[i] for i in train_ids} != {0, 1}:
        raise DataError("training split must contain both classes")

    features = _cached(stage_cache, ("features", config.seed, config.backbone),
                       lambda: _extract_all_features(bags, config))
    sampled, scorer, scorer_checksum = _cached(
        stage_cache,
        ("selection", config.seed, train_ids, components.rps, config.top_k,
         config.rps_epochs, config.rps_lr),
        lambda: _select_patches(features, labels_by_bag, train_ids, config, components.rps))
    centroids, assignment = (None, None)
    if components.pvp:
        centroids, assignment = _cached(
            stage_cache,
            ("prototypes", config.seed, train_ids, components.rps, config.top_k,
             config.n_clusters),
            lambda: _build_prototypes(features, sampled, train_ids, config))

    model = build_model(config, strategy, components, patch_size)
    initial = registry_checksums(model.registry)
    fast = (not components.pvp and not components.amt
            and not any(n.startswith("backbone.") for n in model.trainable_names))

    adam_params = [p for p in model.registry.trainable()
                   if not p.name.startswith("pvp.prompt.")]
    adam = Adam(adam_params, lr=config.adam_lr, betas=config.adam_betas,
                eps=config.adam_eps, weight_decay=config.adam_weight_decay)
    sgd = None
    prompt_params = [p for p in model.registry.trainable()
                     if p.name.startswith("pvp.prompt.")]
    if prompt_params:
        sgd = SGDCosine(prompt_params, lr0=config.prompt_sgd_lr0,
                        total_epochs=config.epochs, masks=model.bank.masks())

    def split_metrics(ids: tuple[int, ...]) -> MetricsRecord:
        probs, labels = [], []
        for bag_id in ids:
            _, prob = _bag_logit(model, components, fast, bags_by_id[bag_id].patches,
                                 features[bag_id], sampled[bag_id], assignment)
            probs.append(prob.item())
            labels.append(labels_by_bag[bag_id])
        return evaluate(np.array(probs), np.array(labels))

    history: list[tuple[int, float, float]] = []
    best: tuple[float, int, dict] | None = None
    for epoch in range(config.epochs):
        if sgd is not None:
            sgd.set_epoch(epoch)
        order = derive_rng(config.seed, "train-shuffle", epoch).permutation(len(train_ids))
        total = 0.0
        for step, pos in enumerate(order):
            bag_id = train_ids[int(pos)]
            model.registry.zero_grad()
            try:
                logit, _ = _bag_logit(model, components, fast, bags_by_id[bag_id].patches,
                                      features[bag_id], sampled[bag_id], assignment)
                loss = bag_loss(logit, labels_by_bag[bag_id])
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteError(
                    "training", detail=f"aborted at epoch {epoch}, step {step}, "
                    f"bag {bag_id}: {exc}") from exc
            adam.step()
            if sgd is not None:
                sgd.step()
            total += loss.item()
        val = split_metrics(val_ids)
        history.append((epoch, total / len(train_ids), val.auc))
        if best is None or val.auc > best[0]:
            best = (val.auc, epoch, model.registry.state())

    model.registry.load_state(best[2])
    final = registry_checksums(model.registry)
    changed = tuple(n for n in model.registry.names() if initial[n] != final[n])
    test = split_metrics(test_ids) if test_ids else None
    fitted = FittedPipeline(config, strategy, components, model, scorer, centroids,
                            fast, best[1], split_metrics(val_ids), test, history,
                            changed, scorer_checksum)
    return fitted, sampled, assignment


def run_pipeline(bags: list[WsiBag], config: TrainConfig, strategy: str,
                 components: Components | None = None, out_dir=None,
                 stage_cache: dict | None = None) -> RunResult:
    """Split the bags, fit the pipeline, evaluate on test, optionally persist.

    With ``out_dir`` set, the run directory receives manifest.json (resolved
    config, input digest, split, timestamps), metrics.json, loss_trace.csv,
    the best-epoch parameter snapshot, and the stage-2/3 artifacts.  All
    files except the manifest are byte-identical across reruns of the same
    config and seed.
    """
    config.validate()
    components = resolve_components(strategy, components)
    labels_by_bag = {bag.bag_id: bag.label for bag in bags}
    split = split_dataset(bags, config.split_ratios, config.seed)
    train_ids = _reduce_train(split.train, labels_by_bag, config.train_fraction,
                              config.seed)
    fitted, sampled, assignment = fit_pipeline(
        bags, train_ids, split.val, config, strategy, components,
        stage_cache=stage_cache, test_ids=split.test)
    result = RunResult(
        strategy=strategy, seed=config.seed, train_fraction=config.train_fraction,
        components=fitted.components, n_trainable_params=fitted.model.n_trainable,
        best_epoch=fitted.best_epoch, val=fitted.val, test=fitted.test,
        history=fitted.history, changed_params=fitted.changed_params,
        trainable_names=fitted.model.trainable_names,
        scorer_checksum=fitted.scorer_checksum)
    if out_dir is not None:
        result.run_dir = save_run(result, fitted, sampled, assignment, bags,
                                  split.train, train_ids, split, out_dir)
    return result


def cluster_stage(bags: list[WsiBag], config: TrainConfig):
    """Feature extraction, patch selection, and prototypes only; no training.

    Uses the same split and staging as ``fit_pipeline`` so the exported
    clusters match what a full run would train against.
    """
    config.validate()
    labels_by_bag = {bag.bag_id: bag.label for bag in bags}
    split = split_dataset(bags, config.split_ratios, config.seed)
    features = _extract_all_features(bags, config)
    sampled, _, _ = _select_patches(features, labels_by_bag, split.train, config, True)
    centroids, assignment = _build_prototypes(features, sampled, split.train, config)
    return split, sampled, centroids, assignment


def save_run(result: RunResult, fitted: FittedPipeline, sampled: dict[int, SampledBag],
             assignment: Assignment | None, bags: list[WsiBag],
             full_train: tuple[int, ...], used_train: tuple[int, ...],
             split, out_dir) -> Path:
    """Write the run directory; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "strategy": result.strategy,
        "components": result.components.to_dict(),
        "config": fitted.config.to_dict(),
        "dataset": {"digest": dataset_digest(bags), "n_bags": len(bags)},
        "split": {"train": list(full_train), "train_used": list(used_train),
                  "val": list(split.val), "test": list(split.test)},
        "n_trainable_params": result.n_trainable_params,
        "trainable": list(result.trainable_names),
        "changed": list(result.changed_params),
        "scorer_checksum": result.scorer_checksum,
        "best_epoch": result.best_epoch,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "metrics.json").write_text(
        json.dumps(result.payload(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "loss_trace.csv", "w") as fh:
        fh.write("epoch,train_loss,val_auc\n")
        for epoch, loss, val_auc in result.history:
            fh.write(f"{epoch},{loss!r},{val_auc!r}\n")
    save_registry(out_dir / "snapshot.bin", fitted.model.registry)
    if result.scorer_checksum is not None:
        ordered = [sampled[bag_id] for bag_id in sorted(sampled)]
        save_sampled(out_dir, ordered, fitted.config.top_k, result.scorer_checksum)
    if assignment is not None:
        assignment.save(out_dir / "assignment.csv")
    return out_dir
