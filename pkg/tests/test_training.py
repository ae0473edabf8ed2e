import json
from pathlib import Path

import numpy as np
import pytest

from pamt.autodiff import load_registry, registry_checksums
from pamt.data import SyntheticConfig, generate_dataset, split_dataset
from pamt.errors import ConfigError, DataError, NonFiniteError
from pamt.training import (
    Components,
    STRATEGIES,
    TrainConfig,
    _bag_logit,
    _reduce_train,
    build_model,
    cluster_stage,
    fit_pipeline,
    resolve_components,
    run_pipeline,
)

TINY_DATA = SyntheticConfig(n_bags=40, patches_min=4, patches_max=6,
                            patch_size=16, seed=2)
TINY_TRAIN = dict(epochs=2, top_k=3, n_clusters=2, rps_epochs=2,
                  attention_dim=8, pad_size=1, seed=2)


@pytest.fixture(scope="module")
def bags():
    return generate_dataset(TINY_DATA)


@pytest.fixture(scope="module")
def split(bags):
    return split_dataset(bags, (0.65, 0.10, 0.25), 2)


class TestComponents:
    def test_non_pamt_strategies_drop_prompts_and_adapters(self):
        for strategy in STRATEGIES:
            if strategy == "pamt":
                continue
            resolved = resolve_components(strategy, Components(True, True, True))
            assert (resolved.pvp, resolved.amt) == (False, False)
            assert resolved.rps is True

    def test_pamt_keeps_requested_toggles(self):
        requested = Components(rps=False, pvp=True, amt=False)
        assert resolve_components("pamt", requested) == requested

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="bitfit"):
            resolve_components("bitfit", None)

    def test_default_is_all_on(self):
        assert resolve_components("pamt", None) == Components(True, True, True)


class TestConfigValidation:
    @pytest.mark.parametrize("overrides", [
        dict(epochs=0), dict(adam_lr=0.0), dict(prompt_sgd_lr0=-1.0),
        dict(top_k=0), dict(n_clusters=0), dict(pad_size=0),
        dict(train_fraction=0.0), dict(train_fraction=1.5),
        dict(mil_head="softmax"), dict(rps_epochs=0),
    ])
    def test_bad_values_rejected(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides).validate()

    def test_to_dict_round_trips_values(self):
        config = TrainConfig(**TINY_TRAIN)
        d = config.to_dict()
        assert d["top_k"] == 3 and d["seed"] == 2
        assert d["backbone"]["block_channels"] == [16, 32, 64]


class TestStrategyMasks:
    def test_trainable_names_per_strategy(self):
        for strategy, expect in [
            ("frozen_baseline", lambda n: n.startswith("mil.")),
            ("fully_tuning", lambda n: True),
            ("partial_last_layer",
             lambda n: n.startswith(("mil.", "backbone.2."))),
            ("bias_only", lambda n: n.startswith("mil.") or n.endswith(".bias")),
        ]:
            model = build_model(TrainConfig(**TINY_TRAIN), strategy,
                                resolve_components(strategy, None), 16)
            names = set(model.trainable_names)
            assert names == {p.name for p in model.registry if expect(p.name)}, strategy

    def test_pamt_trains_adapters_prompts_head_only(self):
        model = build_model(TrainConfig(**TINY_TRAIN), "pamt", Components(), 16)
        names = set(model.trainable_names)
        assert all(n.startswith(("adapter.", "pvp.prompt.", "mil.")) for n in names)
        assert any(n.startswith("adapter.") for n in names)
        assert any(n.startswith("pvp.prompt.") for n in names)
        assert not any(n.startswith("backbone.") for n in names)


class TestReduceTrain:
    LABELS = {i: i % 2 for i in range(20)}
    IDS = tuple(range(20))

    def test_full_fraction_is_identity(self):
        assert _reduce_train(self.IDS, self.LABELS, 1.0, 0) == self.IDS

    def test_half_is_stratified(self):
        kept = _reduce_train(self.IDS, self.LABELS, 0.5, 0)
        assert len(kept) == 10
        assert sum(self.LABELS[i] for i in kept) == 5

    def test_deterministic(self):
        a = _reduce_train(self.IDS, self.LABELS, 0.3, 7)
        b = _reduce_train(self.IDS, self.LABELS, 0.3, 7)
        assert a == b

    def test_keeps_at_least_one_per_class(self):
        kept = _reduce_train(self.IDS, self.LABELS, 0.01, 0)
        labels = {self.LABELS[i] for i in kept}
        assert labels == {0, 1}

    def test_single_class_split_rejected(self):
        with pytest.raises(DataError, match="lost class"):
            _reduce_train((0, 2, 4), self.LABELS, 0.5, 0)


class TestFitPipeline:
    def test_changed_subset_of_trainable(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        fitted, _, _ = fit_pipeline(bags, split.train, split.val, config,
                                    "frozen_baseline")
        assert set(fitted.changed_params) <= set(fitted.model.trainable_names)

    def test_conv_weights_frozen_under_pamt(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        fitted, _, _ = fit_pipeline(bags, split.train, split.val, config, "pamt")
        assert not any(n.startswith("backbone.") for n in fitted.changed_params)

    def test_stage_cache_shared_across_strategies(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        cache: dict = {}
        _, sampled_a, _ = fit_pipeline(bags, split.train, split.val, config,
                                       "frozen_baseline", stage_cache=cache)
        n_keys = len(cache)
        _, sampled_b, _ = fit_pipeline(bags, split.train, split.val, config,
                                       "pamt", stage_cache=cache)
        # pamt adds only the prototype stage; features and selection are reused
        assert len(cache) == n_keys + 1
        assert sampled_a is sampled_b

    def test_fast_and_conv_paths_agree_for_frozen(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        components = resolve_components("frozen_baseline", None)
        fitted, sampled, _ = fit_pipeline(bags, split.train, split.val, config,
                                          "frozen_baseline")
        bag = bags[split.test[0]]
        from pamt.training import _extract_all_features
        feats = _extract_all_features(bags, config)
        logit_fast, _ = _bag_logit(fitted.model, components, True, bag.patches,
                                   feats[bag.bag_id], sampled[bag.bag_id], None)
        logit_conv, _ = _bag_logit(fitted.model, components, False, bag.patches,
                                   feats[bag.bag_id], sampled[bag.bag_id], None)
        assert abs(logit_fast.item() - logit_conv.item()) < 1e-9

    def test_empty_split_rejected(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        with pytest.raises(DataError, match="non-empty"):
            fit_pipeline(bags, (), split.val, config, "pamt")

    def test_single_class_train_rejected(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        even = tuple(i for i in split.train if i % 2 == 0)
        with pytest.raises(DataError, match="both classes"):
            fit_pipeline(bags, even, split.val, config, "pamt")

    def test_mixed_patch_sizes_rejected(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        broken = list(bags)
        small = generate_dataset(SyntheticConfig(
            n_bags=2, patches_min=3, patches_max=3, patch_size=8, seed=5))
        broken[0] = small[0]
        with pytest.raises(DataError, match="one square patch size"):
            fit_pipeline(broken, split.train, split.val, config, "pamt")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_epoch_step_bag(self, bags, split):
        # Adam steps scale with lr, so a pathological lr drives the conv
        # weights far enough that the block products overflow float64
        config = TrainConfig(**dict(TINY_TRAIN, adam_lr=1e130, epochs=3))
        with pytest.raises(NonFiniteError, match=r"epoch \d+, step \d+, bag \d+"):
            fit_pipeline(bags, split.train, split.val, config, "fully_tuning")

    def test_best_epoch_within_range(self, bags, split):
        config = TrainConfig(**TINY_TRAIN)
        fitted, _, _ = fit_pipeline(bags, split.train, split.val, config,
                                    "frozen_baseline")
        assert 0 <= fitted.best_epoch < config.epochs


@pytest.fixture(scope="module")
def run_dir(bags, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r0"
    config = TrainConfig(**TINY_TRAIN)
    result = run_pipeline(bags, config, "pamt", out_dir=out)
    return out, result


class TestRunPipeline:
    def test_payload_fields(self, run_dir):
        _, result = run_dir
        payload = result.payload()
        assert payload["strategy"] == "pamt"
        assert payload["components"] == {"rps": True, "pvp": True, "amt": True}
        assert set(payload["val"]) >= {"auc", "f1", "acc"}
        assert set(payload["test"]) >= {"auc", "f1", "acc"}
        assert payload["n_trainable_params"] > 0

    def test_run_directory_files(self, run_dir):
        out, _ = run_dir
        for name in ("manifest.json", "metrics.json", "loss_trace.csv",
                     "snapshot.bin", "selection.csv", "selection_manifest.json",
                     "assignment.csv"):
            assert (out / name).exists(), name

    def test_manifest_consistent_with_payload(self, run_dir):
        out, result = run_dir
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["strategy"] == "pamt"
        assert manifest["n_trainable_params"] == result.n_trainable_params
        assert manifest["best_epoch"] == result.best_epoch
        assert set(manifest["changed"]) == set(result.changed_params)

    def test_loss_trace_rows(self, run_dir):
        out, result = run_dir
        lines = (out / "loss_trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_auc"
        assert len(lines) == 1 + len(result.history)

    def test_snapshot_restores_over_fresh_init(self, run_dir, bags):
        # same config and seed reproduce the run's initial state, so after
        # loading, frozen params must match init and changed params must not
        out, result = run_dir
        config = TrainConfig(**TINY_TRAIN)
        model = build_model(config, "pamt", Components(), 16)
        init = registry_checksums(model.registry)
        load_registry(out / "snapshot.bin", model.registry)
        loaded = registry_checksums(model.registry)
        for name in model.registry.names():
            if name in result.changed_params:
                assert loaded[name] != init[name], name
            else:
                assert loaded[name] == init[name], name

    def test_payload_deterministic_across_runs(self, bags):
        config = TrainConfig(**TINY_TRAIN)
        a = run_pipeline(bags, config, "frozen_baseline")
        b = run_pipeline(bags, config, "frozen_baseline")
        assert a.payload() == b.payload()

    def test_train_fraction_reduces_used_split(self, bags, tmp_path):
        config = TrainConfig(**dict(TINY_TRAIN, train_fraction=0.5))
        out = tmp_path / "frac"
        run_pipeline(bags, config, "frozen_baseline", out_dir=out)
        manifest = json.loads((out / "manifest.json").read_text())
        used, full = manifest["split"]["train_used"], manifest["split"]["train"]
        assert set(used) < set(full)
        assert len(used) == pytest.approx(len(full) / 2, abs=1)


class TestClusterStage:
    def test_artifacts_cover_all_bags(self, bags):
        config = TrainConfig(**TINY_TRAIN)
        split, sampled, centroids, assignment = cluster_stage(bags, config)
        assert set(sampled) == {bag.bag_id for bag in bags}
        assert centroids.n_clusters == config.n_clusters
        n_selected = sum(len(s.selected_indices) for s in sampled.values())
        assert len(assignment) == n_selected
