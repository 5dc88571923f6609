import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zerocost_i2v.adaptation import AdapterSpec, TrainableMask, build_adapted_model
from zerocost_i2v.data import SyntheticVideoSpec, VideoDataset, gen_synthetic
from zerocost_i2v.errors import ConfigError, TrainingDivergedError
from zerocost_i2v.training import (STRATEGIES, TrainConfig, compare_strategies, evaluate,
                                   format_table, metrics_jsonl, strategy_model, temporal_head_mask,
                                   train, warm_start)
from zerocost_i2v.vit import ViTConfig, init_backbone

CFG = ViTConfig(depth=1, width=16, heads=4, patch_size=4, image_size=8, frames=4)
BACKBONE = init_backbone(CFG, seed=5)
PLAN = [1, -1, 0, 0]
DATA = gen_synthetic(SyntheticVideoSpec(frames=4, image_size=8, sprite_size=2, dataset_size=8, seed=1))
SPEC = AdapterSpec(bottleneck=4)


def _same(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a)


class TestConfig:
    @pytest.mark.parametrize("changes", [dict(optimizer="sgd"), dict(learning_rate=-1.0),
                                         dict(beta1=1.0), dict(batch_size=0), dict(label_smoothing=1.0),
                                         dict(full_finetune_lr_scale=0.0)])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestTrain:
    def test_zero_epochs_returns_identical_copy(self):
        adapted, mask = build_adapted_model(BACKBONE, CFG, SPEC)
        out, metrics = train(adapted, CFG, DATA, TrainConfig(epochs=0), mask, PLAN)
        assert out is not adapted and _same(out, adapted) and metrics.steps == 0

    def test_zero_learning_rate_changes_nothing(self):
        adapted, mask = build_adapted_model(BACKBONE, CFG, SPEC)
        out, metrics = train(adapted, CFG, DATA, TrainConfig(learning_rate=0.0, epochs=2, batch_size=4),
                             mask, PLAN)
        assert _same(out, adapted) and metrics.steps == 4

    def test_single_sample_overfits(self):
        one = DATA.subset([1])
        mask = TrainableMask({n: True for n in BACKBONE})
        tcfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0, epochs=200, batch_size=1)
        _, metrics = train(BACKBONE, CFG, one, tcfg, mask, PLAN)
        assert metrics.steps == 200 and metrics.loss < 0.01

    def test_loss_decreases_with_adapters(self):
        adapted, mask = build_adapted_model(BACKBONE, CFG, SPEC)
        tcfg = TrainConfig(learning_rate=1e-2, epochs=15, batch_size=8)
        _, metrics = train(adapted, CFG, DATA, tcfg, mask, PLAN)
        assert metrics.loss_curve[-1] < metrics.loss_curve[0]

    def test_deterministic(self):
        adapted, mask = build_adapted_model(BACKBONE, CFG, SPEC)
        tcfg = TrainConfig(learning_rate=1e-2, epochs=2, batch_size=3)
        a, ma = train(adapted, CFG, DATA, tcfg, mask, PLAN)
        b, mb = train(adapted, CFG, DATA, tcfg, mask, PLAN)
        assert _same(a, b) and ma.loss_curve == mb.loss_curve

    def test_log_records(self):
        records = []
        adapted, mask = build_adapted_model(BACKBONE, CFG, SPEC)
        train(adapted, CFG, DATA, TrainConfig(epochs=2, batch_size=4), mask, PLAN, log=records.append)
        assert [r["epoch"] for r in records] == [0, 1] and records[-1]["steps"] == 4
        assert len(metrics_jsonl(records).splitlines()) == 2
        json.loads(metrics_jsonl(records).splitlines()[0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self):
        mask = TrainableMask({n: True for n in BACKBONE})
        tcfg = TrainConfig(learning_rate=1e38, weight_decay=0.0, epochs=3, batch_size=2)
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train(BACKBONE.astype(np.float32), CFG, DATA, tcfg, mask, PLAN)

    def test_unknown_trainable_name(self):
        with pytest.raises(ConfigError):
            train(BACKBONE, CFG, DATA, TrainConfig(epochs=1), TrainableMask({"block.0.adapter.o.w_a": True}))

    @given(seed=st.integers(0, 2 ** 16), strategy=st.sampled_from(["linear_probe", "temporal_head_only",
                                                                     "linear_adapter", "lora"]))
    def test_frozen_weights_are_conserved(self, seed, strategy):
        model, mask = strategy_model(strategy, BACKBONE, CFG, PLAN, SPEC, seed)
        tcfg = TrainConfig(learning_rate=5e-2, epochs=1, batch_size=4, seed=seed)
        out, _ = train(model, CFG, DATA.subset(slice(0, 4)), tcfg, mask, PLAN)
        for name in model:
            if not mask(name):
                assert np.array_equal(out[name], model[name]), name
            elif mask.element_mask(name) is not None:
                keep = ~mask.element_mask(name)
                assert np.array_equal(out[name][keep], model[name][keep]), name


class TestEvaluate:
    def test_metrics(self):
        m = evaluate(BACKBONE, CFG, DATA, PLAN)
        assert 0 <= m.top1 <= 1 and m.loss > 0 and len(m.per_class) == 2

    def test_zero_plan_scores_half_on_twins(self):
        assert evaluate(BACKBONE, CFG, DATA, [0, 0, 0, 0]).top1 == 0.5


class TestStrategies:
    def test_temporal_head_mask_slices(self):
        mask = temporal_head_mask(BACKBONE, CFG, PLAN, train_head=False)
        elem = mask.element_mask("block.0.attn.w_k")
        assert elem[:, :8].all() and not elem[:, 8:].any()
        assert mask.element_mask("block.0.attn.w_o")[:8].all()
        assert not mask("block.0.mlp.w_up") and not mask("head.w")

    def test_no_temporal_heads_means_nothing_trainable(self):
        mask = temporal_head_mask(BACKBONE, CFG, [0, 0, 0, 0], train_head=False)
        assert mask.count(BACKBONE) == 0

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            strategy_model("prompt_tuning", BACKBONE, CFG, PLAN)

    def test_trainable_params_are_ordered(self):
        counts = {s: strategy_model(s, BACKBONE, CFG, PLAN, SPEC)[1].count(
            strategy_model(s, BACKBONE, CFG, PLAN, SPEC)[0]) for s in STRATEGIES}
        assert counts["linear_probe"] < counts["temporal_head_only"] < counts["full_finetune"]
        assert counts["linear_probe"] < counts["linear_adapter"] < counts["full_finetune"]
        assert counts["linear_adapter"] == counts["gelu_adapter"]

    def test_compare_rows(self):
        rows = compare_strategies(BACKBONE, CFG, PLAN, DATA, DATA,
                                  ["linear_probe", "linear_adapter", "gelu_adapter"],
                                  TrainConfig(learning_rate=1e-2, epochs=1, batch_size=8),
                                  SPEC, verify_samples=4)
        by = {r["strategy"]: r for r in rows}
        assert by["linear_adapter"]["mergeable"] and by["linear_adapter"]["new_params_at_inference"] == 0
        assert by["linear_adapter"]["merge_max_abs_diff"] < 1e-10
        assert by["gelu_adapter"]["mergeable"] is False
        assert by["gelu_adapter"]["new_params_at_inference"] > 0
        assert by["linear_probe"]["mergeable"] is None
        assert "linear_adapter" in format_table(rows)


class TestWarmStart:
    def test_freezes_and_redraws_head(self):
        out = warm_start(BACKBONE, CFG, steps=3, batch_size=4)
        assert all(out.frozen[n] for n in out)
        assert not np.array_equal(out["block.0.attn.w_q"], BACKBONE["block.0.attn.w_q"])
        assert np.all(out["head.b"] == 0)

    def test_zero_steps_is_copy(self):
        assert _same(warm_start(BACKBONE, CFG, 0), BACKBONE)
