import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import finite_difference_check
from oracles import count_by_instantiation, dense_adapter_matrix
from zerocost_i2v.adaptation import (DEFAULT_SPEC, AdapterSpec, LinearAdapterWeights, LoRAWeights,
                                     TrainableMask, adapter_forward, adapter_param_count,
                                     adapter_tensor_shapes, build_adapted_model,
                                     gelu_adapter_forward, infer_adapters, lora_forward)
from zerocost_i2v.errors import CheckpointError, ConfigError, ShapeError
from zerocost_i2v.tensor import Tensor
from zerocost_i2v.vit import VIT_B16, BlockParams, ViTConfig, init_backbone, model_forward

CFG = ViTConfig(depth=2, width=16, heads=4, patch_size=4, image_size=8, frames=3)
BACKBONE = init_backbone(CFG, seed=11)


class TestAdapterForward:
    def test_zero_w_b_is_identity(self, rng):
        x = rng.standard_normal((5, 16))
        aw = LinearAdapterWeights(rng.standard_normal((16, 4)), np.zeros((4, 16)))
        np.testing.assert_array_equal(adapter_forward(Tensor(x), aw).data, x)

    def test_full_width_identity_product_doubles(self, rng):
        x = rng.standard_normal((3, 6))
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        aw = LinearAdapterWeights(q, q.T)
        np.testing.assert_allclose(adapter_forward(Tensor(x), aw).data, 2 * x, atol=1e-12)

    def test_matches_dense_matrix_oracle(self, rng):
        x = rng.standard_normal((7, 16))
        w_a, w_b = rng.standard_normal((16, 4)), rng.standard_normal((4, 16))
        out = adapter_forward(Tensor(x), LinearAdapterWeights(w_a, w_b)).data
        np.testing.assert_allclose(out, x @ dense_adapter_matrix(w_a, w_b), atol=1e-12)

    def test_width_mismatch(self, rng):
        aw = LinearAdapterWeights(np.zeros((8, 2)), np.zeros((2, 8)))
        with pytest.raises(ShapeError):
            adapter_forward(Tensor(np.zeros((2, 16))), aw)

    def test_gelu_adapter_differs_from_linear(self, rng):
        x = rng.standard_normal((4, 16))
        aw = LinearAdapterWeights(rng.standard_normal((16, 4)), rng.standard_normal((4, 16)))
        assert not np.allclose(gelu_adapter_forward(Tensor(x), aw).data,
                               adapter_forward(Tensor(x), aw).data)
        zero = LinearAdapterWeights(aw.w_a, np.zeros((4, 16)))
        np.testing.assert_array_equal(gelu_adapter_forward(Tensor(x), zero).data, x)

    def test_gelu_adapter_gradients(self, rng):
        def fn(x, w_a, w_b):
            return gelu_adapter_forward(x, LinearAdapterWeights(w_a, w_b))
        err = finite_difference_check(fn, {"x": rng.standard_normal((3, 8)),
                                           "w_a": rng.standard_normal((8, 2)),
                                           "w_b": rng.standard_normal((2, 8))})
        assert err <= 1e-5

    def test_lora_matches_dense(self, rng):
        x = rng.standard_normal((5, 16))
        w, b = rng.standard_normal((16, 24)), rng.standard_normal(24)
        a, bb = rng.standard_normal((16, 3)), rng.standard_normal((3, 24))
        out = lora_forward(Tensor(x), LoRAWeights(a, bb), w, b).data
        np.testing.assert_allclose(out, x @ (w + a @ bb) + b, atol=1e-12)

    def test_lora_zero_b_and_zero_base(self, rng):
        x = rng.standard_normal((2, 4))
        w, a = rng.standard_normal((4, 5)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(lora_forward(Tensor(x), LoRAWeights(a, np.zeros((2, 5))), w).data,
                                   x @ w, atol=1e-15)
        bb = rng.standard_normal((2, 5))
        np.testing.assert_allclose(lora_forward(Tensor(x), LoRAWeights(a, bb), np.zeros((4, 5))).data,
                                   x @ a @ bb, atol=1e-12)


class TestSpec:
    def test_default_is_shared_qkv_full_adaptation(self):
        assert DEFAULT_SPEC.placement == ("qkv", "o", "mlp_up", "mlp_down")
        assert DEFAULT_SPEC.width(VIT_B16) == 192

    def test_aliases(self):
        assert AdapterSpec(placement=("QKV_shared", "MLP_up")).placement == ("qkv", "mlp_up")

    @pytest.mark.parametrize("kwargs", [dict(placement=("qkv", "q")), dict(kind="relu"),
                                        dict(placement=("ffn",)), dict(kind="lora"),
                                        dict(bottleneck=None, ratio=None)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AdapterSpec(**kwargs)

    def test_bottleneck_must_be_below_width(self):
        with pytest.raises(ConfigError):
            AdapterSpec(bottleneck=16).validate(CFG)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            AdapterSpec.from_dict({"kind": "linear", "share_blocks": True})

    def test_vit_b_full_adaptation_count(self):
        assert adapter_param_count(AdapterSpec(bottleneck=192), VIT_B16) == 14_155_776

    def test_lora_costs_more_on_mlp_up(self):
        d, k = VIT_B16.width, 64
        linear = adapter_param_count(AdapterSpec(("mlp_up",), bottleneck=k), VIT_B16)
        lora = adapter_param_count(AdapterSpec(("mlp_up",), kind="lora", bottleneck=k), VIT_B16)
        assert (linear, lora) == (12 * 2 * d * k, 12 * 5 * d * k)

    def test_zero_width(self):
        assert adapter_param_count(AdapterSpec(bottleneck=0), CFG) == 0

    @given(placement=st.sets(st.sampled_from(["qkv", "o", "mlp_up", "mlp_down"]), min_size=1),
           kind=st.sampled_from(["linear", "gelu", "lora"]), k=st.integers(0, 15),
           blocks=st.lists(st.booleans(), min_size=2, max_size=2), bias=st.booleans())
    def test_count_law(self, placement, kind, k, blocks, bias):
        if kind == "lora":
            placement = {"q" if p == "qkv" else p for p in placement}
            bias = False
        spec = AdapterSpec(tuple(sorted(placement)), kind, bottleneck=k, blocks=tuple(blocks), bias=bias)
        shapes = adapter_tensor_shapes(spec, CFG).values()
        assert adapter_param_count(spec, CFG) == count_by_instantiation(shapes)


spec_strategy = st.builds(
    lambda placement, kind, k, bias: AdapterSpec(
        tuple(sorted({"q" if p == "qkv" else p for p in placement} if kind == "lora" else placement)),
        kind, bottleneck=k, bias=bias and kind != "lora"),
    st.sets(st.sampled_from(["qkv", "o", "mlp_up", "mlp_down"]), min_size=1),
    st.sampled_from(["linear", "gelu", "lora"]), st.integers(1, 8), st.booleans())


class TestBuild:
    def test_names_and_flags(self):
        store, mask = build_adapted_model(BACKBONE, CFG, AdapterSpec(bottleneck=4))
        assert "block.1.adapter.mlp_down.w_b" in store
        assert store["block.1.adapter.mlp_down.w_a"].shape == (16, 4)
        assert not mask("block.0.attn.w_q") and mask("block.0.adapter.qkv.w_a") and mask("head.w")
        assert np.all(store["block.0.adapter.o.w_b"] == 0)
        assert store["block.0.adapter.o.w_a"].std() == pytest.approx(0.02, rel=0.3)

    def test_refuses_double_adaptation(self):
        store, _ = build_adapted_model(BACKBONE, CFG, AdapterSpec(bottleneck=4))
        with pytest.raises(ConfigError):
            build_adapted_model(store, CFG, AdapterSpec(bottleneck=4))

    def test_block_flags(self):
        store, _ = build_adapted_model(BACKBONE, CFG, AdapterSpec(bottleneck=4, blocks=(False, True)))
        assert not any(n.startswith("block.0.adapter") for n in store)
        assert any(n.startswith("block.1.adapter") for n in store)

    def test_infer_adapters_rejects_mixed_kinds(self):
        store, _ = build_adapted_model(BACKBONE, CFG, AdapterSpec(("o",), bottleneck=4))
        store.add("block.0.gelu_adapter.o.w_a", np.zeros((16, 4)))
        with pytest.raises(CheckpointError, match="mixes"):
            infer_adapters(store)

    def test_shared_qkv_feeds_all_three_paths(self, rng):
        store, _ = build_adapted_model(BACKBONE, CFG, AdapterSpec(("qkv",), bottleneck=4))
        store.arrays["block.0.adapter.qkv.w_b"] = rng.standard_normal((4, 16))
        x = Tensor(rng.standard_normal((3, CFG.num_tokens, 16)))
        adapted = BlockParams(store.tensors(), 0).qkv(x)
        plain = BlockParams(BACKBONE.tensors(), 0).qkv(x)
        for a, p in zip(adapted, plain):
            assert not np.allclose(a.data, p.data)

    def test_temporal_mask_count(self):
        from zerocost_i2v.training import temporal_head_mask

        store = init_backbone(CFG, 0)
        mask = temporal_head_mask(store, CFG, [1, -1, 0, 0], train_head=False)
        d, dt = CFG.width, 2 * CFG.head_dim
        assert mask.count(store) == CFG.depth * 4 * d * dt

    @given(spec=spec_strategy, seed=st.integers(0, 2 ** 16))
    def test_zero_init_identity(self, spec, seed):
        rng = np.random.default_rng(seed)
        video = rng.standard_normal((2, CFG.frames, CFG.image_size, CFG.image_size, 1))
        adapted, _ = build_adapted_model(BACKBONE, CFG, spec, seed=seed)
        plan = [1, -1, 0, 0]
        assert np.array_equal(model_forward(video, adapted, CFG, plan).data,
                              model_forward(video, BACKBONE, CFG, plan).data)


class TestMask:
    def test_only_and_from_store(self):
        mask = TrainableMask.only(BACKBONE, ["head.w"])
        assert mask.trainable_names() == ["head.w"]
        assert mask.count(BACKBONE) == BACKBONE["head.w"].size
        assert TrainableMask.from_store(BACKBONE).trainable_names() == []
