import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import PROPERTY_CASES
from oracles import brute_force_rf, naive_stdha
from zerocost_i2v.errors import ConfigError
from zerocost_i2v.presets import VIDEO_MODEL_PLANS, video_model_plan
from zerocost_i2v.stdha import (ClsShift, HeadOffsetPlan, ShiftSpec, cls_shift, cls_shift_forward,
                                default_plan, shift_kv_forward, stacked_receptive_field,
                                stdha_forward, temporal_receptive_field)
from zerocost_i2v.tensor import Tensor
from zerocost_i2v.vit import BlockParams, ViTConfig, WeightStore, init_backbone, mhsa_forward

CFG = ViTConfig(depth=1, width=16, heads=4, patch_size=4, image_size=8, frames=4)
BACKBONE = init_backbone(CFG, seed=3)


def _tokens(rng, frames=CFG.frames, batch=None):
    shape = (frames, CFG.num_tokens, CFG.width)
    return rng.standard_normal(shape if batch is None else (batch,) + shape)


def _block(store=BACKBONE):
    return BlockParams(store.tensors(), 0)


class TestPlan:
    def test_multiset_parsing_puts_temporal_heads_first(self):
        plan = HeadOffsetPlan.from_multiset("{1·1, −1·1, 0·10}")
        assert plan.offsets == (1, -1) + (0,) * 10
        assert plan.k == 2 and plan.temporal_heads == [0, 1]

    @pytest.mark.parametrize("text", ["{1*2, -1*2, 0*12}", r"{1\cdot2, -1\cdot2, 0\cdot12}"])
    def test_alternative_separators(self, text):
        assert HeadOffsetPlan.from_multiset(text).offsets == (1, 1, -1, -1) + (0,) * 12

    def test_multiset_fills_spatial_heads(self):
        assert HeadOffsetPlan.from_multiset("{1*1, -1*1}", heads=6).offsets == (1, -1, 0, 0, 0, 0)

    @pytest.mark.parametrize("text", ["{1*0.5, -1*0.5, 0*11}", "1*1, 0*3", "{a*1}"])
    def test_bad_multisets(self, text):
        with pytest.raises(ConfigError):
            HeadOffsetPlan.from_multiset(text)

    def test_multiset_round_trip(self):
        plan = HeadOffsetPlan((2, -1, 0, 0))
        assert HeadOffsetPlan.from_multiset(plan.to_multiset()).offsets == plan.offsets

    def test_parse_json_and_list(self):
        assert HeadOffsetPlan.parse("[1, -1, 0]").offsets == (1, -1, 0)
        assert HeadOffsetPlan.parse([0, 2]).offsets == (0, 2)
        with pytest.raises(ConfigError):
            HeadOffsetPlan.parse([1.5, 0])

    def test_length_must_match_heads(self, rng):
        with pytest.raises(ConfigError, match="4 heads"):
            stdha_forward(Tensor(_tokens(rng)), _block(), CFG, [1, -1, 0])

    def test_default_plans(self):
        assert default_plan(12, 8).offsets[:3] == (1, -1, 0)
        assert temporal_receptive_field(default_plan(12, 16)) == 4
        assert temporal_receptive_field(default_plan(12, 32)) == 6


class TestReceptiveField:
    @pytest.mark.parametrize("text,rf", [("{1*1, -1*1, 0*10}", 3),
                                         ("{1*1, -1*1, 2*1, -2*1, 3*1, 0*7}", 6),
                                         ("{1*1, 0*11}", 2)])
    def test_examples(self, text, rf):
        assert temporal_receptive_field(HeadOffsetPlan.from_multiset(text)) == rf

    def test_stacked_examples(self):
        plan = HeadOffsetPlan.from_multiset("{1*1, -1*1, 0*10}")
        assert stacked_receptive_field(plan, 1) == 3
        assert stacked_receptive_field(plan, 4) == 9
        assert stacked_receptive_field([0] * 12, 7) == 1

    @given(st.lists(st.integers(-4, 4), min_size=1, max_size=8), st.integers(1, 4))
    def test_matches_brute_force_reachability(self, offsets, layers):
        assert stacked_receptive_field(offsets, layers) == brute_force_rf(offsets, layers)

    def test_reference_model_plans(self):
        for (backbone, dataset, frames), (_, rf, _) in VIDEO_MODEL_PLANS.items():
            plan = video_model_plan(backbone, dataset, frames)
            assert len(plan) == (12 if backbone == "vit-b16" else 16)
            assert temporal_receptive_field(plan) == rf


class TestForward:
    def test_zero_plan_is_bitwise_mhsa(self, rng):
        x = Tensor(_tokens(rng, batch=2))
        a = stdha_forward(x, _block(), CFG, [0, 0, 0, 0]).data
        b = mhsa_forward(x, _block(), CFG).data
        assert np.array_equal(a, b)

    def test_single_frame_equals_mhsa(self, rng):
        x = Tensor(_tokens(rng, frames=1))
        a = stdha_forward(x, _block(), CFG, [2, -1, 1, 0]).data
        np.testing.assert_array_equal(a, mhsa_forward(x, _block(), CFG).data)

    @pytest.mark.parametrize("offsets", [(1, -1, 0, 0), (2, 0, -3, 1), (1, 1, 1, 1)])
    def test_matches_loop_oracle(self, rng, offsets):
        x = _tokens(rng)
        out = stdha_forward(Tensor(x), _block(), CFG, offsets).data
        w = {s: (BACKBONE[f"block.0.attn.w_{s}"], BACKBONE[f"block.0.attn.b_{s}"]) for s in "qkvo"}
        np.testing.assert_allclose(out, naive_stdha(x, w, CFG, offsets), atol=1e-10)

    def test_uses_no_new_weights(self, rng):
        used = {}

        class Spy(dict):
            def __getitem__(self, key):
                used[key] = True
                return dict.__getitem__(self, key)

            def get(self, key, default=None):
                return dict.get(self, key, default)

        stdha_forward(Tensor(_tokens(rng)), BlockParams(Spy(BACKBONE.tensors()), 0), CFG, [1, -1, 0, 0])
        assert set(used) == {f"block.0.attn.{l}_{s}" for l in "wb" for s in "qkvo"}

    def test_relocated_query_variant_differs(self, rng):
        x = Tensor(_tokens(rng))
        a = stdha_forward(x, _block(), CFG, [1, 0, 0, 0]).data
        b = stdha_forward(x, _block(), CFG, [1, 0, 0, 0], relocate_query=True).data
        assert not np.allclose(a, b)


def _permute_heads(store: WeightStore, perm) -> WeightStore:
    """Move head ``perm[j]``'s channel block to position ``j``."""
    dh = CFG.head_dim
    cols = np.concatenate([np.arange(p * dh, (p + 1) * dh) for p in perm])
    out = store.copy()
    for s in "qkv":
        out.arrays[f"block.0.attn.w_{s}"] = store[f"block.0.attn.w_{s}"][:, cols]
        out.arrays[f"block.0.attn.b_{s}"] = store[f"block.0.attn.b_{s}"][cols]
    out.arrays["block.0.attn.w_o"] = store["block.0.attn.w_o"][cols, :]
    return out


offsets_strategy = st.lists(st.integers(-3, 3), min_size=CFG.heads, max_size=CFG.heads)


class TestProperties:
    @given(offsets=offsets_strategy, perm=st.permutations(range(CFG.heads)),
           seed=st.integers(0, 2 ** 16))
    def test_head_permutation_equivariance(self, offsets, perm, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((CFG.frames, CFG.num_tokens, CFG.width)))
        base = stdha_forward(x, _block(), CFG, offsets).data
        permuted_plan = [offsets[p] for p in perm]
        moved = stdha_forward(x, _block(_permute_heads(BACKBONE, perm)), CFG, permuted_plan).data
        np.testing.assert_allclose(moved, base, atol=1e-6)

    @given(offsets=offsets_strategy, head=st.integers(0, CFG.heads - 1),
           t=st.integers(0, CFG.frames - 1), seed=st.integers(0, 2 ** 16))
    def test_information_purity(self, offsets, head, t, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((CFG.frames, CFG.num_tokens, CFG.width))
        source = min(max(t + offsets[head], 0), CFG.frames - 1)
        y = x.copy()
        for f in range(CFG.frames):
            if f not in (t, source):
                y[f] += rng.standard_normal(y[f].shape)
        _, hx = stdha_forward(Tensor(x), _block(), CFG, offsets, return_heads=True)
        _, hy = stdha_forward(Tensor(y), _block(), CFG, offsets, return_heads=True)
        np.testing.assert_array_equal(hx.data[0, t, head], hy.data[0, t, head])

    def test_property_budget(self):
        assert PROPERTY_CASES >= 100


class TestBaselines:
    def test_shift_ratio_zero_is_mhsa(self, rng):
        x = Tensor(_tokens(rng))
        np.testing.assert_array_equal(shift_kv_forward(x, _block(), CFG, ShiftSpec(0.0)).data,
                                      mhsa_forward(x, _block(), CFG).data)

    def test_shift_single_frame_is_mhsa(self, rng):
        x = Tensor(_tokens(rng, frames=1))
        np.testing.assert_array_equal(shift_kv_forward(x, _block(), CFG, ShiftSpec(0.5)).data,
                                      mhsa_forward(x, _block(), CFG).data)

    def test_shift_non_integral_channels(self):
        with pytest.raises(ConfigError, match="integral"):
            ShiftSpec(0.3).shifted_channels(CFG)

    def test_shift_changes_output(self, rng):
        x = Tensor(_tokens(rng))
        assert not np.allclose(shift_kv_forward(x, _block(), CFG, ShiftSpec(0.5)).data,
                               mhsa_forward(x, _block(), CFG).data)

    def test_cls_shift_index_oracle(self, rng):
        x = _tokens(rng)
        count = ClsShift(0.25).shifted_channels(CFG)  # 4 channels: 2 from t-1, 2 from t+1
        out = cls_shift(Tensor(x), count).data
        for t in range(CFG.frames):
            back, fwd = max(t - 1, 0), min(t + 1, CFG.frames - 1)
            np.testing.assert_array_equal(out[t, 0, :2], x[back, 0, :2])
            np.testing.assert_array_equal(out[t, 0, 2:4], x[fwd, 0, 2:4])
            np.testing.assert_array_equal(out[t, 0, 4:], x[t, 0, 4:])
            np.testing.assert_array_equal(out[t, 1:], x[t, 1:])

    def test_cls_shift_identities(self, rng):
        x = Tensor(_tokens(rng))
        np.testing.assert_array_equal(cls_shift(x, 0).data, x.data)
        one = Tensor(_tokens(rng, frames=1))
        np.testing.assert_array_equal(cls_shift_forward(one, _block(), CFG).data,
                                      mhsa_forward(one, _block(), CFG).data)
