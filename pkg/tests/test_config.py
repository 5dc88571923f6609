import json

import numpy as np
import pytest

from zerocost_i2v.config import RunConfig, load_config, parse_config, parse_model
from zerocost_i2v.errors import ConfigError
from zerocost_i2v.vit import VIT_B16

TOY = {"model": {"depth": 1, "width": 16, "heads": 4, "patch_size": 4, "image_size": 12, "frames": 4},
       "plan": "{1*1, -1*1, 0*2}",
       "adapter": {"placement": ["qkv", "mlp_down"], "bottleneck": 4},
       "train": {"learning_rate": 0.01, "epochs": 2},
       "data": {"task": "order", "dataset_size": 10, "test_size": 6},
       "precision": "f32"}


class TestParse:
    def test_full_document(self):
        run = parse_config(TOY)
        assert run.plan.offsets == (1, -1, 0, 0)
        assert run.adapter.placement == ("qkv", "mlp_down")
        assert run.data.spec.frames == 4 and run.data.spec.image_size == 12
        assert run.data.test_size == 6 and run.dtype is np.float32

    def test_round_trip_through_json(self):
        run = parse_config(TOY)
        doc = json.loads(run.to_json())
        assert parse_config(doc) == run

    def test_defaults(self):
        run = parse_config({})
        assert run == RunConfig() and run.plan is None and run.adapter is None

    def test_default_plan_keyword(self):
        run = parse_config({"model": {"preset": "vit-b16"}, "plan": "default"})
        assert run.plan.offsets[:2] == (1, -1)

    def test_preset_with_override(self):
        assert parse_model({"preset": "vit-b16", "num_classes": 400}) == VIT_B16.replace(num_classes=400)
        assert parse_model({"preset": "vit-b16", "width": 384, "heads": 6}).mlp_width == 1536

    @pytest.mark.parametrize("doc", [
        {"optimiser": {}},
        {"model": {"preset": "vit-h14"}},
        {"model": {"preset": "vit-b16", "dropout": 0.1}},
        {"model": [1, 2]},
        {"plan": [1, 0]},
        {"plan": "{1*0.5, 0*7.5}"},
        {"precision": "f16"},
        {"data": {"test_size": -1}},
        {"model": {"image_size": 32}, "data": {"image_size": 16}},
        {"model": {"num_classes": 3}, "data": {}},
        {"adapter": {"bottleneck": 64}},
    ])
    def test_rejected(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)


class TestLoad:
    def test_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(TOY))
        assert load_config(path) == parse_config(TOY)

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{model: 1}")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(bad)
