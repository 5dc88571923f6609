"""Image-to-video adaptation of a ViT with zero extra inference cost.

Head-relocated attention gives some heads a frame offset so they attend to
neighbouring frames; linear adapters are trained and then folded into the
frozen projections.  Both leave the parameter and FLOP counts of the
original image model unchanged.
"""

__version__ = "0.1.0"

from .accounting import CostReport, Views, assert_zero_extra, count_flops, count_params
from .adaptation import AdapterSpec, LinearAdapterWeights, LoRAWeights, build_adapted_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import SyntheticVideoSpec, VideoDataset, gen_synthetic
from .estimator import ZeroCostVideoClassifier
from .reparam import merge_linear_adapter, merge_lora, merge_model, verify_equivalence
from .stdha import (HeadOffsetPlan, default_plan, stacked_receptive_field, stdha_forward,
                    temporal_receptive_field)
from .training import TrainConfig, compare_strategies, evaluate, train
from .vit import ViTConfig, WeightStore, init_backbone, model_forward

__all__ = [
    "AdapterSpec", "CostReport", "HeadOffsetPlan", "LinearAdapterWeights", "LoRAWeights",
    "RunConfig", "SyntheticVideoSpec", "TrainConfig", "VideoDataset", "ViTConfig", "Views",
    "WeightStore", "ZeroCostVideoClassifier", "assert_zero_extra", "build_adapted_model",
    "compare_strategies", "count_flops", "count_params", "default_plan", "evaluate",
    "gen_synthetic", "init_backbone", "load_checkpoint", "load_config", "merge_linear_adapter",
    "merge_lora", "merge_model", "model_forward", "parse_config", "save_checkpoint",
    "stacked_receptive_field", "stdha_forward", "temporal_receptive_field", "train",
    "verify_equivalence",
]
