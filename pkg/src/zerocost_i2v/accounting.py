"""Exact parameter and FLOP ledgers.

FLOPs are counted for matrix products only, two per multiply-add, which is
what :func:`zerocost_i2v.tensor.flop_meter` measures at runtime.  The
``gflops`` figure reported next to the raw count follows the convention of
video-model cost tables, where one multiply-add counts as one FLOP; it is
``flops / 2e9``.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .adaptation import AdapterSpec, TrainableMask, infer_adapters, site_dims
from .errors import ConfigError
from .stdha import HeadOffsetPlan
from .vit import PRESETS, ViTConfig, WeightStore, backbone_shapes, is_backbone_name


@dataclass(frozen=True)
class Views:
    """Frames x spatial crops x temporal clips."""

    frames: int
    crops: int = 1
    clips: int = 1

    def __post_init__(self):
        if min(self.frames, self.crops, self.clips) < 1:
            raise ConfigError(f"views must be positive, got {self}")

    @property
    def count(self) -> int:
        return self.crops * self.clips

    @classmethod
    def parse(cls, value) -> "Views":
        if isinstance(value, Views):
            return value
        if isinstance(value, str):
            parts = re.split(r"\s*[x×*]\s*", value.strip().lower())
            if len(parts) != 3 or not all(p.isdigit() for p in parts):
                raise ConfigError(f"views must look like FxCxK, got {value!r}")
            return cls(*(int(p) for p in parts))
        return cls(*(int(v) for v in value))

    def __str__(self) -> str:
        return f"{self.frames}x{self.crops}x{self.clips}"


@dataclass
class CostReport:
    """Parameter and FLOP counts; ``None`` marks a ledger that was not computed."""

    params_backbone: int | None = None
    params_new_at_inference: int | None = None
    params_trainable: int | None = None
    flops_per_view: int | None = None
    flops_total: int | None = None
    backbone_flops_total: int | None = None
    views: str | None = None

    @property
    def extra_flops_vs_backbone(self) -> int | None:
        if self.flops_total is None:
            return None
        return self.flops_total - self.backbone_flops_total

    @property
    def gflops(self) -> float | None:
        return None if self.flops_total is None else self.flops_total / 2e9

    @property
    def extra_gflops(self) -> float | None:
        extra = self.extra_flops_vs_backbone
        return None if extra is None else extra / 2e9

    def __or__(self, other: "CostReport") -> "CostReport":
        data = asdict(self)
        data.update({k: v for k, v in asdict(other).items() if v is not None})
        return CostReport(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["extra_flops_vs_backbone"] = self.extra_flops_vs_backbone
        out["gflops"] = self.gflops
        out["extra_gflops"] = self.extra_gflops
        return out


def backbone_param_count(cfg: ViTConfig, head: bool = True) -> int:
    total = 0
    for name, shape in backbone_shapes(cfg).items():
        if head or not name.startswith("head."):
            n = 1
            for s in shape:
                n *= s
            total += n
    return total


def count_params(store: WeightStore, mask: TrainableMask | None = None) -> CostReport:
    """Element counts split by name grammar (backbone vs adapter) and trainability."""
    backbone = sum(a.size for n, a in store.items() if is_backbone_name(n))
    extra = sum(a.size for n, a in store.items() if not is_backbone_name(n))
    if mask is None:
        mask = TrainableMask.from_store(store)
    return CostReport(params_backbone=int(backbone), params_new_at_inference=int(extra),
                      params_trainable=int(mask.count(store)))


def _frame_flops(cfg: ViTConfig) -> int:
    n, d, dm = cfg.num_tokens, cfg.width, cfg.mlp_width
    patch = 2 * cfg.num_patches * cfg.patch_dim * d
    block = (
        2 * n * d * 3 * d      # Q, K, V projections
        + 2 * n * d * d        # output projection
        + 2 * 2 * n * n * d    # scores and weighted values over all heads
        + 2 * 2 * n * d * dm   # MLP up and down
    )
    return patch + cfg.depth * block


def _adapter_frame_flops(cfg: ViTConfig, adapters: Sequence[tuple[str, str, int]]) -> int:
    """``adapters`` lists ``(kind, site, k)`` for every adapter in the model."""
    n = cfg.num_tokens
    total = 0
    for kind, site, k in adapters:
        if kind == "lora":
            d_in, d_out = site_dims(site, cfg)
            total += 2 * n * (d_in * k + k * d_out)
        else:
            d_in, d_out = site_dims(site, cfg)
            width = d_out if site == "mlp_down" else d_in
            total += 2 * 2 * n * width * k
    return total


def _spec_adapters(spec: AdapterSpec, cfg: ViTConfig) -> list[tuple[str, str, int]]:
    spec.validate(cfg)
    k = spec.width(cfg)
    return [(spec.kind, site, k) for _ in spec.active_blocks(cfg) for site in spec.placement]


def _store_adapters(store: WeightStore) -> list[tuple[str, str, int]]:
    out = []
    for (_, site), group in infer_adapters(store).items():
        leaf = group.get("a") or group.get("w_a")
        if leaf is not None:
            out.append((group["kind"], site, store[leaf].shape[1]))
    return out


def count_flops(cfg: ViTConfig, plan=None, views=None, spec: AdapterSpec | None = None,
                store: WeightStore | None = None) -> CostReport:
    """Analytic matmul FLOPs of one evaluation.

    ``views`` defaults to ``cfg.frames x 1 x 1``; its frame count overrides
    ``cfg.frames``.  ``plan`` is validated but, by construction, changes
    nothing.  Unmerged adapters are costed from ``spec`` or from the
    adapter tensors of ``store``.
    """
    if plan is not None:
        HeadOffsetPlan.parse(plan, cfg.heads).validate(cfg)
    views = Views(cfg.frames) if views is None else Views.parse(views)
    adapters: list[tuple[str, str, int]] = []
    if spec is not None:
        adapters += _spec_adapters(spec, cfg)
    if store is not None:
        adapters += _store_adapters(store)
    head = 2 * cfg.width * cfg.num_classes
    backbone_view = views.frames * _frame_flops(cfg) + head
    per_view = backbone_view + views.frames * _adapter_frame_flops(cfg, adapters)
    return CostReport(flops_per_view=per_view, flops_total=per_view * views.count,
                      backbone_flops_total=backbone_view * views.count, views=str(views))


@dataclass
class ZeroExtraReport:
    passed: bool
    params_delta: int
    flops_delta: int
    offending: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def assert_zero_extra(store: WeightStore, cfg: ViTConfig, plan=None) -> ZeroExtraReport:
    """Pass iff ``store`` costs exactly what the plain backbone for ``cfg`` costs.

    Every tensor that is not part of the canonical backbone (or has a
    non-canonical shape) is listed in ``offending``.
    """
    shapes = backbone_shapes(cfg)
    offending = [n for n in store if n not in shapes]
    offending += [n for n, s in shapes.items() if n in store and store[n].shape != s]
    offending += [n for n in shapes if n not in store]
    params_delta = store.num_params() - backbone_param_count(cfg)
    cost = count_flops(cfg, plan, store=store)
    flops_delta = cost.extra_flops_vs_backbone
    passed = not offending and params_delta == 0 and flops_delta == 0
    return ZeroExtraReport(passed, int(params_delta), int(flops_delta), offending)


#: cost columns of the reference video models: (preset, views) -> (GFLOPs, Param M)
REFERENCE_COSTS = {
    ("vit-b16", "8x3x1"): (422, 86),
    ("vit-b16", "8x1x3"): (422, 86),
    ("vit-b16", "32x3x1"): (1688, 86),
    ("vit-l14", "8x3x1"): (1946, 304),
    ("vit-l14", "16x3x1"): (3892, 304),
    ("vit-l14", "32x1x3"): (7783, 304),
}


def reference_cost_table(num_classes: int = 400) -> list[dict]:
    """Analytic cost of every reference row next to its published value."""
    rows = []
    for (preset, views), (gflops, params_m) in REFERENCE_COSTS.items():
        cfg = PRESETS[preset].replace(num_classes=num_classes)
        cost = count_flops(cfg, views=views)
        params = backbone_param_count(cfg)
        rows.append({"model": preset, "views": views, "gflops": cost.gflops,
                     "reference_gflops": gflops, "params_m": params / 1e6,
                     "reference_params_m": params_m, "extra_gflops": cost.extra_gflops,
                     "new_params": 0})
    return rows
