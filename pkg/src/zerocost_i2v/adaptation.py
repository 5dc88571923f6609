"""Trainable adaptation structures around a frozen backbone.

Matrices are named by what they do: ``w_a`` maps ``D -> k`` and ``w_b`` maps
``k -> D``.  A serial linear adapter computes ``x + (x @ w_a) @ w_b``, i.e.
``x @ (I + w_a @ w_b)``, so it can later be folded into the projection it
wraps.  LoRA adds a parallel ``x @ a @ b`` next to the frozen projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .tensor import SeededRng, Tensor, as_tensor
from .vit import ViTConfig, WeightStore, is_backbone_name, parse_adapter_name

SITES = ("qkv", "q", "k", "v", "o", "mlp_up", "mlp_down")
SITE_ALIASES = {
    "qkv_shared": "qkv", "qkv": "qkv", "q": "q", "k": "k", "v": "v", "o": "o",
    "mlp_up": "mlp_up", "mlp_down": "mlp_down", "up": "mlp_up", "down": "mlp_down",
}
KINDS = ("linear", "lora", "gelu")
NAME_PREFIX = {"linear": "adapter", "gelu": "gelu_adapter", "lora": "lora"}
KIND_OF_PREFIX = {v: k for k, v in NAME_PREFIX.items()}


def site_dims(site: str, cfg: ViTConfig) -> tuple[int, int]:
    """(input width, output width) of the projection at ``site``."""
    if site == "mlp_up":
        return cfg.width, cfg.mlp_width
    if site == "mlp_down":
        return cfg.mlp_width, cfg.width
    return cfg.width, cfg.width


def serial_width(site: str, cfg: ViTConfig) -> int:
    """Width of a serial adapter at ``site``: the input width, or the output width on ``mlp_down``."""
    d_in, d_out = site_dims(site, cfg)
    return d_out if site == "mlp_down" else d_in


@dataclass(frozen=True)
class AdapterSpec:
    """Which projections are wrapped, by which kind of adapter, how wide.

    ``bottleneck`` fixes ``k`` directly; otherwise ``k = round(ratio * width)``.
    ``blocks`` optionally restricts adaptation to a subset of blocks.
    """

    placement: tuple[str, ...] = ("qkv", "o", "mlp_up", "mlp_down")
    kind: str = "linear"
    bottleneck: int | None = None
    ratio: float | None = 0.25
    blocks: tuple[bool, ...] | None = None
    bias: bool = False

    def __post_init__(self):
        normalized = []
        for p in self.placement:
            site = SITE_ALIASES.get(str(p).lower())
            if site is None:
                raise ConfigError(f"unknown adapter placement {p!r}")
            if site in normalized:
                raise ConfigError(f"placement {p!r} listed twice")
            normalized.append(site)
        object.__setattr__(self, "placement", tuple(normalized))
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(bool(b) for b in self.blocks))
        if self.kind not in KINDS:
            raise ConfigError(f"adapter kind must be one of {KINDS}, got {self.kind!r}")
        if "qkv" in self.placement and set(self.placement) & {"q", "k", "v"}:
            raise ConfigError("QKV_shared cannot be combined with individual Q/K/V adapters")
        if self.kind == "lora" and "qkv" in self.placement:
            raise ConfigError("LoRA is parallel to a single projection; use Q/K/V, not QKV_shared")
        if self.bottleneck is None and self.ratio is None:
            raise ConfigError("give either a bottleneck width or a ratio")
        if self.bottleneck is not None and self.bottleneck < 0:
            raise ConfigError("bottleneck width must be >= 0")
        if self.bias and self.kind == "lora":
            raise ConfigError("adapter bias applies to serial adapters only")

    @property
    def mergeable(self) -> bool:
        return self.kind != "gelu"

    @property
    def adapters_per_block(self) -> int:
        return len(self.placement)

    def width(self, cfg: ViTConfig) -> int:
        if self.bottleneck is not None:
            return int(self.bottleneck)
        return int(round(self.ratio * cfg.width))

    def active_blocks(self, cfg: ViTConfig) -> list[int]:
        if self.blocks is None:
            return list(range(cfg.depth))
        if len(self.blocks) != cfg.depth:
            raise ConfigError(f"blocks flag list has {len(self.blocks)} entries, model depth is {cfg.depth}")
        return [i for i, on in enumerate(self.blocks) if on]

    def validate(self, cfg: ViTConfig) -> None:
        k = self.width(cfg)
        for site in self.placement:
            limit = min(site_dims(site, cfg)) if self.kind == "lora" else serial_width(site, cfg)
            if k >= limit:
                raise ConfigError(f"bottleneck {k} must be smaller than {limit} at site {site!r}")
        self.active_blocks(cfg)

    def to_dict(self) -> dict[str, Any]:
        return {"placement": list(self.placement), "kind": self.kind,
                "bottleneck": self.bottleneck, "ratio": self.ratio,
                "blocks": None if self.blocks is None else list(self.blocks),
                "bias": self.bias}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AdapterSpec":
        allowed = {"placement", "kind", "bottleneck", "ratio", "blocks", "bias"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown adapter keys: {sorted(unknown)}")
        data = dict(data)
        if "placement" in data:
            data["placement"] = tuple(data["placement"])
        if "blocks" in data and data["blocks"] is not None:
            data["blocks"] = tuple(data["blocks"])
        if data.get("bottleneck") is not None and "ratio" not in data:
            data["ratio"] = None
        return cls(**data)


#: Best full-adaptation row: shared-QKV + O + MLP up + MLP down, linear, ratio 0.25.
DEFAULT_SPEC = AdapterSpec()


@dataclass
class LinearAdapterWeights:
    """Serial adapter; ``w_a: [D, k]``, ``w_b: [k, D]``, optional bias ``b_a: [D]``."""

    w_a: Any
    w_b: Any
    b_a: Any = None
    kind: str = "linear"

    @property
    def width(self) -> int:
        return self.w_a.shape[0]

    def check(self, d: int | None = None) -> None:
        D, k = self.w_a.shape
        if self.w_b.shape != (k, D):
            raise ShapeError(f"adapter w_a {self.w_a.shape} and w_b {self.w_b.shape} do not form a square map")
        if self.b_a is not None and tuple(self.b_a.shape) != (D,):
            raise ShapeError(f"adapter bias shape {self.b_a.shape} != ({D},)")
        if d is not None and d != D:
            raise ShapeError(f"adapter width {D} does not match input width {d}")


@dataclass
class LoRAWeights:
    """Parallel low-rank update ``a: [D_in, k]``, ``b: [k, D_out]``."""

    a: Any
    b: Any

    def check(self, w_old_shape) -> None:
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"LoRA factors {self.a.shape} and {self.b.shape} do not chain")
        if (self.a.shape[0], self.b.shape[1]) != tuple(w_old_shape):
            raise ShapeError(f"LoRA update {(self.a.shape[0], self.b.shape[1])} does not match W_old {tuple(w_old_shape)}")


def adapter_forward(x: Tensor, aw: LinearAdapterWeights) -> Tensor:
    """``x + (x @ w_a) @ w_b (+ b_a)``."""
    w_a, w_b = as_tensor(aw.w_a), as_tensor(aw.w_b)
    LinearAdapterWeights(w_a, w_b, aw.b_a).check(x.shape[-1])
    y = tz.add(x, tz.matmul(tz.matmul(x, w_a), w_b))
    return y if aw.b_a is None else tz.add(y, as_tensor(aw.b_a))


def gelu_adapter_forward(x: Tensor, aw: LinearAdapterWeights) -> Tensor:
    """``x + gelu(x @ w_a) @ w_b (+ b_a)``; the nonlinearity makes it non-mergeable."""
    w_a, w_b = as_tensor(aw.w_a), as_tensor(aw.w_b)
    LinearAdapterWeights(w_a, w_b, aw.b_a).check(x.shape[-1])
    y = tz.add(x, tz.matmul(tz.gelu(tz.matmul(x, w_a)), w_b))
    return y if aw.b_a is None else tz.add(y, as_tensor(aw.b_a))


def lora_forward(x: Tensor, lw: LoRAWeights, w_old, b_old=None) -> Tensor:
    """``x @ w_old + b_old + (x @ a) @ b``."""
    w_old = as_tensor(w_old)
    lw.check(w_old.shape)
    if x.shape[-1] != w_old.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match W_old {w_old.shape}")
    y = tz.matmul(x, w_old)
    if b_old is not None:
        y = tz.add(y, as_tensor(b_old))
    return tz.add(y, tz.matmul(tz.matmul(x, as_tensor(lw.a)), as_tensor(lw.b)))


@dataclass
class TrainableMask:
    """Per-tensor trainable flags, optionally refined by per-element boolean masks."""

    flags: dict[str, bool] = field(default_factory=dict)
    elements: dict[str, np.ndarray] = field(default_factory=dict)

    def __call__(self, name: str) -> bool:
        return bool(self.flags.get(name, False))

    def element_mask(self, name: str) -> np.ndarray | None:
        return self.elements.get(name)

    def trainable_names(self) -> list[str]:
        return [n for n, on in self.flags.items() if on]

    def count(self, store: WeightStore) -> int:
        total = 0
        for name in self.trainable_names():
            m = self.elements.get(name)
            total += int(m.sum()) if m is not None else store[name].size
        return total

    @classmethod
    def from_store(cls, store: WeightStore) -> "TrainableMask":
        return cls({name: not store.frozen[name] for name in store})

    @classmethod
    def only(cls, store: WeightStore, names: Iterable[str]) -> "TrainableMask":
        names = set(names)
        return cls({name: name in names for name in store})


def adapter_tensor_shapes(spec: AdapterSpec, cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every adapter tensor ``spec`` instantiates."""
    spec.validate(cfg)
    k = spec.width(cfg)
    prefix = NAME_PREFIX[spec.kind]
    shapes: dict[str, tuple[int, ...]] = {}
    for i in spec.active_blocks(cfg):
        for site in spec.placement:
            base = f"block.{i}.{prefix}.{site}."
            if spec.kind == "lora":
                d_in, d_out = site_dims(site, cfg)
                shapes[base + "a"] = (d_in, k)
                shapes[base + "b"] = (k, d_out)
            else:
                D = serial_width(site, cfg)
                shapes[base + "w_a"] = (D, k)
                shapes[base + "w_b"] = (k, D)
                if spec.bias:
                    shapes[base + "b_a"] = (D,)
    return shapes


def adapter_param_count(spec: AdapterSpec, cfg: ViTConfig) -> int:
    """Closed form: ``2*D*k (+D)`` per serial adapter, ``k*(D_in + D_out)`` per LoRA."""
    k = spec.width(cfg)
    per_block = 0
    for site in spec.placement:
        if spec.kind == "lora":
            per_block += k * sum(site_dims(site, cfg))
        else:
            D = serial_width(site, cfg)
            per_block += 2 * D * k + (D if spec.bias else 0)
    return per_block * len(spec.active_blocks(cfg))


def build_adapted_model(store: WeightStore, cfg: ViTConfig, spec: AdapterSpec = DEFAULT_SPEC,
                        seed: int = 0, train_head: bool = True,
                        init_std: float = 0.02) -> tuple[WeightStore, TrainableMask]:
    """Attach zero-initialised adapters; backbone frozen, adapters (and head) trainable.

    ``w_b`` (LoRA ``b``) starts at zero so the adapted model initially computes
    exactly what the frozen backbone computes.
    """
    store.check_backbone(cfg)
    if store.adapter_names():
        raise ConfigError("store already carries adapters; merge them first")
    rng = SeededRng(seed, (0xADA,))
    out = store.copy()
    dtype = store.dtype
    for name in out:
        out.frozen[name] = not (train_head and name.startswith("head."))
    for name, shape in adapter_tensor_shapes(spec, cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("w_a", "a"):
            arr = rng.normal(shape, init_std, dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        out.add(name, arr, frozen=False)
    out.meta["adapter"] = json.dumps(spec.to_dict(), sort_keys=True)
    return out, TrainableMask.from_store(out)


def infer_adapters(store: WeightStore) -> dict[tuple[int, str], dict[str, str]]:
    """Group adapter tensors by ``(block, site)``: ``{"kind": ..., leaf: name}``."""
    groups: dict[tuple[int, str], dict[str, str]] = {}
    for name in store:
        parsed = parse_adapter_name(name)
        if parsed is None:
            if not is_backbone_name(name):
                raise ShapeError(f"unrecognised tensor {name!r}")
            continue
        block, prefix, site, leaf = parsed
        group = groups.setdefault((block, site), {"kind": KIND_OF_PREFIX[prefix]})
        if group["kind"] != KIND_OF_PREFIX[prefix]:
            from .errors import CheckpointError

            raise CheckpointError(f"block {block} site {site!r} mixes adapter kinds")
        group[leaf] = name
    return groups
