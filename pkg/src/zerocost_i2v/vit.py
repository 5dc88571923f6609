"""Frame-wise Vision Transformer used as the frozen image backbone.

Token tensors are laid out ``[B, T, n, d]`` (videos, frames, tokens, channels);
token 0 of every frame is that frame's [cls] token.  Linear maps use the
row-vector convention ``y = x @ W + b`` with ``W`` of shape ``[in, out]``.
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as tz
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import SeededRng, Tensor

#: leaf names of each canonical projection, in store order
ATTN_LEAVES = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")
MLP_LEAVES = ("w_up", "b_up", "w_down", "b_down")
LN_LEAVES = ("gamma", "beta")

_BACKBONE_NAME = re.compile(
    r"^(embed\.(proj|bias)"
    r"|cls_token|pos_embed"
    r"|block\.\d+\.(attn\.(w|b)_[qkvo]|mlp\.(w|b)_(up|down)|ln[12]\.(gamma|beta))"
    r"|final_ln\.(gamma|beta)"
    r"|head\.(w|b))$"
)
_ADAPTER_NAME = re.compile(
    r"^block\.(\d+)\.(adapter|gelu_adapter|lora)\.(qkv|q|k|v|o|mlp_up|mlp_down)\.(w_a|w_b|b_a|a|b)$"
)


def is_backbone_name(name: str) -> bool:
    return bool(_BACKBONE_NAME.match(name))


def parse_adapter_name(name: str):
    """Return ``(block, kind_prefix, site, leaf)`` for an adapter tensor name, else None."""
    m = _ADAPTER_NAME.match(name)
    if m is None:
        return None
    return int(m.group(1)), m.group(2), m.group(3), m.group(4)


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4
    width: int = 64
    heads: int = 8
    mlp_width: int | None = None
    patch_size: int = 4
    image_size: int = 32
    frames: int = 8
    num_classes: int = 2
    channels: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.mlp_width is None:
            object.__setattr__(self, "mlp_width", 4 * self.width)
        self.validate()

    def validate(self) -> None:
        for name in ("depth", "width", "heads", "patch_size", "image_size", "frames",
                     "num_classes", "channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"ViTConfig.{name} must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.mlp_width <= self.width:
            raise ConfigError("mlp_width must exceed width")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ViTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes) -> "ViTConfig":
        data = self.to_dict()
        data.update(changes)
        if "width" in changes and "mlp_width" not in changes:
            data["mlp_width"] = None
        return ViTConfig(**data)


#: "ViT-Tiny/4", the desk-scale default
VIT_TINY4 = ViTConfig()
VIT_B16 = ViTConfig(depth=12, width=768, heads=12, patch_size=16, image_size=224,
                    frames=8, num_classes=400, channels=3)
VIT_L14 = ViTConfig(depth=24, width=1024, heads=16, patch_size=14, image_size=224,
                    frames=8, num_classes=400, channels=3)
PRESETS = {"vit-tiny4": VIT_TINY4, "vit-b16": VIT_B16, "vit-l14": VIT_L14}


def backbone_shapes(cfg: ViTConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical tensor names and shapes of a backbone for ``cfg``."""
    d, dm = cfg.width, cfg.mlp_width
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.proj"] = (cfg.patch_dim, d)
    shapes["embed.bias"] = (d,)
    shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (cfg.num_tokens, d)
    for i in range(cfg.depth):
        p = f"block.{i}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for s in "qkvo":
            shapes[p + f"attn.w_{s}"] = (d, d)
            shapes[p + f"attn.b_{s}"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w_up"] = (d, dm)
        shapes[p + "mlp.b_up"] = (dm,)
        shapes[p + "mlp.w_down"] = (dm, d)
        shapes[p + "mlp.b_down"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


@dataclass
class WeightStore:
    """Ordered map from tensor name to array, with a frozen flag per tensor.

    ``meta`` carries string metadata (model config, offset plan) that travels
    with checkpoints.
    """

    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    frozen: dict[str, bool] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array, frozen: bool = True) -> None:
        if name in self.arrays:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if not (is_backbone_name(name) or parse_adapter_name(name)):
            raise CheckpointError(f"tensor name {name!r} does not match the naming grammar")
        self.arrays[name] = np.ascontiguousarray(array)
        self.frozen[name] = bool(frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise CheckpointError(f"missing weight {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def dtype(self):
        for arr in self.arrays.values():
            return arr.dtype
        return np.dtype(np.float64)

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "WeightStore":
        out = WeightStore(meta=dict(self.meta))
        for name, arr in self.arrays.items():
            out.arrays[name] = arr.copy()
            out.frozen[name] = self.frozen[name]
        return out

    def astype(self, dtype) -> "WeightStore":
        out = self.copy()
        for name in out.arrays:
            out.arrays[name] = out.arrays[name].astype(dtype)
        return out

    def tensors(self, trainable: Callable[[str], bool] | None = None) -> dict[str, Tensor]:
        """Wrap every array as a :class:`Tensor`; ``trainable(name)`` sets ``requires_grad``."""
        return {name: Tensor(arr, requires_grad=bool(trainable and trainable(name)))
                for name, arr in self.arrays.items()}

    def adapter_names(self) -> list[str]:
        return [n for n in self.arrays if parse_adapter_name(n)]

    def check_backbone(self, cfg: ViTConfig) -> None:
        """Raise :class:`CheckpointError` unless every canonical tensor is present with its shape."""
        for name, shape in backbone_shapes(cfg).items():
            if name not in self.arrays:
                raise CheckpointError(f"missing weight {name!r}")
            if self.arrays[name].shape != shape:
                raise CheckpointError(
                    f"weight {name!r} has shape {self.arrays[name].shape}, expected {shape}")
        for name in self.arrays:
            m = re.match(r"^block\.(\d+)\.", name)
            if m and int(m.group(1)) >= cfg.depth:
                raise CheckpointError(f"weight {name!r} refers to a block beyond depth {cfg.depth}")


def init_backbone(cfg: ViTConfig, seed: int = 0, dtype=np.float64,
                  embed_std: float = 0.5) -> WeightStore:
    """Random backbone: projections ``N(0, 1/fan_in)``, small random biases, unit LN."""
    rng = SeededRng(seed, (0x5EED,))
    store = WeightStore(meta={"model": _json_dumps(cfg.to_dict())})
    for name, shape in backbone_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape, dtype=dtype)
        elif leaf == "beta":
            arr = np.zeros(shape, dtype=dtype)
        elif name in ("cls_token", "pos_embed"):
            arr = rng.normal(shape, embed_std, dtype)
        elif len(shape) == 2:
            arr = rng.normal(shape, 1.0 / math.sqrt(shape[0]), dtype)
        else:
            arr = rng.normal(shape, 0.02, dtype)
        store.add(name, arr, frozen=True)
    return store


def _json_dumps(obj) -> str:
    import json

    return json.dumps(obj, sort_keys=True)


# ----------------------------------------------------------------------------
# forward pass


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tz.matmul(x, w)
    return y if b is None else tz.add(y, b)


class BlockParams:
    """Tensors of one block plus whatever adapters wrap its projections.

    Projections are resolved by site (``q``, ``k``, ``v``, ``o``, ``mlp_up``,
    ``mlp_down``).  Adapter kinds are recognised from tensor names:
    ``adapter`` (linear, serial), ``gelu_adapter`` (serial with GELU) and
    ``lora`` (parallel low-rank).  Serial adapters act on the projection input,
    except on ``mlp_down`` where they act on its output so that every serial
    adapter is ``width`` channels wide.
    """

    SITES = ("q", "k", "v", "o", "mlp_up", "mlp_down")

    def __init__(self, params: Mapping[str, Tensor], index: int):
        self.params = params
        self.index = index
        self.prefix = f"block.{index}."

    def __getitem__(self, leaf: str) -> Tensor:
        try:
            return self.params[self.prefix + leaf]
        except KeyError:
            raise CheckpointError(f"missing weight {self.prefix + leaf!r}") from None

    def get(self, leaf: str) -> Tensor | None:
        return self.params.get(self.prefix + leaf)

    def weight(self, site: str) -> tuple[Tensor, Tensor]:
        if site in ("q", "k", "v", "o"):
            return self[f"attn.w_{site}"], self[f"attn.b_{site}"]
        short = site.split("_")[1]
        return self[f"mlp.w_{short}"], self[f"mlp.b_{short}"]

    def serial_adapter(self, site: str):
        """``(kind, w_a, w_b, b_a)`` of a serial adapter at ``site`` or None."""
        for kind in ("adapter", "gelu_adapter"):
            w_a = self.get(f"{kind}.{site}.w_a")
            if w_a is not None:
                return kind, w_a, self[f"{kind}.{site}.w_b"], self.get(f"{kind}.{site}.b_a")
        return None

    def adapt(self, site: str, x: Tensor) -> Tensor:
        ad = self.serial_adapter(site)
        if ad is None:
            return x
        from .adaptation import LinearAdapterWeights, adapter_forward, gelu_adapter_forward

        kind, w_a, w_b, b_a = ad
        fn = adapter_forward if kind == "adapter" else gelu_adapter_forward
        return fn(x, LinearAdapterWeights(w_a, w_b, b_a))

    def project(self, site: str, x: Tensor, pre_adapted: bool = False) -> Tensor:
        w, b = self.weight(site)
        if not pre_adapted and site != "mlp_down":
            x = self.adapt(site, x)
        a = self.get(f"lora.{site}.a")
        if a is not None:
            from .adaptation import LoRAWeights, lora_forward

            y = lora_forward(x, LoRAWeights(a, self[f"lora.{site}.b"]), w, b)
        else:
            y = linear(x, w, b)
        if site == "mlp_down":
            y = self.adapt(site, y)
        return y

    def qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        shared = self.serial_adapter("qkv")
        if shared is not None:
            x = self.adapt("qkv", x)
        return tuple(self.project(s, x) for s in "qkv")


AttentionOp = Callable[[Tensor, BlockParams, ViTConfig], Tensor]


def split_heads(x: Tensor, cfg: ViTConfig) -> Tensor:
    """``[B, T, n, d] -> [B, T, h, n, d/h]``."""
    b, t, n, _ = x.shape
    return tz.transpose(tz.reshape(x, (b, t, n, cfg.heads, cfg.head_dim)), (0, 1, 3, 2, 4))


def merge_heads(x: Tensor) -> Tensor:
    """``[B, T, h, n, d/h] -> [B, T, n, d]``."""
    b, t, h, n, dh = x.shape
    return tz.reshape(tz.transpose(x, (0, 1, 3, 2, 4)), (b, t, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the token axis of ``[..., n, dh]`` tensors."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tz.mul(tz.matmul(q, tz.swapaxes(k, -1, -2)), scale)
    return tz.matmul(tz.softmax_last_axis(scores), v)


def _as_video_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return tz.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected tokens [T, n, d] or [B, T, n, d], got {x.shape}")
    return x, False


def mhsa_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig) -> Tensor:
    """Per-frame multi-head self-attention: no information crosses frames."""
    if cfg.width % cfg.heads:
        raise ConfigError(f"width {cfg.width} is not divisible by heads {cfg.heads}")
    x, squeeze = _as_video_batch(x)
    q, k, v = (split_heads(t, cfg) for t in weights.qkv(x))
    out = weights.project("o", merge_heads(attend(q, k, v)))
    return tz.reshape(out, out.shape[1:]) if squeeze else out


def mlp_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig) -> Tensor:
    return weights.project("mlp_down", tz.gelu(weights.project("mlp_up", x)))


def block_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig,
                  attention_op: AttentionOp = mhsa_forward,
                  branch_shift: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``z = x + Attn(LN(x))``; ``out = z + MLP(LN(z))``.

    ``branch_shift`` (used by the [cls]-shift baseline) is applied to each
    normalised branch input before its sublayer.
    """
    h = tz.layer_norm(x, weights["ln1.gamma"], weights["ln1.beta"], cfg.ln_eps)
    if branch_shift is not None:
        h = branch_shift(h)
    z = tz.add(x, attention_op(h, weights, cfg))
    h = tz.layer_norm(z, weights["ln2.gamma"], weights["ln2.beta"], cfg.ln_eps)
    if branch_shift is not None:
        h = branch_shift(h)
    return tz.add(z, mlp_forward(h, weights, cfg))


def patch_embed(frames: Tensor, params: Mapping[str, Tensor], cfg: ViTConfig) -> Tensor:
    """``[B, T, s, s, C] -> [B, T, n, d]`` with a [cls] token prepended per frame."""
    if frames.ndim == 4:
        frames = tz.reshape(frames, (1,) + frames.shape)
    b, t, s1, s2, c = frames.shape
    if (s1, s2, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"frames of shape {frames.shape[2:]} do not match "
            f"image_size={cfg.image_size}, channels={cfg.channels}")
    g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
    x = tz.reshape(frames, (b, t, g, p, g, p, c))
    x = tz.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    x = tz.reshape(x, (b, t, g * g, p * p * c))
    tokens = linear(x, _get(params, "embed.proj"), _get(params, "embed.bias"))
    cls = tz.broadcast_leading(tz.reshape(_get(params, "cls_token"), (1, cfg.width)), (b, t))
    x = tz.concat([cls, tokens], axis=2)
    return tz.add(x, _get(params, "pos_embed"))


def _get(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise CheckpointError(f"missing weight {name!r}") from None


def as_params(weights, dtype=None) -> Mapping[str, Tensor]:
    if isinstance(weights, WeightStore):
        return weights.tensors()
    return weights


def model_forward(frames, weights, cfg: ViTConfig, plan=None, temporal=None,
                  return_hidden: bool = False, return_features: bool = False):
    """Video logits ``[B, num_classes]`` (or ``[num_classes]`` for one video).

    ``plan`` selects head-relocated attention; ``temporal`` may instead name a
    zero-cost baseline (a :class:`~zerocost_i2v.stdha.ShiftSpec` or a
    :class:`~zerocost_i2v.stdha.ClsShift`).  With neither, blocks use plain
    per-frame attention.
    """
    from .stdha import attention_for

    params = as_params(weights)
    dtype = _get(params, "embed.proj").dtype
    single = False
    if not isinstance(frames, Tensor):
        frames = Tensor(np.asarray(frames, dtype=dtype))
    elif frames.dtype != dtype:
        frames = Tensor(frames.data.astype(dtype))
    if frames.ndim == 4:
        single = True
    attention_op, branch_shift = attention_for(cfg, plan, temporal)
    x = patch_embed(frames, params, cfg)
    hidden = []
    for i in range(cfg.depth):
        x = block_forward(x, BlockParams(params, i), cfg, attention_op, branch_shift)
        if return_hidden:
            hidden.append(x)
    x = tz.layer_norm(x, _get(params, "final_ln.gamma"), _get(params, "final_ln.beta"), cfg.ln_eps)
    b, t = x.shape[:2]
    cls = tz.reshape(tz.take(x, [0], axis=2), (b, t, cfg.width))
    pooled = tz.mean(cls, axis=1)
    logits = linear(pooled, _get(params, "head.w"), _get(params, "head.b"))
    if single:
        logits = tz.reshape(logits, (cfg.num_classes,))
        pooled = tz.reshape(pooled, (cfg.width,))
    if return_hidden or return_features:
        extras = {}
        if return_hidden:
            extras["hidden"] = hidden
        if return_features:
            extras["features"] = pooled
        return logits, extras
    return logits


def predict_logits(frames: np.ndarray, store: WeightStore, cfg: ViTConfig, plan=None,
                   temporal=None, batch_size: int = 64) -> np.ndarray:
    """Batched inference without gradient recording."""
    params = store.tensors()
    out = []
    for start in range(0, len(frames), batch_size):
        chunk = np.asarray(frames[start:start + batch_size], dtype=store.dtype)
        out.append(model_forward(chunk, params, cfg, plan, temporal).data)
    if not out:
        return np.zeros((0, cfg.num_classes), dtype=store.dtype)
    return np.concatenate(out, axis=0)
