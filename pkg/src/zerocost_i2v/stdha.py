"""Head-relocated spatial-temporal attention and its zero-cost baselines.

A :class:`HeadOffsetPlan` gives every attention head a frame offset.  Head
``i`` keeps its query from frame ``t`` but reads keys and values from frame
``clip(t + offsets[i], 0, T - 1)``.  Heads with offset 0 stay spatial.  The
same projection weights are used as in plain attention, so parameter and FLOP
counts are unchanged for every plan.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from . import tensor as tz
from .errors import ConfigError
from .tensor import Tensor
from .vit import (BlockParams, ViTConfig, _as_video_batch, attend, merge_heads,
                  mhsa_forward, split_heads)

_ENTRY = re.compile(r"^\s*([+-]?\d+)\s*[*·]\s*(\d+)\s*$")


@dataclass(frozen=True)
class HeadOffsetPlan:
    offsets: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def k(self) -> int:
        """Number of temporal heads."""
        return sum(1 for o in self.offsets if o != 0)

    @property
    def temporal_heads(self) -> list[int]:
        return [i for i, o in enumerate(self.offsets) if o != 0]

    def validate(self, cfg: ViTConfig) -> None:
        if len(self.offsets) != cfg.heads:
            raise ConfigError(
                f"offset plan has {len(self.offsets)} entries but the model has {cfg.heads} heads")

    @classmethod
    def zeros(cls, heads: int) -> "HeadOffsetPlan":
        return cls((0,) * heads)

    @classmethod
    def from_multiset(cls, text: str, heads: int | None = None) -> "HeadOffsetPlan":
        """Parse ``"{1*1, -1*1, 0*10}"`` (``·`` also accepted); temporal heads come first.

        If ``heads`` is given and the listed counts fall short, the remainder
        is filled with spatial heads.
        """
        body = text.strip().replace("−", "-").replace("\\cdot", "·")
        if not (body.startswith("{") and body.endswith("}")):
            raise ConfigError(f"multiset plan must be wrapped in braces: {text!r}")
        temporal: list[int] = []
        spatial = 0
        for entry in filter(None, (e.strip() for e in body[1:-1].split(","))):
            m = _ENTRY.match(entry)
            if m is None:
                raise ConfigError(f"cannot parse multiset entry {entry!r} (counts must be integers)")
            offset, count = int(m.group(1)), int(m.group(2))
            if offset == 0:
                spatial += count
            else:
                temporal.extend([offset] * count)
        total = len(temporal) + spatial
        if heads is not None:
            if total > heads:
                raise ConfigError(f"multiset lists {total} heads but the model has {heads}")
            spatial += heads - total
        return cls(tuple(temporal) + (0,) * spatial)

    @classmethod
    def parse(cls, value, heads: int | None = None) -> "HeadOffsetPlan":
        """Accept a plan, a list of ints, a JSON array string or multiset notation."""
        if isinstance(value, HeadOffsetPlan):
            return value
        if isinstance(value, str):
            text = value.strip()
            if text.startswith("{"):
                return cls.from_multiset(text, heads)
            try:
                value = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"cannot parse offset plan {value!r}") from exc
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"offset plan must be a list of integers, got {value!r}")
        return cls(tuple(value))

    def to_json(self) -> str:
        return json.dumps(list(self.offsets))

    def to_multiset(self) -> str:
        counts: dict[int, int] = {}
        for o in self.offsets:
            counts[o] = counts.get(o, 0) + 1
        order = [o for o in counts if o != 0] + ([0] if 0 in counts else [])
        return "{" + ", ".join(f"{o}·{counts[o]}" for o in order) + "}"

    def __str__(self) -> str:
        return self.to_multiset()


def default_plan(heads: int, frames: int) -> HeadOffsetPlan:
    """Offset pattern that widens with clip length: RF 3 up to 8 frames, 4 up to 16, 6 beyond."""
    if frames <= 8:
        temporal = (1, -1)
    elif frames <= 16:
        temporal = (1, -1, 2)
    else:
        temporal = (1, -1, 2, -2, 3)
    if len(temporal) >= heads:
        raise ConfigError(f"{heads} heads are too few for the default {frames}-frame plan")
    return HeadOffsetPlan(temporal + (0,) * (heads - len(temporal)))


def temporal_receptive_field(plan) -> int:
    """Frames visible to one layer: ``max(offsets+{0}) - min(offsets+{0}) + 1``."""
    offsets = tuple(HeadOffsetPlan.parse(plan).offsets) + (0,)
    return max(offsets) - min(offsets) + 1


def stacked_receptive_field(plan, layers: int) -> int:
    """Receptive field of ``layers`` stacked layers (offsets compose additively)."""
    if layers < 1:
        raise ConfigError("layers must be >= 1")
    return layers * (temporal_receptive_field(plan) - 1) + 1


def shift_heads(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """Per-head frame gather on ``[B, T, h, n, dh]``: head ``i`` reads frame ``t + offsets[i]``."""
    offsets = tuple(offsets)
    if not any(offsets):
        return x
    groups: dict[int, list[int]] = {}
    for head, off in enumerate(offsets):
        groups.setdefault(off, []).append(head)
    if len(groups) == 1:
        return tz.gather_time(x, offsets[0], axis=1)
    order: list[int] = []
    parts = []
    for off, heads in groups.items():
        parts.append(tz.gather_time(tz.take(x, heads, axis=2), off, axis=1))
        order.extend(heads)
    y = tz.concat(parts, axis=2)
    if order != list(range(len(offsets))):
        y = tz.take(y, np.argsort(order), axis=2)
    return y


def stdha_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig, plan,
                  relocate_query: bool = False, return_heads: bool = False):
    """Attention where head ``i`` takes K and V from frame ``clip(t + offsets[i])``.

    With ``relocate_query`` the query is relocated as well (the "HR QKV"
    variant).  ``return_heads`` also returns the concatenated head outputs
    ``[B, T, h, n, dh]`` before the output projection.
    """
    plan = HeadOffsetPlan.parse(plan, cfg.heads)
    plan.validate(cfg)
    x, squeeze = _as_video_batch(x)
    q, k, v = (split_heads(t, cfg) for t in weights.qkv(x))
    k = shift_heads(k, plan.offsets)
    v = shift_heads(v, plan.offsets)
    if relocate_query:
        q = shift_heads(q, plan.offsets)
    heads = attend(q, k, v)
    out = weights.project("o", merge_heads(heads))
    if squeeze:
        out = tz.reshape(out, out.shape[1:])
    return (out, heads) if return_heads else out


@dataclass(frozen=True)
class ShiftSpec:
    """Temporal channel shift inside each head (baseline).

    ``ratio`` of each head's channels are replaced by the same channels of
    adjacent frames: the first half from ``t - 1``, the rest from ``t + 1``.
    """

    ratio: float
    targets: tuple[str, ...] = ("k", "v")

    def shifted_channels(self, cfg: ViTConfig) -> int:
        if not 0 <= self.ratio < 1:
            raise ConfigError("shift ratio must lie in [0, 1)")
        if not set(self.targets) <= {"q", "k", "v"} or not self.targets:
            raise ConfigError(f"shift targets must be a non-empty subset of q/k/v: {self.targets}")
        exact = self.ratio * cfg.head_dim
        count = int(round(exact))
        if abs(exact - count) > 1e-9:
            raise ConfigError(
                f"ratio {self.ratio} of head width {cfg.head_dim} is not an integral channel count")
        return count


def _shift_channels(x: Tensor, count: int, time_axis: int) -> Tensor:
    """Replace the leading ``count`` channels (last axis) with neighbours in time."""
    if count == 0:
        return x
    width = x.shape[-1]
    back = count // 2
    pieces = []
    if back:
        pieces.append(tz.gather_time(tz.take(x, range(0, back), axis=-1), -1, axis=time_axis))
    pieces.append(tz.gather_time(tz.take(x, range(back, count), axis=-1), 1, axis=time_axis))
    if count < width:
        pieces.append(tz.take(x, range(count, width), axis=-1))
    return tz.concat(pieces, axis=-1)


def shift_kv_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig, spec: ShiftSpec) -> Tensor:
    count = spec.shifted_channels(cfg)
    x, squeeze = _as_video_batch(x)
    qkv = {}
    for name, t in zip("qkv", weights.qkv(x)):
        t = split_heads(t, cfg)
        if name in spec.targets:
            t = _shift_channels(t, count, time_axis=1)
        qkv[name] = t
    out = weights.project("o", merge_heads(attend(qkv["q"], qkv["k"], qkv["v"])))
    return tz.reshape(out, out.shape[1:]) if squeeze else out


@dataclass(frozen=True)
class ClsShift:
    """[cls]-token channel shift applied before both sublayers (baseline)."""

    fraction: float = 0.25

    def shifted_channels(self, cfg: ViTConfig) -> int:
        if not 0 <= self.fraction < 1:
            raise ConfigError("cls shift fraction must lie in [0, 1)")
        return int(round(self.fraction * cfg.width))


def cls_shift(x: Tensor, count: int) -> Tensor:
    """Shift ``count`` channels of each frame's [cls] token (half back, half forward in time)."""
    x, squeeze = _as_video_batch(x)
    if count and x.shape[1] > 1:
        n = x.shape[2]
        cls = _shift_channels(tz.take(x, [0], axis=2), count, time_axis=1)
        x = tz.concat([cls, tz.take(x, range(1, n), axis=2)], axis=2)
    return tz.reshape(x, x.shape[1:]) if squeeze else x


def cls_shift_forward(x: Tensor, weights: BlockParams, cfg: ViTConfig,
                      spec: ClsShift = ClsShift()) -> Tensor:
    return mhsa_forward(cls_shift(x, spec.shifted_channels(cfg)), weights, cfg)


def attention_for(cfg: ViTConfig, plan=None, temporal=None):
    """Resolve ``(attention_op, branch_shift)`` for :func:`~zerocost_i2v.vit.model_forward`."""
    if plan is not None and temporal is not None:
        raise ConfigError("give either an offset plan or a baseline temporal operator, not both")
    if plan is not None:
        plan = HeadOffsetPlan.parse(plan, cfg.heads)
        plan.validate(cfg)
        return partial(stdha_forward, plan=plan), None
    if isinstance(temporal, ShiftSpec):
        temporal.shifted_channels(cfg)
        return partial(shift_kv_forward, spec=temporal), None
    if isinstance(temporal, ClsShift):
        count = temporal.shifted_channels(cfg)
        return mhsa_forward, partial(cls_shift, count=count)
    if temporal is not None:
        raise ConfigError(f"unknown temporal operator {temporal!r}")
    return mhsa_forward, None
