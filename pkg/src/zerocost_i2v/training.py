"""AdamW training, evaluation and the adaptation-strategy comparison."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tz
from .adaptation import AdapterSpec, TrainableMask, build_adapted_model
from .data import SyntheticVideoSpec, VideoDataset, gen_synthetic
from .errors import ConfigError, ContractError, NumericError, TrainingDivergedError
from .stdha import HeadOffsetPlan
from .tensor import GradTape, SeededRng, Tensor
from .vit import ViTConfig, WeightStore, model_forward, predict_logits

STRATEGIES = ("full_finetune", "linear_probe", "temporal_head_only", "linear_adapter", "lora",
              "gelu_adapter")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    label_smoothing: float = 0.0
    seed: int = 0
    optimizer: str = "adamw"
    warmup_steps: int = 0
    #: full fine-tuning runs at this fraction of ``learning_rate``
    full_finetune_lr_scale: float = 0.1
    #: steps of single-frame backbone training before freezing (0 = off)
    warm_start_steps: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optimizer != "adamw":
            raise ConfigError(f"only the adamw optimizer is supported, got {self.optimizer!r}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.warmup_steps < 0 or self.warm_start_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if not 0 < self.full_finetune_lr_scale <= 1:
            raise ConfigError("full_finetune_lr_scale must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


@dataclass
class Metrics:
    top1: float | None = None
    loss: float | None = None
    per_class: list[float] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Decoupled weight decay Adam over named arrays, honouring element masks.

    Elements outside an element mask receive neither gradient steps nor decay,
    so they stay bit-identical.
    """

    def __init__(self, store: WeightStore, mask: TrainableMask, tcfg: TrainConfig,
                 lr: float | None = None):
        self.store = store
        self.mask = mask
        self.tcfg = tcfg
        self.lr = tcfg.learning_rate if lr is None else lr
        self.names = [n for n in mask.trainable_names() if n in store]
        self.m = {n: np.zeros(store[n].shape, np.float64) for n in self.names}
        self.v = {n: np.zeros(store[n].shape, np.float64) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c = self.tcfg
        lr = self.lr
        if c.warmup_steps:
            lr *= min(1.0, self.t / c.warmup_steps)
        if lr == 0:
            return
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, np.float64)
            elem = self.mask.element_mask(name)
            if elem is not None:
                g = g * elem
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            w = self.store.arrays[name].astype(np.float64)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                update = update + lr * c.weight_decay * w
            if elem is not None:
                update = update * elem
            self.store.arrays[name] = (w - update).astype(self.store.arrays[name].dtype)


def _frozen_snapshot(store: WeightStore, mask: TrainableMask) -> dict[str, np.ndarray]:
    snap = {}
    for name, arr in store.items():
        if not mask(name):
            snap[name] = arr.copy()
        elif mask.element_mask(name) is not None:
            snap[name] = arr[~mask.element_mask(name)].copy()
    return snap


def _check_frozen(store: WeightStore, mask: TrainableMask, snap: dict[str, np.ndarray]) -> None:
    for name, ref in snap.items():
        arr = store[name]
        if mask(name):
            arr = arr[~mask.element_mask(name)]
        if not np.array_equal(arr, ref):
            raise ContractError(f"frozen weight {name!r} changed during training")


def _batch_loss(params, frames, labels, cfg, plan, temporal, smoothing):
    logits = model_forward(frames, params, cfg, plan, temporal)
    return tz.cross_entropy(logits, labels, smoothing)


def train(store: WeightStore, cfg: ViTConfig, data: VideoDataset, tcfg: TrainConfig,
          mask: TrainableMask | None = None, plan=None, temporal=None, lr: float | None = None,
          log: Callable[[dict], None] | None = None) -> tuple[WeightStore, Metrics]:
    """Mini-batch AdamW on the trainable tensors of a copy of ``store``.

    ``log`` receives one JSON-serialisable record per epoch.  A non-finite
    loss raises :class:`TrainingDivergedError`.
    """
    store = store.copy()
    mask = TrainableMask.from_store(store) if mask is None else mask
    for name in mask.trainable_names():
        if name not in store:
            raise ConfigError(f"trainable tensor {name!r} is not in the model")
    if plan is not None:
        plan = HeadOffsetPlan.parse(plan, cfg.heads)
    opt = AdamW(store, mask, tcfg, lr)
    snap = _frozen_snapshot(store, mask)
    rng = SeededRng(tcfg.seed, (0x7A1,))
    metrics = Metrics()
    n = len(data)
    for epoch in range(tcfg.epochs):
        order = rng.spawn(epoch).permutation(n)
        losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            params = store.tensors(mask)
            frames = data.frames[idx].astype(store.dtype, copy=False)
            context = (f"at epoch {epoch}, step {metrics.steps} "
                       f"(lr={opt.lr}, previous loss={losses[-1] if losses else None})")
            try:
                with GradTape() as tape:
                    loss = _batch_loss(params, frames, data.labels[idx], cfg, plan, temporal,
                                       tcfg.label_smoothing)
            except NumericError as exc:
                raise TrainingDivergedError(f"forward pass went non-finite {context}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} {context}")
            tape.backward(loss)
            opt.step({name: t.grad for name, t in params.items() if t.grad is not None})
            metrics.steps += 1
            losses.append(value)
        _check_frozen(store, mask, snap)
        metrics.loss_curve.append(float(np.mean(losses)) if losses else float("nan"))
        if log is not None:
            log({"epoch": epoch, "loss": metrics.loss_curve[-1], "steps": metrics.steps})
    metrics.loss = metrics.loss_curve[-1] if metrics.loss_curve else None
    return store, metrics


def evaluate(store: WeightStore, cfg: ViTConfig, data: VideoDataset, plan=None, temporal=None,
             batch_size: int = 64) -> Metrics:
    """Top-1 (argmax), mean cross-entropy and per-class accuracy."""
    logits = predict_logits(data.frames, store, cfg, plan, temporal, batch_size).astype(np.float64)
    labels = np.asarray(data.labels)
    if len(labels) == 0:
        return Metrics(top1=0.0, loss=0.0, per_class=[0.0] * cfg.num_classes)
    pred = np.argmax(logits, axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per_class = []
    for c in range(cfg.num_classes):
        sel = labels == c
        per_class.append(float(np.mean(pred[sel] == c)) if sel.any() else 0.0)
    return Metrics(top1=float(np.mean(pred == labels)),
                   loss=float(-np.mean(logp[np.arange(len(labels)), labels])),
                   per_class=per_class)


# ----------------------------------------------------------------------------
# backbone warm start


def warm_start(store: WeightStore, cfg: ViTConfig, steps: int, seed: int = 0,
               data_spec: SyntheticVideoSpec | None = None, batch_size: int = 32,
               learning_rate: float = 1e-3) -> WeightStore:
    """Stand-in for image pretraining: train the whole backbone on single frames.

    The single-frame task is "is the sprite in the left or the right half",
    which teaches spatial features but says nothing about motion.  The
    classifier head is re-drawn afterwards so no task label leaks through it,
    and every tensor is marked frozen again.
    """
    if steps <= 0:
        return store.copy()
    spec = data_spec or SyntheticVideoSpec(frames=cfg.frames, image_size=cfg.image_size)
    spec = spec.replace(task="direction", dataset_size=max(2, steps * batch_size // cfg.frames + 2),
                        seed=spec.seed + 7919)
    videos = gen_synthetic(spec)
    frames = videos.frames.reshape((-1, 1) + videos.frames.shape[2:])
    # sprite column from the clean geometry: brightest column of the noisy frame is enough
    column_mass = frames[:, 0, :, :, 0].sum(axis=1)
    labels = (np.argmax(column_mass, axis=1) >= cfg.image_size // 2).astype(np.int64)
    single = cfg.replace(frames=1)
    frame_data = VideoDataset(frames, labels)
    rng = SeededRng(seed, (0x1AB,))
    pick = rng.permutation(len(frame_data))[:steps * batch_size]
    tcfg = TrainConfig(learning_rate=learning_rate, batch_size=batch_size, epochs=1, seed=seed)
    trained, _ = train(store, single, frame_data.subset(pick), tcfg,
                       TrainableMask({n: True for n in store}))
    head = SeededRng(seed, (0x4EAD,))
    trained.arrays["head.w"] = head.normal(trained["head.w"].shape,
                                           1.0 / math.sqrt(cfg.width), trained.dtype)
    trained.arrays["head.b"] = np.zeros_like(trained["head.b"])
    for name in trained:
        trained.frozen[name] = True
    return trained


# ----------------------------------------------------------------------------
# strategy comparison


def temporal_head_mask(store: WeightStore, cfg: ViTConfig, plan, train_head: bool = True) -> TrainableMask:
    """Trainable slices: temporal-head columns of W_q, W_k, W_v and rows of W_o."""
    plan = HeadOffsetPlan.parse(plan, cfg.heads)
    plan.validate(cfg)
    dh = cfg.head_dim
    channels = np.zeros(cfg.width, dtype=bool)
    for h in plan.temporal_heads:
        channels[h * dh:(h + 1) * dh] = True
    mask = TrainableMask({n: False for n in store})
    for i in range(cfg.depth):
        for s in "qkv":
            name = f"block.{i}.attn.w_{s}"
            mask.flags[name] = bool(channels.any())
            mask.elements[name] = np.broadcast_to(channels[None, :], (cfg.width, cfg.width)).copy()
        name = f"block.{i}.attn.w_o"
        mask.flags[name] = bool(channels.any())
        mask.elements[name] = np.broadcast_to(channels[:, None], (cfg.width, cfg.width)).copy()
    if train_head:
        mask.flags["head.w"] = mask.flags["head.b"] = True
    return mask


def strategy_model(strategy: str, store: WeightStore, cfg: ViTConfig, plan=None,
                   spec: AdapterSpec | None = None, seed: int = 0) -> tuple[WeightStore, TrainableMask]:
    """Model and trainable mask for one row of the comparison."""
    spec = spec or AdapterSpec()
    if strategy == "full_finetune":
        return store.copy(), TrainableMask({n: True for n in store})
    if strategy == "linear_probe":
        return store.copy(), TrainableMask({n: n.startswith("head.") for n in store})
    if strategy == "temporal_head_only":
        if plan is None:
            raise ConfigError("temporal_head_only needs an offset plan")
        return store.copy(), temporal_head_mask(store, cfg, plan)
    if strategy == "linear_adapter":
        return build_adapted_model(store, cfg, replace(spec, kind="linear"), seed)
    if strategy == "gelu_adapter":
        return build_adapted_model(store, cfg, replace(spec, kind="gelu"), seed)
    if strategy == "lora":
        lora = AdapterSpec(placement=("q", "v"), kind="lora", bottleneck=spec.bottleneck,
                           ratio=spec.ratio, blocks=spec.blocks)
        return build_adapted_model(store, cfg, lora, seed)
    raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def compare_strategies(store: WeightStore, cfg: ViTConfig, plan, train_data: VideoDataset,
                       test_data: VideoDataset, strategies: Sequence[str] = STRATEGIES,
                       tcfg: TrainConfig = TrainConfig(), spec: AdapterSpec | None = None,
                       verify_samples: int = 50) -> list[dict]:
    """Train every strategy from the same backbone, seed and budget; one row each."""
    from .accounting import count_params
    from .errors import NonMergeableError
    from .reparam import merge_model, verify_equivalence

    rows = []
    for strategy in strategies:
        model, mask = strategy_model(strategy, store, cfg, plan, spec, tcfg.seed)
        lr = tcfg.learning_rate * (tcfg.full_finetune_lr_scale if strategy == "full_finetune" else 1)
        trained, tm = train(model, cfg, train_data, tcfg, mask, plan, lr=lr)
        metrics = evaluate(trained, cfg, test_data, plan)
        cost = count_params(trained, mask)
        row = {"strategy": strategy, "trainable_params": cost.params_trainable,
               "new_params_at_inference": cost.params_new_at_inference,
               "top1": metrics.top1, "train_loss": tm.loss, "merge_max_abs_diff": None,
               "mergeable": None}
        if trained.adapter_names():
            try:
                merged = merge_model(trained)
            except NonMergeableError:
                row["mergeable"] = False
            else:
                report = verify_equivalence(trained, merged, cfg, plan, n_samples=verify_samples,
                                            seed=tcfg.seed)
                row["mergeable"] = True
                row["merge_max_abs_diff"] = report.max_abs_diff
                row["new_params_at_inference"] = merged.num_params() - store.num_params()
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'strategy':<20} {'trainable':>10} {'new@inf':>8} {'top1':>7}  merge"]
    for r in rows:
        merge = "-" if r["mergeable"] is None else (
            "no" if not r["mergeable"] else f"yes ({r['merge_max_abs_diff']:.1e})")
        lines.append(f"{r['strategy']:<20} {r['trainable_params']:>10} "
                     f"{r['new_params_at_inference']:>8} {100 * r['top1']:>6.1f}%  {merge}")
    return "\n".join(lines)


def metrics_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
