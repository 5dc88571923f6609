"""Fold trained linear adapters and LoRA updates back into the frozen projections.

Serial adapter on the input side:  ``x (I + A B) W + b  ==  x W' + b`` with
``W' = (I + A B) W``.  On the output side (``mlp_down``):
``(x W + b)(I + A B) == x W' + b'`` with ``W' = W (I + A B)`` and
``b' = b (I + A B)``.  LoRA: ``W' = W + A B``.  All products are formed in
float64 and rounded once to the store's dtype.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import LinearAdapterWeights, LoRAWeights, infer_adapters
from .errors import CheckpointError, ConfigError, NonMergeableError, ShapeError
from .tensor import SeededRng, Tensor
from .vit import ViTConfig, WeightStore, is_backbone_name, model_forward


def _f64(x) -> np.ndarray | None:
    if x is None:
        return None
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def merge_linear_adapter(w_old, b_old, aw: LinearAdapterWeights, side: str = "input"):
    """Return ``(w_new, b_new)`` with the shapes and dtype of ``(w_old, b_old)``."""
    if aw.kind == "gelu":
        raise NonMergeableError("a GELU adapter is nonlinear and cannot be folded into a projection")
    dtype = (w_old.data if isinstance(w_old, Tensor) else np.asarray(w_old)).dtype
    W, b = _f64(w_old), _f64(b_old)
    A, B, b_a = _f64(aw.w_a), _f64(aw.w_b), _f64(aw.b_a)
    LinearAdapterWeights(A, B, b_a).check()
    M = np.eye(A.shape[0]) + A @ B
    if side == "input":
        if W.shape[0] != A.shape[0]:
            raise ShapeError(f"adapter width {A.shape[0]} does not match W_old input {W.shape}")
        w_new = M @ W
        b_new = b
        if b_a is not None:
            shift = b_a @ W
            b_new = shift if b is None else b + shift
    elif side == "output":
        if W.shape[1] != A.shape[0]:
            raise ShapeError(f"adapter width {A.shape[0]} does not match W_old output {W.shape}")
        w_new = W @ M
        b_new = None if b is None else b @ M
        if b_a is not None:
            b_new = b_a if b_new is None else b_new + b_a
    else:
        raise ConfigError(f"side must be 'input' or 'output', got {side!r}")
    return w_new.astype(dtype), None if b_new is None else b_new.astype(dtype)


def merge_lora(w_old, lw: LoRAWeights) -> np.ndarray:
    dtype = (w_old.data if isinstance(w_old, Tensor) else np.asarray(w_old)).dtype
    W, A, B = _f64(w_old), _f64(lw.a), _f64(lw.b)
    LoRAWeights(A, B).check(W.shape)
    return (W + A @ B).astype(dtype)


def _proj_names(block: int, site: str) -> tuple[str, str]:
    if site in ("q", "k", "v", "o"):
        return f"block.{block}.attn.w_{site}", f"block.{block}.attn.b_{site}"
    short = site.split("_")[1]
    return f"block.{block}.mlp.w_{short}", f"block.{block}.mlp.b_{short}"


def merge_model(adapted: WeightStore, spec=None) -> WeightStore:
    """Fold every adapter of ``adapted`` into the backbone; adapter tensors disappear.

    ``spec``, if given, must agree with the adapters found in the store.
    Raises :class:`NonMergeableError` for GELU adapters and
    :class:`CheckpointError` for incomplete or orphaned adapter tensors.
    """
    groups = infer_adapters(adapted)
    if spec is not None:
        kinds = {g["kind"] for g in groups.values()}
        if groups and kinds != {spec.kind}:
            raise ConfigError(f"store adapters are {sorted(kinds)}, spec says {spec.kind!r}")
    for (block, site), group in groups.items():
        if group["kind"] == "gelu":
            raise NonMergeableError(
                f"block {block} site {site!r} carries a GELU adapter; its nonlinearity blocks merging")
        need = ("a", "b") if group["kind"] == "lora" else ("w_a", "w_b")
        missing = [leaf for leaf in need if leaf not in group]
        if missing:
            raise CheckpointError(f"orphan adapter tensors at block {block} site {site!r}: missing {missing}")
        targets = "qkv" if site == "qkv" else (site,)
        for t in targets:
            if _proj_names(block, t)[0] not in adapted:
                raise CheckpointError(f"adapter at block {block} site {site!r} has no projection to wrap")
    merged = WeightStore(meta={k: v for k, v in adapted.meta.items() if k != "adapter"})
    for name, arr in adapted.items():
        if is_backbone_name(name):
            merged.add(name, arr.copy(), frozen=adapted.frozen[name])
    # LoRA acts on the (possibly adapted) input of the projection, so fold it first.
    ordered = sorted(groups.items(), key=lambda kv: kv[1]["kind"] != "lora")
    for (block, site), group in ordered:
        if group["kind"] == "lora":
            w_name, _ = _proj_names(block, site)
            lw = LoRAWeights(adapted[group["a"]], adapted[group["b"]])
            merged.arrays[w_name] = merge_lora(merged[w_name], lw)
            continue
        aw = LinearAdapterWeights(adapted[group["w_a"]], adapted[group["w_b"]],
                                  adapted[group["b_a"]] if "b_a" in group else None)
        targets = "qkv" if site == "qkv" else (site,)
        for t in targets:
            w_name, b_name = _proj_names(block, t)
            side = "output" if t == "mlp_down" else "input"
            w_new, b_new = merge_linear_adapter(merged[w_name], merged[b_name], aw, side)
            merged.arrays[w_name] = w_new
            merged.arrays[b_name] = b_new
    return merged


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float
    n_samples: int
    dtype: str
    per_layer_diffs: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff <= self.tolerance)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pass"] = self.passed
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def random_videos(cfg: ViTConfig, n: int, seed: int, dtype=np.float64, batch: int = 100):
    """Deterministic battery of Gaussian videos, yielded in batches."""
    rng = SeededRng(seed, (0xE0,))
    for i, start in enumerate(range(0, n, batch)):
        size = min(batch, n - start)
        shape = (size, cfg.frames, cfg.image_size, cfg.image_size, cfg.channels)
        yield rng.spawn(i).normal(shape, 1.0, dtype)


def verify_equivalence(adapted: WeightStore, merged: WeightStore, cfg: ViTConfig, plan=None,
                       n_samples: int = 1000, tolerance: float = 1e-4, seed: int = 0,
                       batch_size: int = 100, temporal=None, path=None) -> EquivalenceReport:
    """Compare logits (and each block's output) of two stores on seeded random videos."""
    for store in (adapted, merged):
        store.check_backbone(cfg)
    if adapted.dtype != merged.dtype:
        raise ConfigError(f"stores differ in precision: {adapted.dtype} vs {merged.dtype}")
    for key in ("model",):
        if key in adapted.meta and key in merged.meta and adapted.meta[key] != merged.meta[key]:
            raise ConfigError("stores were built for different model configurations")
    pa, pm = adapted.tensors(), merged.tensors()
    max_abs = 0.0
    max_ref = 0.0
    per_layer = [0.0] * cfg.depth
    for videos in random_videos(cfg, n_samples, seed, adapted.dtype, batch_size):
        la, ea = model_forward(videos, pa, cfg, plan, temporal, return_hidden=True)
        lm, em = model_forward(videos, pm, cfg, plan, temporal, return_hidden=True)
        max_abs = max(max_abs, float(np.max(np.abs(la.data - lm.data))))
        max_ref = max(max_ref, float(np.max(np.abs(la.data))))
        for i, (ha, hm) in enumerate(zip(ea["hidden"], em["hidden"])):
            per_layer[i] = max(per_layer[i], float(np.max(np.abs(ha.data - hm.data))))
    report = EquivalenceReport(
        max_abs_diff=max_abs,
        max_rel_diff=max_abs / max_ref if max_ref > 0 else max_abs,
        tolerance=float(tolerance),
        n_samples=int(n_samples),
        dtype=str(adapted.dtype),
        per_layer_diffs=per_layer,
    )
    if path is not None:
        report.save(path)
    return report
