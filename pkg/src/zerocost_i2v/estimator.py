"""scikit-learn style video classifier on a frozen ViT with mergeable adapters."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .accounting import CostReport, count_flops, count_params
from .adaptation import AdapterSpec, TrainableMask, build_adapted_model
from .data import VideoDataset
from .errors import ConfigError, NumericError
from .reparam import merge_model, verify_equivalence
from .stdha import HeadOffsetPlan, default_plan
from .training import TrainConfig, train, warm_start
from .validation import check_dtype, check_labels, check_positive_int, check_videos
from .vit import ViTConfig, WeightStore, init_backbone, model_forward


class ZeroCostVideoClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Frame-wise ViT with head-relocated attention and linear adapters.

    ``fit`` freezes a backbone (random, optionally warm-started, or the one
    passed as ``backbone``), attaches adapters and trains them together with
    the classifier head.  ``merge`` folds the adapters into the backbone so
    the fitted model costs exactly what the plain backbone costs.
    ``transform`` returns the frame-averaged [cls] features.

    Args:
        plan: offset per head, multiset string, ``"default"`` or ``None`` for
            plain per-frame attention.
        adapter: ``"linear"``, ``"lora"``, ``"gelu"`` or ``None`` (linear probe).
        backbone: optional pre-built :class:`WeightStore` matching the other
            architecture parameters.
    """

    def __init__(self, depth=2, width=32, heads=8, patch_size=4, plan="default",
                 adapter="linear", placement=("qkv", "o", "mlp_up", "mlp_down"),
                 bottleneck_ratio=0.25, learning_rate=3e-3, weight_decay=5e-2, epochs=5,
                 batch_size=32, label_smoothing=0.0, warm_start_steps=0, precision="float32",
                 backbone=None, random_state=0):
        self.depth = depth
        self.width = width
        self.heads = heads
        self.patch_size = patch_size
        self.plan = plan
        self.adapter = adapter
        self.placement = placement
        self.bottleneck_ratio = bottleneck_ratio
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.warm_start_steps = warm_start_steps
        self.precision = precision
        self.backbone = backbone
        self.random_state = random_state

    def _model_config(self, X: np.ndarray, n_classes: int) -> ViTConfig:
        for name in ("depth", "width", "heads", "patch_size"):
            check_positive_int(getattr(self, name), name)
        return ViTConfig(depth=self.depth, width=self.width, heads=self.heads,
                         patch_size=self.patch_size, image_size=X.shape[2], frames=X.shape[1],
                         num_classes=n_classes, channels=X.shape[4])

    def _resolve_plan(self, cfg: ViTConfig):
        if self.plan is None:
            return None
        if isinstance(self.plan, str) and self.plan == "default":
            return default_plan(cfg.heads, cfg.frames)
        plan = HeadOffsetPlan.parse(self.plan, cfg.heads)
        plan.validate(cfg)
        return plan

    def fit(self, X, y):
        dtype = check_dtype(self.precision)
        X = check_videos(X, dtype=dtype)
        y = check_labels(y, len(X))
        self.classes_, y_index = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes to fit a classifier")
        cfg = self._model_config(X, len(self.classes_))
        plan = self._resolve_plan(cfg)
        seed = int(self.random_state or 0)
        if self.backbone is not None:
            store = self.backbone.astype(dtype)
            store.check_backbone(cfg)
        else:
            store = init_backbone(cfg, seed, dtype)
            store = warm_start(store, cfg, self.warm_start_steps, seed)
        if self.adapter is None:
            mask = TrainableMask({n: n.startswith("head.") for n in store})
            self.adapter_spec_ = None
        else:
            self.adapter_spec_ = AdapterSpec(placement=tuple(self.placement), kind=self.adapter,
                                             ratio=self.bottleneck_ratio)
            store, mask = build_adapted_model(store, cfg, self.adapter_spec_, seed)
        tcfg = TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size,
                           label_smoothing=self.label_smoothing, seed=seed)
        self.history_ = []
        self.store_, self.metrics_ = train(store, cfg, VideoDataset(X, y_index), tcfg, mask, plan,
                                           log=self.history_.append)
        self.config_ = cfg
        self.plan_ = plan
        self.trainable_mask_ = mask
        self.merged_ = False
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        return check_videos(X, self.config_, self.store_.dtype)

    def decision_function(self, X) -> np.ndarray:
        X = self._check_X(X)
        return self._forward(X)[0]

    def _forward(self, X: np.ndarray, batch: int = 64):
        params = self.store_.tensors()
        logits, feats = [], []
        for start in range(0, len(X), batch):
            out, extra = model_forward(X[start:start + batch], params, self.config_, self.plan_,
                                       return_features=True)
            logits.append(out.data)
            feats.append(extra["features"].data)
        if not logits:
            return (np.zeros((0, self.config_.num_classes)), np.zeros((0, self.config_.width)))
        return np.concatenate(logits), np.concatenate(feats)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X).astype(np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "store_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Frame-averaged [cls] features after the final layer norm, ``[N, width]``."""
        return self._forward(self._check_X(X))[1]

    def merge(self, verify_samples: int = 0, tolerance: float | None = None):
        """Fold adapters into the backbone in place; optionally verify on random videos."""
        check_is_fitted(self, "store_")
        merged = merge_model(self.store_)
        if verify_samples:
            tol = tolerance if tolerance is not None else (
                1e-10 if self.store_.dtype == np.float64 else 1e-4)
            self.merge_report_ = verify_equivalence(self.store_, merged, self.config_, self.plan_,
                                                    verify_samples, tol, int(self.random_state or 0))
            if not self.merge_report_.passed:
                raise NumericError(f"merged model deviates by {self.merge_report_.max_abs_diff}")
        self.store_ = merged
        self.merged_ = True
        return self

    def cost_report(self, views=None) -> CostReport:
        check_is_fitted(self, "store_")
        return count_params(self.store_, self.trainable_mask_ if not self.merged_ else None) | \
            count_flops(self.config_, self.plan_, views, store=self.store_)

    @property
    def weights_(self) -> WeightStore:
        check_is_fitted(self, "store_")
        return self.store_
