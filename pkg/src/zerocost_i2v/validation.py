"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .vit import ViTConfig


def check_videos(X, cfg: ViTConfig | None = None, dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a float array ``[N, T, s, s, C]``.

    A 4-D array ``[N, T, s, s]`` gains a trailing channel axis.  With ``cfg``
    the frame count, image size and channel count must match.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ShapeError(f"videos must be numeric, got dtype {X.dtype}")
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5:
        raise ShapeError(f"videos must be [N, T, s, s] or [N, T, s, s, C], got shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ShapeError(f"frames must be square, got {X.shape[2]}x{X.shape[3]}")
    if cfg is not None:
        expected = (cfg.frames, cfg.image_size, cfg.image_size, cfg.channels)
        if X.shape[1:] != expected:
            raise ShapeError(f"videos have shape {X.shape[1:]} per sample, model expects {expected}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise NumericError("videos contain NaN or Inf")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ShapeError(f"{n_samples} videos but {len(y)} labels")
    return y


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_dtype(value) -> type:
    table = {"float32": np.float32, "f32": np.float32, "float64": np.float64, "f64": np.float64}
    if isinstance(value, str):
        if value not in table:
            raise ConfigError(f"unknown precision {value!r}")
        return table[value]
    dt = np.dtype(value)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"precision must be float32 or float64, got {dt}")
    return dt.type
