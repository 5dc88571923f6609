"""Synthetic videos that can only be classified by looking at frame order.

Samples come in twin pairs: a class-0 video and its time-reversed copy with
label 1.  Reversal permutes frames (noise included), so both members of a
pair contain exactly the same multiset of frames.  A model whose logits are
invariant to frame order therefore gives both twins the same prediction and
scores exactly 50% on any paired set.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import SeededRng

TASKS = ("direction", "order")


@dataclass(frozen=True)
class SyntheticVideoSpec:
    """``direction``: a sprite moves left-to-right (0) or right-to-left (1).
    ``order``: a square flash and a bar flash occur in one order (0) or the other (1)."""

    task: str = "direction"
    frames: int = 8
    image_size: int = 16
    sprite_size: int = 3
    noise_std: float = 0.1
    num_classes: int = 2
    dataset_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.num_classes != 2:
            raise ConfigError("synthetic tasks have exactly two classes")
        if self.frames < 2:
            raise ConfigError("need at least two frames")
        if self.sprite_size < 1 or self.sprite_size > self.image_size:
            raise ConfigError(
                f"sprite of size {self.sprite_size} does not fit a {self.image_size}px image")
        if self.task == "direction" and self.image_size - self.sprite_size + 1 < self.frames:
            raise ConfigError(
                f"a {self.sprite_size}px sprite cannot take {self.frames} distinct positions "
                f"in a {self.image_size}px image")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.dataset_size < 0:
            raise ConfigError("dataset_size must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "SyntheticVideoSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        return cls(**dict(data))

    def replace(self, **changes) -> "SyntheticVideoSpec":
        return SyntheticVideoSpec(**{**self.to_dict(), **changes})


@dataclass
class VideoDataset:
    frames: np.ndarray   # [N, T, s, s, 1]
    labels: np.ndarray   # [N]
    spec: SyntheticVideoSpec | None = None

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ShapeError(f"frames must be [N, T, s, s, C], got {self.frames.shape}")
        if len(self.frames) != len(self.labels):
            raise ShapeError(f"{len(self.frames)} videos but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "VideoDataset":
        return VideoDataset(self.frames[index], self.labels[index], self.spec)

    def save(self, path) -> None:
        meta = json.dumps(self.spec.to_dict() if self.spec else None)
        with open(path, "wb") as fh:
            np.savez(fh, frames=self.frames, labels=self.labels, spec=np.array(meta))

    @classmethod
    def load(cls, path) -> "VideoDataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["spec"]))
            spec = SyntheticVideoSpec.from_dict(meta) if meta else None
            return cls(z["frames"], z["labels"], spec)


def _direction_video(spec: SyntheticVideoSpec, rng: SeededRng) -> np.ndarray:
    s, p, T = spec.image_size, spec.sprite_size, spec.frames
    video = np.zeros((T, s, s), dtype=np.float64)
    max_speed = (s - p) // (T - 1)
    speed = int(rng.integers(1, max_speed + 1))
    x0 = int(rng.integers(0, s - p - speed * (T - 1) + 1))
    y = int(rng.integers(0, s - p + 1))
    for t in range(T):
        x = x0 + speed * t
        video[t, y:y + p, x:x + p] = 1.0
    return video


def _order_video(spec: SyntheticVideoSpec, rng: SeededRng) -> np.ndarray:
    s, p, T = spec.image_size, spec.sprite_size, spec.frames
    video = np.zeros((T, s, s), dtype=np.float64)
    t_first = int(rng.integers(0, T - 1))
    t_second = int(rng.integers(t_first + 1, T))
    y, x = (int(v) for v in rng.integers(0, s - p + 1, size=2))
    video[t_first, y:y + p, x:x + p] = 1.0
    row = int(rng.integers(0, s))
    video[t_second, row, :] = 1.0
    return video


def _pair(spec: SyntheticVideoSpec, index: int) -> np.ndarray:
    rng = SeededRng(spec.seed, (0xDA7A, index))
    make = _direction_video if spec.task == "direction" else _order_video
    video = make(spec, rng)
    if spec.noise_std:
        video = video + rng.normal(video.shape, spec.noise_std, np.float64)
    return video[..., None]


def gen_synthetic(spec: SyntheticVideoSpec, workers: int = 1,
                  dtype=np.float64) -> VideoDataset:
    """Generate ``spec.dataset_size`` videos as adjacent (class 0, class 1) twins.

    Every pair is drawn from its own seeded stream, so the result does not
    depend on ``workers``.
    """
    spec.validate()
    n_pairs = (spec.dataset_size + 1) // 2
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(lambda i: _pair(spec, i), range(n_pairs)))
    else:
        pairs = [_pair(spec, i) for i in range(n_pairs)]
    shape = (spec.dataset_size, spec.frames, spec.image_size, spec.image_size, 1)
    frames = np.empty(shape, dtype=dtype)
    labels = np.empty(spec.dataset_size, dtype=np.int64)
    for i, video in enumerate(pairs):
        frames[2 * i] = video
        labels[2 * i] = 0
        if 2 * i + 1 < spec.dataset_size:
            frames[2 * i + 1] = video[::-1]
            labels[2 * i + 1] = 1
    return VideoDataset(frames, labels, spec)


def train_test_split(spec: SyntheticVideoSpec, test_size: int, dtype=np.float64,
                     workers: int = 1) -> tuple[VideoDataset, VideoDataset]:
    """Independent train and test sets drawn from disjoint seed streams."""
    train = gen_synthetic(spec, workers, dtype)
    test_spec = spec.replace(dataset_size=test_size, seed=spec.seed + 1_000_003)
    return train, gen_synthetic(test_spec, workers, dtype)


def save_dataset_dir(train: VideoDataset, test: VideoDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / "train.npz")
    test.save(out / "test.npz")


def load_dataset_dir(path) -> tuple[VideoDataset, VideoDataset]:
    path = Path(path)
    if path.is_file():
        data = VideoDataset.load(path)
        return data, data
    return VideoDataset.load(path / "train.npz"), VideoDataset.load(path / "test.npz")
