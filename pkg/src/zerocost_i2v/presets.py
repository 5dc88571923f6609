"""Offset plans and adapter counts of the reference ViT-B/ViT-L video models.

Keys are ``(backbone, dataset, frames)``; values are ``(multiset plan,
temporal receptive field, adapters per block)``.
"""

from __future__ import annotations

from .stdha import HeadOffsetPlan

VIDEO_MODEL_PLANS: dict[tuple[str, str, int], tuple[str, int, int]] = {
    ("vit-b16", "k400", 8): ("{1*1, -1*1, 0*10}", 3, 4),
    ("vit-b16", "k400", 16): ("{1*1, -1*1, 2*1, 0*9}", 4, 4),
    ("vit-b16", "k400", 32): ("{1*1, -1*1, 2*1, -2*1, 3*1, 0*7}", 6, 4),
    ("vit-l14", "k400", 8): ("{1*2, -1*2, 0*12}", 3, 4),
    ("vit-l14", "k400", 16): ("{1*2, -1*2, 2*1, 0*11}", 4, 4),
    ("vit-l14", "k400", 32): ("{1*2, -1*2, 2*1, -2*1, 3*1, 0*9}", 6, 4),
    ("vit-b16", "ssv2", 8): ("{1*1, -1*1, 0*10}", 3, 6),
    ("vit-b16", "ssv2", 16): ("{1*1, -1*1, 2*1, -2*1, 0*8}", 5, 4),
    ("vit-b16", "ssv2", 32): ("{1*1, -1*1, 2*1, -2*1, 3*1, 0*7}", 6, 4),
    ("vit-l14", "ssv2", 8): ("{1*2, -1*2, 0*12}", 3, 4),
    ("vit-l14", "ssv2", 16): ("{1*2, -1*2, 2*2, -2*2, 0*8}", 5, 4),
    ("vit-l14", "ssv2", 32): ("{1*2, -1*2, 2*1, -2*1, 3*1, 0*9}", 6, 4),
}


def video_model_plan(backbone: str, dataset: str, frames: int) -> HeadOffsetPlan:
    return HeadOffsetPlan.from_multiset(VIDEO_MODEL_PLANS[(backbone, dataset, frames)][0])
