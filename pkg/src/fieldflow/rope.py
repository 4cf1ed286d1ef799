"""Rotary positional embedding over four coordinate axes (t, h, w, d).

The head dimension is split into four even sub-blocks, one per axis. Inside
the sub-block of axis ``a`` the pair ``(2j, 2j+1)`` is rotated by
``coord[a] * base ** (-2j / d_a)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


def default_axis_split(head_dim: int) -> tuple[int, int, int, int]:
    if head_dim % 2 or head_dim < 8:
        raise ValueError(f"head_dim must be even and >= 8, got {head_dim}")
    pairs = head_dim // 2
    split = [pairs // 4] * 4
    for i in range(pairs % 4):
        split[i] += 1
    return tuple(2 * s for s in split)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int, int] | None = None
    base: float = 10000.0

    def __post_init__(self):
        split = self.axis_split or default_axis_split(self.head_dim)
        split = tuple(int(s) for s in split)
        if len(split) != 4 or any(s < 2 or s % 2 for s in split):
            raise ValueError(f"axis_split must be four even sizes >= 2, got {split}")
        if sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} does not sum to head_dim {self.head_dim}")
        object.__setattr__(self, "axis_split", split)

    def frequencies(self) -> np.ndarray:
        """``(4, head_dim // 2)`` matrix: row ``a`` holds axis ``a``'s pair frequencies, zeros elsewhere."""
        freqs = np.zeros((4, self.head_dim // 2))
        start = 0
        for a, d in enumerate(self.axis_split):
            j = np.arange(d // 2)
            freqs[a, start:start + d // 2] = self.base ** (-2.0 * j / d)
            start += d // 2
        return freqs


def rope_angles(coords, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle per (token, pair): ``(..., 4) -> (..., head_dim // 2)`` in float64."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords @ cfg.frequencies()


def rotate_pairs(x, cos, sin):
    """Rotate adjacent pairs of the last axis of ``x`` (numpy or torch)."""
    x0, x1 = x[..., 0::2], x[..., 1::2]
    r0 = x0 * cos - x1 * sin
    r1 = x0 * sin + x1 * cos
    if isinstance(x, torch.Tensor):
        return torch.stack((r0, r1), dim=-1).flatten(-2)
    return np.stack((r0, r1), axis=-1).reshape(x.shape)


def rope_rotate(vec, coord: Sequence[int], cfg: RopeConfig) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector length {vec.shape[-1]} != head_dim {cfg.head_dim}")
    ang = rope_angles(coord, cfg)
    return rotate_pairs(vec, np.cos(ang), np.sin(ang))


def rope_attention_score(q, k, cq, ck, cfg: RopeConfig) -> float:
    return float(np.dot(rope_rotate(q, cq, cfg), rope_rotate(k, ck, cfg)))


class RotaryTable:
    """Cached cos/sin tables for a fixed coordinate set, ready for attention."""

    def __init__(self, coords, cfg: RopeConfig, dtype=torch.float32):
        ang = rope_angles(np.asarray(coords), cfg)
        self.cos = torch.from_numpy(np.cos(ang)).to(dtype)
        self.sin = torch.from_numpy(np.sin(ang)).to(dtype)
        self.coords = np.asarray(coords)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(..., L, head_dim)`` with ``L`` matching the coordinate set."""
        cos, sin = self.cos, self.sin
        if cos.dtype != x.dtype:
            cos, sin = cos.to(x.dtype), sin.to(x.dtype)
        return rotate_pairs(x, cos, sin)
