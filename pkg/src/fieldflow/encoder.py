"""Condition encoder: history tokens -> dense tokens ``c_tok`` and a summary ``c_g``."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .layers import BlockConfig, TransformerBlock
from .rope import RotaryTable


class PatchEmbed(nn.Module):
    """Linear map from a token vector to ``d_model``.

    The weight spans the full token vector; compact tokens multiply only the
    rows of the columns they carry, which equals embedding the zero-padded
    full vector.
    """

    def __init__(self, token_dim: int, d_model: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(token_dim, d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))

    def forward(self, values: torch.Tensor, columns: torch.Tensor) -> torch.Tensor:
        return values @ self.weight.index_select(0, columns) + self.bias


@dataclass
class ConditionBundle:
    c_tok: torch.Tensor  # (B, L_c, d)
    coords: np.ndarray  # (L_c, 4)
    c_g: torch.Tensor  # (B, d)
    is_null: torch.Tensor  # (B,) bool

    def select(self, keep_cond: torch.Tensor, null: "ConditionBundle") -> "ConditionBundle":
        """Per-sample choice between this bundle and ``null`` (``keep_cond`` is (B,) bool)."""
        k = keep_cond.view(-1, 1, 1).to(self.c_tok.dtype)
        c_tok = self.c_tok * k + null.c_tok * (1 - k)
        c_g = self.c_g * k[:, 0] + null.c_g * (1 - k[:, 0])
        return replace(self, c_tok=c_tok, c_g=c_g, is_null=~keep_cond.bool())

    def concat(self, other: "ConditionBundle") -> "ConditionBundle":
        return ConditionBundle(
            torch.cat([self.c_tok, other.c_tok]),
            self.coords,
            torch.cat([self.c_g, other.c_g]),
            torch.cat([self.is_null, other.is_null]),
        )


def fourier_modulation(times: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Real form of ``exp(-i gamma t)``: interleaved ``cos(gamma_j t)``, ``-sin(gamma_j t)``.

    ``times``: (T_p,) normalised times; ``gamma``: (d/2,). Returns (T_p, d).
    """
    ang = times[:, None] * gamma[None, :]
    return torch.stack((torch.cos(ang), -torch.sin(ang)), dim=-1).flatten(-2)


class TemporalAggregation(nn.Module):
    """Collapses the patch-time axis: ``sum_t (W_t c_tok[t, s]) * phi(t/T_p)`` (linear in ``c_tok``)."""

    def __init__(self, d_model: int, n_steps: int):
        super().__init__()
        if d_model % 2:
            raise ValueError("d_model must be even for channel-pair Fourier features")
        self.n_steps = n_steps
        self.weight = nn.Parameter(torch.zeros(n_steps, d_model, d_model))  # W_t acts as y = W_t x
        self.gamma = nn.Parameter(torch.zeros(d_model // 2))

    @torch.no_grad()
    def custom_init(self):
        self.gamma.copy_(2 * math.pi * torch.arange(self.gamma.numel(), dtype=self.gamma.dtype))

    def step_index(self, t_p: int) -> torch.Tensor:
        """Map patch-time ``1..t_p`` to the nearest of the ``n_steps`` learned maps."""
        tbar = torch.arange(1, t_p + 1, dtype=torch.float64) / t_p
        idx = torch.round(tbar * self.n_steps).long() - 1
        return idx.clamp(0, self.n_steps - 1)

    def forward(self, c_tok: torch.Tensor) -> torch.Tensor:
        """``c_tok``: (B, T_p, S, d) -> (B, S, d)."""
        t_p = c_tok.shape[1]
        idx = self.step_index(t_p)
        mapped = torch.einsum("btsd,ted->btse", c_tok, self.weight[idx])
        tbar = torch.arange(1, t_p + 1, dtype=c_tok.dtype) / t_p
        phi = fourier_modulation(tbar, self.gamma)
        return (mapped * phi[None, :, None, :]).sum(dim=1)


class SpatialPooling(nn.Module):
    """Single learned query attending over per-patch summaries (no positions)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(d_model))
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)

    def forward(self, patches: torch.Tensor, return_weights: bool = False):
        """``patches``: (B, S, d) -> (B, d)."""
        if patches.shape[1] == 0:
            raise ValueError("spatial pooling needs at least one patch")
        scores = self.k(patches) @ self.query / math.sqrt(patches.shape[-1])
        weights = scores.softmax(dim=-1)
        out = (weights.unsqueeze(-1) * self.v(patches)).sum(dim=1)
        return (out, weights) if return_weights else out


class ConditionEncoder(nn.Module):
    def __init__(self, token_dim: int, d_model: int, depth: int, n_heads: int,
                 history_patches: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.embed = PatchEmbed(token_dim, d_model)
        self.dim_embed = nn.Embedding(3, d_model)
        block = BlockConfig(d_model, n_heads, mlp_ratio, has_cross_attention=False)
        self.blocks = nn.ModuleList(TransformerBlock(block) for _ in range(depth))
        self.temporal = TemporalAggregation(d_model, history_patches)
        self.spatial = SpatialPooling(d_model)

    def forward(self, values: torch.Tensor, columns: torch.Tensor, rope: RotaryTable,
                grid: tuple[int, int, int, int], dim_type: int) -> ConditionBundle:
        B = values.shape[0]
        if grid[0] != self.temporal.n_steps:
            raise ValueError(
                f"history has {grid[0]} patch-time steps, encoder was built for {self.temporal.n_steps}"
            )
        x = self.embed(values, columns)
        cond = self.dim_embed(torch.full((B,), dim_type - 1, dtype=torch.long))
        for blk in self.blocks:
            x = blk(x, cond, rope_x=rope)
        t_p = grid[0]
        summaries = self.temporal(x.view(B, t_p, -1, x.shape[-1]))
        c_g = self.spatial(summaries)
        return ConditionBundle(x, rope.coords, c_g, torch.zeros(B, dtype=torch.bool))
