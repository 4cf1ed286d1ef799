"""Transformer primitives shared by the condition encoder and the denoiser."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rope import RotaryTable


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    n_heads: int
    mlp_ratio: float = 4.0
    has_cross_attention: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def zero_init(module: nn.Module) -> nn.Module:
    """Tag a layer whose weights start at zero (AdaLN heads, output projection)."""
    module._zero_init = True
    return module


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim={dim} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        ctx: torch.Tensor | None = None,
        rope_q: RotaryTable | None = None,
        rope_k: RotaryTable | None = None,
        return_weights: bool = False,
    ):
        """Self-attention when ``ctx`` is None, otherwise cross-attention to ``ctx``.

        RoPE is applied to queries/keys with each side's own coordinate table.
        """
        ctx = x if ctx is None else ctx
        if rope_k is None and ctx is x:
            rope_k = rope_q
        if x.shape[-1] != self.q.in_features or ctx.shape[-1] != self.k.in_features:
            raise ValueError(f"feature size mismatch: {x.shape} vs {ctx.shape}")
        q, k, v = self._heads(self.q(x)), self._heads(self.k(ctx)), self._heads(self.v(ctx))
        if rope_q is not None:
            q = rope_q.apply(q)
        if rope_k is not None:
            k = rope_k.apply(k)
        scores = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(self.head_dim))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def modulate(x_norm, shift, scale):
    return x_norm * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNHead(nn.Module):
    """Maps a conditioning vector to ``n_chunks`` modulation vectors (zero at init)."""

    def __init__(self, dim: int, n_chunks: int):
        super().__init__()
        self.n_chunks = n_chunks
        self.linear = zero_init(nn.Linear(dim, n_chunks * dim))

    def forward(self, cond):
        return self.linear(F.silu(cond)).chunk(self.n_chunks, dim=-1)


def adaln_modulate(x, cond, head: AdaLNHead, eps: float = 1e-6):
    """``LN(x) * (1 + scale(cond)) + shift(cond)`` and the residual gate ``g(cond)``."""
    shift, scale, gate = head(cond)[:3]
    y = modulate(F.layer_norm(x, x.shape[-1:], eps=eps), shift, scale)
    return y, gate


class TransformerBlock(nn.Module):
    """Pre-norm block: RoPE self-attention, optional cross-attention, feed-forward.

    Every residual branch is scaled by an AdaLN gate, so a freshly
    initialised block is the identity map.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        d = cfg.d_model
        self.cross = cfg.has_cross_attention
        self.norm_eps = 1e-6
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        if self.cross:
            self.ctx_norm = nn.LayerNorm(d, eps=self.norm_eps)
            self.cross_attn = MultiHeadAttention(d, cfg.n_heads)
        self.mlp = FeedForward(d, cfg.mlp_ratio)
        self.ada = AdaLNHead(d, 9 if self.cross else 6)

    def _ln(self, x):
        return F.layer_norm(x, x.shape[-1:], eps=self.norm_eps)

    def forward(self, x, cond, rope_x=None, ctx=None, rope_ctx=None):
        mods = self.ada(cond)
        shift, scale, gate = mods[0:3]
        x = x + gate.unsqueeze(1) * self.attn(modulate(self._ln(x), shift, scale), rope_q=rope_x)
        i = 3
        if self.cross:
            if ctx is None:
                raise ValueError("cross-attention block needs a context")
            shift, scale, gate = mods[3:6]
            h = modulate(self._ln(x), shift, scale)
            x = x + gate.unsqueeze(1) * self.cross_attn(
                h, self.ctx_norm(ctx), rope_q=rope_x, rope_k=rope_ctx
            )
            i = 6
        shift, scale, gate = mods[i:i + 3]
        x = x + gate.unsqueeze(1) * self.mlp(modulate(self._ln(x), shift, scale))
        return x


def _trunc_normal(shape, std, gen: torch.Generator):
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


@torch.no_grad()
def init_params(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Deterministic initialisation.

    Linear weights and free parameters get a truncated normal (std 0.02),
    biases zero, and layers tagged with :func:`zero_init` are all zeros.
    LayerNorm affine parameters keep their (1, 0) defaults. Submodules with a
    ``custom_init()`` method get it called last.
    """
    gen = torch.Generator().manual_seed(seed)
    zero_params = set()
    for m in module.modules():
        if getattr(m, "_zero_init", False):
            zero_params.update(id(p) for p in m.parameters(recurse=False))
    norm_params = set()
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            norm_params.update(id(p) for p in m.parameters(recurse=False))
    for name, p in module.named_parameters():
        if id(p) in norm_params:
            continue
        if id(p) in zero_params or name.endswith("bias"):
            p.zero_()
        else:
            p.copy_(_trunc_normal(p.shape, std, gen).to(p.dtype))
    for m in module.modules():
        if hasattr(m, "custom_init"):
            m.custom_init()
    return module


def param_store(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict(module.named_parameters())


def grad_check(
    f: Callable[[], torch.Tensor],
    params: "dict[str, torch.Tensor] | nn.Module",
    probe_count: int = 20,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is evaluated with no arguments and must read the tensors in
    ``params``; run it in float64 for meaningful results. Probed coordinates
    are drawn uniformly over tensors, then over entries.
    """
    if isinstance(params, nn.Module):
        params = param_store(params)
    names = [n for n, p in params.items() if p.requires_grad and p.numel()]
    for n in names:
        params[n].grad = None
    value = f()
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"f is not finite at params: {value.item()}")
    grads = torch.autograd.grad(value, [params[n] for n in names], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probe_count):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = int(rng.integers(p.numel()))
            flat = p.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = f().item()
            flat[idx] = orig - step
            down = f().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            analytic = grads[name].reshape(-1)[idx].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
