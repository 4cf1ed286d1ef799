"""Coordinate-aware transformer operator and the flow-matching path algebra.

The network predicts the clean future window (x-prediction) from a noisy
state ``z_t = t*x + (1-t)*eps``; the ODE velocity is recovered analytically
as ``(x_hat - z_t) / ((1 - t) + eps_stab)``. Velocity- and noise-prediction
heads exist for the prediction-target ablation only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .encoder import ConditionBundle, ConditionEncoder, PatchEmbed
from .layers import AdaLNHead, BlockConfig, TransformerBlock, init_params, modulate, zero_init
from .rope import RopeConfig, RotaryTable
from .tensorfmt import (
    ChannelVocabulary, Layout, PatchSize, Unified4DField, patchify, plan_for_field, plan_layout,
    unpatchify_array,
)

EPS_STAB = 1e-4
EPS_PRED_T_FLOOR = 1e-4
PREDICTION_TARGETS = ("x", "v", "eps")

# name: (d_model, encoder depth, encoder heads, denoiser depth, denoiser heads)
PRESETS = {
    "tiny": (64, 2, 4, 3, 4),
    "S": (256, 4, 4, 7, 4),
    "M": (384, 6, 6, 10, 6),
    "L": (512, 8, 8, 14, 8),
    "XL": (1024, 8, 8, 14, 8),
}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    depth: int = 3
    n_heads: int = 4
    mlp_ratio: float = 4.0
    patch: tuple[int, int, int, int] = (2, 8, 8, 8)
    channels: tuple[str, ...] = ChannelVocabulary().names
    history: int = 10
    horizon: int = 10
    time_embed_dim: int = 256
    rope_base: float = 10000.0
    prediction: str = "x"
    eps_stab: float = EPS_STAB

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(self.patch))
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.prediction not in PREDICTION_TARGETS:
            raise ValueError(f"prediction must be one of {PREDICTION_TARGETS}, got {self.prediction!r}")
        if self.history % self.patch[0] or self.horizon % self.patch[0]:
            raise ValueError("history and horizon must be multiples of the patch time extent")
        BlockConfig(self.d_model, self.n_heads)
        BlockConfig(self.d_model, self.encoder_heads)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            d, le, he, lj, hj = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(d_model=d, encoder_depth=le, encoder_heads=he, depth=lj, n_heads=hj, **overrides)

    @property
    def patch_size(self) -> PatchSize:
        return PatchSize(*self.patch)

    @property
    def vocab(self) -> ChannelVocabulary:
        return ChannelVocabulary(self.channels)

    @property
    def token_dim(self) -> int:
        return self.patch_size.token_dim(len(self.channels))

    def to_dict(self) -> dict:
        return asdict(self)


# --- flow path algebra -------------------------------------------------------

def _bt(t, like):
    """Broadcast a per-sample time against a (B, ...) tensor."""
    if isinstance(t, torch.Tensor) and t.ndim == 1 and like.ndim > 1:
        return t.view(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    return t


@dataclass
class FlowSample:
    z_t: np.ndarray
    t: float
    eps: np.ndarray
    x: np.ndarray | None = None


def flow_path(x, eps, t):
    t = _bt(t, x)
    return t * x + (1 - t) * eps


def make_flow_sample(x: Unified4DField, t: float, noise_seed: int) -> FlowSample:
    """Noise only the valid region/channels of ``x`` and interpolate toward it."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    keep = x.valid_region()[..., None] & x.mask.astype(bool)
    rng = np.random.default_rng(noise_seed)
    eps = np.where(keep, rng.standard_normal(x.data.shape), 0.0).astype(x.data.dtype)
    if t == 1.0:
        z = x.data.copy()
    elif t == 0.0:
        z = eps.copy()
    else:
        z = flow_path(x.data, eps, t).astype(x.data.dtype)
    return FlowSample(z, t, eps, x.data)


def x_to_velocity(x_hat, z_t, t, eps_stab: float = EPS_STAB):
    return (x_hat - z_t) / ((1 - _bt(t, z_t)) + eps_stab)


def eps_to_velocity(eps_hat, z_t, t, t_floor: float = EPS_PRED_T_FLOOR):
    """Ablation-only conversion: ``v = x - eps = (z_t - eps) / t``."""
    tt = _bt(t, z_t)
    tt = tt.clamp_min(t_floor) if isinstance(tt, torch.Tensor) else max(tt, t_floor)
    return (z_t - eps_hat) / tt


def output_to_velocity(prediction: str, out, z_t, t, eps_stab: float = EPS_STAB):
    if prediction == "x":
        return x_to_velocity(out, z_t, t, eps_stab)
    if prediction == "v":
        return out
    if prediction == "eps":
        return eps_to_velocity(out, z_t, t)
    raise ValueError(f"unknown prediction target {prediction!r}")


def timestep_features(t: torch.Tensor, dim: int = 256, max_period: float = 10000.0,
                      scale: float = 1000.0) -> torch.Tensor:
    """``[cos(scale*t*f_i), sin(scale*t*f_i)]`` with geometric frequencies ``f_i``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = scale * t[:, None].to(torch.float64) * freqs[None]
    out = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return out.to(t.dtype if t.is_floating_point() else torch.float32)


class TimeEmbedding(nn.Module):
    def __init__(self, d_model: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.linear = nn.Linear(freq_dim, d_model)

    def forward(self, t):
        return self.linear(timestep_features(t, self.freq_dim).to(self.linear.weight.dtype))


def embed_time(t, module: TimeEmbedding):
    return module(t)


# --- networks -----------------------------------------------------------------

class PatchHead(nn.Module):
    """Final projection back to token vectors; only the requested columns are produced."""

    def __init__(self, d_model: int, token_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(token_dim, d_model))
        self.bias = nn.Parameter(torch.zeros(token_dim))
        zero_init(self)

    def forward(self, h, columns):
        return h @ self.weight.index_select(0, columns).T + self.bias.index_select(0, columns)


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.embed = PatchEmbed(cfg.token_dim, d)
        self.time_embed = TimeEmbedding(d, cfg.time_embed_dim)
        self.dim_embed = nn.Embedding(3, d)
        block = BlockConfig(d, cfg.n_heads, cfg.mlp_ratio, has_cross_attention=True)
        self.blocks = nn.ModuleList(TransformerBlock(block) for _ in range(cfg.depth))
        self.final_ada = AdaLNHead(d, 2)
        self.head = PatchHead(d, cfg.token_dim)

    def conditioning(self, t, c_g, dim_type):
        dims = torch.full((c_g.shape[0],), dim_type - 1, dtype=torch.long)
        return self.time_embed(t) + c_g + self.dim_embed(dims)

    def forward(self, z, columns, rope_x, t, bundle: ConditionBundle, rope_ctx, dim_type):
        x = self.embed(z, columns)
        cond = self.conditioning(t, bundle.c_g, dim_type)
        for blk in self.blocks:
            x = blk(x, cond, rope_x=rope_x, ctx=bundle.c_tok, rope_ctx=rope_ctx)
        shift, scale = self.final_ada(cond)
        h = modulate(nn.functional.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
        return self.head(h, columns)


class FlowOperator(nn.Module):
    """Condition encoder + denoiser + learned null condition for guidance."""

    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = ConditionEncoder(
            cfg.token_dim, d, cfg.encoder_depth, cfg.encoder_heads,
            cfg.history // cfg.patch[0], cfg.mlp_ratio,
        )
        self.denoiser = Denoiser(cfg)
        self.null_token = nn.Parameter(torch.zeros(d))
        self.null_vector = nn.Parameter(torch.zeros(d))
        self.rope_enc = RopeConfig(d // cfg.encoder_heads, base=cfg.rope_base)
        self.rope_dec = RopeConfig(d // cfg.n_heads, base=cfg.rope_base)
        self._tables: dict = {}
        if seed is not None:
            init_params(self, seed)

    @property
    def dtype(self):
        return self.null_token.dtype

    def rotary(self, coords: np.ndarray, cfg: RopeConfig) -> RotaryTable:
        key = (coords.tobytes(), coords.shape, cfg, self.dtype)
        table = self._tables.get(key)
        if table is None:
            if len(self._tables) > 64:
                self._tables.clear()
            table = self._tables[key] = RotaryTable(coords, cfg, self.dtype)
        return table

    def _columns(self, layout: Layout) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(layout.columns))

    def encode(self, hist: torch.Tensor, layout: Layout, grid) -> ConditionBundle:
        return self.encoder(
            hist.to(self.dtype), self._columns(layout), self.rotary(layout.coords, self.rope_enc),
            grid, layout.dim_type,
        )

    def null_bundle(self, like: ConditionBundle) -> ConditionBundle:
        B, L, d = like.c_tok.shape
        return ConditionBundle(
            self.null_token.expand(B, L, d),
            like.coords,
            self.null_vector.expand(B, d),
            torch.ones(B, dtype=torch.bool),
        )

    def drop_condition(self, bundle: ConditionBundle, drop: torch.Tensor) -> ConditionBundle:
        if not bool(drop.any()):
            return bundle
        return bundle.select(~drop, self.null_bundle(bundle))

    def forward(self, z: torch.Tensor, t: torch.Tensor, bundle: ConditionBundle, layout: Layout):
        """Raw network output on compact tokens ``z`` (B, L, K)."""
        out = self.denoiser(
            z.to(self.dtype), self._columns(layout), self.rotary(layout.coords, self.rope_dec),
            t.to(self.dtype), bundle, self.rotary(bundle.coords, self.rope_dec), layout.dim_type,
        )
        if layout.validity is not None:
            out = out * torch.from_numpy(layout.validity).to(out.dtype)
        return out

    def velocity(self, z, t, bundle, layout):
        out = self(z, t, bundle, layout)
        return output_to_velocity(self.cfg.prediction, out, z.to(out.dtype), t.to(out.dtype), self.cfg.eps_stab)


def field_tokens(f: Unified4DField, vocab: ChannelVocabulary, t_offset: int = 0):
    plan = plan_for_field(f, vocab)
    vectors = patchify(f).vectors[:, plan.columns]
    return torch.from_numpy(np.ascontiguousarray(vectors))[None], plan, plan_layout(plan, t_offset)


def encode_history(model: FlowOperator, hist: Unified4DField) -> ConditionBundle:
    """Encode a normalised history window given in the unified layout."""
    if hist.native_shape[0] != model.cfg.history:
        raise ValueError(f"history has {hist.native_shape[0]} frames, model expects {model.cfg.history}")
    values, plan, layout = field_tokens(hist, model.cfg.vocab)
    return model.encode(values, layout, plan.grid)


def predict_x(model: FlowOperator, z_t: Unified4DField, t: float, cond: ConditionBundle) -> Unified4DField:
    """Network output for a unified-layout noisy future window (same shape and mask)."""
    values, plan, layout = field_tokens(z_t, model.cfg.vocab, t_offset=model.cfg.history)
    with torch.no_grad():
        out = model(values, torch.tensor([float(t)]), cond, layout)[0]
    full = np.zeros((plan.n_tokens, model.cfg.token_dim), dtype=z_t.data.dtype)
    full[:, plan.columns] = out.cpu().numpy()
    data = unpatchify_array(full, plan.grid, z_t.patch, len(model.cfg.channels))
    keep = z_t.valid_region()[..., None] & z_t.mask.astype(bool)
    return z_t.replace(np.where(keep, data, 0).astype(z_t.data.dtype))
