"""Flow-matching training loop and its pieces."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .denoiser import FlowOperator, _bt, flow_path, output_to_velocity
from .encoder import ConditionBundle
from .tensorfmt import Layout, PatchSize, TokenPlan, ChannelVocabulary, plan_layout, window_stats

log = logging.getLogger(__name__)


class NumericDivergence(FloatingPointError):
    """Loss or state became non-finite; ``step`` says where."""

    def __init__(self, message: str, step: int | None = None, dump: str | None = None):
        super().__init__(message)
        self.step = step
        self.dump = dump


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    grad_clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 200
    steps: int | None = None  # overrides epochs when set
    P_mean: float = -0.8
    P_std: float = 0.8
    T_min: float = 1e-4
    T_max: float = 1.0
    p_t0: float = 0.1
    cond_dropout: float = 0.1
    batch_sizes: tuple[int, int, int] = (16, 8, 4)
    dim_weights: tuple[float, float, float] = (1.0, 1.0, 5.0)
    history: int = 10
    horizon: int = 10
    window_stride: int = 1
    val_every: int | None = None  # steps; default is every 5 epochs
    val_windows: int = 16
    val_sample_steps: int = 10
    ckpt_every: int | None = None
    eps_stab: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.batch_sizes = tuple(self.batch_sizes)
        self.dim_weights = tuple(self.dim_weights)
        if not 0 < self.T_min < self.T_max <= 1:
            raise ValueError(f"need 0 < T_min < T_max <= 1, got {self.T_min}, {self.T_max}")
        for name in ("p_t0", "cond_dropout", "warmup_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# --- sampling of the noise level and losses -----------------------------------

def sample_time(rng: np.random.Generator, cfg: TrainConfig, size: int | None = None):
    """Logit-normal ``t`` clamped to ``[T_min, T_max]``, exactly 0 with probability ``p_t0``."""
    g = rng.normal(cfg.P_mean, cfg.P_std, size)
    zero = rng.random(size) < cfg.p_t0
    t = np.clip(1.0 / (1.0 + np.exp(-g)), cfg.T_min, cfg.T_max)
    return np.where(zero, 0.0, t)


def _masked_mean(err, mask):
    if mask is None:
        return err.mean()
    w = torch.as_tensor(mask, dtype=err.dtype)
    w = torch.broadcast_to(w, err.shape)
    return torch.where(w > 0, err, torch.zeros((), dtype=err.dtype)).sum() / w.sum()


def v_loss(x_hat, x, z_t, t, mask=None, eps_stab: float = 1e-4):
    """Velocity MSE for x-prediction, averaged over valid entries.

    Model and target velocity share the denominator ``(1-t) + eps_stab``, so
    ``v_hat - v = (x_hat - x) / ((1-t) + eps_stab)`` and ``z_t`` cancels; at
    ``t = 0`` with ``eps_stab = 0`` this is the plain reconstruction MSE.
    """
    del z_t  # cancels analytically
    den = (1 - _bt(t, x)) + eps_stab
    err = ((x_hat - x) / den) ** 2
    return _masked_mean(err, mask)


def velocity_loss(v_hat, x, z_t, t, mask=None, eps_stab: float = 1e-4):
    """Same objective for heads that output a velocity directly (ablation)."""
    target = (x - z_t) / ((1 - _bt(t, x)) + eps_stab)
    return _masked_mean((v_hat - target) ** 2, mask)


def flow_loss(model: FlowOperator, out, x, z, t, mask, eps_stab):
    if model.cfg.prediction == "x":
        return v_loss(out, x, z, t, mask, eps_stab)
    v_hat = output_to_velocity(model.cfg.prediction, out, z, t, eps_stab)
    return velocity_loss(v_hat, x, z, t, mask, eps_stab)


def apply_cond_dropout(model: FlowOperator, bundle: ConditionBundle, rng: np.random.Generator,
                       p: float) -> ConditionBundle:
    drop = torch.from_numpy(rng.random(bundle.c_g.shape[0]) < p)
    return model.drop_condition(bundle, drop)


# --- optimisation -------------------------------------------------------------

def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.warmup_frac * total_steps))) if cfg.warmup_frac > 0 else 0


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay from ``base_lr`` to ``min_lr``."""
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps <= warm:
        return cfg.base_lr
    progress = min(1.0, (step - warm) / (total_steps - warm))
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    # written as a convex blend so both ends are hit exactly
    return cfg.base_lr * w + cfg.min_lr * (1.0 - w)


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0  # optimizer calls, including rejected ones
    applied: int = 0  # updates actually applied (drives bias correction)
    rejected: int = 0

    @classmethod
    def zeros(cls, params: dict[str, torch.Tensor]) -> "OptimizerState":
        return cls({n: torch.zeros_like(p) for n, p in params.items()},
                   {n: torch.zeros_like(p) for n, p in params.items()})


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    norms = torch._foreach_norm(list(grads.values()))
    return float(torch.linalg.vector_norm(torch.stack(norms).double()))


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if math.isfinite(norm) and norm > max_norm:
        torch._foreach_mul_(list(grads.values()), max_norm / (norm + 1e-6))
    return norm


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: OptimizerState, lr: float, cfg: TrainConfig) -> bool:
    """Decoupled-weight-decay Adam. Non-finite gradients skip the update and return False."""
    state.step += 1
    names = list(params)
    g = [grads[n] for n in names]
    if not math.isfinite(global_norm(grads)):
        state.rejected += 1
        log.warning("optimizer step %d rejected: non-finite gradient", state.step)
        return False
    state.applied += 1
    b1, b2 = cfg.betas
    bc1 = 1 - b1 ** state.applied
    bc2 = 1 - b2 ** state.applied
    p = [params[n] for n in names]
    m = [state.m[n] for n in names]
    v = [state.v[n] for n in names]
    if cfg.weight_decay:
        torch._foreach_mul_(p, 1 - lr * cfg.weight_decay)
    torch._foreach_mul_(m, b1)
    torch._foreach_add_(m, g, alpha=1 - b1)
    torch._foreach_mul_(v, b2)
    torch._foreach_addcmul_(v, g, g, value=1 - b2)
    denom = torch._foreach_div(v, bc2)
    torch._foreach_sqrt_(denom)
    torch._foreach_add_(denom, cfg.adam_eps)
    torch._foreach_addcdiv_(p, m, denom, value=-lr / bc1)
    return True


# --- data ---------------------------------------------------------------------

@dataclass
class Batch:
    set_index: int
    hist: torch.Tensor  # (B, L, K) normalised compact tokens
    fut: torch.Tensor
    mean: np.ndarray  # (B, 1, 1, 1, 1, C_k)
    scale: np.ndarray
    hist_layout: Layout
    fut_layout: Layout
    grid: tuple[int, int, int, int]


class WindowSet:
    """Sliding (history -> future) windows over one dataset of shape ``(N, T, X, Y, Z, V)``."""

    def __init__(self, data: np.ndarray, var_names: Sequence[str], dim_type: int,
                 history: int = 10, horizon: int = 10, stride: int = 1,
                 patch: PatchSize | None = None, vocab: ChannelVocabulary | None = None,
                 name: str = ""):
        if data.ndim != 6:
            raise ValueError(f"expected (N, T, X, Y, Z, V) data, got shape {data.shape}")
        self.data = data
        self.name = name
        self.var_names = tuple(var_names)
        self.dim_type = dim_type
        self.history, self.horizon = history, horizon
        N, T = data.shape[:2]
        span = history + horizon
        self.windows = np.array(
            [(i, s) for i in range(N) for s in range(0, T - span + 1, stride)], dtype=np.int64
        ).reshape(-1, 2)
        if len(self.windows) == 0:
            raise ValueError(f"dataset {name!r}: trajectories of length {T} are shorter than {span}")
        self.plan = TokenPlan(var_names, dim_type, data.shape[2:5], history,
                              patch or PatchSize(), vocab or ChannelVocabulary())
        self.fut_plan = self.plan.with_frames(horizon)
        self.hist_layout = plan_layout(self.plan)
        self.fut_layout = plan_layout(self.fut_plan, t_offset=history)

    def __len__(self) -> int:
        return len(self.windows)

    def raw(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Physical-unit history and future windows for window indices ``idx``."""
        idx = np.atleast_1d(idx)
        out = np.stack([self.data[i, s:s + self.history + self.horizon] for i, s in self.windows[idx]])
        return out[:, :self.history], out[:, self.history:]

    def prepare(self, idx, set_index: int = 0) -> Batch:
        hist, fut = self.raw(idx)
        return self.tokenize(hist, fut, set_index)

    def tokenize(self, hist: np.ndarray, fut: np.ndarray | None, set_index: int = 0) -> Batch:
        mean, scale = window_stats(hist.astype(np.float64))
        h = ((hist - mean) / scale).astype(np.float32)
        f = None
        if fut is not None:
            f = torch.from_numpy(np.ascontiguousarray(self.fut_plan.tokens((fut - mean) / scale).astype(np.float32)))
        return Batch(set_index, torch.from_numpy(np.ascontiguousarray(self.plan.tokens(h))), f,
                     mean, scale, self.hist_layout, self.fut_layout, self.plan.grid)

    def denormalize(self, fut_tokens: torch.Tensor, mean, scale) -> np.ndarray:
        fut = self.fut_plan.untokens(fut_tokens.detach().cpu().numpy().astype(np.float64))
        return fut * scale + mean


def make_mixed_batches(sets: Sequence[WindowSet], cfg: TrainConfig,
                       rng: np.random.Generator) -> Iterator[tuple[int, np.ndarray]]:
    """Endless stream of dimension-homogeneous ``(set index, window indices)`` batches."""
    if not sets:
        raise ValueError("need at least one dataset")
    w = np.array([cfg.dim_weights[s.dim_type - 1] for s in sets], dtype=np.float64)
    w /= w.sum()
    while True:
        k = int(rng.choice(len(sets), p=w)) if len(sets) > 1 else 0
        s = sets[k]
        b = cfg.batch_sizes[s.dim_type - 1]
        yield k, rng.integers(0, len(s), size=b)


def steps_per_epoch(sets: Sequence[WindowSet], cfg: TrainConfig) -> int:
    total_windows = sum(len(s) for s in sets)
    mean_batch = np.mean([cfg.batch_sizes[s.dim_type - 1] for s in sets])
    return max(1, int(round(total_windows / mean_batch)))


def total_steps(sets: Sequence[WindowSet], cfg: TrainConfig) -> int:
    return cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch(sets, cfg)


# --- the loop -------------------------------------------------------------------

def training_step_loss(model: FlowOperator, batch: Batch, t: np.ndarray, eps: torch.Tensor,
                       drop: np.ndarray, eps_stab: float) -> torch.Tensor:
    bundle = model.encode(batch.hist, batch.hist_layout, batch.grid)
    bundle = model.drop_condition(bundle, torch.from_numpy(drop))
    tt = torch.from_numpy(t.astype(np.float32)).to(model.dtype)
    x = batch.fut.to(model.dtype)
    z = flow_path(x, eps.to(model.dtype), tt)
    out = model(z, tt, bundle, batch.fut_layout)
    return flow_loss(model, out, x, z, tt, batch.fut_layout.validity, eps_stab)


def draw_noise(rng: np.random.Generator, batch: Batch) -> torch.Tensor:
    eps = rng.standard_normal(batch.fut.shape, dtype=np.float32)
    if batch.fut_layout.validity is not None:
        eps *= batch.fut_layout.validity
    return torch.from_numpy(eps)


@torch.no_grad()
def validate(model: FlowOperator, val_sets: Sequence[WindowSet], cfg: TrainConfig) -> dict:
    """Held-out v-loss at sampled ``t`` and nRMSE of a short sample, on fixed windows."""
    from .metrics import nrmse
    from .sampler import SampleConfig, forecast

    rng = np.random.default_rng(cfg.seed + 7919)
    losses, scores = [], []
    for ws in val_sets:
        idx = rng.choice(len(ws), size=min(cfg.val_windows, len(ws)), replace=False)
        batch = ws.prepare(idx)
        t = sample_time(rng, cfg, len(idx))
        eps = draw_noise(rng, batch)
        keep = np.zeros(len(idx), dtype=bool)
        losses.append(float(training_step_loss(model, batch, t, eps, keep, cfg.eps_stab)))
        hist, fut = ws.raw(idx)
        pred = forecast(model, ws, hist, SampleConfig(steps=cfg.val_sample_steps, seed=cfg.seed))
        scores.append(nrmse(pred, fut))
    return {"val_loss": float(np.mean(losses)), "val_nrmse": float(np.mean(scores))}


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    state: OptimizerState | None = None
    rng_state: dict | None = None
    steps: int = 0
    wall: float = 0.0


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def train(
    model: FlowOperator,
    sets: Sequence[WindowSet],
    cfg: TrainConfig,
    val_sets: Sequence[WindowSet] | None = None,
    out_dir: str | Path | None = None,
    resume: dict | None = None,
    stop_after: int | None = None,
    on_checkpoint: Callable[[int, OptimizerState, dict], None] | None = None,
) -> TrainResult:
    """Run the full flow-matching loop.

    ``resume`` is ``{"step", "state", "rng_state"}`` as produced by a
    checkpoint; ``stop_after`` halts early without changing the schedule
    (used to interrupt-and-resume). Metrics are appended to
    ``out_dir/metrics.jsonl`` when ``out_dir`` is given.
    """
    params = {n: p for n, p in model.named_parameters()}
    total = total_steps(sets, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros(params)
    start = 0
    if resume is not None:
        start = int(resume["step"])
        state = resume["state"]
        rng.bit_generator.state = resume["rng_state"]
    batches = make_mixed_batches(sets, cfg, rng)
    val_every = cfg.val_every or 5 * steps_per_epoch(sets, cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "a")

    result = TrainResult(state=state)
    t0 = time.perf_counter()
    end = total if stop_after is None else min(total, stop_after)
    try:
        for step in range(start, end):
            k, idx = next(batches)
            batch = sets[k].prepare(idx, k)
            t = sample_time(rng, cfg, len(idx))
            eps = draw_noise(rng, batch)
            drop = rng.random(len(idx)) < cfg.cond_dropout

            loss = training_step_loss(model, batch, t, eps, drop, cfg.eps_stab)
            lv = float(loss.detach())
            if not math.isfinite(lv):
                dump = None
                if out is not None:
                    dump = str(out / f"divergence_step{step}.json")
                    Path(dump).write_text(json.dumps(
                        {"step": step, "loss": repr(lv), "t": t.tolist(), "set": sets[k].name,
                         "windows": idx.tolist(), "lr": lr_at(step + 1, total, cfg)}))
                raise NumericDivergence(f"non-finite loss {lv} at step {step}", step, dump)
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            grads = {n: (g if g is not None else torch.zeros_like(params[n]))
                     for n, g in zip(params, grads)}
            clip_grads(grads, cfg.grad_clip_norm)
            lr = lr_at(step + 1, total, cfg)
            adamw_step(params, grads, state, lr, cfg)
            result.losses.append(lv)
            result.lrs.append(lr)

            record = {"step": step + 1, "lr": lr, "loss": lv,
                      "wall": round(time.perf_counter() - t0, 3)}
            if val_sets and ((step + 1) % val_every == 0 or step + 1 == total):
                v = validate(model, val_sets, cfg)
                record.update(v)
                result.val.append({"step": step + 1, **v})
            if metrics is not None:
                metrics.write(json.dumps(record) + "\n")
            if on_checkpoint is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                on_checkpoint(step + 1, state, rng.bit_generator.state)
    finally:
        if metrics is not None:
            metrics.close()
    result.steps = end
    result.wall = time.perf_counter() - t0
    result.rng_state = rng.bit_generator.state
    return result
