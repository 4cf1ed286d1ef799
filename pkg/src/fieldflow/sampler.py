"""Probability-flow ODE sampling of the future window (Euler / Heun, CFG)."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import FlowOperator, output_to_velocity
from .encoder import ConditionBundle
from .tensorfmt import Layout

SOLVERS = ("euler", "heun")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 40
    solver: str = "euler"
    cfg_scale: float = 2.0
    seed: int = 0
    eps_stab: float = 1e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


def cfg_velocity(v_cond, v_uncond, scale: float):
    """``v_uncond + scale * (v_cond - v_uncond)``; scales 0 and 1 return an input unchanged."""
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def _divergence(step):
    from .train import NumericDivergence
    return NumericDivergence(f"non-finite sampler state at step {step}", step)


def integrate(
    predict: Callable[[torch.Tensor, float], torch.Tensor],
    z0: torch.Tensor,
    steps: int,
    solver: str = "euler",
    prediction: str = "x",
    eps_stab: float = 1e-4,
) -> torch.Tensor:
    """Integrate ``dz/dt = v(z, t)`` from 0 to 1 on the grid ``t_k = k / steps``.

    ``predict(z, t)`` returns the raw network output (x, v or eps, per
    ``prediction``). For x-prediction the Euler step is written as the
    interpolation ``(1 - r) z + r x_hat`` with ``r = dt / ((1 - t) + eps_stab)``,
    algebraically the same as ``z + dt * v`` and exact at ``r = 1``.
    Heun uses a trapezoidal corrector except on the final step, which is Euler.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")

    def velocity(z, t, out=None):
        out = predict(z, t) if out is None else out
        return output_to_velocity(prediction, out, z, torch.tensor(t, dtype=z.dtype), eps_stab)

    z = z0
    for k in range(steps):
        t, t_next = k / steps, (k + 1) / steps
        dt = t_next - t
        out = predict(z, t)
        if solver == "heun" and k < steps - 1:
            v1 = velocity(z, t, out)
            v2 = velocity(z + dt * v1, t_next)
            z = z + (0.5 * dt) * (v1 + v2)
        elif prediction == "x":
            r = dt / ((1 - t) + eps_stab)
            z = (1 - r) * z + r * out
        else:
            z = z + dt * velocity(z, t, out)
        if not bool(torch.isfinite(z).all()):
            raise _divergence(k)
    return z


class GuidedPredictor:
    """Network output with classifier-free guidance; condition and null share one forward pass."""

    def __init__(self, model: FlowOperator, bundle: ConditionBundle, layout: Layout, scale: float):
        self.model, self.layout, self.scale = model, layout, scale
        self.B = bundle.c_g.shape[0]
        if scale == 1:
            self.bundle = bundle
        else:
            self.bundle = bundle.concat(model.null_bundle(bundle))
        self.calls = 0

    @torch.no_grad()
    def __call__(self, z: torch.Tensor, t: float) -> torch.Tensor:
        self.calls += 1
        if self.scale == 1:
            return self.model(z, torch.full((self.B,), t, dtype=z.dtype), self.bundle, self.layout)
        zz = torch.cat([z, z])
        out = self.model(zz, torch.full((2 * self.B,), t, dtype=z.dtype), self.bundle, self.layout)
        # the prediction -> velocity map is affine in the output, so mixing outputs mixes velocities
        return cfg_velocity(out[:self.B], out[self.B:], self.scale)


def initial_noise(layout: Layout, seeds: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """One standard-normal draw per sample from its own seed; zero on padded entries."""
    L, K = layout.n_tokens, len(layout.columns)
    z = np.stack([np.random.default_rng(s).standard_normal((L, K)) for s in seeds])
    if layout.validity is not None:
        z = z * layout.validity
    return torch.from_numpy(z).to(dtype)


def sample(model: FlowOperator, cond: ConditionBundle, cfg: SampleConfig, layout: Layout,
           seeds: Sequence[int] | None = None) -> torch.Tensor:
    """Generate normalised future tokens ``(B, L, K)`` for an encoded condition."""
    B = cond.c_g.shape[0]
    seeds = [cfg.seed + i for i in range(B)] if seeds is None else list(seeds)
    if len(seeds) != B:
        raise ValueError(f"{len(seeds)} seeds for a batch of {B}")
    z0 = initial_noise(layout, seeds, model.dtype)
    predictor = GuidedPredictor(model, cond, layout, cfg.cfg_scale)
    return integrate(predictor, z0, cfg.steps, cfg.solver, model.cfg.prediction, cfg.eps_stab)


@torch.no_grad()
def forecast(model: FlowOperator, windows, hist: np.ndarray, cfg: SampleConfig,
             seeds: Sequence[int] | None = None) -> np.ndarray:
    """Physical-unit forecast ``(B, P, X, Y, Z, V)`` from physical histories via a :class:`WindowSet`."""
    batch = windows.tokenize(hist, None)
    bundle = model.encode(batch.hist, batch.hist_layout, batch.grid)
    tokens = sample(model, bundle, cfg, batch.fut_layout, seeds)
    return windows.denormalize(tokens, batch.mean, batch.scale)


def sample_batch(model: FlowOperator, windows, hist: np.ndarray, cfg: SampleConfig,
                 repeats: int = 1, warmup: bool = False, seeds: Sequence[int] | None = None):
    """Vectorised forecast plus per-sample wall-clock (mean, std over ``repeats``)."""
    if warmup:
        forecast(model, windows, hist, cfg, seeds)
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = forecast(model, windows, hist, cfg, seeds)
        times.append((time.perf_counter() - t0) / len(hist))
    return out, float(np.mean(times)), float(np.std(times)), times
