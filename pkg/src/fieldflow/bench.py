"""Inference latency of one-shot future-window generation."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .denoiser import FlowOperator, ModelConfig
from .sampler import SampleConfig, forecast
from .train import WindowSet

BENCH_STEPS = (1, 5, 40)


@dataclass
class BenchRow:
    preset: str
    n_params: int
    steps: int
    mean: float  # seconds per generated window
    std: float
    runs: int


def bench_model(model: FlowOperator, windows: WindowSet, steps: Sequence[int] = BENCH_STEPS,
                runs: int = 10, solver: str = "euler", cfg_scale: float = 2.0,
                preset: str = "custom") -> list[BenchRow]:
    """Mean and std over ``runs`` timed calls per step count, after one untimed warmup call."""
    hist, _ = windows.raw(np.array([0]))
    n_params = sum(p.numel() for p in model.parameters())
    rows = []
    for s in steps:
        cfg = SampleConfig(steps=s, solver=solver, cfg_scale=cfg_scale)
        forecast(model, windows, hist, cfg)
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            forecast(model, windows, hist, cfg)
            times.append(time.perf_counter() - t0)
        rows.append(BenchRow(preset, n_params, s, float(np.mean(times)), float(np.std(times)), len(times)))
    return rows


def bench(presets: Sequence[str] = ("tiny",), steps: Sequence[int] = BENCH_STEPS, runs: int = 10,
          grid: int = 128, seed: int = 0, solver: str = "euler", cfg_scale: float = 2.0) -> list[BenchRow]:
    """Latency table on a synthetic 1D window for each model preset (weights are random)."""
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((1, 20, grid, 1, 1, 1)).astype(np.float32)
    rows = []
    for name in presets:
        cfg = ModelConfig.preset(name)
        model = FlowOperator(cfg, seed=seed)
        # give the zero-initialised gates some weight so every layer does real work
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                if not p.any():
                    p.normal_(0, 0.02, generator=g)
        ws = WindowSet(data, ["Vx"], 1, cfg.history, cfg.horizon, patch=cfg.patch_size, vocab=cfg.vocab)
        rows.extend(bench_model(model, ws, steps, runs, solver, cfg_scale, preset=name))
    return rows


def format_table(rows: Sequence[BenchRow]) -> str:
    steps = sorted({r.steps for r in rows})
    presets = list(dict.fromkeys(r.preset for r in rows))
    head = ["preset", "params"] + [f"{s} step{'s' if s > 1 else ''}" for s in steps]
    lines = ["\t".join(head)]
    for p in presets:
        cells = {r.steps: r for r in rows if r.preset == p}
        n = next(iter(cells.values())).n_params
        vals = [f"{cells[s].mean * 1e3:.2f} ± {cells[s].std * 1e3:.2f} ms" if s in cells else "-" for s in steps]
        lines.append("\t".join([p, str(n)] + vals))
    return "\n".join(lines) + "\n"
