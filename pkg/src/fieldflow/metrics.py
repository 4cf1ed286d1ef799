"""Evaluation metrics and harnesses: nRMSE, persistence, multi-resolution, prediction-target ablation."""
from __future__ import annotations

import hashlib
import logging
import time
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .denoiser import FlowOperator, ModelConfig
from .sampler import SampleConfig, forecast
from .tensorfmt import FormatError, resample
from .train import NumericDivergence, TrainConfig, WindowSet, train

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    dataset: str
    model: str
    metric: str
    value: float
    n_samples: int
    resolution: tuple[int, ...]
    steps: int
    cfg_scale: float
    wall: float
    status: str = "ok"
    extra: dict | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["resolution"] = "x".join(str(r) for r in self.resolution)
        return d


def nrmse(pred, target, mask=None) -> float:
    """Per-sample relative L2 error ``||pred - target|| / ||target||``, averaged over samples.

    Arrays are ``(B, ...)``. ``mask`` is either a channel mask over the last
    axis or a boolean array broadcastable to the data; entries where it is
    false are ignored. Samples whose target norm is zero are skipped.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask).astype(bool), target.shape)
        pred = np.where(keep, pred, 0.0)
        target = np.where(keep, target, 0.0)
    B = target.shape[0]
    err = np.sqrt(((pred - target) ** 2).reshape(B, -1).sum(1))
    ref = np.sqrt((target ** 2).reshape(B, -1).sum(1))
    ok = ref > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} sample(s) with zero-norm target excluded from nRMSE")
    if not ok.any():
        raise ValueError("every target has zero norm")
    return float(np.mean(err[ok] / ref[ok]))


def persistence_baseline(history: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last frame: ``(B, T, ...) -> (B, horizon, ...)``."""
    history = np.asarray(history)
    if history.ndim < 2 or history.shape[1] == 0:
        raise ValueError("persistence baseline needs at least one history frame")
    last = history[:, -1:]
    return np.repeat(last, horizon, axis=1)


def param_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def eval_windows(ws: WindowSet, max_windows: int | None, seed: int = 0) -> np.ndarray:
    """Deterministic subset of window indices (all of them when ``max_windows`` is None)."""
    n = len(ws)
    if max_windows is None or max_windows >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_windows, replace=False))


def evaluate(model: FlowOperator, ws: WindowSet, cfg: SampleConfig, max_windows: int | None = None,
             batch_size: int = 16, model_id: str = "model", persistence: bool = True) -> list[EvalReport]:
    """nRMSE of sampled forecasts (and of the persistence baseline) on ``ws``."""
    idx = eval_windows(ws, max_windows, cfg.seed)
    preds, truths, hists = [], [], []
    t0 = time.perf_counter()
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        hist, fut = ws.raw(chunk)
        seeds = [cfg.seed + int(i) for i in chunk]
        preds.append(forecast(model, ws, hist, cfg, seeds))
        truths.append(fut)
        hists.append(hist)
    wall = time.perf_counter() - t0
    pred, truth = np.concatenate(preds), np.concatenate(truths)
    res = tuple(ws.data.shape[2:2 + ws.dim_type])
    rows = [EvalReport(ws.name, model_id, "nrmse", nrmse(pred, truth), len(idx), res,
                       cfg.steps, cfg.cfg_scale, wall)]
    if persistence:
        base = persistence_baseline(np.concatenate(hists), ws.horizon)
        rows.append(EvalReport(ws.name, "persistence", "nrmse", nrmse(base, truth), len(idx), res,
                               0, 0.0, 0.0))
    return rows


def resample_dataset(data: np.ndarray, dim_type: int, res: Sequence[int], periodic: bool = True) -> np.ndarray:
    """Resample every trajectory of an ``(N, T, X, Y, Z, V)`` array on its native axes."""
    N, T = data.shape[:2]
    out = []
    for traj in data:
        native = traj.reshape((T,) + traj.shape[1:1 + dim_type] + (traj.shape[-1],))
        r = resample(native, res, periodic=periodic)
        out.append(r.reshape((T,) + tuple(res) + (1,) * (3 - dim_type) + (traj.shape[-1],)))
    return np.stack(out)


def eval_multires(model: FlowOperator, data: np.ndarray, var_names, dim_type: int,
                  resolutions: Sequence[int | Sequence[int]], cfg: SampleConfig,
                  max_windows: int | None = None, stride: int = 1, name: str = "",
                  periodic: bool = True) -> list[EvalReport]:
    """Resample the test trajectories to each resolution and evaluate the unchanged model."""
    before = param_checksum(model)
    ps = model.cfg.patch_size.native(dim_type).as_tuple()[1:1 + dim_type]
    rows = []
    for res in resolutions:
        res = (res,) * dim_type if np.isscalar(res) else tuple(res)
        if len(res) != dim_type or any(r % p for r, p in zip(res, ps)):
            raise FormatError(f"resolution {res} is not divisible by the spatial patch {ps}")
        native_res = tuple(data.shape[2:2 + dim_type])
        d = data if res == native_res else resample_dataset(data, dim_type, res, periodic)
        ws = WindowSet(d, var_names, dim_type, model.cfg.history, model.cfg.horizon, stride,
                       model.cfg.patch_size, model.cfg.vocab, name=name)
        rows.extend(r for r in evaluate(model, ws, cfg, max_windows) if r.model == "model")
    if param_checksum(model) != before:
        raise RuntimeError("evaluation mutated model parameters")
    return rows


def run_ablation(train_sets: Sequence[WindowSet], test_set: WindowSet, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, sample_cfg: SampleConfig,
                 variants: Sequence[str] = ("x", "v", "eps"), max_windows: int | None = None,
                 seed: int = 0) -> list[EvalReport]:
    """Train one model per prediction target under identical data, seeds and schedule.

    A variant whose loss, gradients or sampler state become non-finite is
    recorded with ``status="diverged"`` rather than raising.
    """
    rows = []
    for variant in variants:
        cfg = replace(model_cfg, prediction=variant)
        model = FlowOperator(cfg, seed=seed)
        t0 = time.perf_counter()
        extra, n = {}, 0
        try:
            result = train(model, train_sets, train_cfg, val_sets=[test_set])
            extra = {"final_train_loss": float(np.mean(result.losses[-20:])),
                     "rejected_steps": result.state.rejected}
            if result.val:
                extra["final_val_loss"] = result.val[-1]["val_loss"]
            ev = evaluate(model, test_set, sample_cfg, max_windows, model_id=f"{variant}-pred",
                          persistence=False)[0]
            value, n = ev.value, ev.n_samples
            if not np.isfinite(value):
                raise NumericDivergence("non-finite evaluation metric")
            status = "ok"
        except NumericDivergence as exc:
            log.warning("variant %s diverged: %s", variant, exc)
            value, status = float("nan"), "diverged"
            extra["error"] = str(exc)
        rows.append(EvalReport(test_set.name, f"{variant}-pred", "nrmse", value, n,
                               tuple(test_set.data.shape[2:2 + test_set.dim_type]),
                               sample_cfg.steps, sample_cfg.cfg_scale, time.perf_counter() - t0,
                               status, extra))
    return rows


def write_table(rows: Sequence[EvalReport], path, sep: str = "\t") -> None:
    keys = ["dataset", "model", "metric", "value", "n_samples", "resolution", "steps", "cfg_scale",
            "wall", "status"]
    lines = [sep.join(keys)]
    for r in sorted(rows, key=lambda r: (r.dataset, r.model, r.row()["resolution"])):
        d = r.row()
        lines.append(sep.join(f"{d[k]:.6g}" if isinstance(d[k], float) else str(d[k]) for k in keys))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
