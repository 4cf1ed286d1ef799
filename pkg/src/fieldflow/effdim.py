"""Effective dimension of patch-vector populations (clean field, noise, velocity).

Patch vectors are taken over a dataset's native axes and channels, RMS
normalised per row, and summarised by the eigen-spectrum of their
mean-centred covariance: participation ratio and EV90.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorfmt import PatchSize

log = logging.getLogger(__name__)

TARGETS = ("x", "eps", "v")


@dataclass
class SpectrumReport:
    dim_type: int
    V: int
    target: str
    eigenvalues: np.ndarray
    PR: float
    EV90: int
    n: int
    dataset: str = ""

    @property
    def EV90_over_V(self) -> float:
        return self.EV90 / self.V


def standardize_channels(data: np.ndarray) -> np.ndarray:
    """Dataset-level per-channel zero mean / unit variance (last axis)."""
    axes = tuple(range(data.ndim - 1))
    mean = data.mean(axis=axes, keepdims=True, dtype=np.float64)
    std = np.maximum(data.std(axis=axes, keepdims=True, dtype=np.float64), 1e-12)
    return (data - mean) / std


def sample_patch_vectors(data: np.ndarray, n: int, target: str, patch: PatchSize, rng: np.random.Generator,
                         dim_type: int) -> np.ndarray:
    """Draw ``n`` patch vectors of shape ``(n, V)`` from ``(N, T, X, Y, Z, C)`` data.

    Patches cover the native axes only (degenerate axes have extent 1) at
    uniformly random origins; vectors are flattened in (t, h, w, d, c) order.
    ``eps`` draws fresh standard normals and ``v = x - eps``.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    p = np.array(patch.native(dim_type).as_tuple())
    ext = np.array(data.shape[1:5])
    if np.any(ext < p):
        raise ValueError(f"data extents {tuple(ext)} smaller than patch {tuple(p)}")
    positions = int(np.prod(ext - p + 1)) * data.shape[0]
    if positions < n:
        raise ValueError(f"only {positions} distinct patches available, {n} requested")
    V = int(np.prod(p)) * data.shape[-1]
    traj = rng.integers(0, data.shape[0], size=n)
    origin = np.stack([rng.integers(0, e - q + 1, size=n) for e, q in zip(ext, p)], axis=1)
    x = np.empty((n, V))
    for i in range(n):
        o = origin[i]
        block = data[traj[i], o[0]:o[0] + p[0], o[1]:o[1] + p[1], o[2]:o[2] + p[2], o[3]:o[3] + p[3]]
        x[i] = block.reshape(-1)
    if target == "x":
        return x
    eps = rng.standard_normal((n, V))
    return eps if target == "eps" else x - eps


def rms_normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    rms = np.sqrt((X ** 2).mean(axis=1))
    zero = rms == 0
    if zero.any():
        warnings.warn(f"dropping {int(zero.sum())} all-zero row(s) before RMS normalisation")
    return X[~zero] / rms[~zero, None]


def eigenspectrum(X: np.ndarray) -> np.ndarray:
    """Eigenvalues of the mean-centred sample covariance, descending."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows for a covariance")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    try:
        lam = np.linalg.eigh(cov)[0]
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"symmetric eigensolver failed: {exc}") from exc
    return lam[::-1].copy()


def participation_ratio(lam) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    s2 = float((lam ** 2).sum())
    if s2 <= 0:
        raise ValueError("participation ratio of an all-zero spectrum")
    return float(lam.sum() ** 2 / s2)


def ev90(lam, frac: float = 0.9) -> int:
    lam = np.asarray(lam, dtype=np.float64)
    total = lam.sum()
    if total <= 0:
        raise ValueError("EV90 needs a positive total variance")
    # relative slack absorbs summation round-off at exact boundaries such as (9, 1)
    hit = np.cumsum(lam) >= frac * total * (1 - 1e-12)
    return int(np.argmax(hit)) + 1


def spectrum_report(X: np.ndarray, dim_type: int, target: str, dataset: str = "") -> SpectrumReport:
    Xn = rms_normalize_rows(X)
    lam = eigenspectrum(Xn)
    return SpectrumReport(dim_type, X.shape[1], target, lam, participation_ratio(lam), ev90(lam),
                          Xn.shape[0], dataset)


def diagnose(datasets: Sequence[tuple[np.ndarray, int, str]], n: int = 6000,
             patch: PatchSize | None = None, seed: int = 0, out_dir: str | Path | None = None,
             targets: Sequence[str] = TARGETS) -> list[SpectrumReport]:
    """Spectrum report per (dataset, target); ``datasets`` holds ``(data, dim_type, name)``.

    With ``out_dir``, writes ``effdim_table.tsv`` (Dim, V, Target, PR, EV90,
    EV90/V) and ``effdim_spectra.tsv`` (normalised eigenvalue series).
    """
    patch = patch or PatchSize()
    reports = []
    for j, (data, dim_type, name) in enumerate(datasets):
        std = standardize_channels(np.asarray(data, dtype=np.float64))
        for target in targets:
            rng = np.random.default_rng([seed, j])  # same patches for every target
            X = sample_patch_vectors(std, n, target, patch, rng, dim_type)
            rep = spectrum_report(X, dim_type, target, name)
            log.info("%dD %s: V=%d PR=%.1f EV90=%d", dim_type, target, rep.V, rep.PR, rep.EV90)
            reports.append(rep)
    if out_dir is not None:
        write_report(reports, out_dir)
    return reports


def write_report(reports: Sequence[SpectrumReport], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "effdim_table.tsv"
    lines = ["Dim\tV\tTarget\tPR\tEV90\tEV90/V"]
    for r in reports:
        lines.append(f"{r.dim_type}D\t{r.V}\t{r.target}\t{r.PR:.2f}\t{r.EV90}\t{r.EV90_over_V:.4f}")
    table.write_text("\n".join(lines) + "\n")
    series = out / "effdim_spectra.tsv"
    with open(series, "w") as f:
        f.write("dim\ttarget\tk\tlambda_over_total\n")
        for r in reports:
            lam = np.clip(r.eigenvalues, 0, None)
            lam = lam / lam.sum()
            for k, value in enumerate(lam, start=1):
                f.write(f"{r.dim_type}\t{r.target}\t{k}\t{value:.6e}\n")
    return table, series
