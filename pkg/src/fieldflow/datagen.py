"""Synthetic periodic PDE trajectories and the on-disk dataset container.

Container layout: 8-byte little-endian unsigned header length, a UTF-8 JSON
header, then the payload as little-endian float32 in row-major
``(N, T, X, Y, Z, V)`` order.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorfmt import ChannelVocabulary

SCHEMA_VERSION = 1
DTYPE_TAG = "float32-le"
FAMILIES = ("advection", "burgers", "diffusion2d", "diffusion3d")
_DIMS = {"advection": 1, "burgers": 1, "diffusion2d": 2, "diffusion3d": 3}
DEFAULT_GRID = {1: (128,), 2: (32, 32), 3: (16, 16, 16)}


class ContainerError(ValueError):
    pass


class HeaderError(ContainerError):
    """Header missing, unparsable, or inconsistent."""


class TruncatedPayloadError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


@dataclass
class GenSpec:
    family: str
    n: int = 16
    grid: tuple[int, ...] | None = None
    steps: int = 30
    dt: float = 0.01
    beta: float | tuple[float, float] = 1.0  # advection speed, or a (lo, hi) range drawn per trajectory
    nu: float = 0.01
    max_mode: int = 4
    var_names: tuple[str, ...] | None = None
    seed: int = 0
    substep_dt: float | None = None  # Burgers only; None picks a stable step automatically
    refine: int = 4  # Burgers fine-grid factor

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        d = _DIMS[self.family]
        self.grid = tuple(self.grid) if self.grid is not None else DEFAULT_GRID[d]
        if len(self.grid) != d or min(self.grid) < 1:
            raise ValueError(f"{self.family} needs {d} positive grid extents, got {self.grid}")
        if self.n < 1 or self.steps < 1 or self.dt <= 0:
            raise ValueError("n, steps and dt must be positive")
        if self.family != "advection" and self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.var_names is None:
            self.var_names = ("Vx",) if d == 1 else ("rho",)
        self.var_names = tuple(self.var_names)
        ChannelVocabulary().slots(self.var_names)
        if isinstance(self.beta, (list, tuple)):
            self.beta = tuple(float(b) for b in self.beta)

    @property
    def dim_type(self) -> int:
        return _DIMS[self.family]

    def params(self) -> dict:
        return {"family": self.family, "dt": self.dt, "beta": self.beta, "nu": self.nu,
                "max_mode": self.max_mode, "seed": self.seed, "grid": list(self.grid)}


@dataclass
class DatasetContainer:
    data: np.ndarray  # (N, T, X, Y, Z, V) float32
    dim_type: int
    var_names: tuple[str, ...]
    params: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        if self.data.ndim != 6:
            raise ContainerError(f"data must be (N, T, X, Y, Z, V), got shape {self.data.shape}")
        if self.data.shape[-1] != len(self.var_names):
            raise ContainerError(f"{len(self.var_names)} names for {self.data.shape[-1]} channels")
        for axis in range(self.dim_type, 3):
            if self.data.shape[2 + axis] != 1:
                raise ContainerError(f"dim_type={self.dim_type} data must have extent 1 on axis {axis + 1}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def header(self) -> dict:
        return {"schema": self.schema, "dim_type": self.dim_type, "var_names": list(self.var_names),
                "shape": list(self.shape), "dtype": DTYPE_TAG, "params": self.params}

    def native(self, i: int) -> np.ndarray:
        """Trajectory ``i`` as ``(T, spatial..., V)``."""
        traj = self.data[i]
        return traj.reshape(traj.shape[:1 + self.dim_type] + traj.shape[-1:])

    def subset(self, idx) -> "DatasetContainer":
        return DatasetContainer(self.data[np.asarray(idx)], self.dim_type, self.var_names,
                                dict(self.params), self.schema)


# --- initial conditions & solvers ---------------------------------------------

def _wavenumbers(grid: Sequence[int]) -> list[np.ndarray]:
    return [np.fft.fftfreq(n, d=1.0 / n) for n in grid]


def _mode_mesh(grid):
    ks = np.meshgrid(*_wavenumbers(grid), indexing="ij")
    return ks, sum(k ** 2 for k in ks)


def random_fourier(rng: np.random.Generator, grid: Sequence[int], max_mode: int = 4) -> np.ndarray:
    """Smooth zero-mean periodic field: ``Re sum_k c_k exp(2 pi i k.x)`` over ``1 <= |k| <= max_mode``,
    ``c_k`` complex normal scaled by ``1 / (1 + |k|^2)``."""
    grid = tuple(grid)
    _, k2 = _mode_mesh(grid)
    band = (k2 >= 1) & (k2 <= max_mode ** 2)
    coef = np.zeros(grid, dtype=complex)
    n = int(band.sum())
    coef[band] = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / (1 + k2[band])
    return np.real(np.fft.ifftn(coef) * np.prod(grid))


def _shape6(frames: np.ndarray, dim_type: int) -> np.ndarray:
    """``(T, spatial...)`` -> ``(T, X, Y, Z)``."""
    return frames.reshape(frames.shape + (1,) * (3 - dim_type))


def advect(u0: np.ndarray, beta: float, times: np.ndarray) -> np.ndarray:
    """Exact periodic translation ``u0((x - beta t) mod 1)`` by spectral phase shift."""
    n = u0.shape[0]
    k = _wavenumbers((n,))[0]
    uh = np.fft.fft(u0)
    phase = np.exp(-2j * np.pi * np.outer(times * beta, k))
    return np.real(np.fft.ifft(uh[None] * phase, axis=-1))


def diffuse(u0: np.ndarray, nu: float, times: np.ndarray) -> np.ndarray:
    """Exact periodic heat-equation evolution of a d-dimensional field."""
    axes = tuple(range(u0.ndim))
    uh = np.fft.fftn(u0)
    _, k2 = _mode_mesh(u0.shape)
    decay = np.exp(-4 * np.pi ** 2 * nu * np.multiply.outer(times, k2))
    return np.real(np.fft.ifftn(uh[None] * decay, axes=tuple(a + 1 for a in axes)))


def _burgers_rhs(uh, k, nu, dealias):
    u = np.fft.ifft(uh).real
    nonlin = -0.5j * 2 * np.pi * k * np.fft.fft(u * u) * dealias
    return nonlin - nu * (2 * np.pi * k) ** 2 * uh


def burgers_stable_dt(n_fine: int, nu: float, umax: float, safety: float = 0.5) -> float:
    kmax = np.pi * n_fine  # largest angular wavenumber on the fine grid
    limits = [2.78 / (nu * kmax ** 2)]
    if umax > 0:
        limits.append(2.8 / (umax * kmax))
    return safety * min(limits)


def solve_burgers(u0: np.ndarray, nu: float, dt: float, steps: int, refine: int = 4,
                  substep_dt: float | None = None) -> np.ndarray:
    """Pseudo-spectral RK4 on a ``refine``-times finer grid, sampled back at the input points.

    Returns ``(steps, n)`` frames at times ``0, dt, ..., (steps - 1) dt``.
    """
    n = u0.shape[0]
    nf = n * refine
    # band-limited upsampling of the initial condition onto the fine grid
    uh0 = np.fft.fft(u0)
    uhf = np.zeros(nf, dtype=complex)
    half = n // 2
    uhf[:half] = uh0[:half]
    uhf[-(n - half):] = uh0[half:]
    uhf *= refine
    k = _wavenumbers((nf,))[0]
    dealias = (np.abs(k) < nf / 3).astype(float)

    umax = float(np.abs(u0).max())
    h_max = burgers_stable_dt(nf, nu, 2 * umax + 1e-12)
    h = substep_dt if substep_dt is not None else h_max
    n_sub = max(1, math.ceil(dt / min(h, h_max) - 1e-9))
    h = dt / n_sub

    out = np.empty((steps, n))
    uh = uhf
    for s in range(steps):
        out[s] = np.fft.ifft(uh).real[::refine]
        if s == steps - 1:
            break
        for _ in range(n_sub):
            k1 = _burgers_rhs(uh, k, nu, dealias)
            k2 = _burgers_rhs(uh + 0.5 * h * k1, k, nu, dealias)
            k3 = _burgers_rhs(uh + 0.5 * h * k2, k, nu, dealias)
            k4 = _burgers_rhs(uh + h * k3, k, nu, dealias)
            uh = uh + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(uh).all():
            raise FloatingPointError(f"Burgers solve blew up at frame {s + 1}")
    return out


def _generate(spec: GenSpec, initial: np.ndarray | None, evolve) -> DatasetContainer:
    rng = np.random.default_rng(spec.seed)
    times = np.arange(spec.steps) * spec.dt
    V = len(spec.var_names)
    out = np.empty((spec.n, spec.steps) + tuple(spec.grid) + (1,) * (3 - spec.dim_type) + (V,),
                   dtype=np.float32)
    betas = []
    for i in range(spec.n):
        if isinstance(spec.beta, tuple):
            b = float(rng.uniform(*spec.beta))
        else:
            b = float(spec.beta)
        betas.append(b)
        for c in range(V):
            u0 = initial if initial is not None else random_fourier(rng, spec.grid, spec.max_mode)
            out[i, ..., c] = _shape6(evolve(np.asarray(u0, dtype=np.float64), times, b), spec.dim_type)
    params = spec.params()
    if isinstance(spec.beta, tuple):
        params["beta_per_trajectory"] = betas
    return DatasetContainer(out, spec.dim_type, spec.var_names, params)


def gen_advection(spec: GenSpec, initial: np.ndarray | None = None) -> DatasetContainer:
    if spec.family != "advection":
        raise ValueError("gen_advection needs an advection spec")
    return _generate(spec, initial, lambda u0, times, b: advect(u0, b, times))


def gen_burgers(spec: GenSpec, initial: np.ndarray | None = None) -> DatasetContainer:
    if spec.family != "burgers":
        raise ValueError("gen_burgers needs a burgers spec")
    return _generate(spec, initial, lambda u0, times, b: solve_burgers(
        u0, spec.nu, spec.dt, spec.steps, spec.refine, spec.substep_dt))


def gen_diffusion(spec: GenSpec, initial: np.ndarray | None = None) -> DatasetContainer:
    if spec.family not in ("diffusion2d", "diffusion3d"):
        raise ValueError("gen_diffusion needs a diffusion2d/diffusion3d spec")
    return _generate(spec, initial, lambda u0, times, b: diffuse(u0, spec.nu, times))


def generate(spec: GenSpec) -> DatasetContainer:
    if spec.family == "advection":
        return gen_advection(spec)
    if spec.family == "burgers":
        return gen_burgers(spec)
    return gen_diffusion(spec)


# --- container I/O ------------------------------------------------------------

def write_container(path, container: DatasetContainer) -> None:
    header = json.dumps(container.header(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(container.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload.tobytes())


def _parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable container header: {exc}") from None
    if not isinstance(header, dict):
        raise HeaderError("container header is not a record")
    required = ("schema", "dim_type", "var_names", "shape", "dtype")
    missing = [k for k in required if k not in header]
    if missing:
        raise HeaderError(f"container header lacks {missing}")
    if header["schema"] != SCHEMA_VERSION:
        raise VersionError(f"container schema {header['schema']} != supported {SCHEMA_VERSION}")
    if header["dtype"] != DTYPE_TAG:
        raise HeaderError(f"unsupported dtype tag {header['dtype']!r}")
    if len(header["shape"]) != 6 or header["shape"][-1] != len(header["var_names"]):
        raise HeaderError(f"inconsistent shape {header['shape']} for {header['var_names']}")
    return header


def read_header(path) -> tuple[dict, int]:
    """Header record and payload offset, without touching the payload."""
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise HeaderError("file too short for a header length")
        (n,) = struct.unpack("<Q", prefix)
        raw = f.read(n)
        if len(raw) < n:
            raise HeaderError("header truncated")
    return _parse_header(raw), 8 + n


def read_container(path) -> DatasetContainer:
    header, offset = read_header(path)
    shape = tuple(int(s) for s in header["shape"])
    expected = int(np.prod(shape)) * 4
    size = Path(path).stat().st_size - offset
    if size < expected:
        raise TruncatedPayloadError(f"payload has {size} bytes, header promises {expected}")
    if size > expected:
        raise HeaderError(f"payload has {size - expected} trailing bytes beyond the declared shape")
    data = np.fromfile(path, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
    return DatasetContainer(data.astype(np.float32, copy=False), int(header["dim_type"]),
                            tuple(header["var_names"]), header.get("params", {}), header["schema"])


def split(container: DatasetContainer, train_frac: float = 0.9, seed: int = 0):
    """Seeded shuffle of trajectories into disjoint train/test containers."""
    N = container.shape[0]
    if N < 2:
        raise ValueError(f"need at least 2 trajectories to split, got {N}")
    n_train = min(N - 1, max(1, int(round(train_frac * N))))
    perm = np.random.default_rng(seed).permutation(N)
    return container.subset(np.sort(perm[:n_train])), container.subset(np.sort(perm[n_train:]))


def ingest_raw(array_path, sidecar_path=None) -> DatasetContainer:
    """Wrap a pre-exported ``.npy`` array of shape ``(N, T, X, Y, Z, V)`` (or ``(N, T, spatial..., V)``)
    using a JSON sidecar with ``var_names``, ``dim_type`` and optional ``params``."""
    array_path = Path(array_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else array_path.with_suffix(".json")
    try:
        meta = json.loads(sidecar_path.read_text())
    except FileNotFoundError:
        raise HeaderError(f"missing sidecar {sidecar_path}") from None
    except json.JSONDecodeError as exc:
        raise HeaderError(f"unreadable sidecar {sidecar_path}: {exc}") from None
    for key in ("var_names", "dim_type"):
        if key not in meta:
            raise HeaderError(f"sidecar lacks {key!r}")
    d = int(meta["dim_type"])
    arr = np.load(array_path)
    if arr.ndim == d + 3:
        N, T = arr.shape[:2]
        arr = arr.reshape((N, T) + arr.shape[2:2 + d] + (1,) * (3 - d) + arr.shape[-1:])
    if arr.ndim != 6:
        raise ContainerError(f"cannot interpret array of shape {arr.shape} as dim_type={d} data")
    return DatasetContainer(arr.astype(np.float32), d, tuple(meta["var_names"]), meta.get("params", {}))
