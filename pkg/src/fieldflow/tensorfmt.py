"""Canonical 4D layout for heterogeneous 1D/2D/3D trajectories.

Every trajectory is cast onto a dense ``(T, H, W, D, C_max)`` tensor whose
channel axis indexes a shared variable vocabulary. Degenerate spatial axes
(W, D for 1D data; D for 2D data) are zero-padded to one patch extent.

Two token layouts are supported:

* the full layout (:func:`patchify` / :func:`unpatchify`), where every token
  is a ``p_t*p_h*p_w*p_d*C_max`` vector in ``(t, h, w, d, c)`` scan order;
* the compact layout (:class:`TokenPlan`), which keeps only the columns of
  that vector that can ever be non-zero for a given dataset (valid channels,
  offset 0 along degenerate axes). It is an exact column subset of the full
  layout and is what the model consumes during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import torch

DEFAULT_CHANNELS = (
    "Vx", "Vy", "Vz", "rho", "p", "u_act", "v_inh", "water_depth", "particles",
)
SCALE_FLOOR = 1e-6


class FormatError(ValueError):
    """Raised on malformed trajectories, shapes or token sets."""


@dataclass(frozen=True)
class ChannelVocabulary:
    names: tuple[str, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise FormatError(f"duplicate channel names in vocabulary: {self.names}")

    @property
    def c_max(self) -> int:
        return len(self.names)

    def slot(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise FormatError(f"unknown variable {name!r}; vocabulary is {self.names}") from None

    def slots(self, var_names: Sequence[str]) -> list[int]:
        if len(set(var_names)) != len(var_names):
            raise FormatError(f"duplicate variable names: {list(var_names)}")
        return [self.slot(v) for v in var_names]

    def mask(self, var_names: Sequence[str]) -> np.ndarray:
        m = np.zeros(self.c_max, dtype=np.uint8)
        m[self.slots(var_names)] = 1
        return m


@dataclass(frozen=True)
class PatchSize:
    p_t: int = 2
    p_h: int = 8
    p_w: int = 8
    p_d: int = 8

    def __post_init__(self):
        if min(self.as_tuple()) < 1:
            raise FormatError(f"patch extents must be >= 1, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.p_t, self.p_h, self.p_w, self.p_d)

    def token_dim(self, c_max: int) -> int:
        return self.p_t * self.p_h * self.p_w * self.p_d * c_max

    def native(self, dim_type: int) -> "PatchSize":
        """Patch restricted to the axes a ``dim_type`` trajectory actually has."""
        _check_dim_type(dim_type)
        return PatchSize(
            self.p_t,
            self.p_h,
            self.p_w if dim_type >= 2 else 1,
            self.p_d if dim_type >= 3 else 1,
        )


def _check_dim_type(dim_type: int) -> None:
    if dim_type not in (1, 2, 3):
        raise FormatError(f"dim_type must be 1, 2 or 3, got {dim_type}")


def _round_up(n: int, k: int) -> int:
    return -(-n // k) * k


def _permute(a, perm):
    return a.permute(*perm) if isinstance(a, torch.Tensor) else a.transpose(perm)


@dataclass
class Unified4DField:
    data: np.ndarray  # (T, H, W, D, C_max)
    mask: np.ndarray  # (C_max,) in {0, 1}
    dim_type: int
    patch: PatchSize
    native_shape: tuple[int, ...]  # (T, spatial...)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def valid_region(self) -> np.ndarray:
        """Boolean ``(T, H, W, D)`` array marking cells that hold real data."""
        valid = np.zeros(self.data.shape[:4], dtype=bool)
        sl = [slice(0, self.native_shape[0])]
        sl += [slice(0, n) for n in self.native_shape[1:]]
        sl += [slice(0, 1)] * (3 - self.dim_type)
        valid[tuple(sl)] = True
        return valid

    def to_native(self, var_names: Sequence[str], vocab: ChannelVocabulary | None = None) -> np.ndarray:
        """Undo :func:`canonicalize`: crop padding and gather the dataset's channels."""
        vocab = vocab or ChannelVocabulary()
        sl = [slice(0, self.native_shape[0])]
        sl += [slice(0, n) for n in self.native_shape[1:]]
        sl += [0] * (3 - self.dim_type)
        region = self.data[tuple(sl)]
        return region[..., vocab.slots(var_names)]

    def replace(self, data: np.ndarray) -> "Unified4DField":
        return Unified4DField(data, self.mask, self.dim_type, self.patch, self.native_shape)


def canonicalize(
    raw: np.ndarray,
    var_names: Sequence[str],
    dim_type: int,
    vocab: ChannelVocabulary | None = None,
    patch: PatchSize | None = None,
) -> Unified4DField:
    """Cast a ``(T, spatial..., C_k)`` trajectory onto the unified 4D grid."""
    vocab = vocab or ChannelVocabulary()
    patch = patch or PatchSize()
    _check_dim_type(dim_type)
    raw = np.asarray(raw)
    if raw.ndim != dim_type + 2:
        raise FormatError(
            f"dim_type={dim_type} expects {dim_type} spatial axes, got array of shape {raw.shape}"
        )
    if raw.shape[-1] != len(var_names):
        raise FormatError(f"{len(var_names)} variable names for {raw.shape[-1]} channels")
    slots = vocab.slots(var_names)

    native = raw.shape[:-1]
    extents = list(native) + [1] * (3 - dim_type)
    ptch = patch.as_tuple()
    padded = []
    for axis, (n, p) in enumerate(zip(extents, ptch)):
        degenerate = axis >= dim_type + 1
        padded.append(p if degenerate else _round_up(n, p))

    data = np.zeros(tuple(padded) + (vocab.c_max,), dtype=raw.dtype)
    region = tuple(slice(0, n) for n in native) + (0,) * (3 - dim_type)
    for j, s in enumerate(slots):
        data[region + (s,)] = raw[..., j]
    return Unified4DField(data, vocab.mask(var_names), dim_type, patch, tuple(native))


@dataclass
class TokenSet:
    vectors: np.ndarray  # (L, V_tok)
    coords: np.ndarray  # (L, 4) patch origins in grid cells
    patch: PatchSize
    grid: tuple[int, int, int, int]


def token_grid(extents: Sequence[int], patch: PatchSize) -> tuple[int, int, int, int]:
    grid = []
    for n, p in zip(extents, patch.as_tuple()):
        if n % p:
            raise FormatError(f"extent {tuple(extents)} not divisible by patch {patch.as_tuple()}")
        grid.append(n // p)
    return tuple(grid)


def grid_coords(grid: Sequence[int], patch: PatchSize, t_offset: int = 0) -> np.ndarray:
    """Patch-origin coordinates in row-major token order, shape ``(L, 4)``."""
    axes = [np.arange(g) * p for g, p in zip(grid, patch.as_tuple())]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=-1).astype(np.int64)
    coords[:, 0] += t_offset
    return coords


def patchify_array(data, patch: PatchSize):
    """``(..., T, H, W, D, C) -> (..., L, p_t*p_h*p_w*p_d*C)`` in (t,h,w,d,c) scan order."""
    *lead, T, H, W, D, C = data.shape
    gt, gh, gw, gd = token_grid((T, H, W, D), patch)
    pt, ph, pw, pd = patch.as_tuple()
    n = len(lead)
    x = data.reshape(*lead, gt, pt, gh, ph, gw, pw, gd, pd, C)
    perm = list(range(n)) + [n + i for i in (0, 2, 4, 6, 1, 3, 5, 7, 8)]
    x = _permute(x, perm)
    return x.reshape(*lead, gt * gh * gw * gd, pt * ph * pw * pd * C)


def unpatchify_array(vectors, grid: Sequence[int], patch: PatchSize, c: int):
    """Inverse of :func:`patchify_array` for tokens in row-major grid order."""
    *lead, L, V = vectors.shape
    gt, gh, gw, gd = grid
    pt, ph, pw, pd = patch.as_tuple()
    if L != gt * gh * gw * gd or V != pt * ph * pw * pd * c:
        raise FormatError(f"token array {tuple(vectors.shape)} does not match grid {tuple(grid)}")
    n = len(lead)
    x = vectors.reshape(*lead, gt, gh, gw, gd, pt, ph, pw, pd, c)
    perm = list(range(n)) + [n + i for i in (0, 4, 1, 5, 2, 6, 3, 7, 8)]
    x = _permute(x, perm)
    return x.reshape(*lead, gt * pt, gh * ph, gw * pw, gd * pd, c)


def patchify(f: Unified4DField, patch: PatchSize | None = None) -> TokenSet:
    patch = patch or f.patch
    grid = token_grid(f.data.shape[:4], patch)
    return TokenSet(patchify_array(f.data, patch), grid_coords(grid, patch), patch, grid)


def unpatchify(tokens: TokenSet, mask: np.ndarray, dim_type: int, native_shape: Sequence[int]) -> Unified4DField:
    """Place token blocks by their coordinates (token order is irrelevant)."""
    patch, grid = tokens.patch, tokens.grid
    coords = np.asarray(tokens.coords)
    p = np.array(patch.as_tuple())
    if coords.shape != (int(np.prod(grid)), 4):
        raise FormatError(f"expected {int(np.prod(grid))} tokens, got coords of shape {coords.shape}")
    if np.any(coords % p) or np.any(coords < 0) or np.any(coords // p >= np.array(grid)):
        raise FormatError("token coordinates are off the patch lattice")
    idx = coords // p
    linear = ((idx[:, 0] * grid[1] + idx[:, 1]) * grid[2] + idx[:, 2]) * grid[3] + idx[:, 3]
    if len(np.unique(linear)) != len(linear):
        raise FormatError("duplicate token coordinates")
    ordered = np.empty_like(tokens.vectors)
    ordered[linear] = tokens.vectors
    c = tokens.vectors.shape[-1] // int(np.prod(p))
    data = unpatchify_array(ordered, grid, patch, c)
    return Unified4DField(data, np.asarray(mask), dim_type, patch, tuple(native_shape))


@dataclass(frozen=True)
class TokenPlan:
    """Compact tokenization of one dataset's native ``(T, X, Y, Z, C_k)`` windows.

    ``columns`` indexes the full token vector, so ``plan.tokens(raw)`` equals
    ``patchify(canonicalize(raw)).vectors[:, plan.columns]`` exactly.
    """

    var_names: tuple[str, ...]
    dim_type: int
    spatial: tuple[int, int, int]  # native (X, Y, Z); degenerate axes are 1
    frames: int
    patch: PatchSize = PatchSize()
    vocab: ChannelVocabulary = field(default_factory=ChannelVocabulary)

    def __post_init__(self):
        _check_dim_type(self.dim_type)
        object.__setattr__(self, "var_names", tuple(self.var_names))
        object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if len(self.spatial) != 3:
            raise FormatError("spatial must list (X, Y, Z)")
        for axis in range(self.dim_type, 3):
            if self.spatial[axis] != 1:
                raise FormatError(f"dim_type={self.dim_type} data must have extent 1 on axis {axis + 1}")
        self.vocab.slots(self.var_names)

    @cached_property
    def order(self) -> np.ndarray:
        return np.argsort(self.vocab.slots(self.var_names), kind="stable")

    @cached_property
    def native_patch(self) -> PatchSize:
        return self.patch.native(self.dim_type)

    @cached_property
    def padded(self) -> tuple[int, int, int, int]:
        ext = (self.frames,) + self.spatial
        return tuple(_round_up(n, p) for n, p in zip(ext, self.native_patch.as_tuple()))

    @cached_property
    def grid(self) -> tuple[int, int, int, int]:
        return token_grid(self.padded, self.native_patch)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid))

    @cached_property
    def columns(self) -> np.ndarray:
        slots = np.sort(self.vocab.slots(self.var_names))
        pt, ph, pw, pd = self.native_patch.as_tuple()
        P = self.patch
        it, ih, iw, idd, s = np.meshgrid(
            np.arange(pt), np.arange(ph), np.arange(pw), np.arange(pd), slots, indexing="ij"
        )
        cols = (((it * P.p_h + ih) * P.p_w + iw) * P.p_d + idd) * self.vocab.c_max + s
        return cols.ravel().astype(np.int64)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @cached_property
    def mask(self) -> np.ndarray:
        return self.vocab.mask(self.var_names)

    def coords(self, t_offset: int = 0) -> np.ndarray:
        # degenerate axes have grid extent 1, so their origin is 0 as in the full layout
        return grid_coords(self.grid, self.patch, t_offset)

    @cached_property
    def validity(self) -> np.ndarray | None:
        """``(L, K)`` 0/1 weights, or ``None`` when no present axis needed padding."""
        ext = (self.frames,) + self.spatial
        if tuple(ext) == tuple(self.padded):
            return None
        ones = np.zeros(self.padded + (len(self.var_names),), dtype=np.float32)
        ones[tuple(slice(0, n) for n in ext)] = 1.0
        return patchify_array(ones, self.native_patch)

    def tokens(self, raw):
        """``(..., T, X, Y, Z, C_k) -> (..., L, K)``; works on numpy or torch."""
        ext = (self.frames,) + self.spatial
        if tuple(raw.shape[-5:-1]) != ext or raw.shape[-1] != len(self.var_names):
            raise FormatError(f"window shape {tuple(raw.shape)} does not match plan {ext + (len(self.var_names),)}")
        x = raw[..., self.order]
        if tuple(ext) != tuple(self.padded):
            x = _pad_to(x, self.padded)
        return patchify_array(x, self.native_patch)

    def untokens(self, tokens):
        """Inverse of :meth:`tokens` (crops padding, restores channel order)."""
        x = unpatchify_array(tokens, self.grid, self.native_patch, len(self.var_names))
        ext = (self.frames,) + self.spatial
        x = x[(Ellipsis,) + tuple(slice(0, n) for n in ext) + (slice(None),)]
        inv = np.argsort(self.order)
        return x[..., inv]

    def with_frames(self, frames: int) -> "TokenPlan":
        return TokenPlan(self.var_names, self.dim_type, self.spatial, frames, self.patch, self.vocab)

    def with_spatial(self, spatial: Sequence[int]) -> "TokenPlan":
        return TokenPlan(self.var_names, self.dim_type, tuple(spatial), self.frames, self.patch, self.vocab)


def _pad_to(x, padded):
    lead = x.shape[:-5]
    out_shape = tuple(lead) + tuple(padded) + (x.shape[-1],)
    if isinstance(x, torch.Tensor):
        out = x.new_zeros(out_shape)
    else:
        out = np.zeros(out_shape, dtype=x.dtype)
    out[(Ellipsis,) + tuple(slice(0, n) for n in x.shape[-5:-1]) + (slice(None),)] = x
    return out


@dataclass
class NormStats:
    mean: np.ndarray  # (C_max,)
    scale: np.ndarray  # (C_max,)


def window_stats(history, axes=None):
    """Per-channel mean and standard deviation of native ``(..., T, X, Y, Z, C)`` windows.

    Reduces over time and space; a leading batch dimension is kept. Constant
    channels get the scale floor.
    """
    axes = tuple(range(-5, -1)) if axes is None else axes
    if isinstance(history, torch.Tensor):
        mean = history.mean(dim=axes, keepdim=True)
        scale = (history - mean).pow(2).mean(dim=axes, keepdim=True).sqrt().clamp_min(SCALE_FLOOR)
    else:
        mean = history.mean(axis=axes, keepdims=True)
        scale = np.maximum(np.sqrt(((history - mean) ** 2).mean(axis=axes, keepdims=True)), SCALE_FLOOR)
    return mean, scale


def fit_norm(history: Unified4DField) -> NormStats:
    c = history.data.shape[-1]
    valid = history.valid_region()
    mean = np.zeros(c)
    scale = np.ones(c)
    for ch in np.flatnonzero(history.mask):
        vals = history.data[..., ch][valid].astype(np.float64)
        mean[ch] = vals.mean()
        scale[ch] = max(float(np.sqrt(((vals - mean[ch]) ** 2).mean())), SCALE_FLOOR)
    return NormStats(mean, scale)


def _region_and_mask(f: Unified4DField) -> np.ndarray:
    return f.valid_region()[..., None] & (f.mask.astype(bool)[None, None, None, None, :])


def apply_norm(f: Unified4DField, stats: NormStats) -> Unified4DField:
    keep = _region_and_mask(f)
    data = np.where(keep, (f.data - stats.mean) / stats.scale, 0.0).astype(f.data.dtype)
    return f.replace(data)


def invert_norm(f: Unified4DField, stats: NormStats) -> Unified4DField:
    keep = _region_and_mask(f)
    data = np.where(keep, f.data * stats.scale + stats.mean, 0.0).astype(f.data.dtype)
    return f.replace(data)


def _interp_axis(a: np.ndarray, axis: int, m: int, periodic: bool) -> np.ndarray:
    n = a.shape[axis]
    if m < 1:
        raise FormatError(f"target extent must be >= 1, got {m}")
    if n == m:
        return a
    if periodic:
        pos = np.arange(m) * (n / m)
        lo = np.floor(pos).astype(np.int64)
        w = pos - lo
        hi = (lo + 1) % n
        lo = lo % n
    else:
        if n < 2:
            raise FormatError("non-periodic resampling needs at least 2 source points")
        pos = np.linspace(0.0, n - 1, m) if m > 1 else np.zeros(1)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
        w = pos - lo
        hi = lo + 1
    shape = [1] * a.ndim
    shape[axis] = m
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - w) + np.take(a, hi, axis=axis) * w


def resample(traj: np.ndarray, target_res: Sequence[int], periodic: bool = False) -> np.ndarray:
    """Separable linear interpolation of the spatial axes of ``(T, s_1..s_k, C)``.

    With ``periodic=False`` grid endpoints are aligned (values at both ends are
    preserved); with ``periodic=True`` the grids are ``i/n`` on the unit torus.
    """
    traj = np.asarray(traj)
    target_res = tuple(int(r) for r in target_res)
    if len(target_res) != traj.ndim - 2:
        raise FormatError(f"{len(target_res)} target extents for array of shape {traj.shape}")
    out = traj
    for i, m in enumerate(target_res):
        out = _interp_axis(out, 1 + i, m, periodic)
    return out.astype(traj.dtype, copy=False)


@dataclass(frozen=True)
class Layout:
    """What the model needs to know about a batch of compact tokens."""

    columns: np.ndarray  # (K,) indices into the full token vector
    coords: np.ndarray  # (L, 4)
    dim_type: int
    validity: np.ndarray | None = None  # (L, K) or None

    @property
    def n_tokens(self) -> int:
        return len(self.coords)


def plan_layout(plan: TokenPlan, t_offset: int = 0) -> Layout:
    return Layout(plan.columns, plan.coords(t_offset), plan.dim_type, plan.validity)


def plan_for_field(f: Unified4DField, vocab: ChannelVocabulary | None = None) -> TokenPlan:
    """The compact plan whose columns cover every possibly non-zero entry of ``f``."""
    vocab = vocab or ChannelVocabulary()
    names = [vocab.names[i] for i in np.flatnonzero(f.mask)]
    spatial = tuple(f.native_shape[1:]) + (1,) * (3 - f.dim_type)
    plan = TokenPlan(names, f.dim_type, spatial, f.native_shape[0], f.patch, vocab)
    if plan.grid != token_grid(f.data.shape[:4], f.patch):
        raise FormatError("field padding does not match its patch; re-canonicalize it")
    return plan
