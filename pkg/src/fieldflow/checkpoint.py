"""Checkpoint files: length-prefixed JSON header + float32 tensors + SHA-256 checksum."""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .train import OptimizerState

SCHEMA_VERSION = 1
MAGIC = "fieldflow-checkpoint"


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class SchemaError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: "OrderedDict[str, np.ndarray]"

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def config(self) -> dict:
        return self.header["config"]


def _digest(header: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(path, model: torch.nn.Module, config: dict, step: int = 0,
                    state: OptimizerState | None = None, rng_state: dict | None = None,
                    metrics: dict | None = None) -> Path:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in model.state_dict().items():
        tensors[f"param/{name}"] = p.detach().cpu().numpy()
    opt = None
    if state is not None:
        for name, m in state.m.items():
            tensors[f"adam_m/{name}"] = m.detach().cpu().numpy()
        for name, v in state.v.items():
            tensors[f"adam_v/{name}"] = v.detach().cpu().numpy()
        opt = {"step": state.step, "applied": state.applied, "rejected": state.rejected}
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {"magic": MAGIC, "schema": SCHEMA_VERSION, "config": config, "step": int(step),
              "metrics": metrics or {}, "optimizer": opt, "rng_state": rng_state, "tensors": index}
    header["checksum"] = _digest(header, payload)
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        f.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> tuple[dict, int]:
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise CheckpointError(f"no such checkpoint: {path}") from None
    with f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise CheckpointError("file too short for a checkpoint header")
        (n,) = struct.unpack("<Q", prefix)
        raw = f.read(n)
    try:
        header = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if header.get("schema") != SCHEMA_VERSION:
        raise SchemaError(f"checkpoint schema {header.get('schema')} != supported {SCHEMA_VERSION}")
    return header, 8 + n


def load_checkpoint(path) -> Checkpoint:
    header, offset = read_checkpoint_header(path)
    payload = Path(path).read_bytes()[offset:]
    expected = header.pop("checksum", None)
    if expected is None or _digest(header, payload) != expected:
        raise ChecksumError(f"checksum mismatch in {path}")
    header["checksum"] = expected
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(header, tensors)


def restore_model(ckpt: Checkpoint, model: torch.nn.Module) -> None:
    """Copy parameters into ``model``; shapes must match exactly."""
    own = model.state_dict()
    stored = {k[len("param/"):]: v for k, v in ckpt.tensors.items() if k.startswith("param/")}
    missing = sorted(set(own) - set(stored))
    extra = sorted(set(stored) - set(own))
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, target in own.items():
        if tuple(stored[name].shape) != tuple(target.shape):
            raise CheckpointError(f"shape mismatch for {name}: {stored[name].shape} vs {tuple(target.shape)}")
    with torch.no_grad():
        for name, target in own.items():
            target.copy_(torch.from_numpy(stored[name]).to(target.dtype))


def restore_optimizer(ckpt: Checkpoint, model: torch.nn.Module) -> OptimizerState | None:
    opt = ckpt.header.get("optimizer")
    if opt is None:
        return None
    m, v = {}, {}
    for name, _ in model.named_parameters():
        try:
            m[name] = torch.from_numpy(ckpt.tensors[f"adam_m/{name}"].copy())
            v[name] = torch.from_numpy(ckpt.tensors[f"adam_v/{name}"].copy())
        except KeyError:
            raise CheckpointError(f"optimizer moments missing for {name}") from None
    return OptimizerState(m, v, int(opt["step"]), int(opt["applied"]), int(opt["rejected"]))


def resume_state(ckpt: Checkpoint, model: torch.nn.Module) -> dict:
    """Restore parameters and return the ``resume`` record expected by :func:`train`."""
    restore_model(ckpt, model)
    state = restore_optimizer(ckpt, model)
    if state is None or ckpt.header.get("rng_state") is None:
        raise CheckpointError("checkpoint carries no optimizer/RNG state to resume from")
    return {"step": ckpt.step, "state": state, "rng_state": ckpt.header["rng_state"]}
