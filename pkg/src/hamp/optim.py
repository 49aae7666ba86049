"""Adam and parameter checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import ContractError, Tensor
from .io import atomic_write_bytes, atomic_write_text


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and zero the gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"Adam state for {name} has shape {m.shape}, parameter has {p.shape}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# -- checkpoints ------------------------------------------------------------------
#
# Binary layout, per tensor in manifest order: uint32 ndim, ndim x uint64 dims,
# then prod(dims) little-endian float64 values in row-major order.

CHECKPOINT_FORMAT = "hamp-params-v1"


def save_checkpoint(path, params: Mapping[str, object]) -> Path:
    """Write ``path`` (binary) and ``path + '.json'`` (name -> offsets manifest)."""
    path = Path(path)
    chunks, entries, offset = [], {}, 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        entries[name] = {
            "offset": offset,
            "data_offset": offset + len(header),
            "shape": list(arr.shape),
        }
        chunks += [header, arr.tobytes()]
        offset += len(header) + arr.nbytes
    atomic_write_bytes(path, b"".join(chunks))
    manifest = {"format": CHECKPOINT_FORMAT, "total_bytes": offset, "tensors": entries}
    atomic_write_text(Path(str(path) + ".json"), json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = path.read_bytes()
    out = {}
    for name, ent in manifest["tensors"].items():
        off = ent["offset"]
        (ndim,) = struct.unpack_from("<I", blob, off)
        shape = struct.unpack_from(f"<{ndim}Q", blob, off + 4)
        if list(shape) != ent["shape"] or off + 4 + 8 * ndim != ent["data_offset"]:
            raise ValueError(f"{path}: header of {name!r} disagrees with the manifest")
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=ent["data_offset"]).reshape(shape).copy()
    return out
