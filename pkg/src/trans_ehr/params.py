"""Named parameter storage, the AdamW optimizer and on-disk checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor, backward
from .errors import OptimizerError

MANIFEST = "manifest.json"
BLOB = "params.bin"


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Ordered mapping ``name -> Tensor`` plus per-parameter optimizer state."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=requires_grad, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backpropagate ``loss``; parameters outside the graph get zeros."""
        leaf_grads = backward(loss)
        return {
            name: leaf_grads.get(t, np.zeros_like(t.data)) for name, t in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_snapshot(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self._params[name]
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def detached(self) -> "ParamStore":
        """Same values, no gradient tracking (used for frozen models)."""
        out = ParamStore(self.dtype)
        for name, t in self._params.items():
            out.add(name, t.data, requires_grad=False)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data, requires_grad=t.requires_grad)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def adamw_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> ParamStore:
    """One AdamW update, in place; returns ``params`` for chaining.

    Weight decay is decoupled: ``theta <- theta - lr * wd * theta`` happens
    independently of the bias-corrected adaptive step.
    """
    b1, b2 = betas
    if lr < 0 or eps <= 0 or weight_decay < 0 or not (0 < b1 < 1 and 0 < b2 < 1):
        raise ValueError("adamw_step: invalid hyperparameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name!r}; step refused")

    for name, g in grads.items():
        p = params[name]
        st = params.state.get(name)
        if st is None:
            st = params.state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m = b1 * st.m + (1 - b1) * g
        st.v = b2 * st.v + (1 - b2) * (g * g)
        m_hat = st.m / (1 - b1**st.step)
        v_hat = st.v / (1 - b2**st.step)
        theta = p.data * (1 - lr * weight_decay)
        p.data = (theta - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype, copy=False)
    return params


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ParamStore
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, params: ParamStore, metadata: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``params.bin`` into ``path`` atomically.

    The blob is little-endian, row-major, parameters back to back in store
    order; the manifest records name, shape, dtype and byte offset of each.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "trans-ehr-checkpoint", "version": 1, "tensors": entries, "metadata": metadata or {}}

    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / BLOB).write_bytes(b"".join(chunks))
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _replace_dir(src: Path, dst: Path) -> None:
    if dst.exists():
        old = dst.with_name(f".{dst.name}.old-{os.getpid()}")
        os.replace(dst, old)
        os.replace(src, dst)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(src, dst)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    entries = manifest["tensors"]
    dtype = np.dtype(entries[0]["dtype"]) if entries else np.float64
    params = ParamStore(dtype)
    for e in entries:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        params.add(e["name"], arr.reshape(e["shape"]).astype(dtype))
    return Checkpoint(params, manifest.get("metadata", {}))
