"""Binary checkpoints: model config, named parameter tensors, optimizer
state, epoch index, and seed.

Layout (all integers little-endian):

    magic "HCN1"
    u32   format version (currently 1)
    u64   meta length, then that many bytes of canonical JSON
    u32   tensor count
    per tensor:
        u16 name length, name utf-8
        u8  dtype code (0 = float32, 1 = float64)
        u8  rank
        u32 x rank dims
        raw little-endian payload

The meta JSON carries the model config (enough to rebuild the graph), the
class vocabulary, optimizer hyperparameters and step counter, epoch index,
and the run seed. Serialization is canonical (sorted keys, fixed
separators) and tensors are written in model parameter order, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .fusion import FusionConfig, HybridModel
from .graphs import graph_from_config

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint",
           "restore_model", "restore_optimizer"]

MAGIC = b"HCN1"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, model, *, optimizer=None, epoch: int = 0,
                    seed: int = 0, extra: dict | None = None) -> None:
    """Write `model` (ModelGraph or HybridModel) and optional Adam state."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in model.named_parameters().items():
        tensors.append((name, t.data))
    opt_meta = None
    if optimizer is not None:
        opt_meta = optimizer.to_meta()
        for pname in optimizer.state.m:
            tensors.append((f"optimizer/m/{pname}", optimizer.state.m[pname]))
            tensors.append((f"optimizer/v/{pname}", optimizer.state.v[pname]))

    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "hybrid" if isinstance(model, HybridModel) else "graph",
        "model": model.to_config(),
        "classes": list(model.classes),
        "optimizer": opt_meta,
        "epoch": int(epoch),
        "seed": int(seed),
        "extra": extra or {},
    }
    meta_bytes = _canonical_json(meta)

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


class Checkpoint:
    """Parsed checkpoint: `meta` dict plus `tensors` name -> array."""

    def __init__(self, meta: dict, tensors: dict[str, np.ndarray]):
        self.meta = meta
        self.tensors = tensors

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    @property
    def seed(self) -> int:
        return int(self.meta["seed"])


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    with open(p, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{p} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        try:
            meta = json.loads(_read_exact(fh, meta_len, "meta"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint meta: {e.msg}") from None
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"tensor {name} has unknown dtype code {code}")
            n_items = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, n_items * dtype.itemsize, f"tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{p} has trailing bytes after the tensor table")
    return Checkpoint(meta, tensors)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model graph(s) from the stored config and load weights."""
    cfg = ckpt.meta["model"]
    if ckpt.kind == "graph":
        graph = graph_from_config(cfg)
        graph.set_parameters(ckpt.tensors)
        return graph
    if ckpt.kind != "hybrid":
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    custom = graph_from_config(cfg["custom"])
    branch_ns = graph_from_config(cfg["branch_ns"])
    branch_ct = graph_from_config(cfg["branch_ct"])
    model = HybridModel(custom, branch_ns, branch_ct, FusionConfig.from_dict(cfg["fusion"]))

    def sub(prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in ckpt.tensors.items()
                if k.startswith(prefix + "/") and not k.startswith("optimizer/")}

    custom.set_parameters(sub("custom"))
    branch_ns.set_parameters(sub("branch_ns"))
    branch_ct.set_parameters(sub("branch_ct"))
    try:
        model.set_projection(ckpt.tensors["fusion/projection/kernel"],
                             ckpt.tensors["fusion/projection/bias"])
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from None
    return model


def restore_optimizer(ckpt: Checkpoint):
    """Rebuild the Adam state saved alongside the model, or None."""
    from .training import Adam

    meta = ckpt.meta.get("optimizer")
    if meta is None:
        return None
    if meta.get("algo") != "adam":
        raise CheckpointError(f"unknown optimizer {meta.get('algo')!r} in checkpoint")
    opt = Adam.from_meta(meta)
    for key, arr in ckpt.tensors.items():
        if key.startswith("optimizer/m/"):
            opt.state.m[key[len("optimizer/m/"):]] = arr.astype(np.float32, copy=True)
        elif key.startswith("optimizer/v/"):
            opt.state.v[key[len("optimizer/v/"):]] = arr.astype(np.float32, copy=True)
    return opt
