"""Binary checkpoint format.

Layout (all header lines ASCII, newline terminated)::

    VSTCKPT v1
    config <nbytes>            followed by <nbytes> of JSON model config (newline included)
    param <name> <dtype> <shape> <nbytes> <storage_id>
                               followed by <nbytes> little-endian raw values
    alias <name> <storage_id>  extra attribute path of an already written storage
    optim <nbytes>             JSON scalars of the optimizer, same framing (optional)
    moment1|moment2 <name> <dtype> <shape> <nbytes> <storage_id>   (optional)
    end

Shapes are written as ``25x512`` (``-`` for scalars). Each storage is
written once; loading reads the whole file before any model is built.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .errors import CheckpointError
from .model import ModelConfig, VSTModel
from .nn import Module

MAGIC = b"VSTCKPT v1\n"


def _shape_str(shape):
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def _array_record(kind, name, arr, storage_id):
    arr = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
    raw = arr.tobytes()
    head = f"{kind} {name} {arr.dtype.str} {_shape_str(arr.shape)} {len(raw)} {storage_id}\n"
    return head.encode("ascii") + raw


def parameter_paths(module: Module, prefix=""):
    """Every attribute path to a Parameter, shared storages included repeatedly."""
    for key, value in module._children():
        name = f"{prefix}{key}"
        if isinstance(value, Parameter):
            yield name, value
        else:
            yield from parameter_paths(value, name + ".")


def save_checkpoint(path, model: VSTModel, optimizer=None) -> None:
    chunks = [MAGIC]
    cfg = (json.dumps(model.cfg.to_dict(), sort_keys=True) + "\n").encode("utf-8")
    chunks.append(f"config {len(cfg)}\n".encode("ascii") + cfg)
    written = {}
    for name, p in model.named_parameters():
        chunks.append(_array_record("param", name, p.data, p.storage_id))
        written[p.storage_id] = name
    for name, p in parameter_paths(model):
        if written.get(p.storage_id) != name:
            chunks.append(f"alias {name} {p.storage_id}\n".encode("ascii"))
    if optimizer is not None:
        state = optimizer.state_dict()
        scalars = (json.dumps({k: state[k] for k in ("step_count", "lr", "betas", "eps")}) + "\n").encode("utf-8")
        chunks.append(f"optim {len(scalars)}\n".encode("ascii") + scalars)
        for p in optimizer.params:
            chunks.append(_array_record("moment1", p.name, state["m"][p.name], p.storage_id))
            chunks.append(_array_record("moment2", p.name, state["v"][p.name], p.storage_id))
    chunks.append(b"end\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def line(self):
        end = self.buf.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"{self.path}: truncated checkpoint (missing end marker)")
        text = self.buf[self.pos:end].decode("ascii", errors="replace")
        self.pos = end + 1
        return text

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def json_block(self, fields_):
        if len(fields_) != 2:
            raise CheckpointError(f"{self.path}: malformed record {' '.join(fields_)!r}")
        try:
            return json.loads(self.take(int(fields_[1])))
        except ValueError as exc:
            raise CheckpointError(f"{self.path}: corrupt {fields_[0]} block: {exc}") from exc

    def array(self, fields_):
        if len(fields_) != 6:
            raise CheckpointError(f"{self.path}: malformed record {' '.join(fields_)!r}")
        _, name, dtype, shape, nbytes, storage = fields_
        dt = np.dtype(dtype)
        shape = _parse_shape(shape)
        raw = self.take(int(nbytes))
        if dt.itemsize * int(np.prod(shape, dtype=np.int64)) != len(raw):
            raise CheckpointError(f"{self.path}: size mismatch for {name}")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return name, arr, int(storage)


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into plain data without building a model."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        first = buf.split(b"\n", 1)[0][:32]
        raise CheckpointError(f"{path}: not a v1 checkpoint (header {first!r}, expected {MAGIC.strip()!r})")
    r = _Reader(buf, path)
    r.pos = len(MAGIC)
    out = {"config": None, "params": {}, "storage": {}, "aliases": {}, "optim": None, "m": {}, "v": {}}
    try:
        while True:
            parts = r.line().split(" ")
            kind = parts[0]
            if kind == "end":
                break
            if kind == "config":
                out["config"] = r.json_block(parts)
            elif kind == "param":
                name, arr, sid = r.array(parts)
                out["params"][name] = arr
                out["storage"][name] = sid
            elif kind == "alias":
                out["aliases"][parts[1]] = int(parts[2])
            elif kind == "optim":
                out["optim"] = r.json_block(parts)
            elif kind in ("moment1", "moment2"):
                name, arr, _ = r.array(parts)
                out["m" if kind == "moment1" else "v"][name] = arr
            else:
                raise CheckpointError(f"{path}: unknown record {kind!r}")
    except CheckpointError:
        raise
    except (ValueError, TypeError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed record: {exc}") from exc
    if out["config"] is None:
        raise CheckpointError(f"{path}: missing config block")
    return out


def load_checkpoint(path):
    """Return ``(model, optimizer_or_None)`` rebuilt from ``path``."""
    from .train import Adam

    data = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(data["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    model = VSTModel(cfg)
    named = dict(model.named_parameters())
    if set(named) != set(data["params"]):
        diff = sorted(set(named) ^ set(data["params"]))
        raise CheckpointError(f"{path}: parameter set does not match the config: {diff[:5]}")
    for name, p in named.items():
        arr = data["params"][name]
        if arr.shape != p.shape or arr.dtype != p.dtype:
            raise CheckpointError(f"{path}: {name} has {arr.shape}/{arr.dtype}, expected {p.shape}/{p.dtype}")
    by_storage = {}
    for name, p in named.items():
        p.data = data["params"][name].copy()
        p.storage_id = data["storage"][name]
        by_storage[p.storage_id] = p
    paths = dict(parameter_paths(model))
    for alias, sid in data["aliases"].items():
        if alias not in paths or paths[alias] is not by_storage.get(sid):
            raise CheckpointError(f"{path}: alias {alias} does not share storage {sid} in the rebuilt model")
    optimizer = None
    if data["optim"] is not None:
        optimizer = Adam(model.parameters())
        state = dict(data["optim"], m=data["m"], v=data["v"])
        try:
            optimizer.load_state_dict(state)
        except KeyError as exc:
            raise CheckpointError(f"{path}: optimizer state missing {exc}") from exc
    model.eval()
    return model, optimizer
