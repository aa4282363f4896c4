"""Binary checkpoint format: magic "TRLM", a version word, a JSON metadata
block, then a named tensor table with explicit dtype tags and little-endian
payloads.  save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"TRLM"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_TAG_OF = {"float32": 0, "float64": 1, "uint32": 2}


def atomic_write(path, payload: bytes):
    """Write via a sibling temp file and rename, so readers never see a
    partial file."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors, meta):
    """Serialize named arrays plus a JSON-able metadata dict."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _TAG_OF:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _TAG_OF[arr.dtype.name], arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    atomic_write(path, bytes(blob))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint "
                             f"(wanted {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (tensors dict, metadata dict); rejects foreign or newer files."""
    r = _Reader(open(path, "rb").read(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unknown checkpoint version {version}, expected {VERSION}")
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise ValueError(f"{path}: unknown dtype tag {tag} for tensor {name!r}")
        shape = tuple(r.unpack("<I" * ndim)) if ndim else ()
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.copy()
    return tensors, meta


# -- stack-level helpers ----------------------------------------------------

def save_stack(path, stack, meta=None, include_optimizer=True, storage="f64"):
    """Persist a TransformerStack (and optionally its Adam state)."""
    cast = np.float32 if storage == "f32" else np.float64
    tensors = {}
    for name, p in stack.params.items():
        tensors[name] = p.data.astype(cast)
    adam_t = {}
    if include_optimizer:
        for name in stack.params.names():
            tensors[f"opt.m.{name}"] = stack.params.m[name]
            tensors[f"opt.v.{name}"] = stack.params.v[name]
            adam_t[name] = stack.params.t[name]
    meta = dict(meta or {})
    meta["config"] = stack.cfg.to_dict()
    meta["adam_t"] = adam_t
    meta["frozen"] = stack.params.frozen_names()
    save_checkpoint(path, tensors, meta)


def load_stack(path):
    """Rebuild a TransformerStack from a checkpoint; returns (stack, meta)."""
    from lmbridge.model import ModelConfig, TransformerStack
    from lmbridge.optim import ParamStore
    from lmbridge.tensor import Tensor

    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    params = ParamStore()
    for name, arr in tensors.items():
        if name.startswith("opt."):
            continue
        params.add(name, Tensor(arr.astype(np.float64)))
    for name, t in meta.get("adam_t", {}).items():
        params.t[name] = int(t)
        params.m[name] = tensors[f"opt.m.{name}"].astype(np.float64)
        params.v[name] = tensors[f"opt.v.{name}"].astype(np.float64)
    params.freeze(meta.get("frozen", []))
    for name in meta.get("frozen", []):
        params[name].requires_grad = False
    return TransformerStack(cfg, params), meta


def rng_state_to_meta(rng):
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: str(v) for k, v in state["state"].items()},
            "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}


def rng_from_meta(meta):
    rng = np.random.default_rng(0)
    state = {"bit_generator": meta["bit_generator"],
             "state": {k: int(v) for k, v in meta["state"].items()},
             "has_uint32": meta["has_uint32"], "uinteger": meta["uinteger"]}
    rng.bit_generator.state = state
    return rng
