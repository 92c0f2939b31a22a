"""Single-file checkpoint format.

Layout: 4-byte magic ``FGCK``, little-endian uint32 version, uint32 header
length, a UTF-8 JSON header, then the raw tensor payload. The header lists
every tensor (module, name, shape, dtype, byte offset) plus a config
snapshot and a SHA-256 digest of the payload, so load can verify integrity
and reject manifests that do not match the modules being restored.
Round-trips are bitwise: tensors are dumped and restored verbatim.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"FGCK"
VERSION = 1


def _named_tensors(modules):
    out = {}
    for mod_name, module in modules.items():
        for t_name, t in module.named_tensors():
            out[f"{mod_name}/{t_name}"] = t
    return out


def save_checkpoint(path, modules, config=None):
    """Write modules (dict name -> Module) and an optional config snapshot."""
    entries = []
    chunks = []
    offset = 0
    for key, t in sorted(_named_tensors(modules).items()):
        raw = np.ascontiguousarray(t.data).tobytes()
        entries.append({"name": key, "shape": list(t.data.shape),
                        "dtype": str(t.data.dtype), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "config": config if config is not None else {},
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        f.write(payload)
    return Path(path)


def _read(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    version = int(np.frombuffer(data[4:8], dtype=np.uint32)[0])
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(data[8:12], dtype=np.uint32)[0])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    payload = data[12 + hlen:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ContractError(f"checkpoint {path} payload digest mismatch")
    return header, payload


def peek_config(path):
    """Read only the config snapshot stored in a checkpoint."""
    header, _ = _read(path)
    return header["config"]


def peek_names(path):
    """Tensor names in the manifest, e.g. ['model/backbone.embed.proj.w']."""
    header, _ = _read(path)
    return [e["name"] for e in header["tensors"]]


def load_checkpoint(path, modules):
    """Restore tensors into modules in place; returns the config snapshot.

    The manifest must name exactly the tensors the modules expose; any
    missing or extra entry is a contract violation.
    """
    header, payload = _read(path)
    live = _named_tensors(modules)
    stored = {e["name"]: e for e in header["tensors"]}
    missing = sorted(set(live) - set(stored))
    extra = sorted(set(stored) - set(live))
    if missing or extra:
        raise ContractError(
            "checkpoint manifest mismatch: "
            f"missing {missing[:4]}, unexpected {extra[:4]}")
    for key, t in live.items():
        e = stored[key]
        if list(t.data.shape) != e["shape"]:
            raise ContractError(
                f"checkpoint tensor {key} has shape {e['shape']}, "
                f"module expects {list(t.data.shape)}")
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        t.assign(arr.astype(t.data.dtype, copy=True))
    return header["config"]
