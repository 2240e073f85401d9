"""Versioned checkpoint blobs.

Layout: ``MAGIC``, a little-endian u64 header length, the UTF-8 JSON header,
then each tensor's raw little-endian bytes in the order the header lists
them (model state first, in declaration order, then optimizer state).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"IREFCKPT"
FORMAT_VERSION = 1


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    header: dict[str, Any],
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    tensors: list[tuple[str, np.ndarray]] = [(f"model.{k}", _to_numpy(v)) for k, v in model.state_dict().items()]
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"], "state": {}}
        for pid, st in sd["state"].items():
            opt_meta["state"][str(pid)] = {}
            for key, val in st.items():
                if torch.is_tensor(val):
                    name = f"optim.{pid}.{key}"
                    tensors.append((name, _to_numpy(val)))
                    opt_meta["state"][str(pid)][key] = {"tensor": name}
                else:
                    opt_meta["state"][str(pid)][key] = {"value": val}
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["optimizer"] = opt_meta
    head["tensors"] = [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in tensors]
    blob = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(a.tobytes())
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    off = start + n
    tensors = {}
    for spec in header["tensors"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        off += count * dt.itemsize
    return header, tensors


def load_into(
    path: str | Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict[str, Any]:
    header, tensors = read_checkpoint(path)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    if optimizer is not None and header.get("optimizer"):
        meta = header["optimizer"]
        st = {}
        for pid, entries in meta["state"].items():
            st[int(pid)] = {
                key: (tensors[e["tensor"]] if "tensor" in e else e["value"]) for key, e in entries.items()
            }
        optimizer.load_state_dict({"state": st, "param_groups": meta["param_groups"]})
    return header
