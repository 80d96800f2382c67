"""JSON-with-base64 checkpoint blobs.

Tensors are stored as raw little-endian bytes so a save/load round trip is
bit-exact. Keys are sorted and no timestamps are written, so identical
states serialize to identical bytes.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "bool": (torch.bool, "|b1"),
}


class CheckpointVersionError(ValueError):
    pass


def encode_tensor(t: torch.Tensor) -> dict[str, Any]:
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    arr = t.detach().cpu().contiguous().numpy().astype(_DTYPES[name][1], copy=False)
    return {
        "dtype": name,
        "shape": list(t.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(blob: dict[str, Any]) -> torch.Tensor:
    torch_dtype, np_dtype = _DTYPES[blob["dtype"]]
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(blob["shape"])
    return torch.from_numpy(arr.copy()).to(torch_dtype)


def dumps(tensors: dict[str, torch.Tensor], meta: dict[str, Any] | None = None) -> bytes:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": {k: encode_tensor(v) for k, v in tensors.items()},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def loads(data: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    doc = json.loads(data.decode("utf-8"))
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r}, this build reads {FORMAT_VERSION}"
        )
    tensors = {k: decode_tensor(v) for k, v in doc["tensors"].items()}
    return tensors, doc["meta"]


def save(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    return loads(Path(path).read_bytes())
