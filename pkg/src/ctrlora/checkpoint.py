"""Single-file named-tensor container.

Layout (all integers little-endian)::

    8 bytes   magic b"CTRLORA\\x01"
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header, space-padded so the data section is 64-byte aligned
    ...       raw tensor blobs, each starting on a 64-byte boundary

The header holds free-form metadata under ``"meta"`` and a table
``"tensors": {name: {dtype, shape, offset, nbytes}}`` with offsets relative to
the start of the data section. Tensor names are ``section/path`` so sections
(``autoencoder``, ``unet``, ``controlnet``, ``adapter/<kind>``, ``optimizer``)
can be loaded independently.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import torch

from .errors import CompatibilityError, DataError

MAGIC = b"CTRLORA\x01"
FORMAT_VERSION = 1
ALIGN = 64

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_NAME_OF = {v[0]: k for k, v in _DTYPES.items()}


def _pad(n: int) -> int:
    return (-n) % ALIGN


def save_tensors(path, tensors: Mapping[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    table, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAME_OF:
            raise DataError(f"unsupported dtype {t.dtype} for tensor {name}")
        dname = _NAME_OF[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        table[name] = {"dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    hbytes += b" " * _pad(len(MAGIC) + 8 + len(hbytes))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(hbytes)))
            f.write(hbytes)
            for b in blobs:
                f.write(b)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def read_header(path) -> dict:
    try:
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise DataError(f"{path}: not a ctrlora checkpoint")
            (n,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(n).decode("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"{path}: unsupported format version {header.get('format_version')}")
    header["_data_start"] = 16 + n
    return header


def load_tensors(path, sections: Optional[Iterable[str]] = None) -> tuple[dict[str, torch.Tensor], dict]:
    """Load tensors (optionally only names under the given section prefixes) and the metadata."""
    header = read_header(path)
    prefixes = None if sections is None else tuple(s.rstrip("/") + "/" for s in sections)
    out = {}
    with open(path, "rb") as f:
        for name, info in header["tensors"].items():
            if prefixes is not None and not name.startswith(prefixes):
                continue
            f.seek(header["_data_start"] + info["offset"])
            raw = f.read(info["nbytes"])
            tdtype, ndtype = _DTYPES[info["dtype"]]
            arr = np.frombuffer(raw, dtype=ndtype).reshape(info["shape"]).copy()
            out[name] = torch.from_numpy(arr).to(tdtype)
    return out, header["meta"]


def section(tensors: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def prefixed(prefix: str, tensors: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in tensors.items()}
