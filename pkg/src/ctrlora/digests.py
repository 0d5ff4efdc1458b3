"""Content and topology digests for modules and tensor dictionaries."""

from __future__ import annotations

import hashlib
from typing import Mapping, Union

import torch
import torch.nn as nn

TensorSource = Union[nn.Module, Mapping[str, torch.Tensor]]


def _items(src: TensorSource):
    state = src.state_dict() if isinstance(src, nn.Module) else src
    return sorted(state.items())


def topology_digest(src: TensorSource) -> str:
    """Hash of (name, shape, dtype) for every tensor; ignores values."""
    h = hashlib.sha256()
    for name, t in _items(src):
        h.update(f"{name}:{tuple(t.shape)}:{t.dtype}\n".encode())
    return h.hexdigest()


def tensor_digest(src: TensorSource) -> str:
    """Hash of names, shapes, dtypes and raw bytes of every tensor."""
    h = hashlib.sha256()
    for name, t in _items(src):
        t = t.detach().contiguous().cpu()
        h.update(f"{name}:{tuple(t.shape)}:{t.dtype}\n".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
