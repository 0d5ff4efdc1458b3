"""Procedural shape images, deterministic condition extractors, on-disk
per-kind datasets and the round-robin batch schedule.

Images are ``uint8`` arrays of shape (H, W, 3). Every extractor is a pure
function of the image and the versioned parameter file, so condition files
can always be regenerated bit-exactly and re-extraction can serve as an
evaluation oracle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, InvalidRangeError

KINDS = ("edge", "mask_inpaint", "mask_outpaint", "blur", "palette", "pixelate", "lowlight")


@lru_cache(maxsize=1)
def load_params() -> dict:
    with resources.files("ctrlora").joinpath("condition_params.json").open("r", encoding="utf-8") as f:
        return json.load(f)


def params_digest(params: Optional[dict] = None) -> str:
    params = params or load_params()
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ConditionKind:
    identifier: str
    role: str

    @property
    def structural(self) -> bool:
        return self.role == "structural"


def condition_kind(identifier: str) -> ConditionKind:
    kinds = load_params()["kinds"]
    if identifier not in kinds:
        raise DataError(f"unknown condition kind {identifier!r}; expected one of {sorted(kinds)}")
    return ConditionKind(identifier, kinds[identifier]["role"])


# ---------------------------------------------------------------- images

def _luma(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _shape_mask(cls: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if cls == 0:  # disk
        return dy ** 2 + dx ** 2 <= r ** 2
    if cls == 1:  # square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if cls == 2:  # upward triangle
        return (dy <= r) & (dy >= -r + 2 * np.abs(dx))
    # plus-shaped cross
    arm = max(r / 2.5, 1.5)
    return ((np.abs(dy) <= r) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= r) & (np.abs(dy) <= arm))


def _render_one(seed: int, index: int, size: int, num_classes: int, min_contrast: float):
    rng = np.random.default_rng([seed, index])
    cls = int(rng.integers(num_classes))
    r = rng.uniform(0.2, 0.36) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    while True:
        bg, fg = rng.integers(0, 256, size=(2, 3))
        if abs(_luma(bg) - _luma(fg)) >= min_contrast:
            break
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = bg
    img[_shape_mask(cls, size, cy, cx, r)] = fg
    return img, cls


def generate_images(n: int, seed: int, size: Optional[int] = None, num_classes: Optional[int] = None):
    """Return ``(images uint8 (n, size, size, 3), class_labels int64 (n,))``.

    Record ``i`` depends only on ``(seed, i)``; the class label is the shape type.
    """
    if n < 1:
        raise InvalidRangeError("n must be >= 1")
    p = load_params()
    size = size or p["image_size"]
    num_classes = num_classes or p["num_classes"]
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i], labels[i] = _render_one(seed, i, size, num_classes, p["min_luma_contrast"])
    return out, labels


# ------------------------------------------------------------ extractors

def edge_map(image: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
    """Binary (H, W) map of Sobel gradient magnitude (per-pixel slope) above threshold."""
    if threshold is None:
        threshold = load_params()["kinds"]["edge"]["threshold"]
    lum = _luma(image)
    gx = ndimage.sobel(lum, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(lum, axis=0, mode="nearest") / 8.0
    return np.hypot(gx, gy) > threshold


def mask_rect(seed: int, index: int, size: int) -> tuple[int, int, int, int]:
    """Seeded (y0, x0, h, w) rectangle for an inpainting record."""
    p = load_params()["kinds"]["mask_inpaint"]
    rng = np.random.default_rng([seed, index, 7919])
    h, w = rng.integers(p["min_side"], p["max_side"] + 1, size=2)
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    return y0, x0, int(h), int(w)


def _block_average(image: np.ndarray, block: int) -> np.ndarray:
    h, w, c = image.shape
    if h % block or w % block:
        raise InvalidRangeError(f"image {h}x{w} not divisible by block {block}")
    blocks = image.astype(np.float64).reshape(h // block, block, w // block, block, c).mean(axis=(1, 3))
    small = np.floor(blocks + 0.5).astype(np.uint8)
    return np.repeat(np.repeat(small, block, axis=0), block, axis=1)


def extract_condition(image: np.ndarray, kind: str, params: Optional[dict] = None) -> np.ndarray:
    """Map an RGB uint8 image to its 3-channel uint8 condition image.

    ``params`` may carry per-record values; only ``mask_inpaint`` needs one
    (``rect`` as ``(y0, x0, h, w)``).
    """
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected uint8 (H, W, 3) image, got {image.dtype} {image.shape}")
    kp = load_params()["kinds"].get(kind)
    if kp is None:
        raise DataError(f"unknown condition kind {kind!r}")
    params = params or {}
    size = image.shape[0]
    if kind == "edge":
        e = edge_map(image, kp["threshold"])
        return np.repeat((e * 255).astype(np.uint8)[..., None], 3, axis=2)
    if kind == "mask_inpaint":
        if "rect" not in params:
            raise DataError("mask_inpaint needs a per-record 'rect'")
        y0, x0, h, w = params["rect"]
        out = image.copy()
        out[y0:y0 + h, x0:x0 + w] = kp["fill"]
        return out
    if kind == "mask_outpaint":
        b = min(kp["band"], size // 4)
        out = np.full_like(image, kp["fill"])
        out[b:size - b, b:size - b] = image[b:size - b, b:size - b]
        return out
    if kind == "blur":
        blurred = ndimage.gaussian_filter(image.astype(np.float64), sigma=(kp["sigma"], kp["sigma"], 0), mode="reflect")
        return np.clip(np.floor(blurred + 0.5), 0, 255).astype(np.uint8)
    if kind == "palette":
        return _block_average(image, size // kp["grid"])
    if kind == "pixelate":
        return _block_average(image, kp["block"])
    if kind == "lowlight":
        dark = 255.0 * kp["gain"] * (image.astype(np.float64) / 255.0) ** kp["gamma"]
        return np.clip(np.floor(dark + 0.5), 0, 255).astype(np.uint8)
    raise DataError(f"no extractor for kind {kind!r}")


def record_params(kind: str, seed: int, index: int, size: int) -> dict:
    if kind == "mask_inpaint":
        return {"rect": list(mask_rect(seed, index, size))}
    return {}


# --------------------------------------------------------------- datasets

def to_tensor(images: np.ndarray):
    """uint8 (N, H, W, 3) -> float32 torch (N, 3, H, W) in [-1, 1]."""
    import torch

    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous().float() / 127.5 - 1.0


def to_uint8(images) -> np.ndarray:
    """float torch (N, 3, H, W) in [-1, 1] -> uint8 (N, H, W, 3)."""
    import torch

    arr = ((images.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass
class ConditionDataset:
    """One per-kind subset on disk: ``root/{kind}/{split}/img_*.png`` plus ``index.json``."""

    root: Path
    kind: str
    records: list = field(default_factory=list)
    index_digest: str = ""

    @property
    def kind_dir(self) -> Path:
        return Path(self.root) / self.kind

    def split(self, split: str) -> list:
        return [r for r in self.records if r["split"] == split]

    def _paths(self, rec: dict) -> tuple[Path, Path]:
        d = self.kind_dir / rec["split"]
        return d / f"img_{rec['id']:06d}.png", d / f"cond_{rec['id']:06d}.png"

    def load_arrays(self, split: str = "train"):
        """Return ``(images, conditions, class_labels, records)`` for a split."""
        recs = self.split(split)
        imgs, conds = [], []
        for rec in recs:
            ip, cp = self._paths(rec)
            try:
                imgs.append(np.asarray(Image.open(ip).convert("RGB")))
                conds.append(np.asarray(Image.open(cp).convert("RGB")))
            except OSError as exc:
                raise DataError(f"cannot read {ip} / {cp}: {exc}") from exc
        labels = np.array([r["class_label"] for r in recs], dtype=np.int64)
        return np.stack(imgs), np.stack(conds), labels, recs

    def audit(self, n: int = 32, seed: int = 0) -> None:
        """Regenerate ``n`` sampled condition files and compare digests."""
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(self.records), size=min(n, len(self.records)), replace=False)
        for i in picks:
            rec = self.records[int(i)]
            ip, cp = self._paths(rec)
            img = np.asarray(Image.open(ip).convert("RGB"))
            cond = np.asarray(Image.open(cp).convert("RGB"))
            regen = extract_condition(img, self.kind, rec.get("params"))
            if _sha(regen) != _sha(cond) or _sha(img) != rec["image_sha256"]:
                raise DataError(f"digest audit failed for {cp}")

    @classmethod
    def load(cls, root, kind: str, audit: int = 32) -> "ConditionDataset":
        path = Path(root) / kind / "index.json"
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read dataset index {path}: {exc}") from exc
        index = json.loads(raw)
        if index["params_digest"] != params_digest():
            raise DataError(f"{path}: condition parameters changed since the dataset was built")
        ds = cls(Path(root), kind, index["records"], hashlib.sha256(raw).hexdigest())
        if audit:
            ds.audit(audit)
        return ds


def split_ids(n: int, val_fraction: float, split_seed: int) -> np.ndarray:
    """Boolean val mask; ``floor(n * val_fraction)`` records land in val."""
    n_val = math.floor(n * val_fraction)
    perm = np.random.default_rng(split_seed).permutation(n)
    is_val = np.zeros(n, dtype=bool)
    is_val[perm[:n_val]] = True
    return is_val


def build_dataset(images: np.ndarray, labels: np.ndarray, kinds: Sequence[str], root, split_seed: int = 0,
                  val_fraction: float = 0.1, image_seed: int = 0) -> dict[str, ConditionDataset]:
    """Write one subset per kind; every image yields every condition."""
    root = Path(root)
    n, size = len(images), images.shape[1]
    is_val = split_ids(n, val_fraction, split_seed)
    out = {}
    for kind in kinds:
        condition_kind(kind)
        records = []
        for split in ("train", "val"):
            try:
                (root / kind / split).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise DataError(f"cannot create {root / kind / split}: {exc}") from exc
        for i in range(n):
            rp = record_params(kind, image_seed, i, size)
            cond = extract_condition(images[i], kind, rp)
            rec = {"id": i, "split": "val" if is_val[i] else "train", "class_label": int(labels[i]),
                   "seed": [image_seed, i], "params": rp, "image_sha256": _sha(images[i])}
            ds_dir = root / kind / rec["split"]
            try:
                Image.fromarray(images[i]).save(ds_dir / f"img_{i:06d}.png")
                Image.fromarray(cond).save(ds_dir / f"cond_{i:06d}.png")
            except OSError as exc:
                raise DataError(f"cannot write into {ds_dir}: {exc}") from exc
            records.append(rec)
        index = {"kind": kind, "role": condition_kind(kind).role, "params_digest": params_digest(),
                 "params_version": load_params()["version"], "image_seed": image_seed,
                 "split_seed": split_seed, "val_fraction": val_fraction, "records": records}
        raw = json.dumps(index, sort_keys=True).encode()
        (root / kind / "index.json").write_bytes(raw)
        out[kind] = ConditionDataset(root, kind, records, hashlib.sha256(raw).hexdigest())
    return out


def conditions_for(images: np.ndarray, kind: str, image_seed: int = 0, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """In-memory equivalent of the on-disk condition files."""
    ids = range(len(images)) if ids is None else ids
    size = images.shape[1]
    return np.stack([extract_condition(img, kind, record_params(kind, image_seed, int(i), size))
                     for img, i in zip(images, ids)])


# ----------------------------------------------------------- batching

@dataclass(frozen=True)
class BatchPlan:
    step: int
    kind_index: int
    indices: np.ndarray


def batch_at(step: int, sizes: Sequence[int], batch_size: int, seed: int) -> BatchPlan:
    """The batch drawn at ``step``: subset ``step mod K``, seeded epoch shuffles.

    A pure function of its arguments, so resuming at any step needs no state.
    """
    k = step % len(sizes)
    n = sizes[k]
    if n < 1:
        raise DataError(f"subset {k} is empty")
    bs = min(batch_size, n)
    per_epoch = n // bs
    j = step // len(sizes)
    epoch, pos = divmod(j, per_epoch)
    perm = np.random.default_rng([seed, k, epoch]).permutation(n)
    return BatchPlan(step, k, perm[pos * bs:(pos + 1) * bs])


def round_robin_batches(subsets: Sequence, batch_size: int, total_steps: int, seed: int,
                        start_step: int = 0) -> Iterator[BatchPlan]:
    """Yield one :class:`BatchPlan` per step; ``subsets`` are sized containers or sizes."""
    if len(subsets) < 1:
        raise DataError("need at least one subset")
    if batch_size < 1:
        raise InvalidRangeError("batch_size must be >= 1")
    sizes = [s if isinstance(s, (int, np.integer)) else len(s) for s in subsets]
    for k, n in enumerate(sizes):
        if n < 1:
            raise DataError(f"subset {k} is empty")
    for step in range(start_step, total_steps):
        yield batch_at(step, sizes, batch_size, seed)
