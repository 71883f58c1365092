"""DRIVE / CHASE-DB1 loading, splits, resizing and flip augmentation.

Expected layouts (the default glob patterns, relative to the dataset root):

DRIVE::

    training/images/21_training.tif ... 40_training.tif
    training/1st_manual/21_manual1.gif ...
    training/mask/21_training_mask.gif ...
    test/images/01_test.tif ... 20_test.tif
    test/1st_manual/01_manual1.gif ...
    test/mask/01_test_mask.gif ...

CHASE-DB1 (flat)::

    Image_01L.jpg, Image_01L_1stHO.png, Image_01R.jpg, ... Image_14R_1stHO.png

CHASE-DB1 has no FOV masks; an all-ones FOV is synthesised.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image


class DatasetError(RuntimeError):
    pass


class DatasetKind(str, Enum):
    DRIVE = "drive"
    CHASE_DB1 = "chase_db1"

    @classmethod
    def parse(cls, value) -> "DatasetKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        if key in ("chase", "chasedb1"):
            key = "chase_db1"
        try:
            return cls(key)
        except ValueError:
            raise DatasetError(f"unknown dataset kind {value!r}; expected drive or chase_db1") from None


EXPECTED_COUNTS = {DatasetKind.DRIVE: 40, DatasetKind.CHASE_DB1: 28}
CHASE_TRAIN_COUNT = 20

DEFAULT_PATTERNS = {
    DatasetKind.DRIVE: ("*/images/*.tif", "*/1st_manual/*_manual1.gif", "*/mask/*_mask.gif"),
    DatasetKind.CHASE_DB1: ("Image_*.jpg", "Image_*_1stHO.png", None),
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind
    root: Path
    image_pattern: str = ""
    mask_pattern: str = ""
    fov_pattern: Optional[str] = ""
    target_size: Tuple[int, int] = (448, 448)

    def __post_init__(self):
        kind = DatasetKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "target_size", tuple(int(s) for s in self.target_size))
        img, msk, fov = DEFAULT_PATTERNS[kind]
        if not self.image_pattern:
            object.__setattr__(self, "image_pattern", img)
        if not self.mask_pattern:
            object.__setattr__(self, "mask_pattern", msk)
        # "" selects the default; None disables FOV masks
        if self.fov_pattern == "":
            object.__setattr__(self, "fov_pattern", fov)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "root": str(self.root),
            "image_pattern": self.image_pattern,
            "mask_pattern": self.mask_pattern,
            "fov_pattern": self.fov_pattern,
            "target_size": list(self.target_size),
        }


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One fundus image with its vessel annotation and FOV mask.

    ``image`` is float32 H x W x 3 in [0, 1]; both masks are uint8 H x W in {0, 1}.
    """

    id: str
    image: np.ndarray
    vessel_mask: np.ndarray
    fov_mask: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        for name in ("vessel_mask", "fov_mask"):
            m = getattr(self, name)
            if m.shape != (h, w):
                raise DatasetError(f"{self.id}: {name} is {m.shape}, image is {(h, w)}")
            if not np.isin(m, (0, 1)).all():
                raise DatasetError(f"{self.id}: {name} is not binary")

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[:2]


_KEY = re.compile(r"\d+[A-Za-z]?")


def _align_key(path: Path) -> str:
    m = _KEY.search(path.stem)
    return m.group(0) if m else path.stem


def resolve_files(spec: DatasetSpec) -> List[Tuple[str, Path, Path, Optional[Path]]]:
    """Resolve ``(id, image, mask, fov)`` rows sorted by id, checking alignment."""
    root = spec.root
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    images = sorted(root.glob(spec.image_pattern))
    masks = sorted(root.glob(spec.mask_pattern))
    fovs = sorted(root.glob(spec.fov_pattern)) if spec.fov_pattern else None
    if not images:
        raise DatasetError(f"{spec.image_pattern!r} matched 0 files under {root}")
    if len(masks) != len(images):
        raise DatasetError(
            f"{len(images)} images ({spec.image_pattern!r}) but {len(masks)} vessel masks "
            f"({spec.mask_pattern!r}) under {root}"
        )
    if fovs is not None and len(fovs) != len(images):
        raise DatasetError(
            f"{len(images)} images but {len(fovs)} FOV masks ({spec.fov_pattern!r}) under {root}"
        )
    rows = []
    for i, img in enumerate(images):
        fov = fovs[i] if fovs is not None else None
        for other in (masks[i], fov):
            if other is not None and (
                _align_key(other) != _align_key(img) or other.parent.parent != img.parent.parent
            ):
                raise DatasetError(f"file lists are misaligned: {img} vs {other}")
        rows.append((img.stem, img, masks[i], fov))
    rows.sort(key=lambda r: r[0])
    expected = EXPECTED_COUNTS[spec.kind]
    if len(rows) != expected:
        raise DatasetError(f"{spec.kind.value} should have {expected} images, found {len(rows)} under {root}")
    return rows


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc


def load_dataset(spec: DatasetSpec) -> List[SampleRecord]:
    records = []
    for ident, img_path, mask_path, fov_path in resolve_files(spec):
        image = read_image(img_path)
        vessel = read_mask(mask_path)
        fov = read_mask(fov_path) if fov_path else np.ones(image.shape[:2], np.uint8)
        for path, arr in ((mask_path, vessel), (fov_path, fov)):
            if arr.shape != image.shape[:2]:
                raise DatasetError(f"{path} is {arr.shape}, image {img_path} is {image.shape[:2]}")
        source = {"image": str(img_path), "mask": str(mask_path), "fov": str(fov_path) if fov_path else None}
        records.append(SampleRecord(ident, image, vessel, fov, source))
    return records


def split(records: Sequence[SampleRecord], kind) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """DRIVE: published training/test partition. CHASE-DB1: first 20 / last 8."""
    kind = DatasetKind.parse(kind)
    expected = EXPECTED_COUNTS[kind]
    if len(records) != expected:
        raise DatasetError(f"{kind.value} split needs {expected} records, got {len(records)}")
    records = sorted(records, key=lambda r: r.id)
    if kind is DatasetKind.DRIVE:
        train = [r for r in records if "training" in r.id]
        test = [r for r in records if "test" in r.id]
        if len(train) != 20 or len(test) != 20:
            raise DatasetError(f"DRIVE ids do not form a 20/20 split ({len(train)}/{len(test)})")
        return train, test
    return list(records[:CHASE_TRAIN_COUNT]), list(records[CHASE_TRAIN_COUNT:])


def _resize_channel(a: np.ndarray, size: Tuple[int, int], resample) -> np.ndarray:
    h, w = size
    return np.asarray(Image.fromarray(a.astype(np.float32)).resize((w, h), resample))


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Area-average resize followed by a >= 0.5 threshold."""
    if mask.shape == tuple(size):
        return mask.astype(np.uint8)
    return (_resize_channel(mask, size, Image.BOX) >= 0.5).astype(np.uint8)


def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    out = np.stack([_resize_channel(image[..., c], size, Image.BILINEAR) for c in range(3)], axis=-1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize_channels(image: np.ndarray) -> np.ndarray:
    """Min-max stretch each channel to [0, 1]; constant channels map to 0."""
    lo = image.min(axis=(0, 1), keepdims=True)
    span = image.max(axis=(0, 1), keepdims=True) - lo
    return np.where(span > 0, (image - lo) / np.where(span > 0, span, 1), 0).astype(np.float32)


def fov_bbox(fov: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.flatnonzero(fov.any(axis=1))
    cols = np.flatnonzero(fov.any(axis=0))
    if rows.size == 0:
        raise DatasetError("field of view mask is empty")
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def preprocess(record: SampleRecord, target_size: Tuple[int, int] = (448, 448), crop_to_fov: bool = False) -> SampleRecord:
    if not record.fov_mask.any():
        raise DatasetError(f"{record.id}: field of view mask is empty")
    image, vessel, fov = record.image, record.vessel_mask, record.fov_mask
    if crop_to_fov:
        r0, r1, c0, c1 = fov_bbox(fov)
        image, vessel, fov = image[r0:r1, c0:c1], vessel[r0:r1, c0:c1], fov[r0:r1, c0:c1]
    size = tuple(target_size)
    return replace(
        record,
        image=normalize_channels(resize_image(image, size)),
        vessel_mask=resize_mask(vessel, size),
        fov_mask=resize_mask(fov, size),
    )


def prepare_records(spec: DatasetSpec) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Load, split and preprocess a dataset; returns ``(train, test)``."""
    records = load_dataset(spec)
    crop = spec.kind is DatasetKind.DRIVE
    train, test = split(records, spec.kind)
    return (
        [preprocess(r, spec.target_size, crop) for r in train],
        [preprocess(r, spec.target_size, crop) for r in test],
    )


def _apply(record: SampleRecord, fn) -> SampleRecord:
    return replace(
        record,
        image=np.ascontiguousarray(fn(record.image)),
        vessel_mask=np.ascontiguousarray(fn(record.vessel_mask)),
        fov_mask=np.ascontiguousarray(fn(record.fov_mask)),
    )


def hflip(record: SampleRecord) -> SampleRecord:
    return _apply(record, lambda a: a[:, ::-1])


def vflip(record: SampleRecord) -> SampleRecord:
    return _apply(record, lambda a: a[::-1])


def diagonal_flip(record: SampleRecord) -> SampleRecord:
    """Transpose about the main diagonal; square records only."""
    h, w = record.size
    if h != w:
        raise ValueError(f"{record.id}: diagonal flip needs a square record, got {h}x{w}")
    return _apply(record, lambda a: a.swapaxes(0, 1))


def augment(record: SampleRecord, rng: np.random.Generator) -> SampleRecord:
    """Horizontal, vertical and diagonal flips, each independently with p = 0.5."""
    h, w = record.size
    if h != w:
        raise ValueError(f"{record.id}: augmentation needs a square record, got {h}x{w}")
    flips = rng.random(3) < 0.5
    if flips[0]:
        record = hflip(record)
    if flips[1]:
        record = vflip(record)
    if flips[2]:
        record = diagonal_flip(record)
    return record
