"""Dataset manifests and image/mask loading.

A manifest is a CSV file with header ``image_path,id,camera,mask_path``;
paths are resolved relative to the manifest's directory and ``mask_path``
may be empty. Source-role records are single-person crops resized to
64x128 (WxH) with an all-ones mask; target-role records are group images
resized to 128x128, with the mask taken from ``mask_path`` (8-bit
grayscale, value/255) when present.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .imgproc import resize_image, resize_mask

SOURCE_SIZE = (64, 128)  # (W, H) for single-person crops
TARGET_SIZE = (128, 128)

ROLES = ("source", "target")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str  # image_path as written in the manifest
    image_path: Path
    entity_id: str  # person id (source) or group id (target)
    camera_id: str
    mask_path: Path | None
    role: str


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    role: str
    records: tuple[ManifestRecord, ...]

    def items(self) -> list[tuple[str, str]]:
        """(image_id, entity_id) pairs in manifest order."""
        return [(r.image_id, r.entity_id) for r in self.records]


def parse_manifest(path: str | Path, role: str, name: str | None = None) -> DatasetManifest:
    """Load and validate one manifest CSV."""
    path = Path(path)
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    base = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        expected = ["image_path", "id", "camera", "mask_path"]
        if [c.strip() for c in header] != expected:
            raise ManifestError(
                f"{path}:1: header must be {','.join(expected)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            image_rel, entity_id, camera_id, mask_rel = (c.strip() for c in row)
            if not image_rel:
                raise ManifestError(f"{path}:{lineno}: empty image_path")
            if not entity_id:
                raise ManifestError(f"{path}:{lineno}: empty id")
            if image_rel in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate image_path {image_rel!r} "
                    f"(first seen on line {seen[image_rel]})"
                )
            seen[image_rel] = lineno
            image_path = (base / image_rel).resolve()
            if not image_path.is_file():
                raise ManifestError(f"{path}:{lineno}: image not found: {image_path}")
            mask_path = None
            if mask_rel:
                mask_path = (base / mask_rel).resolve()
                if not mask_path.is_file():
                    raise ManifestError(f"{path}:{lineno}: mask not found: {mask_path}")
            records.append(
                ManifestRecord(
                    image_id=image_rel,
                    image_path=image_path,
                    entity_id=entity_id,
                    camera_id=camera_id,
                    mask_path=mask_path,
                    role=role,
                )
            )
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return DatasetManifest(name=name or path.stem, role=role, records=tuple(records))


def merge_manifests(manifests: list[DatasetManifest]) -> DatasetManifest:
    """Concatenate several same-role manifests (e.g. multiple source sets)."""
    if not manifests:
        raise ManifestError("no manifests to merge")
    role = manifests[0].role
    if any(m.role != role for m in manifests):
        raise ManifestError("cannot merge manifests with different roles")
    records: list[ManifestRecord] = []
    seen: set[Path] = set()
    for m in manifests:
        for r in m.records:
            if r.image_path in seen:
                raise ManifestError(f"duplicate image across manifests: {r.image_path}")
            seen.add(r.image_path)
            records.append(r)
    return DatasetManifest(
        name="+".join(m.name for m in manifests), role=role, records=tuple(records)
    )


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot read mask {path}: {exc}") from exc


def load_record(record: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
    """Decode, resize and mask one record according to its role."""
    img = _read_rgb(record.image_path)
    target_w, target_h = SOURCE_SIZE if record.role == "source" else TARGET_SIZE
    if record.role == "source" or record.mask_path is None:
        mask = np.ones((target_h, target_w), dtype=np.float64)
    else:
        mask = _read_mask(record.mask_path)
        if mask.shape != img.shape[:2]:
            raise ValueError(
                f"mask {record.mask_path} is {mask.shape[::-1]} but image "
                f"{record.image_path} is {img.shape[1::-1]}"
            )
        mask = resize_mask(mask, target_w, target_h)
    return resize_image(img, target_w, target_h), mask
