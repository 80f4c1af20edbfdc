"""Core data records: images, captions, triplets, and evaluation cases."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .artifacts import SCHEMA_VERSION, load_archive, save_archive
from .errors import DuplicateId, InvalidConfig

SPLITS = ("train", "query", "index")


@dataclass
class ImageRecord:
    """An image plus, for synthetic data, the attribute tuple that produced it."""

    id: str
    pixels: np.ndarray  # H x W x C, floats in [0, 1]
    attributes: Optional[dict[str, str]] = None
    meta_class: Optional[str] = None
    split: Optional[str] = None

    def validate(self) -> None:
        if not self.id:
            raise InvalidConfig("image id must be non-empty")
        if self.pixels.ndim != 3:
            raise InvalidConfig(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidConfig(f"image {self.id} has non-finite pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvalidConfig(f"image {self.id} has pixels outside [0, 1]")
        if self.split is not None and self.split not in SPLITS:
            raise InvalidConfig(f"unknown split {self.split!r}")


@dataclass
class CaptionRecord:
    image_id: str
    text: str
    backend_id: str


@dataclass
class Triplet:
    """One training unit: reference image, target image, reformulation text."""

    ref_id: str
    target_id: str
    reformulation: str
    caption_ref: str
    caption_target: str
    backend_ids: tuple[str, str]
    pair_index: int

    def to_record(self) -> dict:
        return {
            "ref_id": self.ref_id,
            "target_id": self.target_id,
            "reformulation": self.reformulation,
            "caption_ref": self.caption_ref,
            "caption_target": self.caption_target,
            "backend_ids": list(self.backend_ids),
            "pair_index": self.pair_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Triplet":
        return cls(
            ref_id=rec["ref_id"],
            target_id=rec["target_id"],
            reformulation=rec["reformulation"],
            caption_ref=rec["caption_ref"],
            caption_target=rec["caption_target"],
            backend_ids=tuple(rec["backend_ids"]),
            pair_index=int(rec["pair_index"]),
        )


@dataclass
class QueryCase:
    """An evaluation query: reference image + text, with a known target."""

    ref_id: str
    reformulation: str
    gt_target_id: str
    subset: Optional[list[str]] = None


class ImageCollection:
    """Fixed set of images with unique ids and a by-id lookup."""

    def __init__(self, images: Sequence[ImageRecord], meta: Optional[dict] = None):
        self.images = list(images)
        self.meta = meta or {}
        self._by_id: dict[str, ImageRecord] = {}
        for img in self.images:
            if img.id in self._by_id:
                raise DuplicateId(f"duplicate image id {img.id!r}")
            self._by_id[img.id] = img

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def get(self, image_id: str) -> ImageRecord:
        return self._by_id[image_id]

    def ids(self) -> list[str]:
        return [img.id for img in self.images]

    def by_split(self, split: str) -> list[ImageRecord]:
        return [img for img in self.images if img.split == split]

    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images[0].pixels.shape)  # type: ignore[return-value]

    def save(self, path: str | Path) -> None:
        """Persist as a named-array archive: one pixel block + JSON metadata."""
        pixels = np.stack([img.pixels.astype(np.float32) for img in self.images])
        header = {
            "schema_version": SCHEMA_VERSION,
            "kind": "image_collection",
            "meta": self.meta,
            "records": [
                {
                    "id": img.id,
                    "attributes": img.attributes,
                    "meta_class": img.meta_class,
                    "split": img.split,
                }
                for img in self.images
            ],
        }
        save_archive(path, {"pixels": pixels}, header)

    @classmethod
    def load(cls, path: str | Path) -> "ImageCollection":
        arrays, header = load_archive(path)
        pixels = arrays["pixels"]
        images = [
            ImageRecord(
                id=rec["id"],
                pixels=pixels[i],
                attributes=rec["attributes"],
                meta_class=rec["meta_class"],
                split=rec["split"],
            )
            for i, rec in enumerate(header["records"])
        ]
        return cls(images, meta=header.get("meta"))
