"""Synthetic image world: a small attribute grammar rendered to pixels.

Every attribute tuple (color, pattern, style, object by default) maps to a
deterministic 32x32 image whose attributes are visually decodable: color
fills the object silhouette, pattern textures it, style draws a canvas
decoration, and the object picks the silhouette. Distinct tuples render to
distinct pixel arrays, which `generate_world` verifies by hashing.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .artifacts import sha256_bytes
from .errors import InvalidConfig, SchemaTooLarge
from .records import ImageCollection, ImageRecord

DEFAULT_ATTRIBUTES: dict[str, list[str]] = {
    "color": ["red", "blue", "green", "yellow", "purple", "black"],
    "pattern": ["plain", "striped", "dotted", "checked"],
    "style": ["fitted", "loose", "cropped", "belted"],
    "object": ["dress", "jacket", "pants", "skirt", "shirt"],
}

DEFAULT_PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.12, 0.65, 0.25),
    "yellow": (0.92, 0.82, 0.12),
    "purple": (0.55, 0.18, 0.72),
    "black": (0.08, 0.08, 0.08),
}

_BACKGROUND = 0.92
_INK = 0.15


@dataclass
class SyntheticWorldConfig:
    """Attribute schema plus rendering and splitting parameters."""

    attributes: dict[str, list[str]] = field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_ATTRIBUTES.items()}
    )
    image_size: int = 32
    palette: dict[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PALETTE)
    )
    seed: int = 0
    n_images: Optional[int] = None  # None renders the full enumeration
    index_fraction: float = 0.8
    max_tuples: int = 20000

    def validate(self) -> None:
        if not self.attributes:
            raise InvalidConfig("attribute schema must be non-empty")
        seen: dict[str, str] = {}
        for name, values in self.attributes.items():
            if not values:
                raise InvalidConfig(f"attribute {name!r} has no values")
            if len(set(values)) != len(values):
                raise InvalidConfig(f"attribute {name!r} has duplicate values")
            for v in values:
                if not v or " " in v:
                    raise InvalidConfig(f"attribute value {v!r} must be a single word")
                if v in seen:
                    # Caption parsing relies on values being unambiguous.
                    raise InvalidConfig(
                        f"value {v!r} appears in both {seen[v]!r} and {name!r}"
                    )
                seen[v] = name
        if self.image_size < 16:
            raise InvalidConfig("image_size must be at least 16")
        if not 0.0 < self.index_fraction < 1.0:
            raise InvalidConfig("index_fraction must be in (0, 1)")

    def n_tuples(self) -> int:
        n = 1
        for values in self.attributes.values():
            n *= len(values)
        return n

    def meta_class_attribute(self) -> str:
        if "object" in self.attributes:
            return "object"
        return next(iter(self.attributes))

    def to_dict(self) -> dict:
        return {
            "attributes": {k: list(v) for k, v in self.attributes.items()},
            "image_size": self.image_size,
            "palette": {k: list(v) for k, v in self.palette.items()},
            "seed": self.seed,
            "n_images": self.n_images,
            "index_fraction": self.index_fraction,
            "max_tuples": self.max_tuples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldConfig":
        cfg = cls(**{**d, "palette": {k: tuple(v) for k, v in d.get("palette", DEFAULT_PALETTE).items()}})
        return cfg


def _value_seed(value: str) -> int:
    return int.from_bytes(hashlib.sha256(value.encode("utf-8")).digest()[:4], "big")


def _hash_color(value: str) -> tuple[float, float, float]:
    digest = hashlib.sha256(value.encode("utf-8")).digest()
    return tuple(0.1 + 0.75 * b / 255.0 for b in digest[:3])  # type: ignore[return-value]


def _object_mask(value: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy / (size - 1)
    x = xx / (size - 1)
    if value == "dress":
        half = 0.08 + 0.34 * np.clip((y - 0.15) / 0.75, 0.0, 1.0)
        return (np.abs(x - 0.5) <= half) & (y >= 0.15) & (y <= 0.9)
    if value == "jacket":
        body = (y >= 0.12) & (y <= 0.8) & (x >= 0.12) & (x <= 0.88)
        front = np.abs(x - 0.5) <= 0.04
        return body & ~front
    if value == "pants":
        leg_l = (x >= 0.2) & (x <= 0.42)
        leg_r = (x >= 0.58) & (x <= 0.8)
        return (y >= 0.12) & (y <= 0.92) & (leg_l | leg_r)
    if value == "skirt":
        half = 0.15 + 0.25 * np.clip((y - 0.5) / 0.42, 0.0, 1.0)
        return (np.abs(x - 0.5) <= half) & (y >= 0.5) & (y <= 0.92)
    if value == "shirt":
        return (y >= 0.15) & (y <= 0.6) & (x >= 0.15) & (x <= 0.85)
    # Unknown object: rectangle placed by value hash.
    s = _value_seed(value)
    x0 = 0.1 + 0.2 * ((s >> 0) & 0xF) / 15.0
    y0 = 0.1 + 0.2 * ((s >> 4) & 0xF) / 15.0
    x1 = 0.6 + 0.3 * ((s >> 8) & 0xF) / 15.0
    y1 = 0.6 + 0.3 * ((s >> 12) & 0xF) / 15.0
    return (y >= y0) & (y <= y1) & (x >= x0) & (x <= x1)


def _apply_pattern(img: np.ndarray, mask: np.ndarray, value: str) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    cell = max(2, size // 8)
    if value == "plain":
        return
    if value == "striped":
        sel = mask & ((yy // (cell // 2)) % 2 == 1)
        img[sel] *= 0.45
    elif value == "dotted":
        sel = mask & (yy % cell == 1) & (xx % cell == 1)
        img[sel] = 0.98
    elif value == "checked":
        sel = mask & (((xx // cell) + (yy // cell)) % 2 == 1)
        img[sel] *= 0.55
    else:
        # Unknown pattern: hash-placed diagonal stripes.
        s = _value_seed(value)
        phase = s % cell
        sel = mask & ((xx + yy + phase) % cell < max(1, cell // 3))
        img[sel] *= 0.5


def _apply_style(img: np.ndarray, value: str) -> None:
    size = img.shape[0]
    if value == "fitted":
        img[0, :] = _INK
        img[-1, :] = _INK
        img[:, 0] = _INK
        img[:, -1] = _INK
    elif value == "loose":
        c = max(2, size // 10)
        for ys, xs in ((slice(0, c), slice(0, c)), (slice(0, c), slice(-c, None)),
                       (slice(-c, None), slice(0, c)), (slice(-c, None), slice(-c, None))):
            img[ys, xs] = _INK
    elif value == "cropped":
        img[-max(2, size // 16):, :] = _INK
    elif value == "belted":
        r0 = int(0.44 * size)
        img[r0:r0 + max(2, size // 16), :] = _INK
    else:
        s = _value_seed(value)
        row = 1 + s % (size - 2)
        col = 1 + (s >> 8) % (size - 2)
        img[row, :] = _INK
        img[:, col] = _INK


def render_image(attrs: dict[str, str], cfg: SyntheticWorldConfig) -> np.ndarray:
    """Deterministic H x W x 3 float32 rendering of one attribute tuple."""
    size = cfg.image_size
    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float32)
    obj = attrs.get("object")
    mask = _object_mask(obj, size) if obj is not None else np.ones((size, size), bool)
    color_value = attrs.get("color")
    if color_value is not None:
        rgb = cfg.palette.get(color_value, _hash_color(color_value))
        img[mask] = np.asarray(rgb, dtype=np.float32)
    else:
        img[mask] = 0.5
    if "pattern" in attrs:
        _apply_pattern(img, mask, attrs["pattern"])
    if "style" in attrs:
        _apply_style(img, attrs["style"])
    return np.clip(img, 0.0, 1.0)


def image_id_for(attrs: dict[str, str], cfg: SyntheticWorldConfig) -> str:
    return "-".join(attrs[name] for name in cfg.attributes)


def _split_for(image_id: str, cfg: SyntheticWorldConfig) -> str:
    digest = hashlib.sha256(f"{cfg.seed}:{image_id}".encode("utf-8")).digest()
    frac = int.from_bytes(digest[:8], "big") / float(1 << 64)
    return "index" if frac < cfg.index_fraction else "query"


def generate_world(cfg: SyntheticWorldConfig) -> ImageCollection:
    """Render every attribute tuple (or a seeded sample) into an ImageCollection.

    meta_class is the object attribute; splits are assigned by seeded hash so
    the index/query partition is stable across runs.
    """
    cfg.validate()
    total = cfg.n_tuples()
    if total > cfg.max_tuples:
        raise SchemaTooLarge(f"schema enumerates {total} tuples (cap {cfg.max_tuples})")

    names = list(cfg.attributes)
    tuples = list(itertools.product(*(cfg.attributes[n] for n in names)))
    if cfg.n_images is not None:
        if not 0 < cfg.n_images <= total:
            raise InvalidConfig(f"n_images must be in [1, {total}]")
        rng = np.random.default_rng(cfg.seed)
        keep = rng.choice(total, size=cfg.n_images, replace=False)
        tuples = [tuples[i] for i in sorted(keep)]

    meta_attr = cfg.meta_class_attribute()
    images = []
    digests = {}
    for values in tuples:
        attrs = dict(zip(names, values))
        image_id = image_id_for(attrs, cfg)
        pixels = render_image(attrs, cfg)
        digest = sha256_bytes(pixels.tobytes())
        if digest in digests:
            raise InvalidConfig(
                f"render collision: {image_id!r} and {digests[digest]!r} "
                "produce identical pixels"
            )
        digests[digest] = image_id
        record = ImageRecord(
            id=image_id,
            pixels=pixels,
            attributes=attrs,
            meta_class=attrs[meta_attr],
            split=_split_for(image_id, cfg),
        )
        record.validate()
        images.append(record)
    return ImageCollection(images, meta={"world": cfg.to_dict()})
