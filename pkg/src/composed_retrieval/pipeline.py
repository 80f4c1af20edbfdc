"""Triplet generation: pair sampling, captioning, reformulation, persistence.

The pipeline turns an unannotated image collection into training triplets
{reference image, target image, reformulation text}. With oracle backends
the whole thing is a pure function of (collection, seed, configs), so a
regenerated dataset file is byte-identical.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .artifacts import read_jsonl, write_jsonl, write_manifest
from .backends import CaptionBackend, ReformulationBackend
from .errors import (
    EmptyCaption,
    EmptyReformulation,
    InsufficientPairs,
    InvalidConfig,
    MissingMetaClass,
)
from .prompts import DEFAULT_WORD_CAP
from .records import CaptionRecord, ImageCollection, ImageRecord, Triplet

logger = logging.getLogger(__name__)

STRATEGIES = ("same_meta_class", "global_random")


@dataclass
class PairSamplingConfig:
    strategy: str = "same_meta_class"
    n_pairs: int = 1000
    seed: int = 0
    dedupe: bool = True

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"unknown sampling strategy {self.strategy!r}")
        if self.n_pairs <= 0:
            raise InvalidConfig("n_pairs must be > 0")


def _pair_groups(images: Sequence[ImageRecord], cfg: PairSamplingConfig) -> list[list[str]]:
    """Groups of ids within which ordered pairs may be formed."""
    if cfg.strategy == "global_random":
        return [sorted(img.id for img in images)]
    groups: dict[str, list[str]] = {}
    for img in images:
        if img.meta_class is None:
            raise MissingMetaClass(f"image {img.id!r} has no meta_class")
        groups.setdefault(img.meta_class, []).append(img.id)
    return [sorted(groups[key]) for key in sorted(groups)]


def _pair_at(groups: list[list[str]], flat_index: int) -> tuple[str, str]:
    """Map a flat index over all ordered pairs to (ref_id, target_id)."""
    for ids in groups:
        n = len(ids)
        count = n * (n - 1)
        if flat_index < count:
            i, j = divmod(flat_index, n - 1)
            if j >= i:
                j += 1
            return ids[i], ids[j]
        flat_index -= count
    raise IndexError(flat_index)


def sample_pairs(
    collection: Sequence[ImageRecord] | ImageCollection, cfg: PairSamplingConfig
) -> list[tuple[str, str]]:
    """Sample ordered (ref_id, target_id) pairs, deterministically in the seed.

    Pairs never repeat an image with itself; with dedupe no ordered pair
    repeats. For a fixed seed, the first n pairs of a larger request are a
    prefix of a smaller one, which the scaling sweep relies on.
    """
    cfg.validate()
    images = list(collection)
    groups = _pair_groups(images, cfg)
    total = sum(len(ids) * (len(ids) - 1) for ids in groups)
    if cfg.dedupe and cfg.n_pairs > total:
        raise InsufficientPairs(
            f"{cfg.n_pairs} pairs requested but only {total} distinct ordered "
            f"pairs exist under strategy {cfg.strategy!r}"
        )
    if total == 0:
        raise InsufficientPairs("collection yields no ordered pairs")
    rng = np.random.default_rng(cfg.seed)
    if cfg.dedupe:
        flat = rng.permutation(total)[: cfg.n_pairs]
    else:
        flat = rng.integers(0, total, size=cfg.n_pairs)
    return [_pair_at(groups, int(i)) for i in flat]


def caption(image: ImageRecord, backend: CaptionBackend) -> CaptionRecord:
    """Caption one image; blank backend output is a hard error."""
    text = backend.caption(image)
    if not text or not text.strip():
        raise EmptyCaption(f"backend {backend.backend_id!r} returned a blank caption")
    return CaptionRecord(image_id=image.id, text=text, backend_id=backend.backend_id)


def reformulate(
    caption_a: str,
    caption_b: str,
    backend: ReformulationBackend,
    word_cap: int = DEFAULT_WORD_CAP,
) -> str:
    """Produce the change text between two captions, capped at word_cap words."""
    if not caption_a or not caption_a.strip():
        raise EmptyCaption("caption A is empty")
    if not caption_b or not caption_b.strip():
        raise EmptyCaption("caption B is empty")
    text = backend.reformulate(caption_a, caption_b)
    if not text or not text.strip():
        raise EmptyReformulation(f"backend {backend.backend_id!r} returned blank text")
    words = text.strip().split()
    if len(words) > word_cap:
        logger.warning(
            "reformulation from %s exceeds %d words; truncating: %r",
            backend.backend_id, word_cap, text,
        )
        words = words[:word_cap]
    return " ".join(words)


def build_dataset(
    collection: ImageCollection,
    sampling_cfg: PairSamplingConfig,
    caption_backend: CaptionBackend,
    reform_backend: ReformulationBackend,
    out_path: Optional[str | Path] = None,
    word_cap: int = DEFAULT_WORD_CAP,
    max_workers: int = 1,
) -> list[Triplet]:
    """Sample pairs, caption, reformulate; optionally persist as JSONL + manifest.

    Backend calls run concurrently when max_workers > 1; triplets are
    assembled in pair_index order regardless of completion order.
    """
    pairs = sample_pairs(collection, sampling_cfg)
    unique_ids = sorted({i for pair in pairs for i in pair})

    def _caption_one(image_id: str) -> CaptionRecord:
        return caption(collection.get(image_id), caption_backend)

    def _reform_one(pair: tuple[str, str]) -> str:
        return reformulate(
            captions[pair[0]].text, captions[pair[1]].text, reform_backend, word_cap
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            captions = {rec.image_id: rec for rec in pool.map(_caption_one, unique_ids)}
            reformulations = list(pool.map(_reform_one, pairs))
    else:
        captions = {image_id: _caption_one(image_id) for image_id in unique_ids}
        reformulations = [_reform_one(pair) for pair in pairs]

    triplets = []
    for idx, ((ref_id, target_id), text) in enumerate(zip(pairs, reformulations)):
        triplets.append(
            Triplet(
                ref_id=ref_id,
                target_id=target_id,
                reformulation=text,
                caption_ref=captions[ref_id].text,
                caption_target=captions[target_id].text,
                backend_ids=(caption_backend.backend_id, reform_backend.backend_id),
                pair_index=idx,
            )
        )

    if out_path is not None:
        save_triplets(
            out_path,
            triplets,
            configs={
                "sampling": asdict(sampling_cfg),
                "word_cap": word_cap,
                "backends": {
                    "caption": caption_backend.backend_id,
                    "reformulation": reform_backend.backend_id,
                },
                "world": collection.meta.get("world"),
            },
        )
    return triplets


def save_triplets(path: str | Path, triplets: Sequence[Triplet], configs: dict) -> None:
    write_jsonl(path, (t.to_record() for t in triplets))
    write_manifest(path, kind="triplet_dataset", configs=configs,
                   extra={"n_triplets": len(triplets), "seed": configs.get("sampling", {}).get("seed")})


def load_triplets(path: str | Path) -> list[Triplet]:
    return [Triplet.from_record(rec) for rec in read_jsonl(path)]
