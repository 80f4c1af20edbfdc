"""Retrieval evaluation: embedding index, exact cosine ranking, recall metrics.

Rankings are exact (no ANN) with ties broken by ascending id so every
ordering is total and reproducible. Recall@K counts the fraction of
queries whose ground-truth target lands in the top K; the subset variant
ranks only a small curated candidate list per query.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .artifacts import (
    atomic_write_text,
    canonical_json,
    config_hash,
    read_jsonl,
    write_jsonl,
    write_manifest,
)
from .backends import CaptionBackend, ReformulationBackend
from .errors import (
    DanglingId,
    DuplicateId,
    EmptyIndex,
    GtNotInSubset,
    InsufficientPairs,
    InvalidConfig,
    MissingRanking,
    ZeroEmbedding,
    ZeroVector,
)
from .network import Checkpoint, collate_tokens, image_to_tensor
from .pipeline import caption as caption_op
from .pipeline import reformulate
from .prompts import DEFAULT_WORD_CAP
from .records import ImageCollection, ImageRecord, QueryCase
from .training import fuse

EMBED_MODES = ("model_target", "image_only_baseline")
QUERY_MODES = ("reformulated", "fused", "image_only", "text_only", "image_text_sum")


@dataclass
class EvalProtocol:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    subset_ks: list[int] = field(default_factory=lambda: [1])
    modes: list[str] = field(default_factory=lambda: list(QUERY_MODES))
    lambda_override: Optional[float] = None
    include_reference: bool = False
    per_class: bool = False
    average_of: Optional[list[int]] = None  # ks averaged into "average"; None = all
    keep_rankings: int = 10
    gallery_mode: str = "reformulated"

    def validate(self) -> None:
        if not self.ks or any(k < 1 for k in self.ks):
            raise InvalidConfig("ks must be positive")
        if any(k < 1 for k in self.subset_ks):
            raise InvalidConfig("subset_ks must be positive")
        for mode in self.modes:
            if mode not in QUERY_MODES:
                raise InvalidConfig(f"unknown query mode {mode!r}")
        if self.lambda_override is not None and not 0.0 <= self.lambda_override <= 1.0:
            raise InvalidConfig("lambda_override must be in [0, 1]")


class EmbeddingIndex:
    """Immutable gallery of target embeddings with cached norms."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        if len(ids) != len(set(ids)):
            raise DuplicateId("index ids must be unique")
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise InvalidConfig(f"vectors must be NxD with N={len(ids)}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise ZeroEmbedding("index contains a zero embedding row")
        self.ids = list(ids)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.norms = norms.astype(np.float64)
        self.unit = self.vectors / self.norms[:, None]
        self._row = {image_id: i for i, image_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row

    def row(self, image_id: str) -> int:
        return self._row[image_id]


@torch.no_grad()
def _embed_null_batch(ckpt: Checkpoint, images: Sequence[ImageRecord],
                      batch_size: int = 256) -> np.ndarray:
    """Null-text path embeddings (online weights) for a list of images."""
    model = ckpt.online
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = torch.stack([image_to_tensor(img, model.patch_dtype()) for img in chunk])
        ids = torch.full((len(chunk), 1), ckpt.vocab.null_id, dtype=torch.long)
        mask = torch.ones_like(ids, dtype=torch.bool)
        e, _ = model(x, ids, mask)
        out.append(e.detach().cpu().numpy())
    return np.concatenate(out, axis=0)


@torch.no_grad()
def _embed_query_batch(
    ckpt: Checkpoint, cases: Sequence[QueryCase], collection: ImageCollection,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Query embeddings and pooled text embeddings for all cases."""
    model = ckpt.online
    sequences = [ckpt.vocab.encode(c.reformulation, ckpt.config.max_text_len) for c in cases]
    out_e, out_t = [], []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        x = torch.stack([
            image_to_tensor(collection.get(c.ref_id), model.patch_dtype()) for c in chunk
        ])
        ids, mask = collate_tokens(sequences[start:start + batch_size], pad_id=ckpt.vocab.null_id)
        e, pooled = model(x, ids, mask)
        out_e.append(e.detach().cpu().numpy())
        out_t.append(pooled.detach().cpu().numpy())
    return np.concatenate(out_e, axis=0), np.concatenate(out_t, axis=0)


def build_index(
    images: Sequence[ImageRecord], ckpt: Checkpoint, embed_mode: str = "model_target"
) -> EmbeddingIndex:
    """One row per image through the null-text target path (online weights)."""
    if embed_mode not in EMBED_MODES:
        raise InvalidConfig(f"embed_mode must be one of {EMBED_MODES}")
    images = list(images)
    if not images:
        raise EmptyIndex("cannot build an index from zero images")
    vectors = _embed_null_batch(ckpt, images)
    return EmbeddingIndex([img.id for img in images], vectors)


def _unit(vector: np.ndarray) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ZeroVector("query embedding is a zero vector")
    return v / norm


def _ranked_rows(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Total order: descending score, then ascending id."""
    return np.lexsort((np.asarray(ids), -scores))


def retrieve(query: np.ndarray, index: EmbeddingIndex, k: int) -> list[tuple[str, float]]:
    """Top-min(k, N) index entries by cosine similarity."""
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    scores = np.clip(index.unit @ _unit(query), -1.0, 1.0)
    order = _ranked_rows(scores, index.ids)[: min(k, len(index))]
    return [(index.ids[i], float(scores[i])) for i in order]


def _ranking_ids(ranking) -> list[str]:
    return [entry[0] if isinstance(entry, (tuple, list)) else entry for entry in ranking]


def recall_at_k(cases: Sequence[QueryCase], rankings: Sequence, k: int) -> float:
    """Fraction of cases whose ground truth appears in the top k of its ranking."""
    if len(rankings) != len(cases):
        raise MissingRanking(f"{len(cases)} cases but {len(rankings)} rankings")
    hits = 0
    for case, ranking in zip(cases, rankings):
        if ranking is None:
            raise MissingRanking(f"case {case.ref_id!r} has no ranking")
        hits += case.gt_target_id in _ranking_ids(ranking)[:k]
    return hits / len(cases)


def recall_subset_at_k(
    cases: Sequence[QueryCase], queries: np.ndarray, index: EmbeddingIndex, k: int
) -> float:
    """Recall@k where each query ranks only its own candidate subset."""
    if len(queries) != len(cases):
        raise MissingRanking(f"{len(cases)} cases but {len(queries)} query vectors")
    hits = 0
    for case, query in zip(cases, queries):
        if not case.subset:
            raise GtNotInSubset(f"case {case.ref_id!r} has no candidate subset")
        if case.gt_target_id not in case.subset:
            raise GtNotInSubset(
                f"ground truth {case.gt_target_id!r} missing from subset of {case.ref_id!r}"
            )
        subset = list(case.subset)
        for member in subset:
            if member not in index:
                raise DanglingId(f"subset member {member!r} not in index")
        rows = [index.row(member) for member in subset]
        scores = np.clip(index.unit[rows] @ _unit(query), -1.0, 1.0)
        order = _ranked_rows(scores, subset)[:k]
        hits += any(subset[i] == case.gt_target_id for i in order)
    return hits / len(cases)


def baseline_embed(
    case: QueryCase, ckpt: Checkpoint, mode: str, collection: ImageCollection
) -> np.ndarray:
    """Frozen-model modality baselines: image only, text only, or their sum."""
    if mode not in ("image_only", "text_only", "sum", "image_text_sum"):
        raise InvalidConfig(f"unknown baseline mode {mode!r}")
    queries = _evaluate_query_vectors(ckpt, [case], collection)
    if mode == "image_only":
        return queries["image_only"][0]
    if mode == "text_only":
        return queries["text_only"][0]
    return queries["image_text_sum"][0]


def _evaluate_query_vectors(
    ckpt: Checkpoint,
    cases: Sequence[QueryCase],
    collection: ImageCollection,
    modes: Optional[Sequence[str]] = None,
    lambda_override: Optional[float] = None,
) -> dict[str, np.ndarray]:
    modes = list(modes) if modes is not None else list(QUERY_MODES)
    e_r, text_pooled = _embed_query_batch(ckpt, cases, collection)
    ref_images = [collection.get(c.ref_id) for c in cases]
    vectors: dict[str, np.ndarray] = {}
    image_only: Optional[np.ndarray] = None
    if {"image_only", "image_text_sum"} & set(modes):
        image_only = _embed_null_batch(ckpt, ref_images)
    if "reformulated" in modes:
        vectors["reformulated"] = e_r
    if "fused" in modes:
        lam = lambda_override if lambda_override is not None else float(ckpt.lam)
        vectors["fused"] = np.asarray(fuse(e_r, text_pooled, lam))
    if "image_only" in modes:
        vectors["image_only"] = image_only
    if "text_only" in modes:
        vectors["text_only"] = text_pooled
    if "image_text_sum" in modes:
        unit_img = image_only / np.linalg.norm(image_only, axis=1, keepdims=True)
        unit_txt = text_pooled / np.linalg.norm(text_pooled, axis=1, keepdims=True)
        vectors["image_text_sum"] = unit_img + unit_txt
    return vectors


@dataclass
class EvalReport:
    """Recall table plus enough provenance to reproduce it."""

    protocol: dict
    metrics: dict
    n_cases: int
    index_size: int
    lambda_used: float
    checkpoint_hash: Optional[str] = None
    rankings: dict = field(default_factory=dict)
    schema_version: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_hash"] = config_hash(self.protocol)
        return d

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, canonical_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        import json

        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        d.pop("config_hash", None)
        return cls(**d)

    def recall(self, mode: str, k: int) -> float:
        return self.metrics[mode]["recall_at"][str(k)]

    def format_table(self) -> str:
        """Percentages with two decimals, one row per query mode."""
        ks = sorted(int(k) for k in next(iter(self.metrics.values()))["recall_at"])
        header = ["mode"] + [f"R@{k}" for k in ks] + ["Avg"]
        lines = ["  ".join(f"{h:>14}" for h in header)]
        for mode, stats in self.metrics.items():
            row = [mode] + [
                f"{100.0 * stats['recall_at'][str(k)]:.2f}" for k in ks
            ] + [f"{100.0 * stats['average']:.2f}"]
            lines.append("  ".join(f"{v:>14}" for v in row))
        return "\n".join(lines)


def evaluate(
    ckpt: Checkpoint,
    cases: Sequence[QueryCase],
    collection: ImageCollection,
    protocol: Optional[EvalProtocol] = None,
    checkpoint_hash: Optional[str] = None,
    report_path: Optional[str | Path] = None,
) -> EvalReport:
    """Compute every configured metric for every configured query mode."""
    protocol = protocol or EvalProtocol()
    protocol.validate()
    cases = list(cases)
    if not cases:
        raise InvalidConfig("no evaluation cases")

    index_images = collection.by_split("index") or list(collection)
    index = build_index(index_images, ckpt)
    for case in cases:
        if case.gt_target_id not in index:
            raise DanglingId(f"ground truth {case.gt_target_id!r} not in index")

    query_vectors = _evaluate_query_vectors(
        ckpt, cases, collection, protocol.modes, protocol.lambda_override
    )

    lam_used = (
        protocol.lambda_override if protocol.lambda_override is not None else float(ckpt.lam)
    )
    max_k = max(protocol.ks)
    metrics: dict[str, dict] = {}
    kept_rankings: dict[str, list] = {}
    for mode, vectors in query_vectors.items():
        rankings = []
        for case, vector in zip(cases, vectors):
            scores = np.clip(index.unit @ _unit(vector), -1.0, 1.0)
            order = _ranked_rows(scores, index.ids)
            ranked = [(index.ids[i], float(scores[i])) for i in order]
            if not protocol.include_reference:
                ranked = [entry for entry in ranked if entry[0] != case.ref_id]
            rankings.append(ranked[: max(max_k, protocol.keep_rankings)])
        stats: dict = {
            "recall_at": {str(k): recall_at_k(cases, rankings, k) for k in protocol.ks}
        }
        if protocol.subset_ks and all(c.subset for c in cases):
            stats["recall_subset_at"] = {
                str(k): recall_subset_at_k(cases, vectors, index, k)
                for k in protocol.subset_ks
            }
        avg_ks = protocol.average_of or protocol.ks
        stats["average"] = float(np.mean([stats["recall_at"][str(k)] for k in avg_ks]))
        if protocol.per_class:
            stats["per_class"] = _per_class_recalls(cases, rankings, collection, protocol.ks)
        metrics[mode] = stats
        if mode == protocol.gallery_mode and protocol.keep_rankings > 0:
            kept_rankings[mode] = [
                {
                    "ref_id": case.ref_id,
                    "reformulation": case.reformulation,
                    "gt_target_id": case.gt_target_id,
                    "ranked": [[rid, score] for rid, score in ranking[: protocol.keep_rankings]],
                }
                for case, ranking in zip(cases, rankings)
            ]

    report = EvalReport(
        protocol=asdict(protocol),
        metrics=metrics,
        n_cases=len(cases),
        index_size=len(index),
        lambda_used=float(lam_used),
        checkpoint_hash=checkpoint_hash,
        rankings=kept_rankings,
    )
    if report_path is not None:
        report.save(report_path)
    return report


def _per_class_recalls(
    cases: Sequence[QueryCase], rankings: Sequence, collection: ImageCollection,
    ks: Sequence[int],
) -> dict:
    """Group by the reference image's meta class; uniform mean across classes."""
    groups: dict[str, list[int]] = {}
    for i, case in enumerate(cases):
        cls = collection.get(case.ref_id).meta_class or "unknown"
        groups.setdefault(cls, []).append(i)
    per_class = {}
    for cls in sorted(groups):
        rows = groups[cls]
        sub_cases = [cases[i] for i in rows]
        sub_rankings = [rankings[i] for i in rows]
        per_class[cls] = {
            str(k): recall_at_k(sub_cases, sub_rankings, k) for k in ks
        }
    mean = {
        str(k): float(np.mean([per_class[c][str(k)] for c in per_class])) for k in ks
    }
    return {"classes": per_class, "uniform_mean": mean}


def _attribute_distance(a: Optional[dict], b: Optional[dict]) -> int:
    if not a or not b:
        return 0
    keys = set(a) | set(b)
    return sum(1 for key in keys if a.get(key) != b.get(key))


def build_eval_cases(
    collection: ImageCollection,
    n_cases: int,
    seed: int,
    caption_backend: CaptionBackend,
    reform_backend: ReformulationBackend,
    strategy: str = "same_meta_class",
    subset_size: int = 5,
    word_cap: int = DEFAULT_WORD_CAP,
) -> list[dict]:
    """Sample evaluation queries: reference from the query split, target from the index split.

    Each case gets a candidate subset of the ground truth plus the
    subset_size hardest negatives (smallest attribute distance from the
    ground truth, ties by id).
    """
    if n_cases <= 0:
        raise InvalidConfig("n_cases must be > 0")
    query_images = collection.by_split("query") or list(collection)
    index_images = collection.by_split("index") or list(collection)
    index_ids = {img.id for img in index_images}

    pairs: list[tuple[str, str]] = []
    if strategy == "same_meta_class":
        by_class: dict[str, list[ImageRecord]] = {}
        for img in index_images:
            if img.meta_class is None:
                raise InvalidConfig("same_meta_class eval sampling needs meta classes")
            by_class.setdefault(img.meta_class, []).append(img)
        for ref in sorted(query_images, key=lambda r: r.id):
            for tgt in sorted(by_class.get(ref.meta_class, []), key=lambda r: r.id):
                if tgt.id != ref.id:
                    pairs.append((ref.id, tgt.id))
    elif strategy == "global_random":
        for ref in sorted(query_images, key=lambda r: r.id):
            for tgt in sorted(index_images, key=lambda r: r.id):
                if tgt.id != ref.id:
                    pairs.append((ref.id, tgt.id))
    else:
        raise InvalidConfig(f"unknown strategy {strategy!r}")

    if n_cases > len(pairs):
        raise InsufficientPairs(f"{n_cases} cases requested, only {len(pairs)} pairs available")
    rng = np.random.default_rng(seed)
    chosen = [pairs[int(i)] for i in rng.permutation(len(pairs))[:n_cases]]

    by_id = {img.id: img for img in index_images}
    records = []
    for pair_index, (ref_id, gt_id) in enumerate(chosen):
        ref = collection.get(ref_id)
        gt = collection.get(gt_id)
        cap_ref = caption_op(ref, caption_backend)
        cap_gt = caption_op(gt, caption_backend)
        text = reformulate(cap_ref.text, cap_gt.text, reform_backend, word_cap)
        gt_attrs = gt.attributes
        if gt_attrs:
            negatives = sorted(
                (img for img in index_images if img.id != gt_id),
                key=lambda img: (_attribute_distance(gt_attrs, img.attributes), img.id),
            )[:subset_size]
            subset = sorted([gt_id] + [img.id for img in negatives])
        else:
            others = sorted(index_ids - {gt_id})
            pick = rng.choice(len(others), size=min(subset_size, len(others)), replace=False)
            subset = sorted([gt_id] + [others[int(i)] for i in pick])
        records.append({
            "ref_id": ref_id,
            "target_id": gt_id,
            "reformulation": text,
            "caption_ref": cap_ref.text,
            "caption_target": cap_gt.text,
            "backend_ids": [caption_backend.backend_id, reform_backend.backend_id],
            "pair_index": pair_index,
            "subset": subset,
        })
    return records


def save_eval_cases(path: str | Path, records: Sequence[dict], configs: dict) -> None:
    write_jsonl(path, records)
    write_manifest(path, kind="eval_cases", configs=configs,
                   extra={"n_cases": len(records)})


def load_eval_cases(path: str | Path) -> list[QueryCase]:
    return [
        QueryCase(
            ref_id=rec["ref_id"],
            reformulation=rec["reformulation"],
            gt_target_id=rec["target_id"],
            subset=rec.get("subset"),
        )
        for rec in read_jsonl(path)
    ]
