"""End-to-end runners behind the CLI: data generation, training, evaluation,
the scaling sweep, and the architecture ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .artifacts import atomic_write_bytes, sha256_file, write_manifest
from .backends import make_caption_backend, make_reformulation_backend
from .config import RunConfig
from .errors import InvalidConfig
from .evaluation import (
    EvalProtocol,
    EvalReport,
    build_eval_cases,
    evaluate,
    load_eval_cases,
    save_eval_cases,
)
from .gallery import export_gallery
from .network import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import build_dataset, load_triplets
from .records import ImageCollection, QueryCase, Triplet
from .training import TrainConfig, finetune_combiner, train
from .world import generate_world

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "no_ema", "no_cross_attention")


def generate_data(cfg: RunConfig) -> tuple[ImageCollection, list[Triplet], list[dict]]:
    """Render the world, build the training triplets, and sample eval cases."""
    collection = generate_world(cfg.world)
    collection.save(cfg.paths.collection)
    write_manifest(cfg.paths.collection, kind="image_collection",
                   configs={"world": cfg.world.to_dict()},
                   extra={"n_images": len(collection)})

    attributes = cfg.world.attributes
    caption_backend = make_caption_backend(cfg.backends.caption, attributes)
    reform_backend = make_reformulation_backend(
        cfg.backends.reformulation, attributes, cfg.word_cap
    )

    train_images = collection.by_split("index") or list(collection)
    train_collection = ImageCollection(train_images, meta=collection.meta)
    triplets = build_dataset(
        train_collection,
        cfg.sampling,
        caption_backend,
        reform_backend,
        out_path=cfg.paths.dataset,
        word_cap=cfg.word_cap,
    )

    eval_records = build_eval_cases(
        collection,
        n_cases=cfg.eval_set.n_cases,
        seed=cfg.eval_set.seed,
        caption_backend=caption_backend,
        reform_backend=reform_backend,
        strategy=cfg.eval_set.strategy,
        subset_size=cfg.eval_set.subset_size,
        word_cap=cfg.word_cap,
    )
    save_eval_cases(cfg.paths.eval_cases, eval_records,
                    configs={"eval_set": dataclasses.asdict(cfg.eval_set),
                             "world": cfg.world.to_dict()})
    return collection, triplets, eval_records


def run_train(cfg: RunConfig) -> Checkpoint:
    collection = ImageCollection.load(cfg.paths.collection)
    triplets = load_triplets(cfg.paths.dataset)
    ckpt, _ = train(
        triplets,
        collection,
        cfg.model,
        cfg.effective_train(),
        checkpoint_path=cfg.paths.checkpoint,
        log_path=cfg.paths.metrics,
    )
    write_manifest(cfg.paths.checkpoint, kind="checkpoint",
                   configs={"model": cfg.model.to_dict(),
                            "train": dataclasses.asdict(cfg.effective_train())},
                   input_hashes={"dataset": sha256_file(cfg.paths.dataset),
                                 "collection": sha256_file(cfg.paths.collection)})
    return ckpt


def run_finetune_combiner(cfg: RunConfig) -> Checkpoint:
    collection = ImageCollection.load(cfg.paths.collection)
    triplets = load_triplets(cfg.paths.dataset)
    ckpt = load_checkpoint(cfg.paths.checkpoint)
    ckpt, _ = finetune_combiner(
        ckpt, triplets, collection, cfg.effective_train(), log_path=cfg.paths.combiner_metrics
    )
    save_checkpoint(ckpt, cfg.paths.checkpoint)
    write_manifest(cfg.paths.checkpoint, kind="checkpoint",
                   configs={"model": cfg.model.to_dict(),
                            "train": dataclasses.asdict(cfg.effective_train()),
                            "combiner": True},
                   input_hashes={"dataset": sha256_file(cfg.paths.dataset)})
    return ckpt


def run_evaluate(cfg: RunConfig) -> EvalReport:
    collection = ImageCollection.load(cfg.paths.collection)
    cases = load_eval_cases(cfg.paths.eval_cases)
    ckpt = load_checkpoint(cfg.paths.checkpoint)
    report = evaluate(
        ckpt,
        cases,
        collection,
        cfg.eval_protocol,
        checkpoint_hash=sha256_file(cfg.paths.checkpoint),
        report_path=cfg.paths.report,
    )
    write_manifest(cfg.paths.report, kind="eval_report",
                   configs={"eval_protocol": dataclasses.asdict(cfg.eval_protocol)},
                   input_hashes={"checkpoint": sha256_file(cfg.paths.checkpoint),
                                 "eval_cases": sha256_file(cfg.paths.eval_cases)})
    return report


def run_gallery(cfg: RunConfig) -> str:
    collection = ImageCollection.load(cfg.paths.collection)
    report = EvalReport.load(cfg.paths.report)
    document = export_gallery(
        report, collection, cfg.paths.gallery,
        top_k=cfg.eval_protocol.keep_rankings,
        mode=cfg.eval_protocol.gallery_mode,
    )
    write_manifest(cfg.paths.gallery, kind="gallery",
                   configs={"eval_protocol": dataclasses.asdict(cfg.eval_protocol)},
                   input_hashes={"report": sha256_file(cfg.paths.report)})
    return document


def train_and_eval(
    triplets: Sequence[Triplet],
    collection: ImageCollection,
    cases: Sequence[QueryCase],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    protocol: Optional[EvalProtocol] = None,
) -> tuple[Checkpoint, EvalReport]:
    """One training run plus evaluation; shared by the sweep and ablation."""
    ckpt, _ = train(triplets, collection, model_cfg, train_cfg)
    report = evaluate(ckpt, cases, collection, protocol)
    return ckpt, report


def scale_sweep(
    triplets: Sequence[Triplet],
    collection: ImageCollection,
    cases: Sequence[QueryCase],
    counts: Sequence[int],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    protocol: Optional[EvalProtocol] = None,
) -> list[dict]:
    """Train on increasing prefixes of one dataset against a shared eval set.

    Pair sampling is prefix-stable in the seed, so the n-triplet subset of a
    larger dataset equals a dataset generated with n_pairs=n directly.
    """
    counts = list(counts)
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise InvalidConfig("sweep counts must be strictly increasing")
    if counts[-1] > len(triplets):
        raise InvalidConfig(
            f"sweep needs {counts[-1]} triplets but the dataset has {len(triplets)}"
        )
    rows = []
    for count in counts:
        _, report = train_and_eval(
            list(triplets)[:count], collection, cases, model_cfg, train_cfg, protocol
        )
        row = {"n_triplets": count}
        mode = (protocol or EvalProtocol()).gallery_mode
        for k, value in report.metrics[mode]["recall_at"].items():
            row[f"recall_at_{k}"] = value
        row["average"] = report.metrics[mode]["average"]
        rows.append(row)
        logger.info("sweep point %d: %s", count, row)
    return rows


def ablate(
    triplets: Sequence[Triplet],
    collection: ImageCollection,
    cases: Sequence[QueryCase],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    protocol: Optional[EvalProtocol] = None,
) -> list[dict]:
    """Full model vs no-EMA vs no-cross-attention on identical data and seed."""
    rows = []
    for variant in ABLATION_VARIANTS:
        variant_cfg = replace(
            train_cfg,
            no_ema=(variant == "no_ema"),
            no_cross_attention=(variant == "no_cross_attention"),
        )
        _, report = train_and_eval(
            triplets, collection, cases, model_cfg, variant_cfg, protocol
        )
        row = {"variant": variant}
        mode = (protocol or EvalProtocol()).gallery_mode
        for k, value in report.metrics[mode]["recall_at"].items():
            row[f"recall_at_{k}"] = value
        row["average"] = report.metrics[mode]["average"]
        rows.append(row)
        logger.info("ablation %s: %s", variant, row)
    return rows


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise InvalidConfig("no rows to write")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def plot_sweep(rows: Sequence[dict], path: str | Path) -> None:
    """Recall versus triplet count on a log axis, one line per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = [row["n_triplets"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in rows[0]:
        if key.startswith("recall_at_"):
            ax.plot(counts, [100.0 * row[key] for row in rows], marker="o",
                    label=key.replace("recall_at_", "R@"))
    ax.set_xscale("log")
    ax.set_xlabel("generated triplets")
    ax.set_ylabel("recall (%)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_scale_sweep(cfg: RunConfig) -> list[dict]:
    collection = ImageCollection.load(cfg.paths.collection)
    triplets = load_triplets(cfg.paths.dataset)
    cases = load_eval_cases(cfg.paths.eval_cases)
    rows = scale_sweep(
        triplets, collection, cases, cfg.sweep.counts, cfg.model,
        cfg.effective_train(), cfg.eval_protocol,
    )
    write_csv(cfg.paths.sweep_csv, rows)
    write_manifest(cfg.paths.sweep_csv, kind="scale_sweep",
                   configs={"sweep": dataclasses.asdict(cfg.sweep)},
                   input_hashes={"dataset": sha256_file(cfg.paths.dataset)})
    plot_sweep(rows, cfg.paths.sweep_plot)
    return rows


def run_ablate(cfg: RunConfig) -> list[dict]:
    collection = ImageCollection.load(cfg.paths.collection)
    triplets = load_triplets(cfg.paths.dataset)
    cases = load_eval_cases(cfg.paths.eval_cases)
    rows = ablate(
        triplets, collection, cases, cfg.model, cfg.effective_train(), cfg.eval_protocol
    )
    write_csv(cfg.paths.ablation_csv, rows)
    write_manifest(cfg.paths.ablation_csv, kind="ablation",
                   configs={"train": dataclasses.asdict(cfg.effective_train())},
                   input_hashes={"dataset": sha256_file(cfg.paths.dataset)})
    return rows
