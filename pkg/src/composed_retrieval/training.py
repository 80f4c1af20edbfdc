"""Contrastive training of the reformulation network and the late-fusion weight.

Per step: queries are embedded with the online network, targets with the
EMA copy through the null-text path (stop-gradient), the batch contrastive
loss is minimized with AdamW, and the EMA copy then tracks the online
weights. The fusion weight is fitted afterwards against the same loss with
the backbone frozen.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .artifacts import read_jsonl, write_jsonl
from .errors import (
    DanglingId,
    InvalidConfig,
    LambdaOutOfRange,
    NonFiniteLoss,
    NonPositiveTemperature,
    ShapeMismatch,
    ZeroVector,
)
from .network import (
    Checkpoint,
    ModelConfig,
    collate_tokens,
    ema_update_,
    image_to_tensor,
    init_checkpoint,
    save_checkpoint,
)
from .records import ImageCollection, Triplet
from .tokenizer import Vocabulary, build_vocabulary, build_vocabulary_from_texts

logger = logging.getLogger(__name__)

TAU_MODES = ("fixed", "learnable")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    ema_momentum: float = 0.996
    tau_mode: str = "fixed"
    seed: int = 0
    shuffle: bool = True
    no_ema: bool = False
    no_cross_attention: bool = False
    max_grad_norm: Optional[float] = None
    combiner_steps: int = 200
    combiner_learning_rate: float = 0.05

    def validate(self) -> None:
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.optimizer != "adamw":
            raise InvalidConfig(f"unsupported optimizer {self.optimizer!r}")
        if self.tau_mode not in TAU_MODES:
            raise InvalidConfig(f"tau_mode must be one of {TAU_MODES}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise InvalidConfig("ema_momentum must be in [0, 1]")

    def paper_preset(self) -> "TrainConfig":
        """Optimizer values reported for the full-scale model."""
        return replace(self, learning_rate=2e-6, weight_decay=0.1, batch_size=32)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]

    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def save(self, path: str | Path) -> None:
        records = [{"kind": "step", **s} for s in self.steps]
        records += [{"kind": "epoch", **e} for e in self.epochs]
        write_jsonl(path, records)

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        log = cls()
        for rec in read_jsonl(path):
            kind = rec.pop("kind")
            (log.steps if kind == "step" else log.epochs).append(rec)
        return log


def contrastive_loss(e_r: torch.Tensor, e_t: torch.Tensor, tau) -> torch.Tensor:
    """Batch-centric contrastive loss over cosine similarities.

    Each query is scored against every target in the batch; the positive
    is the matching row. Logits are max-subtracted before the
    log-sum-exp, so large temperatures cannot overflow.
    """
    if e_r.ndim != 2 or e_r.shape != e_t.shape:
        raise ShapeMismatch(f"expected matching BxD matrices, got {tuple(e_r.shape)} vs {tuple(e_t.shape)}")
    tau_value = float(tau.detach()) if isinstance(tau, torch.Tensor) else float(tau)
    if tau_value <= 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau_value}")
    norms_r = e_r.norm(dim=1, keepdim=True)
    norms_t = e_t.norm(dim=1, keepdim=True)
    if bool((norms_r == 0).any()) or bool((norms_t == 0).any()):
        raise ZeroVector("cosine similarity is undefined for zero embeddings")
    sim = (e_r / norms_r) @ (e_t / norms_t).T
    logits = tau * sim
    logits = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_prob.diagonal().mean()


def loss_gradient(e_r: torch.Tensor, e_t: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradients of the contrastive loss w.r.t. both embedding matrices."""
    e_r = e_r.detach().clone().requires_grad_(True)
    e_t = e_t.detach().clone().requires_grad_(True)
    loss = contrastive_loss(e_r, e_t, tau)
    return torch.autograd.grad(loss, [e_r, e_t])


def fuse(e_r, text_pooled, lam):
    """Late fusion: lam * e_r + (1 - lam) * text_pooled, elementwise."""
    lam_value = float(lam)
    if not 0.0 <= lam_value <= 1.0:
        raise LambdaOutOfRange(f"lambda must be in [0, 1], got {lam_value}")
    if tuple(np.shape(e_r)) != tuple(np.shape(text_pooled)):
        raise ShapeMismatch("fusion inputs must have identical shapes")
    return lam * e_r + (1.0 - lam) * text_pooled


def _resolve_vocab(
    collection: ImageCollection, triplets: Sequence[Triplet], vocab: Optional[Vocabulary]
) -> Vocabulary:
    if vocab is not None:
        return vocab
    world = collection.meta.get("world") or {}
    if world.get("attributes"):
        return build_vocabulary(world["attributes"])
    return build_vocabulary_from_texts(t.reformulation for t in triplets)


class _TensorDataset:
    """Triplets pre-staged as stacked tensors for the training loop."""

    def __init__(self, triplets: Sequence[Triplet], collection: ImageCollection,
                 vocab: Vocabulary, max_text_len: int):
        for t in triplets:
            if t.ref_id not in collection:
                raise DanglingId(f"triplet {t.pair_index} references unknown image {t.ref_id!r}")
            if t.target_id not in collection:
                raise DanglingId(f"triplet {t.pair_index} references unknown image {t.target_id!r}")
        unique_ids = sorted({i for t in triplets for i in (t.ref_id, t.target_id)})
        index = {image_id: row for row, image_id in enumerate(unique_ids)}
        self.images = torch.stack([image_to_tensor(collection.get(i)) for i in unique_ids])
        self.ref_rows = torch.tensor([index[t.ref_id] for t in triplets], dtype=torch.long)
        self.tgt_rows = torch.tensor([index[t.target_id] for t in triplets], dtype=torch.long)
        sequences = [vocab.encode(t.reformulation, max_text_len) for t in triplets]
        self.token_ids, self.token_mask = collate_tokens(sequences, pad_id=vocab.null_id)
        self.n = len(triplets)

    def batch(self, rows: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        rows_t = torch.from_numpy(rows.copy())
        return (
            self.images[self.ref_rows[rows_t]],
            self.images[self.tgt_rows[rows_t]],
            self.token_ids[rows_t],
            self.token_mask[rows_t],
        )


def _null_batch(vocab: Vocabulary, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.full((batch_size, 1), vocab.null_id, dtype=torch.long)
    return ids, torch.ones_like(ids, dtype=torch.bool)


def train(
    dataset: Sequence[Triplet],
    collection: ImageCollection,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    vocab: Optional[Vocabulary] = None,
    checkpoint_path: Optional[str | Path] = None,
    log_path: Optional[str | Path] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Optimize the network on triplets; deterministic for a fixed seed."""
    train_cfg.validate()
    triplets = list(dataset)
    if not triplets:
        raise InvalidConfig("dataset is empty")
    # Tensors here are tiny; intra-op thread sync costs more than it buys.
    torch.set_num_threads(1)

    vocab = _resolve_vocab(collection, triplets, vocab)
    cfg = replace(
        model_cfg,
        ema_momentum=train_cfg.ema_momentum,
        temperature_learnable=(train_cfg.tau_mode == "learnable"),
        use_cross_attention=model_cfg.use_cross_attention and not train_cfg.no_cross_attention,
    )
    ckpt = init_checkpoint(cfg, vocab)
    staged = _TensorDataset(triplets, collection, vocab, cfg.max_text_len)

    params = list(ckpt.online.parameters())
    if cfg.temperature_learnable:
        params.append(ckpt.log_tau)
    opt = torch.optim.AdamW(params, lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    log = TrainLog()
    null_ids, null_mask = _null_batch(vocab, train_cfg.batch_size)

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(staged.n) if train_cfg.shuffle else np.arange(staged.n)
        epoch_losses = []
        for start in range(0, staged.n, train_cfg.batch_size):
            rows = order[start:start + train_cfg.batch_size]
            if len(rows) == 1:
                continue  # the loss is identically zero for a single pair
            x_ref, x_tgt, ids, mask = staged.batch(rows)
            e_r, _ = ckpt.online(x_ref, ids, mask)
            with torch.no_grad():
                # Targets are always stop-gradient; no_ema swaps the slow EMA
                # copy for the current online weights (the m=0 limit).
                target_model = ckpt.online if train_cfg.no_ema else ckpt.target
                e_t, _ = target_model(x_tgt, null_ids[: len(rows)], null_mask[: len(rows)])
            loss = contrastive_loss(e_r, e_t.detach(), ckpt.tau)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at step {ckpt.step} (epoch {epoch}): {float(loss)}"
                )
            opt.zero_grad()
            loss.backward()
            if train_cfg.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(params, train_cfg.max_grad_norm)
            opt.step()
            if not train_cfg.no_ema:
                ema_update_(ckpt.online, ckpt.target, cfg.ema_momentum)
            ckpt.step += 1
            value = float(loss.detach())
            epoch_losses.append(value)
            log.steps.append({
                "step": ckpt.step,
                "epoch": epoch,
                "loss": value,
                "tau": float(ckpt.tau.detach()),
                "lambda": float(ckpt.lam),
                "time": time.time(),
            })
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.epochs.append({"epoch": epoch, "mean_loss": mean_loss})
        logger.info("epoch %d: mean loss %.4f", epoch, mean_loss)

    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    if log_path is not None:
        log.save(log_path)
    return ckpt, log


@torch.no_grad()
def _precompute_embeddings(
    ckpt: Checkpoint,
    triplets: Sequence[Triplet],
    collection: ImageCollection,
    batch_size: int = 256,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Frozen-backbone query, text, and target embeddings for all triplets."""
    staged = _TensorDataset(triplets, collection, ckpt.vocab, ckpt.config.max_text_len)
    chunks_r, chunks_text, chunks_t = [], [], []
    for start in range(0, staged.n, batch_size):
        rows = np.arange(start, min(start + batch_size, staged.n))
        x_ref, x_tgt, ids, mask = staged.batch(rows)
        e_r, text_pooled = ckpt.online(x_ref, ids, mask)
        null_ids, null_mask = _null_batch(ckpt.vocab, len(rows))
        e_t, _ = ckpt.online(x_tgt, null_ids, null_mask)
        chunks_r.append(e_r)
        chunks_text.append(text_pooled)
        chunks_t.append(e_t)
    return torch.cat(chunks_r), torch.cat(chunks_text), torch.cat(chunks_t)


def finetune_combiner(
    ckpt: Checkpoint,
    dataset: Sequence[Triplet],
    collection: ImageCollection,
    train_cfg: TrainConfig,
    log_path: Optional[str | Path] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Fit the fusion weight against the contrastive loss; backbone untouched.

    The weight is optimized as an unconstrained logit through a sigmoid, so
    it stays inside [0, 1]. Embeddings are precomputed once (the backbone
    is frozen) and each step scores the fused queries against all targets.
    """
    train_cfg.validate()
    triplets = list(dataset)
    if not triplets:
        raise InvalidConfig("dataset is empty")
    e_r, text_pooled, e_t = _precompute_embeddings(ckpt, triplets, collection)
    tau = float(ckpt.tau.detach())

    lambda_logit = ckpt.lambda_logit.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([lambda_logit], lr=train_cfg.combiner_learning_rate)
    log = TrainLog()
    for step in range(train_cfg.combiner_steps):
        lam = torch.sigmoid(lambda_logit)
        e_f = lam * e_r + (1.0 - lam) * text_pooled
        loss = contrastive_loss(e_f, e_t, tau)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite combiner loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.steps.append({
            "step": step,
            "epoch": 0,
            "loss": float(loss.detach()),
            "tau": tau,
            "lambda": float(torch.sigmoid(lambda_logit.detach())),
            "time": time.time(),
        })
    if log.steps:
        log.epochs.append({"epoch": 0, "mean_loss": float(np.mean(log.losses()))})

    ckpt.lambda_logit = lambda_logit.detach().clone()
    if log_path is not None:
        log.save(log_path)
    return ckpt, log


def combiner_objective(
    ckpt: Checkpoint,
    dataset: Sequence[Triplet],
    collection: ImageCollection,
    lam: float,
) -> float:
    """The combiner's training loss at a given fusion weight."""
    e_r, text_pooled, e_t = _precompute_embeddings(ckpt, dataset, collection)
    e_f = fuse(e_r, text_pooled, lam)
    return float(contrastive_loss(e_f, e_t, float(ckpt.tau.detach())))
