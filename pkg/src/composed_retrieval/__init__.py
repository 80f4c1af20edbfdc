"""Desk-scale composed image retrieval.

Generates training triplets from an unannotated image collection through
pluggable caption/reformulation backends, trains a text-guided embedding
reformulation network with a batch contrastive loss and an EMA target
encoder, and evaluates retrieval with Recall@K protocols.
"""

from .backends import (
    HttpBackendConfig,
    HttpCaptionBackend,
    HttpReformulationBackend,
    OracleCaptionBackend,
    OracleReformulationBackend,
)
from .evaluation import (
    EmbeddingIndex,
    EvalProtocol,
    EvalReport,
    baseline_embed,
    build_eval_cases,
    build_index,
    evaluate,
    load_eval_cases,
    recall_at_k,
    recall_subset_at_k,
    retrieve,
)
from .gallery import export_gallery
from .network import (
    Checkpoint,
    ModelConfig,
    ReformulationModel,
    embed_query,
    embed_target,
    ema_update,
    init_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    PairSamplingConfig,
    build_dataset,
    caption,
    load_triplets,
    reformulate,
    sample_pairs,
)
from .prompts import CAPTION_PROMPT, REFORMULATION_PROMPT_TEMPLATE, render_reformulation_prompt
from .records import CaptionRecord, ImageCollection, ImageRecord, QueryCase, Triplet
from .tokenizer import TokenSequence, Vocabulary, build_vocabulary
from .training import (
    TrainConfig,
    TrainLog,
    contrastive_loss,
    finetune_combiner,
    fuse,
    loss_gradient,
    train,
)
from .world import SyntheticWorldConfig, generate_world

__version__ = "0.1.0"

__all__ = [
    "CAPTION_PROMPT",
    "CaptionRecord",
    "Checkpoint",
    "EmbeddingIndex",
    "EvalProtocol",
    "EvalReport",
    "HttpBackendConfig",
    "HttpCaptionBackend",
    "HttpReformulationBackend",
    "ImageCollection",
    "ImageRecord",
    "ModelConfig",
    "OracleCaptionBackend",
    "OracleReformulationBackend",
    "PairSamplingConfig",
    "QueryCase",
    "REFORMULATION_PROMPT_TEMPLATE",
    "ReformulationModel",
    "SyntheticWorldConfig",
    "TokenSequence",
    "TrainConfig",
    "TrainLog",
    "Triplet",
    "Vocabulary",
    "baseline_embed",
    "build_dataset",
    "build_eval_cases",
    "build_index",
    "build_vocabulary",
    "caption",
    "contrastive_loss",
    "embed_query",
    "embed_target",
    "ema_update",
    "evaluate",
    "export_gallery",
    "finetune_combiner",
    "fuse",
    "generate_world",
    "init_checkpoint",
    "load_checkpoint",
    "load_eval_cases",
    "load_triplets",
    "loss_gradient",
    "recall_at_k",
    "recall_subset_at_k",
    "reformulate",
    "render_reformulation_prompt",
    "retrieve",
    "sample_pairs",
    "save_checkpoint",
    "train",
]
