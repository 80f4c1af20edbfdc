"""Text-guided embedding reformulation network.

A small vision transformer whose every block injects the instruction text
through cross-attention (text as keys/values, image patches as queries),
plus a text encoder, a predictor head that fuses pooled image and text
features, and an EMA target copy of the whole thing for stop-gradient
target embeddings. Target images are embedded with a reserved null-text
token so one architecture serves both sides of the retrieval pair.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from .artifacts import load_archive, save_archive
from .errors import InvalidConfig, ShapeMismatch, TokenOutOfRange
from .records import ImageRecord
from .tokenizer import TokenSequence, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture sizes and training-relevant scalars."""

    image_size: int = 32
    patch_size: int = 8
    n_channels: int = 3
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    mlp_ratio: int = 4
    text_vocab_size: int = 64
    max_text_len: int = 16
    text_layers: int = 2
    null_token_id: int = 0
    ema_momentum: float = 0.996
    temperature_init: float = 10.0
    temperature_learnable: bool = False
    lambda_init: float = 0.5
    use_cross_attention: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size != 0:
            raise InvalidConfig("patch_size must divide image_size")
        if not 0 <= self.null_token_id < self.text_vocab_size:
            raise InvalidConfig("null_token_id must be a valid token id")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise InvalidConfig("ema_momentum must be in [0, 1]")
        if self.temperature_init <= 0:
            raise InvalidConfig("temperature_init must be > 0")
        if not 0.0 <= self.lambda_init <= 1.0:
            raise InvalidConfig("lambda_init must be in [0, 1]")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in self.__dataclass_fields__.values()}  # type: ignore[attr-defined]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class _Mlp(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TextBlock(nn.Module):
    """Pre-norm transformer encoder block for the text path."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.mlp = _Mlp(d_model, d_model * mlp_ratio)

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))


class TextTransformer(nn.Module):
    """Instruction text encoder; pools at the last real token position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.text_vocab_size
        self.token_embedding = nn.Embedding(cfg.text_vocab_size, cfg.d_model)
        self.position_embedding = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.d_model))
        self.blocks = nn.ModuleList(
            TextBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers)
        )
        self.norm_final = nn.LayerNorm(cfg.d_model)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if ids.numel() == 0:
            raise TokenOutOfRange("empty token batch")
        if int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size:
            raise TokenOutOfRange(
                f"token ids must lie in [0, {self.vocab_size}), got "
                f"[{int(ids.min())}, {int(ids.max())}]"
            )
        length = ids.shape[1]
        if length > self.position_embedding.shape[0]:
            raise ShapeMismatch(
                f"sequence length {length} exceeds max_text_len "
                f"{self.position_embedding.shape[0]}"
            )
        x = self.token_embedding(ids) + self.position_embedding[:length]
        key_padding_mask = ~mask
        for block in self.blocks:
            x = block(x, key_padding_mask)
        x = self.norm_final(x)
        # Sequences are padded only at the end, so the last True position
        # in the mask is the end-of-sequence token.
        eos = mask.long().sum(dim=1) - 1
        pooled = x[torch.arange(x.shape[0], device=x.device), eos]
        return x, pooled


class ReformBlock(nn.Module):
    """One reformulation block: self-attention, text cross-attention, MLP.

    Each sub-layer is pre-norm with a residual connection. The
    cross-attention output projection is zero-initialized, so a fresh
    block is exactly a plain ViT block until training moves it.
    """

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int, use_cross_attention: bool = True):
        super().__init__()
        self.d_model = d_model
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        if use_cross_attention:
            self.norm_cross = nn.LayerNorm(d_model)
            self.cross_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        else:
            self.norm_cross = None
            self.cross_attn = None
        self.norm_mlp = nn.LayerNorm(d_model)
        self.mlp = _Mlp(d_model, d_model * mlp_ratio)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        text_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeMismatch(f"visual width {x.shape[-1]} != d_model {self.d_model}")
        if text.shape[-1] != self.d_model:
            raise ShapeMismatch(f"text width {text.shape[-1]} != d_model {self.d_model}")
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        if self.cross_attn is not None:
            key_padding_mask = None if text_mask is None else ~text_mask
            h = self.norm_cross(x)
            x = x + self.cross_attn(h, text, text, key_padding_mask=key_padding_mask,
                                    need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))


class VisualEncoder(nn.Module):
    """Patch embedding followed by the stack of reformulation blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            cfg.n_channels, cfg.d_model, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.position_embedding = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_model))
        self.blocks = nn.ModuleList(
            ReformBlock(cfg.d_model, cfg.n_heads, cfg.mlp_ratio, cfg.use_cross_attention)
            for _ in range(cfg.n_blocks)
        )
        self.norm_final = nn.LayerNorm(cfg.d_model)

    def forward(
        self, images: torch.Tensor, text: torch.Tensor, text_mask: Optional[torch.Tensor]
    ) -> torch.Tensor:
        expected = (self.cfg.n_channels, self.cfg.image_size, self.cfg.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ShapeMismatch(f"expected images Bx{expected}, got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self.position_embedding
        for block in self.blocks:
            x = block(x, text, text_mask)
        return self.norm_final(x)


class Predictor(nn.Module):
    """MLP head over concatenated mean-pooled visual and pooled text features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.fc1 = nn.Linear(2 * d, d)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(d, d)

    def forward(self, z: torch.Tensor, text_pooled: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != text_pooled.shape[-1]:
            raise ShapeMismatch(
                f"visual width {z.shape[-1]} != text width {text_pooled.shape[-1]}"
            )
        pooled = z.mean(dim=-2)
        return self.fc2(self.act(self.fc1(torch.cat([pooled, text_pooled], dim=-1))))


class ReformulationModel(nn.Module):
    """Full query/target embedder: text encoder + visual encoder + predictor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextTransformer(cfg)
        self.visual_encoder = VisualEncoder(cfg)
        self.predictor = Predictor(cfg)

    def forward(
        self, images: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        text_seq, text_pooled = self.text_encoder(ids, mask)
        z = self.visual_encoder(images, text_seq, mask)
        return self.predictor(z, text_pooled), text_pooled

    def patch_dtype(self) -> torch.dtype:
        return self.visual_encoder.patch_embed.weight.dtype


def _init_weights(model: ReformulationModel) -> None:
    for module in model.modules():
        if isinstance(module, nn.MultiheadAttention):
            nn.init.xavier_uniform_(module.in_proj_weight)
            nn.init.zeros_(module.in_proj_bias)
        elif isinstance(module, (nn.Linear, nn.Conv2d)):
            nn.init.xavier_uniform_(module.weight)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)
    nn.init.normal_(model.text_encoder.position_embedding, std=0.02)
    nn.init.normal_(model.visual_encoder.position_embedding, std=0.02)
    # Zero cross-attention outputs: the untrained visual path ignores text.
    for block in model.visual_encoder.blocks:
        if block.cross_attn is not None:
            nn.init.zeros_(block.cross_attn.out_proj.weight)
            nn.init.zeros_(block.cross_attn.out_proj.bias)


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    return math.log(p / (1.0 - p))


@dataclass
class Checkpoint:
    """Online and EMA-target networks plus the loss/fusion scalars."""

    config: ModelConfig
    vocab: Vocabulary
    online: ReformulationModel
    target: ReformulationModel
    log_tau: torch.Tensor
    lambda_logit: torch.Tensor
    step: int = 0

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    @property
    def lam(self) -> torch.Tensor:
        return torch.sigmoid(self.lambda_logit)


def init_checkpoint(cfg: ModelConfig, vocab: Vocabulary) -> Checkpoint:
    """Seeded initialization; the target starts as an exact copy of the online net."""
    cfg = replace(cfg, text_vocab_size=len(vocab))
    cfg.validate()
    torch.manual_seed(cfg.seed)
    online = ReformulationModel(cfg)
    _init_weights(online)
    target = copy.deepcopy(online)
    target.requires_grad_(False)
    log_tau = torch.tensor(math.log(cfg.temperature_init), dtype=torch.float64,
                           requires_grad=cfg.temperature_learnable)
    lambda_logit = torch.tensor(_logit(cfg.lambda_init), dtype=torch.float64)
    return Checkpoint(config=cfg, vocab=vocab, online=online, target=target,
                      log_tau=log_tau, lambda_logit=lambda_logit)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Named-array archive with a JSON header; reload is bit-exact."""
    arrays: dict[str, np.ndarray] = {}
    for prefix, model in (("online", ckpt.online), ("target", ckpt.target)):
        for name, tensor in model.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    arrays["scalar/log_tau"] = ckpt.log_tau.detach().cpu().numpy()
    arrays["scalar/lambda_logit"] = ckpt.lambda_logit.detach().cpu().numpy()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "checkpoint",
        "model_config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "step": ckpt.step,
        "tau": float(ckpt.tau),
        "lambda": float(ckpt.lam),
    }
    save_archive(path, arrays, header)


def load_checkpoint(path: str | Path) -> Checkpoint:
    arrays, header = load_archive(path)
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported checkpoint format: {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["model_config"])
    vocab = Vocabulary(tokens=list(header["vocab"]))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        online = ReformulationModel(cfg)
        target = ReformulationModel(cfg)
    for prefix, model in (("online", online), ("target", target)):
        state = {
            name[len(prefix) + 1:]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith(prefix + "/")
        }
        model.load_state_dict(state, strict=True)
    target.requires_grad_(False)
    log_tau = torch.from_numpy(arrays["scalar/log_tau"].copy())
    log_tau.requires_grad_(cfg.temperature_learnable)
    lambda_logit = torch.from_numpy(arrays["scalar/lambda_logit"].copy())
    return Checkpoint(config=cfg, vocab=vocab, online=online, target=target,
                      log_tau=log_tau, lambda_logit=lambda_logit, step=int(header["step"]))


def ema_update(
    online_params: Mapping[str, torch.Tensor],
    target_params: Mapping[str, torch.Tensor],
    m: float,
) -> dict[str, torch.Tensor]:
    """Pure form: target' = m * target + (1 - m) * online, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise InvalidConfig("ema momentum must be in [0, 1]")
    if set(online_params) != set(target_params):
        raise ShapeMismatch("online and target parameter trees have different keys")
    out = {}
    for key, online in online_params.items():
        target = target_params[key]
        if online.shape != target.shape:
            raise ShapeMismatch(f"shape mismatch at {key!r}: {online.shape} vs {target.shape}")
        out[key] = m * target + (1.0 - m) * online
    return out


@torch.no_grad()
def ema_update_(online: nn.Module, target: nn.Module, m: float) -> None:
    """In-place EMA step over all parameters of the target module."""
    if not 0.0 <= m <= 1.0:
        raise InvalidConfig("ema momentum must be in [0, 1]")
    for (name_o, p_o), (name_t, p_t) in zip(
        online.named_parameters(), target.named_parameters()
    ):
        if name_o != name_t or p_o.shape != p_t.shape:
            raise ShapeMismatch(f"parameter trees diverge at {name_o!r}/{name_t!r}")
        p_t.mul_(m).add_(p_o, alpha=1.0 - m)


def image_to_tensor(image: ImageRecord, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWxC [0,1] array to CxHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.pixels)).permute(2, 0, 1).to(dtype)


def collate_tokens(
    sequences: list[TokenSequence], pad_id: int = 0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad to the longest sequence; mask marks real tokens."""
    length = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), length), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = torch.tensor(seq.ids, dtype=torch.long)
        mask[row, : len(seq)] = True
    return ids, mask


def _pick(ckpt: Checkpoint, use_ema: bool) -> ReformulationModel:
    return ckpt.target if use_ema else ckpt.online


@torch.no_grad()
def encode_text(
    tokens: TokenSequence, ckpt: Checkpoint, use_ema: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Text embedding sequence and its pooled vector for one token sequence."""
    model = _pick(ckpt, use_ema)
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    seq, pooled = model.text_encoder(ids, mask)
    return seq[0].detach(), pooled[0].detach()


@torch.no_grad()
def encode(
    image: ImageRecord, tokens: TokenSequence, ckpt: Checkpoint, use_ema: bool = False
) -> torch.Tensor:
    """Final visual sequence for one image conditioned on one text."""
    model = _pick(ckpt, use_ema)
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    text_seq, _ = model.text_encoder(ids, mask)
    images = image_to_tensor(image, model.patch_dtype()).unsqueeze(0)
    return model.visual_encoder(images, text_seq, mask)[0].detach()


@torch.no_grad()
def predict(
    z: torch.Tensor, text_pooled: torch.Tensor, ckpt: Checkpoint, use_ema: bool = False
) -> torch.Tensor:
    """Predictor head on a single visual sequence and pooled text vector."""
    model = _pick(ckpt, use_ema)
    return model.predictor(z.unsqueeze(0), text_pooled.unsqueeze(0))[0].detach()


@torch.no_grad()
def embed_query(image: ImageRecord, text: str, ckpt: Checkpoint) -> torch.Tensor:
    """Embed a (reference image, reformulation text) query with online weights."""
    model = ckpt.online
    tokens = ckpt.vocab.encode(text, ckpt.config.max_text_len)
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    images = image_to_tensor(image, model.patch_dtype()).unsqueeze(0)
    e, _ = model(images, ids, mask)
    return e[0].detach()


@torch.no_grad()
def embed_target(image: ImageRecord, ckpt: Checkpoint, use_ema: bool = True) -> torch.Tensor:
    """Embed a gallery/target image through the null-text path.

    use_ema selects the EMA target copy (training) or the online weights
    (evaluation and the no-EMA ablation). Never carries gradient.
    """
    model = _pick(ckpt, use_ema)
    tokens = ckpt.vocab.null_sequence()
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    images = image_to_tensor(image, model.patch_dtype()).unsqueeze(0)
    e, _ = model(images, ids, mask)
    return e[0].detach()
