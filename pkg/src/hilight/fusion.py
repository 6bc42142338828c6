"""Dual-tower token mining: keyframe features query the full video memory.

Three connector structures are supported:

* ``S1`` cross attention -> Linear
* ``S2`` cross attention -> Linear -> ReLU -> Linear
* ``S3`` per-tower Linear projectors -> cross attention -> Linear -> ReLU -> Linear
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, MultiHeadAttention
from .tensor import ShapeError, Tensor

STRUCTURES = ("S1", "S2", "S3")


@dataclass
class TokenMiningConfig:
    structure: str = "S2"
    d_video: int = 32
    d_key: int = 32
    d_lm: int = 64
    heads: int = 4
    d_common: int | None = None  # S3 projector width; defaults to d_lm
    include_proxies: bool = True

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown token-mining structure {self.structure!r}; expected one of {STRUCTURES}")
        if self.query_dim % self.heads:
            raise ValueError(f"cross-attention width {self.query_dim} not divisible by {self.heads} heads")

    @property
    def query_dim(self) -> int:
        if self.structure == "S3":
            return self.d_lm if self.d_common is None else self.d_common
        return self.d_key


@dataclass
class VisionTokens:
    tokens: Tensor  # B x K x d_lm
    structure: str


def cross_attend(attn: MultiHeadAttention, query: Tensor, keys_values: Tensor) -> Tensor:
    """Queries (B x K x d_q) attend over every memory row (B x N_v x d_v); no positional terms."""
    if keys_values.shape[-2] == 0:
        raise ValueError("cross attention needs at least one key/value row")
    return attn(query, memory=keys_values)


class TokenMining(Module):
    def __init__(self, cfg: TokenMiningConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_q = cfg.query_dim
        if cfg.structure == "S3":
            self.proj_video = Linear(rng, cfg.d_video, d_q)
            self.proj_key = Linear(rng, cfg.d_key, d_q)
            self.attn = MultiHeadAttention(rng, d_q, cfg.heads, d_memory=d_q)
        else:
            self.attn = MultiHeadAttention(rng, d_q, cfg.heads, d_memory=cfg.d_video)
        self.fc1 = Linear(rng, d_q, cfg.d_lm)
        if cfg.structure != "S1":
            self.fc2 = Linear(rng, cfg.d_lm, cfg.d_lm)

    def forward(self, video_final: Tensor, keyframe_feats: Tensor) -> VisionTokens:
        if video_final.ndim == 2:
            video_final = video_final.reshape(1, *video_final.shape)
        if keyframe_feats.ndim == 2:
            keyframe_feats = keyframe_feats.reshape(1, *keyframe_feats.shape)
        memory, query = video_final, keyframe_feats
        if self.cfg.structure == "S3":
            memory, query = self.proj_video(memory), self.proj_key(query)
        x = self.fc1(cross_attend(self.attn, query, memory))
        if self.cfg.structure != "S1":
            x = self.fc2(T.relu(x))
        return VisionTokens(x, self.cfg.structure)


def token_mining(mining: TokenMining, video_final: Tensor, keyframe_feats: Tensor) -> VisionTokens:
    return mining(video_final, keyframe_feats)


def video_memory(final_tokens: Tensor, proxies: int, include_proxies: bool = True) -> Tensor:
    return final_tokens if include_proxies or proxies == 0 else final_tokens[:, proxies:]


def assemble_lm_input(
    vision: VisionTokens | Tensor,
    text_embeds: Tensor,
    prompt_lengths,
    text_pad_mask=None,
) -> tuple[Tensor, np.ndarray]:
    """Concatenate vision tokens before text embeddings.

    Returns the (B x (K + L) x d) sequence and a boolean label mask that is
    true only at response-token positions (text that is neither prompt nor
    padding).
    """
    tokens = vision.tokens if isinstance(vision, VisionTokens) else vision
    if tokens.ndim == 2:
        tokens = tokens.reshape(1, *tokens.shape)
    if text_embeds.ndim == 2:
        text_embeds = text_embeds.reshape(1, *text_embeds.shape)
    if tokens.shape[-1] != text_embeds.shape[-1]:
        raise ShapeError(f"vision width {tokens.shape[-1]} != text width {text_embeds.shape[-1]}")
    b, k = tokens.shape[:2]
    length = text_embeds.shape[1]
    prompt_lengths = np.broadcast_to(np.asarray(prompt_lengths, dtype=np.int64), (b,))
    pads = np.zeros((b, length), dtype=bool) if text_pad_mask is None else np.asarray(text_pad_mask, dtype=bool)
    response = (np.arange(length)[None, :] >= prompt_lengths[:, None]) & ~pads.reshape(b, length)
    label_mask = np.concatenate([np.zeros((b, k), dtype=bool), response], axis=1)
    return T.concat([tokens, text_embeds], axis=1), label_mask
