"""Small decoder-only language model consuming mixed vision/text embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Block, Embedding, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class LmConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 32

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class ToyLM(Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.token_embed = Embedding(rng, cfg.vocab_size, d)
        self.pos_embed = Embedding(rng, cfg.max_seq_len, d)
        self.blocks = [Block(rng, d, cfg.heads) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)
        self.head = Linear(rng, d, cfg.vocab_size)

    def embed(self, ids) -> Tensor:
        return self.token_embed(np.asarray(ids, dtype=np.int64))

    def forward(self, input_embeds: Tensor) -> Tensor:
        """B x S x d embeddings -> B x S x V next-token logits (causal)."""
        if input_embeds.ndim == 2:
            input_embeds = input_embeds.reshape(1, *input_embeds.shape)
        length = input_embeds.shape[1]
        if length > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = input_embeds + self.pos_embed(np.arange(length))
        allowed = causal_mask(length)[None, None]
        for block in self.blocks:
            x = block(x, allowed=allowed)
        return self.head(self.final_norm(x))


def lm_forward(lm: ToyLM, input_embeds: Tensor) -> Tensor:
    return lm(input_embeds)


def lm_loss(logits: Tensor, targets, label_mask) -> Tensor:
    """Next-token cross entropy at label positions, averaged over their count.

    ``label_mask[b, q]`` marks token ``targets[b, q]`` as predicted from the
    logits at position ``q - 1``.
    """
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
    b, s, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(b, s)
    label_mask = np.asarray(label_mask, dtype=bool).reshape(b, s)
    if s < 2 or not label_mask[:, 1:].any():
        raise ValueError("lm_loss: no predicted positions")
    shifted = np.where(label_mask[:, 1:], targets[:, 1:], T.IGNORE_INDEX)
    return T.cross_entropy(logits[:, :-1].reshape(b * (s - 1), v), shifted.reshape(-1))


def greedy_decode(
    lm: ToyLM,
    vision_tokens: Tensor | None,
    prompt_ids,
    max_new_tokens: int,
    eos_id: int,
) -> list[int]:
    """Argmax decoding (ties -> lowest id) until EOS or the token budget."""
    prompt = [int(i) for i in prompt_ids]
    if not prompt:
        raise ValueError("greedy_decode needs a non-empty prompt")
    out: list[int] = []
    with T.no_grad():
        prefix = None
        if vision_tokens is not None:
            prefix = vision_tokens if vision_tokens.ndim == 3 else vision_tokens.reshape(1, *vision_tokens.shape)
        for _ in range(max_new_tokens):
            text = lm.embed(np.asarray([prompt + out]))
            seq = text if prefix is None else T.concat([prefix, text], axis=1)
            logits = lm(seq)
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            if nxt == eos_id:
                break
    return out
