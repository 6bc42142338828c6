"""Model assemblies: the alignment-stage towers and the dual-tower VLM."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, KeyframeTower, TextTower, VideoTower, sample_keyframes
from .fusion import TokenMining, TokenMiningConfig, VisionTokens, assemble_lm_input, video_memory
from .lm import LmConfig, ToyLM, greedy_decode, lm_loss
from .nn import Module
from .synthdata import DESCRIBE, EOS, PAD, SyntheticSample
from .tensor import Tensor


class AlignmentModel(Module):
    """Video and text towers trained jointly, plus the separately held keyframe tower."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.video = VideoTower(cfg, rng)
        self.text = TextTower(cfg, rng)
        self.keyframe = KeyframeTower(cfg, rng)


def caption_task(sample: SyntheticSample) -> tuple[list[int], list[int]]:
    return [DESCRIBE], sample.caption_ids + [EOS]


def qa_task(sample: SyntheticSample) -> tuple[list[int], list[int]]:
    return list(sample.question), list(sample.answer)


TASKS = {"vlm-stage1": caption_task, "vlm-stage2": qa_task}


def text_batch(pairs: list[tuple[list[int], list[int]]], length: int):
    """Right-padded prompt+response ids, their pad mask and per-row prompt lengths."""
    b = len(pairs)
    ids = np.full((b, length), PAD, dtype=np.int64)
    pad = np.ones((b, length), dtype=bool)
    prompt_lengths = np.zeros(b, dtype=np.int64)
    for i, (prompt, response) in enumerate(pairs):
        seq = prompt + response
        if len(seq) > length:
            raise ValueError(f"text of length {len(seq)} exceeds {length}")
        ids[i, : len(seq)] = seq
        pad[i, : len(seq)] = False
        prompt_lengths[i] = len(prompt)
    return ids, pad, prompt_lengths


class VisionLanguageModel(Module):
    def __init__(
        self,
        enc_cfg: EncoderConfig,
        lm_cfg: LmConfig,
        mining_cfg: TokenMiningConfig,
        keyframes: int,
        rng: np.random.Generator,
    ):
        self.keyframes = keyframes
        self.video = VideoTower(enc_cfg, rng)
        self.keyframe = KeyframeTower(enc_cfg, rng)
        # LM before the connector: the same seed gives the same LM whatever the connector size
        self.lm = ToyLM(lm_cfg, rng)
        self.mining = TokenMining(mining_cfg, rng)

    def tower_features(self, clips: np.ndarray) -> tuple[Tensor, Tensor]:
        """Video memory (B x N_v x d) and keyframe features (B x K x d)."""
        out = self.video(clips)
        memory = video_memory(out.final_tokens, out.prefix, self.mining.cfg.include_proxies)
        frames, _ = sample_keyframes(clips, self.keyframes)
        return memory, self.keyframe(frames)

    def vision_tokens(self, memory: Tensor, keys: Tensor) -> VisionTokens:
        return self.mining(memory, keys)

    def forward(self, memory: Tensor, keys: Tensor, ids: np.ndarray, pad: np.ndarray, prompt_lengths) -> Tensor:
        """Mean next-token loss over response tokens."""
        vision = self.vision_tokens(memory, keys)
        seq, label_mask = assemble_lm_input(vision, self.lm.embed(ids), prompt_lengths, pad)
        logits = self.lm(seq)
        targets = np.concatenate([np.zeros(vision.tokens.shape[:2], dtype=np.int64), ids], axis=1)
        return lm_loss(logits, targets, label_mask)

    def loss_from_clips(self, clips: np.ndarray, ids, pad, prompt_lengths) -> Tensor:
        memory, keys = self.tower_features(clips)
        return self(memory, keys, ids, pad, prompt_lengths)

    def answer(self, memory: Tensor, keys: Tensor, prompt: list[int], max_new_tokens: int) -> list[int]:
        with T.no_grad():
            vision = self.vision_tokens(memory, keys).tokens
        return greedy_decode(self.lm, vision, prompt, max_new_tokens, EOS)
