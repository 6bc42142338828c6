"""Toy video, text and keyframe towers.

The video tower follows the proxy-token design: a few learned proxy tokens
attend across the whole clip while ordinary patch tokens only see the proxies
and the patches of their own frame. All towers are batched; single-clip
helpers add a leading batch axis of 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Block, Embedding, LayerNorm, Linear, Module, parameter
from .tensor import Tensor


@dataclass
class EncoderConfig:
    hidden_dim: int = 32
    layers: int = 4
    heads: int = 4
    patch_size: int = 4
    proxies: int = 4
    vocab_size: int = 64
    max_seq_len: int = 16
    proj_dim: int = 32
    image_size: int = 16
    channels: int = 3
    max_frames: int = 8

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.proxies < 1:
            raise ValueError("video tower needs at least one proxy token")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class TokenSequence:
    """Caption tokens; arrays are 1-D for one sequence or 2-D for a batch."""

    ids: np.ndarray
    pad_mask: np.ndarray
    abstract_mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        self.abstract_mask = np.asarray(self.abstract_mask, dtype=bool)
        if not (self.ids.shape == self.pad_mask.shape == self.abstract_mask.shape):
            raise ValueError("ids, pad_mask and abstract_mask must share a shape")
        if (self.abstract_mask & self.pad_mask).any():
            raise ValueError("a padding position cannot be abstract")

    def batched(self) -> TokenSequence:
        if self.ids.ndim == 2:
            return self
        return TokenSequence(self.ids[None], self.pad_mask[None], self.abstract_mask[None])

    @property
    def language_mask(self) -> np.ndarray:
        """True where a token is excluded from the local loss under masking."""
        return self.pad_mask | self.abstract_mask


def stack_sequences(seqs: list[TokenSequence]) -> TokenSequence:
    return TokenSequence(
        np.stack([s.ids for s in seqs]),
        np.stack([s.pad_mask for s in seqs]),
        np.stack([s.abstract_mask for s in seqs]),
    )


@dataclass
class EncoderOutput:
    hidden_states: list[Tensor]
    global_embed: Tensor
    prefix: int = 0
    attentions: list[Tensor] = field(default_factory=list)

    @property
    def final_tokens(self) -> Tensor:
        return self.hidden_states[-1]

    def content(self, layer: int = -1) -> Tensor:
        """Token features of one layer with prefix rows (proxies) removed."""
        states = self.hidden_states[layer]
        return states[:, self.prefix :] if self.prefix else states


def validate_clip(clip: np.ndarray, patch_size: int) -> None:
    if clip.ndim not in (4, 5):
        raise ValueError(f"clip must be T x H x W x C (optionally batched), got shape {clip.shape}")
    h, w = clip.shape[-3], clip.shape[-2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    if clip.shape[-4] < 1:
        raise ValueError("clip has no frames")


def patchify(clip: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten a (B x) T x H x W x C clip into (B x) T*P_f x (ps*ps*C) patches.

    Patch ``t * P_f + row * (W / ps) + col`` covers rows
    ``row*ps:(row+1)*ps`` and columns ``col*ps:(col+1)*ps`` of frame ``t``.
    """
    clip = np.asarray(clip, dtype=np.float64)
    validate_clip(clip, patch_size)
    lead = clip.shape[:-4]
    t, h, w, c = clip.shape[-4:]
    ps = patch_size
    grid = clip.reshape(*lead, t, h // ps, ps, w // ps, ps, c)
    n = len(lead)
    grid = np.moveaxis(grid, n + 3, n + 2)  # (..., t, hr, wr, ps, ps, c)
    return grid.reshape(*lead, t * (h // ps) * (w // ps), ps * ps * c)


def build_vip_attention_mask(frames: int, patches_per_frame: int, proxies: int) -> np.ndarray:
    """Allowed-attention matrix over [proxies, frame-major patches].

    Proxy rows see everything; a patch row sees every proxy and the patches
    of its own frame.
    """
    if frames < 1 or patches_per_frame < 1 or proxies < 0:
        raise ValueError("frames and patches_per_frame must be >= 1, proxies >= 0")
    size = proxies + frames * patches_per_frame
    mask = np.zeros((size, size), dtype=bool)
    mask[:proxies, :] = True
    mask[:, :proxies] = True
    for t in range(frames):
        lo = proxies + t * patches_per_frame
        mask[lo : lo + patches_per_frame, lo : lo + patches_per_frame] = True
    return mask


def sample_keyframes(clip: np.ndarray, count: int) -> tuple[np.ndarray, list[int]]:
    """Uniform-stride keyframes at ``floor(i * T / K)``."""
    frames = clip.shape[-4]
    if not 1 <= count <= frames:
        raise ValueError(f"cannot sample {count} keyframes from {frames} frames")
    indices = [(i * frames) // count for i in range(count)]
    return np.take(clip, indices, axis=-4), indices


class VideoTower(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_dim, d)
        self.spatial_pos = Embedding(rng, cfg.patches_per_frame, d)
        self.temporal_pos = Embedding(rng, cfg.max_frames, d)
        self.proxy_tokens = parameter(rng.normal(0.0, 0.02, size=(cfg.proxies, d)))
        self.proxy_pos = parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.blocks = [Block(rng, d, cfg.heads) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.proj_dim, bias=False)

    def forward(self, clips: np.ndarray, use_proxies: bool = True, return_attentions: bool = False) -> EncoderOutput:
        """Encode a B x T x H x W x C batch.

        ``use_proxies=False`` is a diagnostic mode: no proxy tokens, so frames
        never exchange information, and pooling falls back to the patch mean.
        """
        cfg = self.cfg
        patches = patchify(clips, cfg.patch_size)
        b, n, _ = patches.shape
        frames = clips.shape[1]
        if frames > cfg.max_frames:
            raise ValueError(f"clip has {frames} frames, tower supports {cfg.max_frames}")
        per_frame = n // frames
        spatial_ids = np.tile(np.arange(per_frame), frames)
        frame_ids = np.repeat(np.arange(frames), per_frame)
        x = self.patch_embed(Tensor(patches)) + (self.spatial_pos(spatial_ids) + self.temporal_pos(frame_ids))
        m = cfg.proxies if use_proxies else 0
        if m:
            prox = T.broadcast_to(self.proxy_tokens + self.proxy_pos, (b, m, cfg.hidden_dim))
            x = T.concat([prox, x], axis=1)
        allowed = build_vip_attention_mask(frames, per_frame, m)[None, None]
        hidden = [x]
        attentions = []
        for block in self.blocks:
            if return_attentions:
                x, w = block(x, allowed=allowed, return_weights=True)
                attentions.append(w)
            else:
                x = block(x, allowed=allowed)
            hidden.append(x)
        pooled = x[:, :m].mean(axis=1) if m else x.mean(axis=1)
        embed = T.l2_normalize(self.proj(self.final_norm(pooled)), axis=-1)
        return EncoderOutput(hidden, embed, prefix=m, attentions=attentions)


class TextTower(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.token_embed = Embedding(rng, cfg.vocab_size, d)
        self.pos_embed = Embedding(rng, cfg.max_seq_len, d)
        self.blocks = [Block(rng, d, cfg.heads) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)
        self.proj = Linear(rng, d, cfg.proj_dim, bias=False)

    def forward(self, seq: TokenSequence, mask_abstract_in_attention: bool = False) -> EncoderOutput:
        """Bidirectional encoding; padding keys are excluded from attention.

        With ``mask_abstract_in_attention`` abstract tokens are also hidden
        from every query and skipped by pooling (diagnostic mode for
        masked-token invariance).
        """
        seq = seq.batched()
        b, length = seq.ids.shape
        if length > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        lengths = (~seq.pad_mask).sum(axis=1)
        if (lengths == 0).any():
            raise ValueError("cannot encode an empty (all-padding) sequence")
        if (seq.ids >= self.cfg.vocab_size).any() or (seq.ids < 0).any():
            raise ValueError("token id outside the vocabulary")
        hidden_keys = seq.pad_mask | seq.abstract_mask if mask_abstract_in_attention else seq.pad_mask
        visible = ~hidden_keys
        if not visible.any(axis=1).all():
            raise ValueError("every token of a sequence is hidden from attention")
        allowed = visible[:, None, None, :]
        x = self.token_embed(seq.ids) + self.pos_embed(np.arange(length))
        hidden = [x]
        for block in self.blocks:
            x = block(x, allowed=allowed)
            hidden.append(x)
        # last visible position: the final non-pad token unless abstract tokens are hidden
        pool_at = length - 1 - np.argmax(visible[:, ::-1], axis=1)
        last = x[np.arange(b), pool_at]
        embed = T.l2_normalize(self.proj(self.final_norm(last)), axis=-1)
        return EncoderOutput(hidden, embed)


class KeyframeTower(Module):
    """Single-frame image transformer with class-token pooling, frames encoded independently."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_dim, d)
        self.pos_embed = Embedding(rng, cfg.patches_per_frame + 1, d)
        self.cls_token = parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.blocks = [Block(rng, d, cfg.heads) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)

    def forward(self, frames: np.ndarray) -> Tensor:
        """B x K x H x W x C keyframes -> B x K x d pooled, unit-norm features."""
        frames = np.asarray(frames, dtype=np.float64)
        b, k = frames.shape[:2]
        flat = frames.reshape(b * k, 1, *frames.shape[2:])
        patches = patchify(flat, self.cfg.patch_size)  # (b*k, P_f, pdim)
        x = self.patch_embed(Tensor(patches))
        cls = T.broadcast_to(self.cls_token, (b * k, 1, self.cfg.hidden_dim))
        x = T.concat([cls, x], axis=1) + self.pos_embed(np.arange(x.shape[1] + 1))
        for block in self.blocks:
            x = block(x)
        pooled = T.l2_normalize(self.final_norm(x[:, 0]), axis=-1)
        return pooled.reshape(b, k, self.cfg.hidden_dim)


def encode_video(tower: VideoTower, clip: np.ndarray, **kwargs) -> EncoderOutput:
    clip = np.asarray(clip, dtype=np.float64)
    return tower(clip[None] if clip.ndim == 4 else clip, **kwargs)


def encode_text(tower: TextTower, seq: TokenSequence, **kwargs) -> EncoderOutput:
    return tower(seq, **kwargs)


def encode_keyframes(tower: KeyframeTower, frames: np.ndarray) -> Tensor:
    frames = np.asarray(frames, dtype=np.float64)
    return tower(frames[None] if frames.ndim == 4 else frames)
