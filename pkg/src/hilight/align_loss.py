"""Global contrastive loss plus the fine-grained token-to-patch local loss.

The local loss groups, for every caption token, the patches most similar to
it (min-max normalized similarities, sparsified at a threshold, renormalized)
and contrasts each token against the grouped embeddings of all tokens in the
same caption. ``PlacementConfig.mode`` picks which encoder features feed it:

* ``E1`` final-layer features, padding excluded only
* ``E2`` final-layer features, padding and abstract tokens excluded
* ``E3`` embedding-layer features, padding and abstract tokens excluded
* ``E4`` every encoder layer, weighted 0.1 -> 1.0, same masking as E2
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import EncoderOutput, TokenSequence
from .tensor import ATTENTION_MASK_VALUE, Tensor

MODES = ("E1", "E2", "E3", "E4")
MINMAX_EPSILON = 1e-8


@dataclass
class PlacementConfig:
    mode: str = "E2"
    local_weight: float = 1.0
    tau_global: float = 0.07
    tau_local: float = 0.07
    threshold: float | None = None  # None -> 1 / number of patches
    mask_abstract_in_attention: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown placement mode {self.mode!r}; expected one of {MODES}")
        if self.local_weight < 0:
            raise ValueError("local_weight must be non-negative")
        if self.tau_global <= 0 or self.tau_local <= 0:
            raise ValueError("temperatures must be positive")

    @property
    def use_language_mask(self) -> bool:
        return self.mode != "E1"


@dataclass
class AlignmentWeights:
    weights: Tensor  # B x L x N
    threshold: float
    retained: np.ndarray  # B x L nonzero counts


@dataclass
class LossBreakdown:
    global_loss: Tensor
    local: Tensor
    total: Tensor
    per_layer_local: list[Tensor] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {"global": self.global_loss.item(), "local": self.local.item(), "total": self.total.item()}


def global_contrastive_loss(video_embeds: Tensor, text_embeds: Tensor, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over a batch of matched (video, text) embeddings."""
    b = video_embeds.shape[0]
    if b == 0:
        raise ValueError("global contrastive loss needs a non-empty batch")
    logits = (video_embeds @ text_embeds.transpose()) * (1.0 / tau)
    targets = np.arange(b)
    return 0.5 * (T.cross_entropy(logits, targets) + T.cross_entropy(logits.transpose(), targets))


def _batched(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def local_alignment_weights(
    patch_feats: Tensor,
    token_feats: Tensor,
    language_mask,
    threshold: float | None = None,
) -> AlignmentWeights:
    """Sparse token -> patch weights from token-patch similarity.

    Inputs may be unbatched (N x d, L x d, L) or batched. Masked rows are all
    zero. A row whose similarities are all equal falls back to uniform
    weights, and the row maximum is always retained, so every unmasked row
    keeps at least one patch.
    """
    patch_feats, token_feats = _batched(patch_feats), _batched(token_feats)
    mask = np.asarray(language_mask, dtype=bool).reshape(token_feats.shape[:2])
    n = patch_feats.shape[1]
    if n == 0:
        raise ValueError("no patches to align against")
    sigma = 1.0 / n if threshold is None else float(threshold)
    sims = token_feats @ patch_feats.swapaxes(-1, -2)
    lo = T.tmin(sims, axis=-1, keepdims=True)
    hi = T.tmax(sims, axis=-1, keepdims=True)
    scaled = (sims - lo) / (hi - lo + MINMAX_EPSILON)
    keep = (scaled.data >= sigma) | (sims.data == hi.data)
    flat = (hi.data - lo.data) == 0.0
    raw = T.masked_fill(scaled * keep, np.broadcast_to(flat, sims.shape), 1.0)
    masked_rows = mask[..., None]
    raw = T.masked_fill(raw, masked_rows, 0.0)
    denom = T.masked_fill(raw.sum(axis=-1, keepdims=True), masked_rows, 1.0)
    weights = raw / denom
    retained = (weights.data > 0).sum(axis=-1)
    return AlignmentWeights(weights, sigma, retained)


def grouped_patch_embeddings(w: AlignmentWeights, patch_feats: Tensor) -> Tensor:
    """Alignment-weighted patch sums per token, unit-normalized (masked rows stay zero)."""
    return T.l2_normalize(w.weights @ _batched(patch_feats), axis=-1)


def local_contrastive_loss(token_feats: Tensor, grouped: Tensor, language_mask, tau: float = 0.07) -> Tensor:
    """Symmetric token-vs-grouped-patch InfoNCE restricted to unmasked tokens.

    Per-sample losses are averaged over the batch.
    """
    token_feats, grouped = _batched(token_feats), _batched(grouped)
    b, length = token_feats.shape[:2]
    mask = np.asarray(language_mask, dtype=bool).reshape(b, length)
    valid = ~mask
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("local contrastive loss: no grounded tokens in a sample")
    logits = (token_feats @ grouped.swapaxes(-1, -2)) * (1.0 / tau)
    hidden_cols = np.broadcast_to(mask[:, None, :], logits.shape)
    diag = np.arange(length)
    scale = valid / counts[:, None]
    directions = []
    for view in (logits, logits.swapaxes(-1, -2)):
        logp = T.log_softmax(T.masked_fill(view, hidden_cols, ATTENTION_MASK_VALUE), axis=-1)
        directions.append(-(logp[:, diag, diag] * scale).sum(axis=1))
    per_sample = 0.5 * (directions[0] + directions[1])
    return per_sample.mean()


def layer_weight_schedule(layers: int) -> list[float]:
    """Linearly increasing per-layer local-loss weights, 0.1 at layer 1 to 1.0 at the last."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if layers == 1:
        return [1.0]
    return [(1 + 9 * (l - 1) / (layers - 1)) / 10 for l in range(1, layers + 1)]


def local_mask(cfg: PlacementConfig, tokens: TokenSequence) -> np.ndarray:
    tokens = tokens.batched()
    return tokens.language_mask if cfg.use_language_mask else tokens.pad_mask


def placement_layers(cfg: PlacementConfig, layers: int) -> list[tuple[int, float]]:
    """(hidden-state index, weight) pairs feeding the local loss."""
    if cfg.mode in ("E1", "E2"):
        return [(layers, 1.0)]
    if cfg.mode == "E3":
        return [(0, 1.0)]
    return list(zip(range(1, layers + 1), layer_weight_schedule(layers)))


def layer_features(video_out: EncoderOutput, text_out: EncoderOutput, layer: int) -> tuple[Tensor, Tensor]:
    """Unit-normalized (patch, token) features of one hidden-state layer, proxies dropped."""
    patches = T.l2_normalize(video_out.content(layer), axis=-1)
    tokens = T.l2_normalize(text_out.hidden_states[layer], axis=-1)
    return patches, tokens


def local_loss_at(
    patches: Tensor, tokens: Tensor, mask: np.ndarray, tau: float, threshold: float | None = None
) -> Tensor:
    w = local_alignment_weights(patches, tokens, mask, threshold)
    return local_contrastive_loss(tokens, grouped_patch_embeddings(w, patches), mask, tau)


def placement_local_loss(
    cfg: PlacementConfig, video_out: EncoderOutput, text_out: EncoderOutput, tokens: TokenSequence
) -> tuple[Tensor, list[Tensor]]:
    """Local loss at the configured placement; the list holds per-layer terms for E4."""
    mask = local_mask(cfg, tokens)
    layers = len(text_out.hidden_states) - 1
    total = None
    per_layer = []
    for layer, weight in placement_layers(cfg, layers):
        patches, toks = layer_features(video_out, text_out, layer)
        term = local_loss_at(patches, toks, mask, cfg.tau_local, cfg.threshold)
        per_layer.append(term)
        total = term * weight if total is None else total + term * weight
    return total, (per_layer if cfg.mode == "E4" else [])


def total_alignment_loss(
    cfg: PlacementConfig, video_out: EncoderOutput, text_out: EncoderOutput, tokens: TokenSequence
) -> LossBreakdown:
    g = global_contrastive_loss(video_out.global_embed, text_out.global_embed, cfg.tau_global)
    local, per_layer = placement_local_loss(cfg, video_out, text_out, tokens)
    return LossBreakdown(g, local, g + local * cfg.local_weight, per_layer)


def evaluation_layer(cfg: PlacementConfig, layers: int) -> int:
    """Layer whose features are inspected for retrieval and noise (final layer for E4)."""
    return 0 if cfg.mode == "E3" else layers
