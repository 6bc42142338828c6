"""Validation metrics shared by the training loops and ``eval``."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..align_loss import (
    PlacementConfig,
    evaluation_layer,
    layer_features,
    local_alignment_weights,
    total_alignment_loss,
)
from ..synthdata import SyntheticSample, abstract_noise_score, chance_accuracy, collate
from ..vlm import AlignmentModel, VisionLanguageModel, text_batch


def batches(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def encode_batch(model: AlignmentModel, placement: PlacementConfig, samples: list[SyntheticSample]):
    batch = collate(samples)
    video_out = model.video(batch.clips)
    text_out = model.text(batch.captions, mask_abstract_in_attention=placement.mask_abstract_in_attention)
    return batch, video_out, text_out


def alignment_metrics(
    model: AlignmentModel, placement: PlacementConfig, samples: list[SyntheticSample], batch_size: int
) -> dict[str, float]:
    """Retrieval accuracy, abstract-token noise score and mean loss terms on ``samples``."""
    hits = grounded = 0
    abstract_rows = []
    losses = {"global": [], "local": [], "total": []}
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            batch, video_out, text_out = encode_batch(model, placement, chunk)
            for k, v in total_alignment_loss(placement, video_out, text_out, batch.captions).values().items():
                losses[k].append(v)
            layer = evaluation_layer(placement, len(text_out.hidden_states) - 1)
            patches, tokens = layer_features(video_out, text_out, layer)
            sims = (tokens @ patches.swapaxes(-1, -2)).data
            # diagnostic weights: only padding masked, so abstract rows are populated
            weights = local_alignment_weights(patches, tokens, batch.captions.pad_mask, placement.threshold).weights.data
            for b, sample in enumerate(chunk):
                for j, gt in enumerate(sample.ground_truth):
                    if gt:
                        grounded += 1
                        hits += int(np.argmax(sims[b, j])) in gt
                    elif sample.caption.abstract_mask[j]:
                        abstract_rows.append(weights[b, j])
    patches_total = samples[0].clip.shape[0] * (samples[0].clip.shape[1] // model.video.cfg.patch_size) ** 2
    out = {
        "retrieval_accuracy": hits / grounded if grounded else float("nan"),
        "chance_accuracy": chance_accuracy([s.ground_truth for s in samples], patches_total),
        "abstract_noise": abstract_noise_score(np.array(abstract_rows)) if abstract_rows else float("nan"),
    }
    for k, values in losses.items():
        out[f"val_{k}"] = float(np.mean(values)) if values else float("nan")
    return out


def precompute_features(model: VisionLanguageModel, samples: list[SyntheticSample], batch_size: int):
    """Frozen-tower features for every sample, as plain arrays."""
    mem, keys = [], []
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            m, k = model.tower_features(np.stack([s.clip for s in chunk]))
            mem.append(m.data)
            keys.append(k.data)
    return np.concatenate(mem), np.concatenate(keys)


def vlm_loss(model, memory, keys, samples, task, text_len: int) -> T.Tensor:
    ids, pad, prompt_lengths = text_batch([task(s) for s in samples], text_len)
    return model(T.Tensor(memory), T.Tensor(keys), ids, pad, prompt_lengths)


def vlm_metrics(
    model: VisionLanguageModel,
    features: tuple[np.ndarray, np.ndarray],
    samples: list[SyntheticSample],
    task,
    text_len: int,
    batch_size: int,
    max_new_tokens: int,
) -> dict[str, float]:
    memory, keys = features
    losses = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            sl = slice(start, start + batch_size)
            losses.append(vlm_loss(model, memory[sl], keys[sl], samples[sl], task, text_len).item())
    return {"val_loss": float(np.mean(losses)), "qa_exact_match": qa_exact_match(model, features, samples, max_new_tokens)}


def qa_exact_match(model: VisionLanguageModel, features, samples: list[SyntheticSample], max_new_tokens: int) -> float:
    """Fraction of questions whose greedy answer equals the reference ids exactly."""
    memory, keys = features
    hits = 0
    for i, s in enumerate(samples):
        out = model.answer(T.Tensor(memory[i : i + 1]), T.Tensor(keys[i : i + 1]), s.question, max_new_tokens)
        hits += out == list(s.answer)
    return hits / len(samples)
