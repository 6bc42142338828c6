"""Checkpoint evaluation and alignment heatmap export."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..align_loss import evaluation_layer, layer_features, local_alignment_weights
from ..synthdata import SyntheticSample, load_dataset, word
from ..vlm import TASKS, AlignmentModel, VisionLanguageModel
from .checkpoint import load_checkpoint
from .config import RunConfig
from .metrics import alignment_metrics, precompute_features, vlm_metrics
from .train import text_length


def evaluate(cfg: RunConfig, checkpoint) -> dict:
    """Validation metrics of ``checkpoint`` under ``cfg`` (same numbers the training CSV logs)."""
    cfg.validate()
    _, _, val = load_dataset(cfg.data.path)
    rng = np.random.default_rng(cfg.seed)
    if cfg.stage == "align":
        model = AlignmentModel(cfg.encoder, rng)
        manifest = load_checkpoint(model, checkpoint)
        report = alignment_metrics(model, cfg.placement, val, cfg.batch_size)
    else:
        model = VisionLanguageModel(cfg.encoder, cfg.lm, cfg.mining, cfg.vlm.keyframes, rng)
        manifest = load_checkpoint(model, checkpoint)
        feats = precompute_features(model, val, cfg.batch_size)
        report = vlm_metrics(
            model, feats, val, TASKS[cfg.stage], text_length(cfg), cfg.batch_size, cfg.vlm.max_new_tokens
        )
    report.update({"stage": cfg.stage, "step": manifest["step"], "val_samples": len(val)})
    return report


def untrained_qa_baseline(cfg: RunConfig, samples: list[SyntheticSample], seed: int) -> float:
    """Q&A exact match of a freshly initialised connector and LM on top of the given towers."""
    from .metrics import qa_exact_match
    from .train import build_vlm

    towers = cfg.vlm.init_checkpoint if cfg.stage == "vlm-stage2" else cfg.vlm.align_checkpoint
    vlm = dataclasses.replace(cfg.vlm, align_checkpoint=towers)
    stage1 = dataclasses.replace(cfg, stage="vlm-stage1", seed=seed, vlm=vlm)
    model = build_vlm(stage1, np.random.default_rng(seed))
    return qa_exact_match(model, precompute_features(model, samples, cfg.batch_size), samples, cfg.vlm.max_new_tokens)


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap from an H x W x 3 uint8 array."""
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary P6 pixmap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def heatmap_image(row: np.ndarray, frames: int, cells: int, scale: int = 8, gap: int = 2) -> np.ndarray:
    """Frames side by side, each a cells x cells grid; intensity = 255 * weight / max weight."""
    grid = row.reshape(frames, cells, cells)
    peak = grid.max()
    levels = np.zeros_like(grid) if peak <= 0 else np.rint(255.0 * grid / peak)
    width = frames * cells * scale + (frames - 1) * gap
    img = np.zeros((cells * scale, width, 3), dtype=np.uint8)
    for t in range(frames):
        block = np.kron(levels[t], np.ones((scale, scale))).astype(np.uint8)
        x0 = t * (cells * scale + gap)
        img[:, x0 : x0 + cells * scale] = block[..., None]
    return img


def alignment_rows(model: AlignmentModel, cfg: RunConfig, sample: SyntheticSample) -> np.ndarray:
    """Token x patch alignment weights for one sample (only padding masked)."""
    with T.no_grad():
        video_out = model.video(sample.clip[None])
        text_out = model.text(sample.caption, mask_abstract_in_attention=cfg.placement.mask_abstract_in_attention)
        layer = evaluation_layer(cfg.placement, len(text_out.hidden_states) - 1)
        patches, tokens = layer_features(video_out, text_out, layer)
        w = local_alignment_weights(patches, tokens, sample.caption.pad_mask[None], cfg.placement.threshold)
    return w.weights.data[0]


def render_weight_maps(rows: np.ndarray, sample: SyntheticSample, out_dir, patch_size: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, size = sample.clip.shape[0], sample.clip.shape[1]
    cells = size // patch_size
    paths = []
    for j in sample.grounded_positions:
        name = f"seed{sample.seed}_tok{j:02d}_{word(int(sample.caption.ids[j]))}.ppm"
        path = out_dir / name
        write_ppm(path, heatmap_image(rows[j], frames, cells))
        paths.append(path)
    return paths


def render_alignment_maps(cfg: RunConfig, checkpoint, sample: SyntheticSample, out_dir) -> list[Path]:
    """One heatmap per grounded caption token of ``sample``."""
    model = AlignmentModel(cfg.encoder, np.random.default_rng(cfg.seed))
    load_checkpoint(model, checkpoint)
    return render_weight_maps(alignment_rows(model, cfg, sample), sample, out_dir, cfg.encoder.patch_size)


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
