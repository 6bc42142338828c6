"""Training loops for the alignment stage and both VLM stages.

All randomness (initialization, shuffling) comes from one generator seeded
by ``cfg.seed`` and is drawn in a fixed order, so a (config, seed) pair
reproduces CSVs and checkpoints byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..align_loss import total_alignment_loss
from ..synthdata import load_dataset
from ..vlm import TASKS, AlignmentModel, VisionLanguageModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, save_config, to_flat
from .metrics import alignment_metrics, batches, encode_batch, precompute_features, vlm_loss, vlm_metrics
from .optim import AdamW

log = logging.getLogger(__name__)

ALIGN_COLUMNS = (
    "epoch",
    "global",
    "local",
    "total",
    "retrieval_accuracy",
    "abstract_noise",
    "val_global",
    "val_local",
    "val_total",
)
VLM_COLUMNS = ("epoch", "train_loss", "val_loss", "qa_exact_match", "frozen_grad_max")

CHECKPOINT_DIR = "checkpoint"
LOSS_CSV = "loss.csv"
METRICS_JSON = "metrics.json"


def fmt(value) -> str:
    return str(value) if isinstance(value, (int, np.integer)) else f"{float(value):.9g}"


@dataclass
class RunResult:
    output_dir: Path
    rows: list[dict]
    metrics: dict

    @property
    def checkpoint(self) -> Path:
        return self.output_dir / CHECKPOINT_DIR

    @property
    def csv_path(self) -> Path:
        return self.output_dir / LOSS_CSV


class CsvLog:
    def __init__(self, path: Path, columns):
        self.columns = columns
        self.handle = open(path, "w", newline="")
        self.writer = csv.writer(self.handle, lineterminator="\n")
        self.writer.writerow(columns)

    def write(self, row: dict) -> None:
        self.writer.writerow([fmt(row[c]) for c in self.columns])
        self.handle.flush()

    def close(self) -> None:
        self.handle.close()


def _prepare(cfg: RunConfig, stage: str):
    if cfg.stage != stage and not (stage == "vlm" and cfg.stage.startswith("vlm")):
        raise ConfigError(f"config stage is {cfg.stage!r}, expected {stage}")
    cfg.validate()
    _, train, val = load_dataset(cfg.data.path)
    if len(train) < 2 or not val:
        raise ConfigError("dataset needs >= 2 train samples and >= 1 val sample")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return train, val, out


def _finish(out: Path, module, cfg: RunConfig, step: int, rows: list, metrics: dict) -> RunResult:
    save_checkpoint(module, out / CHECKPOINT_DIR, to_flat(cfg), step)
    (out / METRICS_JSON).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return RunResult(out, rows, metrics)


def train_align(cfg: RunConfig) -> RunResult:
    train, val, out = _prepare(cfg, "align")
    rng = np.random.default_rng(cfg.seed)
    model = AlignmentModel(cfg.encoder, rng)
    model.snap_to_float32()
    model.keyframe.set_trainable(False)
    opt = AdamW.from_config([p for p in model.parameters() if p.requires_grad], cfg.optimizer)
    placement = cfg.placement
    csv_log = CsvLog(out / LOSS_CSV, ALIGN_COLUMNS)
    rows = []
    step = 0
    metrics: dict = {}
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train))
            sums = {"global": 0.0, "local": 0.0, "total": 0.0}
            count = 0
            for idx in batches(list(order), cfg.batch_size):
                if len(idx) < 2:
                    continue
                model.zero_grad()
                batch, video_out, text_out = encode_batch(model, placement, [train[i] for i in idx])
                breakdown = total_alignment_loss(placement, video_out, text_out, batch.captions)
                breakdown.total.backward()
                opt.step()
                model.snap_to_float32()
                step += 1
                count += 1
                for k, v in breakdown.values().items():
                    sums[k] += v
            metrics = alignment_metrics(model, placement, val, cfg.batch_size)
            row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, **metrics}
            csv_log.write(row)
            rows.append(row)
            log.info("align epoch %d total %.4f retrieval %.3f", epoch, row["total"], row["retrieval_accuracy"])
    finally:
        csv_log.close()
    return _finish(out, model, cfg, step, rows, metrics)


def build_vlm(cfg: RunConfig, rng: np.random.Generator) -> VisionLanguageModel:
    model = VisionLanguageModel(cfg.encoder, cfg.lm, cfg.mining, cfg.vlm.keyframes, rng)
    if cfg.stage == "vlm-stage1":
        ckpt = Path(cfg.vlm.align_checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise ConfigError(f"stage-1 needs an alignment checkpoint; none at {ckpt}")
        load_checkpoint(model.video, ckpt, prefix="video.", strict=False)
        load_checkpoint(model.keyframe, ckpt, prefix="keyframe.", strict=False)
    else:
        ckpt = Path(cfg.vlm.init_checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise ConfigError(f"stage-2 needs a stage-1 checkpoint; none at {ckpt}")
        load_checkpoint(model, ckpt)
    model.snap_to_float32()
    return model


def freeze_for_stage(model: VisionLanguageModel, stage: str) -> None:
    """Towers always frozen; the LM trains only in stage 2; token mining always trains."""
    model.video.set_trainable(False)
    model.keyframe.set_trainable(False)
    model.lm.set_trainable(stage == "vlm-stage2")
    model.mining.set_trainable(True)


def frozen_grad_max(model: VisionLanguageModel) -> float:
    frozen = [p for p in model.parameters() if not p.requires_grad]
    return max((float(np.abs(p.grad).max()) for p in frozen if p.grad is not None), default=0.0)


def text_length(cfg: RunConfig) -> int:
    return cfg.data.ranges.max_caption_len + 2


def train_vlm(cfg: RunConfig) -> RunResult:
    train, val, out = _prepare(cfg, "vlm")
    rng = np.random.default_rng(cfg.seed)
    model = build_vlm(cfg, rng)
    freeze_for_stage(model, cfg.stage)
    task = TASKS[cfg.stage]
    text_len = text_length(cfg)
    train_feats = precompute_features(model, train, cfg.batch_size)
    val_feats = precompute_features(model, val, cfg.batch_size)
    opt = AdamW.from_config([p for p in model.parameters() if p.requires_grad], cfg.optimizer)
    csv_log = CsvLog(out / LOSS_CSV, VLM_COLUMNS)
    rows = []
    step = 0
    metrics: dict = {}
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train))
            total, count, worst_frozen = 0.0, 0, 0.0
            for idx in batches(list(order), cfg.batch_size):
                idx = np.asarray(idx)
                model.zero_grad()
                loss = vlm_loss(model, train_feats[0][idx], train_feats[1][idx], [train[i] for i in idx], task, text_len)
                loss.backward()
                worst_frozen = max(worst_frozen, frozen_grad_max(model))
                opt.step()
                model.snap_to_float32()
                step += 1
                total += loss.item()
                count += 1
            metrics = vlm_metrics(model, val_feats, val, task, text_len, cfg.batch_size, cfg.vlm.max_new_tokens)
            row = {"epoch": epoch, "train_loss": total / count, **metrics, "frozen_grad_max": worst_frozen}
            csv_log.write(row)
            rows.append(row)
            log.info("%s epoch %d loss %.4f val %.4f", cfg.stage, epoch, row["train_loss"], row["val_loss"])
    finally:
        csv_log.close()
    return _finish(out, model, cfg, step, rows, metrics)


def train(cfg: RunConfig) -> RunResult:
    return train_align(cfg) if cfg.stage == "align" else train_vlm(cfg)
