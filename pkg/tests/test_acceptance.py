"""End-to-end acceptance gate.

Each test records one PASS/FAIL line; the lines are echoed in the terminal
summary. The training criteria share session-scoped runs on the default toy
configuration, so the whole module takes about 15 minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, tiny_config
from hilight import tensor as T
from hilight.align_loss import (
    global_contrastive_loss,
    layer_weight_schedule,
    local_alignment_weights,
    local_loss_at,
)
from hilight.encoders import EncoderConfig, VideoTower, build_vip_attention_mask
from hilight.harness.checkpoint import load_checkpoint, save_checkpoint
from hilight.harness.config import RunConfig, apply_overrides
from hilight.harness.evaluate import untrained_qa_baseline
from hilight.harness.gradsuite import run_suite
from hilight.harness.train import build_vlm, freeze_for_stage, text_length, train_align, train_vlm
from hilight.harness.metrics import precompute_features, vlm_loss
from hilight.synthdata import build_dataset, load_dataset
from hilight.tensor import Tensor
from hilight.vlm import TASKS, AlignmentModel
from test_align_loss import bf_local, random_instance

SEEDS = (0, 1, 2)


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# -- shared runs -------------------------------------------------------------------


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_data")
    cfg = RunConfig()
    build_dataset(root, cfg.data.count, cfg.data.seed, cfg.data.train_ratio, cfg.data.ranges)
    return root


def default_config(data, out, **overrides):
    return apply_overrides(RunConfig(), {"data.path": str(data), "output_dir": str(out),
                                         **{k: str(v) for k, v in overrides.items()}})


@pytest.fixture(scope="session")
def ablation(toy_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    start = time.perf_counter()
    runs = {(mode, s): train_align(default_config(toy_data, root / f"{mode}_{s}", **{"placement.mode": mode}, seed=s))
            for mode in ("E1", "E2") for s in SEEDS}
    return runs, time.perf_counter() - start


@pytest.fixture(scope="session")
def connectors(toy_data, ablation, tmp_path_factory):
    root = tmp_path_factory.mktemp("connectors")
    align = ablation[0][("E2", 0)].checkpoint
    start = time.perf_counter()
    runs = {}
    for structure in ("S1", "S2", "S3"):
        for s in SEEDS:
            cfg = default_config(toy_data, root / f"{structure}_{s}", stage="vlm-stage1", seed=s,
                                 **{"mining.structure": structure, "vlm.align_checkpoint": align})
            runs[structure, s] = train_vlm(cfg)
    return runs, time.perf_counter() - start


# -- criteria -------------------------------------------------------------------------


def test_criterion_01_gradient_suite():
    results, seconds = run_suite(scope="all", seeds=20, step=1e-5, tolerance=1e-4)
    failed = [r.name for r in results if not r.passed]
    worst = max(r.worst.max_rel_err for r in results)
    scopes = {r.scope for r in results}
    ok = not failed and worst <= 1e-4 and seconds < 120 and scopes == {"ops", "align", "lm"}
    record(1, ok, f"{len(results)} cases x 20 seeds, max rel err {worst:.2e}, {seconds:.0f}s, failed {failed}")


def test_criterion_02_vip_mask():
    frames, per_frame, proxies = 3, 4, 2
    mask = build_vip_attention_mask(frames, per_frame, proxies)
    cfg = EncoderConfig(hidden_dim=8, layers=2, heads=2, proxies=proxies, proj_dim=8, image_size=8, patch_size=4)
    rng = np.random.default_rng(0)
    out = VideoTower(cfg, rng)(rng.random((1, frames, 8, 8, 3)), return_attentions=True)
    bad = 0
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            proxy = i < proxies or j < proxies
            same = (i - proxies) // per_frame == (j - proxies) // per_frame
            want = proxy or same
            bad += mask[i, j] != want
            for w in out.attentions:
                w = w.data if hasattr(w, "data") else w
                bad += bool((w[..., i, j] <= 0.0).any() if want else (w[..., i, j] != 0.0).any())
    record(2, bad == 0, f"{mask.size} mask entries x {len(out.attentions)} layers scanned, {bad} violations")


def test_criterion_03_sparc_guarantee():
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(1000):
        patches, tokens, masked = random_instance(rng)
        if rng.random() < 0.2:  # flat rows exercise the uniform fallback
            tokens[..., :] = 0.0
        w = local_alignment_weights(Tensor(patches), Tensor(tokens), masked).weights.data
        for b in range(w.shape[0]):
            for j in range(w.shape[1]):
                row = w[b, j]
                if masked[b, j]:
                    violations += bool(row.any())
                else:
                    violations += abs(row.sum() - 1.0) > 1e-12 or not (row > 0).any() or (row < 0).any()
    record(3, violations == 0, f"1000 instances, {violations} violating rows")


def test_criterion_04_oracle_equivalence():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        patches, tokens, masked = random_instance(rng)
        tau = float(rng.uniform(0.05, 1.0))
        got = local_loss_at(Tensor(patches), Tensor(tokens), masked, tau).item()
        worst = max(worst, abs(got - bf_local(patches.tolist(), tokens.tolist(), masked.tolist(), tau)))
    record(4, worst <= 1e-10, f"100 instances (N<=6, L<=4, B<=3), max abs diff {worst:.2e}")


def test_criterion_05_global_anchors():
    one = global_contrastive_loss(Tensor([[0.6, 0.8]]), Tensor([[0.6, 0.8]])).item() + 0.0
    rows = Tensor(np.tile([[0.0, 1.0, 0.0]], (4, 1)))
    same = global_contrastive_loss(rows, rows).item()
    ortho = global_contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), tau=1.0).item()
    ok = one == 0.0 and abs(same - math.log(4)) <= 1e-9 and abs(ortho - 0.3133) <= 1e-4
    record(5, ok, f"B=1 {one}, identical B=4 {same:.12f}, orthonormal B=2 {ortho:.6f}")


def test_criterion_06_layer_schedule():
    four, one = layer_weight_schedule(4), layer_weight_schedule(1)
    ok = four == [0.1, 0.4, 0.7, 1.0] and one == [1.0]
    record(6, ok, f"L=4 {four}, L=1 {one}")


def test_criterion_07_mask_ablation(ablation):
    runs, seconds = ablation
    final = {k: r.rows[-1] for k, r in runs.items()}
    chance = final["E2", 0]["chance_accuracy"]
    mean = {m: float(np.mean([final[m, s]["retrieval_accuracy"] for s in SEEDS])) for m in ("E1", "E2")}
    noise = {m: float(np.mean([final[m, s]["abstract_noise"] for s in SEEDS])) for m in ("E1", "E2")}
    ok = mean["E2"] >= 5 * chance and mean["E2"] >= mean["E1"] and noise["E1"] >= noise["E2"] and seconds <= 900
    record(7, ok, f"retrieval E2 {mean['E2']:.3f} E1 {mean['E1']:.3f} (5x chance {5 * chance:.3f}); "
                  f"noise E1 {noise['E1']:.4f} E2 {noise['E2']:.4f}; {seconds:.0f}s")


def test_criterion_08_connectors(connectors):
    runs, seconds = connectors
    final = {k: {s: runs[k, s].rows[-1]["train_loss"] for s in SEEDS} for k in ("S1", "S2", "S3")}
    mean = {k: float(np.mean(list(v.values()))) for k, v in final.items()}
    s3_done = all(len(runs["S3", s].rows) == RunConfig().epochs for s in SEEDS)
    ok = mean["S2"] <= mean["S1"] and s3_done and seconds <= 900
    record(8, ok, f"mean final stage-1 loss S1 {mean['S1']:.4f} S2 {mean['S2']:.4f} S3 {mean['S3']:.4f}; "
                  f"S3 curves complete {s3_done}; {seconds:.0f}s")


def test_criterion_09_freeze_contract(connectors, toy_data):
    runs, _ = connectors
    stage1_frozen = max(r["frozen_grad_max"] for run in runs.values() for r in run.rows)
    cfg = apply_overrides(RunConfig(), {"data.path": str(toy_data), "stage": "vlm-stage2",
                                        "vlm.init_checkpoint": str(runs["S2", 0].checkpoint)})
    model = build_vlm(cfg, np.random.default_rng(0))
    _, train, _ = load_dataset(toy_data)
    batch = train[:8]
    mem, keys = precompute_features(model, batch, 8)
    grads = {}
    for stage in ("vlm-stage1", "vlm-stage2"):
        freeze_for_stage(model, stage)
        model.zero_grad()
        vlm_loss(model, mem, keys, batch, TASKS[stage], text_length(cfg)).backward()
        grads[stage] = {name: 0.0 if p.grad is None else float(np.abs(p.grad).max())
                        for name, p in model.named_parameters()}
    towers_lm = [n for n in grads["vlm-stage1"] if n.split(".")[0] in ("video", "keyframe", "lm")]
    s1_zero = all(grads["vlm-stage1"][n] == 0.0 for n in towers_lm)
    s2_lm = max(v for n, v in grads["vlm-stage2"].items() if n.startswith("lm."))
    s2_towers = max(v for n, v in grads["vlm-stage2"].items() if n.split(".")[0] in ("video", "keyframe"))
    ok = stage1_frozen == 0.0 and s1_zero and s2_lm > 0.0 and s2_towers == 0.0
    record(9, ok, f"stage-1 frozen grad max over {sum(len(r.rows) for r in runs.values())} epochs {stage1_frozen}; "
                  f"stage-2 LM grad max {s2_lm:.3e}, tower grad max {s2_towers}")


def test_criterion_10_determinism(tiny_data, tmp_path):
    align = [train_align(tiny_config(tiny_data, tmp_path / f"a{i}", seed=5)) for i in range(2)]
    vlm = [train_vlm(tiny_config(tiny_data, tmp_path / f"v{i}", stage="vlm-stage1", seed=5,
                                 **{"vlm.align_checkpoint": align[0].checkpoint})) for i in range(2)]
    csv_same = all(a.csv_path.read_bytes() == b.csv_path.read_bytes() for a, b in (align, vlm))
    cfg = RunConfig()
    clip = np.random.default_rng(10).random((2, 4, 16, 16, 3))
    original = AlignmentModel(cfg.encoder, np.random.default_rng(1))
    original.snap_to_float32()
    save_checkpoint(original, tmp_path / "ckpt", {}, 0)
    restored = AlignmentModel(cfg.encoder, np.random.default_rng(2))
    load_checkpoint(restored, tmp_path / "ckpt")
    with T.no_grad():
        same_forward = all(
            x.data.tobytes() == y.data.tobytes()
            for x, y in zip(original.video(clip).hidden_states, restored.video(clip).hidden_states)
        )
    record(10, csv_same and same_forward, f"CSVs byte-identical {csv_same}; forward bit-identical {same_forward}")


def test_criterion_11_stage2(connectors, toy_data, tmp_path):
    runs, _ = connectors
    cfg = default_config(toy_data, tmp_path / "stage2", stage="vlm-stage2",
                         **{"vlm.init_checkpoint": runs["S2", 0].checkpoint})
    result = train_vlm(cfg)
    trained = result.metrics["qa_exact_match"]
    _, train, val = load_dataset(toy_data)
    questions = train + val  # no training happened, so every question is held out for the baseline
    baseline = float(np.mean([untrained_qa_baseline(cfg, questions, s) for s in SEEDS]))
    ok = trained >= 3 * baseline and trained > baseline
    record(11, ok, f"stage-2 exact match {trained:.4f} on {len(val)} held-out questions; "
                   f"untrained baseline {baseline:.4f} over {len(questions)} questions x 3 seeds")
