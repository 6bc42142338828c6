import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hilight import synthdata as sd
from hilight.synthdata import (
    BACKGROUND,
    PALETTE,
    Ball,
    SceneSpec,
    SpecRanges,
    abstract_noise_score,
    alignment_retrieval_accuracy,
    build_dataset,
    chance_accuracy,
    decode_sample,
    encode_sample,
    generate_sample,
    load_dataset,
    render,
)


def test_vocabulary_layout():
    assert len(sd.VOCAB) <= sd.VOCAB_SIZE == 64
    assert sd.VOCAB[sd.PAD] == "<pad>" and sd.VOCAB[sd.EOS] == "<eos>"
    ids = [*sd.COLOR_IDS.values(), *sd.QUADRANT_IDS.values(), *sd.DIRECTION_IDS.values(), *sd.FILLER_IDS.values()]
    assert len(set(ids)) == len(ids) == 28
    assert all(sd.word(i) == w for w, i in sd.COLOR_IDS.items())


def test_same_seed_bit_identical():
    a, b = generate_sample(42), generate_sample(42)
    assert a.clip.tobytes() == b.clip.tobytes()
    assert encode_sample(a) == encode_sample(b)


def test_ground_truth_index_arithmetic():
    scene = SceneSpec([Ball("red", 2, 3, 1, 0)], frames=2, cells=4, patch_size=4)
    assert scene.patch_indices(scene.balls[0])[0] == 2 * 4 + 3
    # moving down from row 2: frame 1 at row 3
    assert scene.patch_indices(scene.balls[0])[1] == 16 + 3 * 4 + 3


def test_reflection_stays_in_bounds():
    scene = SceneSpec([Ball("red", 3, 0, 1, -1)], frames=6, cells=4, patch_size=4)
    path = scene.trajectory(scene.balls[0])
    assert path[:3] == [(3, 0), (2, 1), (1, 2)]
    assert all(0 <= r < 4 and 0 <= c < 4 for r, c in path)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_invariants(seed):
    s = generate_sample(seed)
    cells = 4
    per_frame = cells * cells
    assert s.clip.min() >= 0 and s.clip.max() <= 1
    colors = [b.color for b in s.scene.balls]
    assert len(set(colors)) == len(colors)
    caption = s.caption_ids
    assert len(caption) == 3 * len(colors) + int(s.caption.abstract_mask.sum())
    for j, gt in enumerate(s.ground_truth):
        if s.caption.pad_mask[j]:
            assert not gt
        elif s.caption.abstract_mask[j]:
            assert not gt and s.caption.ids[j] in sd.FILLER_IDS.values()
        else:
            assert len(gt) >= 1
    # renderer consistency: listed patches carry the ball color, all others are background
    owner = {}
    for ball in s.scene.balls:
        for idx in s.scene.patch_indices(ball):
            owner[idx] = ball.color
    for idx in range(s.clip.shape[0] * per_frame):
        t, rest = divmod(idx, per_frame)
        r, c = divmod(rest, cells)
        patch = s.clip[t, r * 4 : (r + 1) * 4, c * 4 : (c + 1) * 4]
        want = PALETTE[owner[idx]] if idx in owner else BACKGROUND
        assert (patch == np.asarray(want)).all()
    assert all(set(gt) <= set(owner) for gt in s.ground_truth)


def test_caption_template_per_ball():
    s = generate_sample(7)
    words = [sd.word(i) for i in s.caption_ids if i not in sd.FILLER_IDS.values()]
    for k, ball in enumerate(s.scene.balls):
        color, quad, direction = words[3 * k : 3 * k + 3]
        assert color == ball.color
        assert quad == sd.quadrant(ball.row, ball.col, 4)
        assert direction in sd.DIRECTIONS


def test_question_answer():
    s = generate_sample(11)
    assert s.question[0] == sd.WHERE and s.question[1] in sd.COLOR_IDS.values()
    color = sd.word(s.question[1])
    ball = next(b for b in s.scene.balls if b.color == color)
    r, c = s.scene.trajectory(ball)[-1]
    assert s.answer == [sd.QUADRANT_IDS[sd.quadrant(r, c, 4)], sd.EOS]


def test_too_many_balls_rejected():
    with pytest.raises(ValueError):
        SpecRanges(image_size=8, patch_size=4, min_balls=5, max_balls=5).validate()


def test_blob_round_trip_and_format():
    s = generate_sample(3)
    blob = encode_sample(s)
    header = np.frombuffer(blob[:36], dtype="<u4")
    assert list(header) == [1, 3, 4, 16, 16, 3, 16, 2, 2]
    pixels = np.frombuffer(blob, dtype="<f4", count=4 * 16 * 16 * 3, offset=36)
    np.testing.assert_array_equal(pixels.reshape(s.clip.shape), s.clip)
    back = decode_sample(blob)
    assert back.ground_truth == s.ground_truth and back.question == s.question and back.answer == s.answer
    np.testing.assert_array_equal(back.caption.ids, s.caption.ids)
    with pytest.raises(ValueError):
        decode_sample(blob + b"\0\0\0\0")


# -- metrics -------------------------------------------------------------------


def test_retrieval_indicator_sims_perfect():
    gt = [[1, 5], [], [2]]
    sims = np.zeros((3, 8))
    for j, g in enumerate(gt):
        sims[j, g] = 1.0
    assert alignment_retrieval_accuracy(sims, gt) == 1.0


def test_retrieval_uniform_sims_tie_rule():
    assert alignment_retrieval_accuracy(np.ones((2, 64)), [[0], [5]]) == 0.5


def test_retrieval_needs_grounded_tokens():
    with pytest.raises(ValueError):
        alignment_retrieval_accuracy(np.ones((2, 4)), [[], []])


def test_random_sims_at_chance_monte_carlo():
    rng = np.random.default_rng(0)
    n, tokens = 64, 4000
    gts = [[int(rng.integers(n))] for _ in range(tokens)]
    acc = alignment_retrieval_accuracy(rng.random((tokens, n)), gts)
    p = chance_accuracy([gts], n)
    assert p == 1 / 64
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / tokens)


def test_random_sims_at_chance_on_dataset_ground_truth():
    rng = np.random.default_rng(1)
    samples = [generate_sample(s) for s in range(300)]
    hits = total = 0
    for s in samples:
        g = [gt for gt in s.ground_truth if gt]
        hits += alignment_retrieval_accuracy(rng.random((len(g), 64)), g) * len(g)
        total += len(g)
    p = chance_accuracy([s.ground_truth for s in samples], 64)
    assert total >= 1000
    assert abs(hits / total - p) <= 3 * math.sqrt(p * (1 - p) / total)


def test_noise_score_definition():
    assert abstract_noise_score(np.eye(4)) == 0.0
    assert abstract_noise_score(np.full((3, 8), 1 / 8)) == pytest.approx(math.log(8), abs=1e-12)
    assert round(math.log(8), 4) == 2.0794
    with pytest.raises(ValueError):
        abstract_noise_score(np.zeros((0, 8)))


# -- dataset ------------------------------------------------------------------------


def test_build_dataset_split_and_determinism(tmp_path):
    m = build_dataset(tmp_path / "a", 10, 5, 0.8)
    assert len(m.train_seeds) == 8 and len(m.val_seeds) == 2
    assert not set(m.train_seeds) & set(m.val_seeds)
    build_dataset(tmp_path / "b", 10, 5, 0.8)
    files_a = sorted((tmp_path / "a").rglob("*.*"))
    files_b = sorted((tmp_path / "b").rglob("*.*"))
    assert [f.name for f in files_a] == [f.name for f in files_b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(files_a, files_b))
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["ranges"]["frames"] == 4 and manifest["seed"] == 5


def test_load_dataset_round_trip(tmp_path):
    build_dataset(tmp_path, 6, 9, 0.5)
    manifest, train, val = load_dataset(tmp_path)
    assert [s.seed for s in train] == manifest.train_seeds
    direct = generate_sample(manifest.val_seeds[0])
    np.testing.assert_array_equal(val[0].clip, direct.clip)


def test_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(tmp_path, 1, 0)
    with pytest.raises(FileNotFoundError, match="manifest.json"):
        load_dataset(tmp_path / "missing")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        build_dataset(blocker / "sub", 4, 0)


def test_render_uses_float32_exact_palette():
    clip = render(SceneSpec([Ball("blue", 0, 0, 1, 1)], 2, 4, 4))
    assert np.array_equal(clip.astype(np.float32).astype(np.float64), clip)
