"""Procedural billiards clips with planted token -> patch correspondence.

Each ball is a colored square exactly one patch cell wide, moving with an
integer cell velocity and bouncing off the walls. Captions name every ball
as ``<color> <start-quadrant> <direction>`` and sprinkle in abstract filler
words that have no visual referent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import TokenSequence, stack_sequences

PAD, EOS, WHERE, DESCRIBE = 0, 1, 2, 3
COLORS = ("red", "yellow", "blue", "orange", "purple", "white", "black", "pink")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
DIRECTIONS = ("up", "down", "left", "right", "up-left", "up-right", "down-left", "down-right")
FILLERS = ("start", "game", "shot", "break", "match", "play", "round", "rack")

VOCAB = ("<pad>", "<eos>", "where", "describe", *COLORS, *QUADRANTS, *DIRECTIONS, *FILLERS)
VOCAB_SIZE = 64
COLOR_IDS = {c: 4 + i for i, c in enumerate(COLORS)}
QUADRANT_IDS = {q: 12 + i for i, q in enumerate(QUADRANTS)}
DIRECTION_IDS = {d: 16 + i for i, d in enumerate(DIRECTIONS)}
FILLER_IDS = {f: 24 + i for i, f in enumerate(FILLERS)}

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "pink": (1.0, 0.5, 0.75),
}
BACKGROUND = (0.0, 0.5, 0.25)

_VELOCITY_NAMES = {
    (-1, 0): "up",
    (1, 0): "down",
    (0, -1): "left",
    (0, 1): "right",
    (-1, -1): "up-left",
    (-1, 1): "up-right",
    (1, -1): "down-left",
    (1, 1): "down-right",
}
_VELOCITIES = tuple(_VELOCITY_NAMES)

BLOB_VERSION = 1
MANIFEST_NAME = "manifest.json"


def word(token_id: int) -> str:
    return VOCAB[token_id] if token_id < len(VOCAB) else f"<unused{token_id}>"


@dataclass
class SpecRanges:
    frames: int = 4
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    min_balls: int = 1
    max_balls: int = 3
    min_fillers: int = 1
    max_fillers: int = 3
    max_caption_len: int = 16

    @property
    def cells(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.cells < 2:
            raise ValueError("grid needs at least 2 x 2 cells for balls to move")
        if not 1 <= self.min_balls <= self.max_balls:
            raise ValueError("need 1 <= min_balls <= max_balls")
        if self.max_balls > min(len(COLORS), self.cells * self.cells):
            raise ValueError(
                f"{self.max_balls} balls cannot fit a {self.cells}x{self.cells} grid with {len(COLORS)} colors"
            )
        if not 0 <= self.min_fillers <= self.max_fillers:
            raise ValueError("need 0 <= min_fillers <= max_fillers")
        if 3 * self.max_balls + self.max_fillers > self.max_caption_len:
            raise ValueError("max_caption_len too short for the longest caption")
        if self.channels != 3:
            raise ValueError("renderer draws RGB frames")


@dataclass
class Ball:
    color: str
    row: int
    col: int
    dr: int
    dc: int


@dataclass
class SceneSpec:
    balls: list[Ball]
    frames: int
    cells: int
    patch_size: int

    def trajectory(self, ball: Ball) -> list[tuple[int, int]]:
        """Cell positions per frame, reflecting off the walls."""
        r, c, dr, dc = ball.row, ball.col, ball.dr, ball.dc
        path = [(r, c)]
        for _ in range(self.frames - 1):
            if not 0 <= r + dr < self.cells:
                dr = -dr
            if not 0 <= c + dc < self.cells:
                dc = -dc
            r, c = r + dr, c + dc
            path.append((r, c))
        return path

    def patch_indices(self, ball: Ball) -> list[int]:
        per_frame = self.cells * self.cells
        return [t * per_frame + r * self.cells + c for t, (r, c) in enumerate(self.trajectory(ball))]


def quadrant(row: int, col: int, cells: int) -> str:
    vertical = "top" if row < cells / 2 else "bottom"
    horizontal = "left" if col < cells / 2 else "right"
    return f"{vertical}-{horizontal}"


def render(scene: SceneSpec) -> np.ndarray:
    ps, cells = scene.patch_size, scene.cells
    size = ps * cells
    clip = np.empty((scene.frames, size, size, 3), dtype=np.float64)
    clip[...] = BACKGROUND
    for ball in scene.balls:
        for t, (r, c) in enumerate(scene.trajectory(ball)):
            clip[t, r * ps : (r + 1) * ps, c * ps : (c + 1) * ps] = PALETTE[ball.color]
    return clip


@dataclass
class SyntheticSample:
    seed: int
    clip: np.ndarray
    caption: TokenSequence
    ground_truth: list[list[int]]
    question: list[int]
    answer: list[int]
    scene: SceneSpec | None = field(default=None, compare=False)

    @property
    def grounded_positions(self) -> list[int]:
        return [j for j, gt in enumerate(self.ground_truth) if gt]

    @property
    def caption_ids(self) -> list[int]:
        return [int(i) for i, p in zip(self.caption.ids, self.caption.pad_mask) if not p]


def _sample_scene(rng: np.random.Generator, ranges: SpecRanges) -> SceneSpec:
    cells = ranges.cells
    count = int(rng.integers(ranges.min_balls, ranges.max_balls + 1))
    colors = [COLORS[i] for i in rng.choice(len(COLORS), size=count, replace=False)]
    for _ in range(1000):
        balls = []
        for color in colors:
            dr, dc = _VELOCITIES[int(rng.integers(len(_VELOCITIES)))]
            balls.append(Ball(color, int(rng.integers(cells)), int(rng.integers(cells)), dr, dc))
        scene = SceneSpec(balls, ranges.frames, cells, ranges.patch_size)
        paths = [scene.trajectory(b) for b in balls]
        if all(len({p[t] for p in paths}) == len(paths) for t in range(ranges.frames)):
            return scene
    raise ValueError("could not place balls without overlap; grid too crowded")


def generate_sample(seed: int, ranges: SpecRanges | None = None) -> SyntheticSample:
    """Deterministic sample for ``seed``."""
    ranges = ranges or SpecRanges()
    ranges.validate()
    rng = np.random.default_rng(seed)
    scene = _sample_scene(rng, ranges)
    words: list[tuple[int, list[int]]] = []
    for ball in scene.balls:
        gt = scene.patch_indices(ball)
        words.append((COLOR_IDS[ball.color], gt))
        words.append((QUADRANT_IDS[quadrant(ball.row, ball.col, scene.cells)], gt))
        words.append((DIRECTION_IDS[_VELOCITY_NAMES[(ball.dr, ball.dc)]], gt))
    for _ in range(int(rng.integers(ranges.min_fillers, ranges.max_fillers + 1))):
        filler = FILLERS[int(rng.integers(len(FILLERS)))]
        words.insert(int(rng.integers(len(words) + 1)), (FILLER_IDS[filler], []))

    length = ranges.max_caption_len
    ids = np.full(length, PAD, dtype=np.int64)
    pad = np.ones(length, dtype=bool)
    abstract = np.zeros(length, dtype=bool)
    ground_truth: list[list[int]] = [[] for _ in range(length)]
    for j, (tok, gt) in enumerate(words):
        ids[j], pad[j] = tok, False
        abstract[j] = not gt
        ground_truth[j] = sorted(gt)

    asked = scene.balls[int(rng.integers(len(scene.balls)))]
    end_r, end_c = scene.trajectory(asked)[-1]
    question = [WHERE, COLOR_IDS[asked.color]]
    answer = [QUADRANT_IDS[quadrant(end_r, end_c, scene.cells)], EOS]
    return SyntheticSample(
        seed=int(seed),
        clip=render(scene),
        caption=TokenSequence(ids, pad, abstract),
        ground_truth=ground_truth,
        question=question,
        answer=answer,
        scene=scene,
    )


# -- metrics -------------------------------------------------------------------------


def alignment_retrieval_accuracy(sims, ground_truth: list[list[int]]) -> float:
    """Fraction of grounded tokens whose top-scoring patch is a planted referent patch."""
    sims = np.asarray(sims)
    hits = total = 0
    for j, gt in enumerate(ground_truth):
        if not gt:
            continue
        total += 1
        hits += int(np.argmax(sims[j])) in gt
    if total == 0:
        raise ValueError("retrieval accuracy needs at least one grounded token")
    return hits / total


def chance_accuracy(ground_truths: list[list[list[int]]], patches: int) -> float:
    """Expected retrieval accuracy when the top patch is uniformly random."""
    sizes = [len(gt) for sample in ground_truths for gt in sample if gt]
    if not sizes:
        raise ValueError("no grounded tokens")
    return float(np.mean(sizes)) / patches


def row_entropy(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    safe = np.where(rows > 0, rows, 1.0)
    return -(rows * np.log(safe)).sum(axis=-1)


def abstract_noise_score(abstract_rows) -> float:
    """Mean Shannon entropy (nats) of abstract-token alignment-weight rows."""
    rows = np.asarray(abstract_rows, dtype=np.float64)
    if rows.size == 0 or rows.shape[0] == 0:
        raise ValueError("noise score needs at least one abstract token")
    return float(row_entropy(rows).mean())


# -- batching -------------------------------------------------------------------------


@dataclass
class Batch:
    clips: np.ndarray
    captions: TokenSequence
    ground_truth: list[list[list[int]]]
    samples: list[SyntheticSample]


def collate(samples: list[SyntheticSample]) -> Batch:
    return Batch(
        clips=np.stack([s.clip for s in samples]),
        captions=stack_sequences([s.caption for s in samples]),
        ground_truth=[s.ground_truth for s in samples],
        samples=samples,
    )


# -- on-disk format ----------------------------------------------------------------------


def _u32(values) -> bytes:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
        raise ValueError("value does not fit an unsigned 32-bit field")
    return arr.astype("<u4").tobytes()


def encode_sample(sample: SyntheticSample) -> bytes:
    """Binary blob: u32 header, f32 pixels, then u32 token/mask/ground-truth/QA fields."""
    t, h, w, c = sample.clip.shape
    length = sample.caption.ids.shape[0]
    parts = [
        _u32([BLOB_VERSION, sample.seed, t, h, w, c, length, len(sample.question), len(sample.answer)]),
        sample.clip.astype("<f4").tobytes(),
        _u32(sample.caption.ids),
        _u32(sample.caption.pad_mask),
        _u32(sample.caption.abstract_mask),
    ]
    for gt in sample.ground_truth:
        parts.append(_u32([len(gt), *gt]))
    parts.append(_u32(sample.question))
    parts.append(_u32(sample.answer))
    return b"".join(parts)


def decode_sample(blob: bytes) -> SyntheticSample:
    offset = 0

    def take(count: int, dtype: str = "<u4") -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += 4 * count
        return arr

    version, seed, t, h, w, c, length, q, a = (int(v) for v in take(9))
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported sample blob version {version}")
    clip = take(t * h * w * c, "<f4").astype(np.float64).reshape(t, h, w, c)
    ids = take(length).astype(np.int64)
    pad = take(length).astype(bool)
    abstract = take(length).astype(bool)
    ground_truth = []
    for _ in range(length):
        n = int(take(1)[0])
        ground_truth.append([int(v) for v in take(n)])
    question = [int(v) for v in take(q)]
    answer = [int(v) for v in take(a)]
    if offset != len(blob):
        raise ValueError(f"sample blob has {len(blob) - offset} trailing bytes")
    return SyntheticSample(seed, clip, TokenSequence(ids, pad, abstract), ground_truth, question, answer)


@dataclass
class DatasetManifest:
    seed: int
    count: int
    train_ratio: float
    ranges: SpecRanges
    train_seeds: list[int]
    val_seeds: list[int]

    def to_json(self) -> str:
        body = {
            "format": "hilight-synth",
            "version": BLOB_VERSION,
            "seed": self.seed,
            "count": self.count,
            "train_ratio": self.train_ratio,
            "ranges": asdict(self.ranges),
            "train_seeds": self.train_seeds,
            "val_seeds": self.val_seeds,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> DatasetManifest:
        body = json.loads(text)
        return cls(
            seed=body["seed"],
            count=body["count"],
            train_ratio=body["train_ratio"],
            ranges=SpecRanges(**body["ranges"]),
            train_seeds=list(body["train_seeds"]),
            val_seeds=list(body["val_seeds"]),
        )


def sample_path(root: Path, seed: int) -> Path:
    return Path(root) / "samples" / f"{seed:010d}.bin"


def split_seeds(count: int, seed: int, train_ratio: float) -> tuple[list[int], list[int]]:
    if count < 2:
        raise ValueError("a dataset needs at least 2 samples")
    rng = np.random.default_rng(seed)
    seeds = [int(s) for s in rng.choice(2**31, size=count, replace=False)]
    n_train = min(max(int(round(count * train_ratio)), 1), count - 1)
    return seeds[:n_train], seeds[n_train:]


def build_dataset(
    root, count: int, seed: int, train_ratio: float = 0.8, ranges: SpecRanges | None = None
) -> DatasetManifest:
    """Generate and persist a train/val dataset under ``root``."""
    ranges = ranges or SpecRanges()
    ranges.validate()
    train, val = split_seeds(count, seed, train_ratio)
    manifest = DatasetManifest(seed, count, train_ratio, ranges, train, val)
    root = Path(root)
    try:
        (root / "samples").mkdir(parents=True, exist_ok=True)
        for s in train + val:
            sample_path(root, s).write_bytes(encode_sample(generate_sample(s, ranges)))
        (root / MANIFEST_NAME).write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(f"failed writing dataset at {exc.filename or root}: {exc.strerror}") from exc
    return manifest


def load_dataset(root) -> tuple[DatasetManifest, list[SyntheticSample], list[SyntheticSample]]:
    root = Path(root)
    path = root / MANIFEST_NAME
    try:
        manifest = DatasetManifest.from_json(path.read_text())
        train = [decode_sample(sample_path(root, s).read_bytes()) for s in manifest.train_seeds]
        val = [decode_sample(sample_path(root, s).read_bytes()) for s in manifest.val_seeds]
    except OSError as exc:
        raise FileNotFoundError(f"cannot read dataset file {exc.filename or path}: {exc.strerror}") from exc
    return manifest, train, val
