"""Registry of gradient checks run by the ``gradcheck`` command.

Each case builds a scalar function and its inputs from a seeded generator.
Scopes: ``ops`` (tensor primitives), ``align`` (alignment losses), ``lm``
(language-model and connector losses); ``all`` runs everything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..align_loss import PlacementConfig, global_contrastive_loss, placement_local_loss, total_alignment_loss
from ..encoders import EncoderConfig, EncoderOutput, TokenSequence
from ..fusion import TokenMiningConfig
from ..gradcheck import GradCheckReport, grad_check
from ..lm import LmConfig, ToyLM, lm_loss
from ..tensor import Tensor

SCOPES = ("all", "ops", "align", "lm")

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass(frozen=True)
class Case:
    name: str
    scope: str
    build: Builder
    coordinates: int | None = None


@dataclass
class CaseResult:
    name: str
    scope: str
    seeds: int
    worst: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.worst.passed


def leaf(rng, *shape, scale=1.0, positive=False) -> Tensor:
    x = rng.standard_normal(shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _unary(op, positive=False, shape=(3, 4)) -> Builder:
    def build(rng):
        x = leaf(rng, *shape, positive=positive)
        w = rng.standard_normal(shape)
        return (lambda: (op(x) * Tensor(w)).sum()), [x]

    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False) -> Builder:
    def build(rng):
        a = leaf(rng, *shape_a)
        b = leaf(rng, *shape_b, positive=positive_b)
        w = rng.standard_normal(np.broadcast_shapes(shape_a, shape_b))
        return (lambda: (op(a, b) * Tensor(w)).sum()), [a, b]

    return build


def _matmul(rng):
    a, b = leaf(rng, 4, 5), leaf(rng, 5, 2)
    w = rng.standard_normal((4, 2))
    return (lambda: ((a @ b) * Tensor(w)).sum()), [a, b]


def _batched_matmul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 3)
    w = rng.standard_normal((2, 3, 3))
    return (lambda: ((a @ b) * Tensor(w)).sum()), [a, b]


def _masked_fill(rng):
    x = leaf(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.4
    w = rng.standard_normal((3, 4))
    return (lambda: (T.softmax(T.masked_fill(x, mask, -1e9), axis=-1) * Tensor(w)).sum()), [x]


def _layer_norm(rng):
    x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: (T.layer_norm(x, g, b) * Tensor(w)).sum()), [x, g, b]


def _cross_entropy(rng):
    x = leaf(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    targets[rng.integers(0, 5)] = T.IGNORE_INDEX
    targets[0] = 3
    return (lambda: T.cross_entropy(x, targets)), [x]


def _getitem(rng):
    x = leaf(rng, 4, 5)
    w = rng.standard_normal((3, 2))
    rows = np.array([0, 2, 2])
    return (lambda: (x[rows, 1:3] * Tensor(w)).sum()), [x]


def _concat_stack(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    w1, w2 = rng.standard_normal((2, 6)), rng.standard_normal((2, 2, 3))
    return (lambda: (T.concat([a, b], axis=1) * Tensor(w1)).sum() + (T.stack([a, b]) * Tensor(w2)).sum()), [a, b]


def _embedding(rng):
    table = leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    w = rng.standard_normal((2, 4, 3))
    return (lambda: (T.embedding(table, ids) * Tensor(w)).sum()), [table]


def _reductions(rng):
    x = leaf(rng, 3, 4)
    w = rng.standard_normal(3)
    return (
        lambda: (T.tmax(x, axis=1) * Tensor(w)).sum() + (T.tmin(x, axis=0)).sum() + T.mean(x, axis=1).sum() * 0.7
    ), [x]


def _shapes(rng):
    x = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((4, 6))
    return (lambda: (x.transpose((2, 0, 1)).reshape(4, 6) * Tensor(w)).sum() + T.broadcast_to(x[0:1], (3, 3, 4)).sum()), [x]


def fake_outputs(rng, batch=2, prefix=2, patches=6, length=4, layers=2, dim=5):
    """Random hidden states standing in for tower outputs."""
    video = EncoderOutput(
        [leaf(rng, batch, prefix + patches, dim) for _ in range(layers + 1)], leaf(rng, batch, dim), prefix
    )
    text = EncoderOutput([leaf(rng, batch, length, dim) for _ in range(layers + 1)], leaf(rng, batch, dim))
    pad = np.zeros((batch, length), dtype=bool)
    pad[0, -1] = True
    abstract = np.zeros((batch, length), dtype=bool)
    abstract[:, 0] = True
    return video, text, TokenSequence(np.ones((batch, length), dtype=np.int64), pad, abstract)


def _global(rng):
    v = leaf(rng, 4, 6)
    t = leaf(rng, 4, 6)
    return (lambda: global_contrastive_loss(T.l2_normalize(v), T.l2_normalize(t))), [v, t]


def _local(mode: str) -> Builder:
    def build(rng):
        video, text, tokens = fake_outputs(rng)
        cfg = PlacementConfig(mode=mode)
        inputs = video.hidden_states + text.hidden_states
        return (lambda: placement_local_loss(cfg, video, text, tokens)[0]), inputs

    return build


def _tiny_alignment(rng):
    from ..vlm import AlignmentModel
    from ..synthdata import SpecRanges, collate, generate_sample

    cfg = EncoderConfig(hidden_dim=8, layers=2, heads=2, proxies=2, proj_dim=8, image_size=8)
    model = AlignmentModel(cfg, rng)
    ranges = SpecRanges(frames=2, image_size=8)
    batch = collate([generate_sample(int(s), ranges) for s in rng.integers(0, 2**31, size=3)])
    placement = PlacementConfig(mode="E2")

    def f():
        return total_alignment_loss(placement, model.video(batch.clips), model.text(batch.captions), batch.captions).total

    return f, model.video.parameters() + model.text.parameters()


def _lm(rng):
    cfg = LmConfig(d_model=8, layers=1, heads=2, vocab_size=10, max_seq_len=8)
    lm = ToyLM(cfg, rng)
    ids = rng.integers(0, 10, size=(2, 6))
    mask = np.zeros((2, 6), dtype=bool)
    mask[:, 3:] = True
    return (lambda: lm_loss(lm(lm.embed(ids)), ids, mask)), lm.parameters()


def _vlm(structure: str) -> Builder:
    def build(rng):
        from ..vlm import VisionLanguageModel, text_batch

        enc = EncoderConfig(hidden_dim=8, layers=1, heads=2, proxies=2, proj_dim=8, image_size=8)
        lm_cfg = LmConfig(d_model=8, layers=1, heads=2, max_seq_len=12)
        mining = TokenMiningConfig(structure=structure, d_video=8, d_key=8, d_lm=8, heads=2)
        model = VisionLanguageModel(enc, lm_cfg, mining, 2, rng)
        memory = Tensor(rng.standard_normal((2, 6, 8)))
        keys = Tensor(rng.standard_normal((2, 2, 8)))
        ids, pad, prompt = text_batch([([3], [5, 6, 1]), ([2, 7], [12, 1])], 5)
        return (lambda: model(memory, keys, ids, pad, prompt)), model.mining.parameters()

    return build


def _inject(rng):
    """A square op whose backward is deliberately off by 2x."""
    x = leaf(rng, 3)

    def broken_square(a: Tensor) -> Tensor:
        return T._node(a.data**2, (a,), lambda g: (4.0 * a.data * g,), "broken_square")

    return (lambda: broken_square(x).sum()), [x]


REGISTRY: list[Case] = [
    Case("add", "ops", _binary(T.add, (3, 4), (4,))),
    Case("sub", "ops", _binary(T.sub, (3, 4), (3, 1))),
    Case("mul", "ops", _binary(T.mul)),
    Case("div", "ops", _binary(T.div, positive_b=True)),
    Case("power", "ops", _unary(lambda x: T.power(x, 3.0))),
    Case("exp", "ops", _unary(T.exp)),
    Case("log", "ops", _unary(T.log, positive=True)),
    Case("sqrt", "ops", _unary(T.sqrt, positive=True)),
    Case("tanh", "ops", _unary(T.tanh)),
    Case("relu", "ops", _unary(T.relu)),
    Case("gelu", "ops", _unary(T.gelu)),
    Case("matmul", "ops", _matmul),
    Case("matmul_batched", "ops", _batched_matmul),
    Case("masked_fill", "ops", _masked_fill),
    Case("softmax", "ops", _unary(lambda x: T.softmax(x, axis=-1))),
    Case("log_softmax", "ops", _unary(lambda x: T.log_softmax(x, axis=0))),
    Case("layer_norm", "ops", _layer_norm),
    Case("l2_normalize", "ops", _unary(lambda x: T.l2_normalize(x, axis=-1))),
    Case("cross_entropy", "ops", _cross_entropy),
    Case("reductions", "ops", _reductions),
    Case("shapes", "ops", _shapes),
    Case("getitem", "ops", _getitem),
    Case("concat_stack", "ops", _concat_stack),
    Case("embedding", "ops", _embedding),
    Case("global_loss", "align", _global),
    *(Case(f"local_{m}", "align", _local(m)) for m in ("E1", "E2", "E3", "E4")),
    Case("alignment_model", "align", _tiny_alignment, coordinates=10),
    Case("lm_loss", "lm", _lm, coordinates=40),
    *(Case(f"vlm_{s}", "lm", _vlm(s), coordinates=20) for s in ("S1", "S2", "S3")),
]

INJECTED = Case("broken_square", "ops", _inject)


def select(scope: str = "all", inject_bug: bool = False) -> list[Case]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    cases = [c for c in REGISTRY if scope in ("all", c.scope)]
    if inject_bug and scope in ("all", INJECTED.scope):
        cases.append(INJECTED)
    return cases


def run_case(case: Case, seeds: int, step: float, tolerance: float, base_seed: int = 0) -> CaseResult:
    worst = None
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        f, inputs = case.build(rng)
        report = grad_check(f, inputs, step=step, tolerance=tolerance, coordinates=case.coordinates, rng=rng)
        if worst is None or report.max_rel_err > worst.max_rel_err:
            worst = report
    return CaseResult(case.name, case.scope, seeds, worst)


def run_suite(
    scope: str = "all",
    seeds: int = 20,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    inject_bug: bool = False,
    base_seed: int = 0,
    echo: Callable[[str], None] | None = None,
) -> tuple[list[CaseResult], float]:
    start = time.perf_counter()
    results = []
    for case in select(scope, inject_bug):
        res = run_case(case, seeds, step, tolerance, base_seed)
        results.append(res)
        if echo:
            status = "PASS" if res.passed else "FAIL"
            echo(f"{status} {res.scope:5s} {res.name:16s} max_rel_err={res.worst.max_rel_err:.3e} seeds={seeds}")
    return results, time.perf_counter() - start
