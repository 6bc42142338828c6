import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hilight import tensor as T
from hilight.gradcheck import grad_check
from hilight.tensor import ShapeError, Tape, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# matmul


def test_matmul_identity():
    b = np.random.default_rng(0).standard_normal((3, 5))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(b)).data, b)


def test_matmul_small_arithmetic():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_random_4x5_5x2():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 2)))
    w = Tensor(rng.standard_normal((4, 2)))
    report = grad_check(lambda: ((a @ b) * w).sum(), [a, b], step=1e-5, tolerance=1e-6)
    assert report.passed, report


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


# softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.full(5, 3.3))).data, 0.2, atol=1e-15)


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    assert out[0] == 1.0 and out[1] < 1e-300


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
    np.testing.assert_allclose(T.softmax(x, axis=1).data.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_property(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# masked_fill


def test_masked_fill_all_false_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.masked_fill(Tensor(x), np.zeros((2, 3), bool), -1e9).data, x)


def test_masked_fill_all_true_then_softmax_uniform():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 4)))
    out = T.softmax(T.masked_fill(x, np.ones((2, 4), bool), T.ATTENTION_MASK_VALUE), axis=-1)
    np.testing.assert_allclose(out.data, 0.25, atol=1e-15)


def test_masked_fill_gradient_zero_at_masked():
    x = leaf(np.random.default_rng(4).standard_normal((2, 3)))
    mask = np.array([[True, False, False], [False, False, True]])
    (T.masked_fill(x, mask, 5.0) * Tensor(np.full((2, 3), 2.0))).sum().backward()
    assert (x.grad[mask] == 0.0).all()
    assert (x.grad[~mask] == 2.0).all()


def test_masked_fill_rejects_non_broadcastable_mask():
    with pytest.raises(ShapeError):
        T.masked_fill(Tensor(np.ones((2, 3))), np.ones((4,), bool), 0.0)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=finite),
    arrays(np.bool_, (3, 5)),
)
def test_masked_then_softmax_negligible_mass(x, mask):
    mask[:, 0] = False  # at least one open slot per row
    out = T.softmax(T.masked_fill(Tensor(x), mask, T.ATTENTION_MASK_VALUE), axis=-1).data
    assert (out[mask] <= 1e-30).all()


# layer_norm


def test_layer_norm_constant_slice_is_zero():
    out = T.layer_norm(Tensor(np.full((2, 6), 7.5)))
    assert np.isfinite(out.data).all()
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_moments():
    x = np.random.default_rng(5).standard_normal((4, 16)) * 10.0
    out = T.layer_norm(Tensor(x)).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_variance_matches_epsilon_identity():
    # before affine the variance is var / (var + eps) exactly
    x = np.random.default_rng(6).standard_normal((3, 8))
    out = T.layer_norm(Tensor(x), epsilon=1e-5).data
    v = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), v / (v + 1e-5), rtol=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(7)
    x, g, b = leaf(rng.standard_normal((3, 5))), leaf(rng.standard_normal(5)), leaf(rng.standard_normal(5))
    w = Tensor(rng.standard_normal((3, 5)))
    assert grad_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b], tolerance=1e-5).passed


# l2_normalize


def test_l2_normalize_3_4():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_idempotent_on_unit():
    v = np.array([0.0, 0.6, 0.8])
    np.testing.assert_allclose(T.l2_normalize(Tensor(v)).data, v, atol=1e-12)


def test_l2_normalize_zero_vector():
    x = leaf(np.zeros(4))
    out = T.l2_normalize(x)
    out.sum().backward()
    np.testing.assert_array_equal(out.data, 0.0)
    assert np.isfinite(x.grad).all()


# cross_entropy


def test_cross_entropy_uniform_logits():
    out = T.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
    assert out.item() == pytest.approx(math.log(7), abs=1e-12)
    assert round(out.item(), 4) == 1.9459


def test_cross_entropy_saturated():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 20.0
    assert T.cross_entropy(Tensor(logits), [1, 3]).item() < 1e-8


def test_cross_entropy_ignore_index_drops_rows():
    logits = np.random.default_rng(8).standard_normal((3, 4))
    full = T.cross_entropy(Tensor(logits[:2]), [1, 2]).item()
    partial = T.cross_entropy(Tensor(logits), [1, 2, T.IGNORE_INDEX]).item()
    assert partial == pytest.approx(full, abs=1e-15)


def test_cross_entropy_all_ignored_is_error():
    with pytest.raises(ValueError, match="no contributing rows"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [T.IGNORE_INDEX, T.IGNORE_INDEX])


def test_cross_entropy_out_of_range_target():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# backward


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(9).standard_normal((2, 3)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_accumulates_additively():
    x = leaf([1.0, -2.0])
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2.0)
    (x * 3.0).sum().backward()  # no zeroing in between: grads add
    np.testing.assert_array_equal(x.grad, 5.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        leaf([1.0, 2.0]).backward()


def test_composite_model_gradient_random_parameters():
    from hilight.encoders import EncoderConfig
    from hilight.synthdata import SpecRanges, collate, generate_sample
    from hilight.align_loss import PlacementConfig, total_alignment_loss
    from hilight.vlm import AlignmentModel

    rng = np.random.default_rng(10)
    model = AlignmentModel(EncoderConfig(hidden_dim=8, layers=2, heads=2, proxies=2, proj_dim=8, image_size=8), rng)
    batch = collate([generate_sample(s, SpecRanges(frames=2, image_size=8)) for s in (1, 2, 3)])
    cfg = PlacementConfig(mode="E4")
    params = model.video.parameters() + model.text.parameters()

    def f():
        return total_alignment_loss(cfg, model.video(batch.clips), model.text(batch.captions), batch.captions).total

    report = grad_check(f, params, coordinates=10, rng=rng)
    assert report.checked == 10
    assert report.passed, report


def test_tape_is_topological_and_visits_once():
    x = leaf([1.0, 2.0])
    y = x * 2.0
    z = (y + x) * y
    loss = z.sum()
    tape = Tape.from_loss(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.ops:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]
    assert tape.nodes[-1] is loss


def test_backward_deterministic():
    def grads():
        rng = np.random.default_rng(11)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 4)))
        T.log_softmax(T.gelu(a @ b), axis=-1).sum().backward()
        return a.grad.tobytes() + b.grad.tobytes()

    assert grads() == grads()


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_ops_produce_finite_values():
    x = Tensor(np.array([[-800.0, 0.0, 800.0]]))
    for out in (T.softmax(x), T.log_softmax(x), T.gelu(x), T.tanh(x), T.layer_norm(x)):
        assert np.isfinite(out.data).all()


def test_broadcast_add_gradient_unbroadcasts():
    a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
    (a + b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, 3.0)
