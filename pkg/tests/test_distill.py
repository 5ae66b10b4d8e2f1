import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrkd import ops
from rrkd.distill import (LayerPairSet, LossConfig, at_loss, attention_map, default_layer_pairs,
                          total_loss)
from rrkd.errors import ShapeError
from rrkd.nn import ArchSpec
from rrkd.recurrence import build_student, build_teacher
from rrkd.tensor import Tape, Tensor, backward


def test_attention_map_hand_value():
    out = attention_map(Tensor(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))).data
    expected = np.array([9.0, 16.0]) / np.hypot(9.0, 16.0)
    np.testing.assert_allclose(out, [expected])
    np.testing.assert_allclose(out, [[0.49026, 0.87157]], atol=1e-5)


def test_attention_map_sign_and_channel_merge(rng):
    a = rng.standard_normal((2, 1, 3, 3))
    two = attention_map(Tensor(np.concatenate([a, -a], axis=1))).data
    one = attention_map(Tensor(a * np.sqrt(2))).data
    np.testing.assert_allclose(two, one, rtol=1e-12)


def test_attention_map_zero_input():
    assert not attention_map(Tensor(np.zeros((2, 3, 2, 2)))).data.any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(1e-3, 1e3), t=st.floats(1e-3, 1e3))
def test_at_loss_scale_invariance(seed, s, t):
    rng = np.random.default_rng(seed)
    student = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 2, 2))]
    teacher = [rng.standard_normal((2, 6, 4, 4)), rng.standard_normal((2, 7, 2, 2))]
    pairs = LayerPairSet([(0, 0), (1, 1)])
    base = float(at_loss([Tensor(a) for a in student], [Tensor(a) for a in teacher], pairs).data)
    scaled = float(at_loss([Tensor(student[0] * s), Tensor(student[1])],
                           [Tensor(teacher[0]), Tensor(teacher[1] * t)], pairs).data)
    assert abs(base - scaled) < 1e-12
    assert 0 <= base <= 2 * len(pairs)


def test_at_loss_identical_and_hand_value(rng):
    acts = [Tensor(rng.standard_normal((3, 4, 4, 4)))]
    assert float(at_loss(acts, acts, LayerPairSet([(0, 0)])).data) == 0.0
    s = Tensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
    t = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    assert float(at_loss([s], [t], LayerPairSet([(0, 0)])).data) == pytest.approx(2.0, abs=1e-15)


def test_at_loss_spatial_mismatch():
    with pytest.raises(ShapeError):
        at_loss([Tensor(np.ones((1, 2, 4, 4)))], [Tensor(np.ones((1, 2, 2, 2)))], LayerPairSet([(0, 0)]))


def test_at_loss_does_not_touch_teacher(rng):
    s = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    t = Tensor(rng.standard_normal((2, 5, 4, 4)), requires_grad=True)
    with Tape():
        loss = at_loss([s], [t], LayerPairSet([(0, 0)]))
    backward(loss)
    assert s.grad is not None and t.grad is None


def test_default_pairs(rng):
    student = build_student(ArchSpec.student(3, 1))
    teacher = build_teacher(ArchSpec.teacher(blocks_per_group=1))
    pairs = default_layer_pairs(student, teacher)
    assert pairs.pairs == [(0, 0), (1, 1), (2, 2)]
    x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    _, sa = student(x, train=False)
    _, ta = teacher(x, train=False)
    assert [(sa[i].shape[2:], ta[j].shape[2:]) for i, j in pairs] == [((32, 32),) * 2, ((16, 16),) * 2,
                                                                      ((8, 8),) * 2]
    two_group = build_teacher(ArchSpec.teacher(widths=(32, 64), blocks_per_group=1))
    with pytest.raises(ShapeError):
        default_layer_pairs(student, two_group)


def test_total_loss_reductions(rng):
    logits = Tensor(rng.standard_normal((4, 5)))
    labels = [0, 1, 2, 3]
    acts_s = [Tensor(rng.standard_normal((4, 2, 3, 3)))]
    acts_t = [Tensor(rng.standard_normal((4, 6, 3, 3)))]
    pairs = LayerPairSet([(0, 0)])
    cls = float(ops.softmax_cross_entropy(logits, labels).data)
    assert float(total_loss(logits, labels, acts_s, acts_t, pairs, LossConfig(0.0)).data) == cls
    same = float(total_loss(logits, labels, acts_s, acts_s, pairs, LossConfig(123.0)).data)
    assert same == cls
    mixed = float(total_loss(logits, labels, acts_s, acts_t, pairs, LossConfig(3.0)).data)
    assert mixed == pytest.approx(cls + 3 * float(at_loss(acts_s, acts_t, pairs).data), rel=1e-12)


def test_default_lambda_and_validation():
    assert LossConfig().weight(3) == pytest.approx(1000 / 3)
    with pytest.raises(ValueError):
        LossConfig(-1).weight(3)


def test_frozen_teacher_gets_no_gradient(rng):
    student = build_student(ArchSpec.student(1, 1, num_classes=3, widths=(4, 8)), dtype=np.float64, rng=rng)
    teacher = build_teacher(ArchSpec.teacher(3, widths=(8, 16), blocks_per_group=1), dtype=np.float64,
                            rng=rng).freeze()
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    with Tape():
        logits, sa = student(x)
        _, ta = teacher(x, train=False)
        loss = total_loss(logits, [0, 2], sa, ta, default_layer_pairs(student, teacher), LossConfig())
    grads = backward(loss)
    assert set(grads) == {p.name for p in student.parameters()}
    assert all(p.grad is None for p in teacher.parameters())
