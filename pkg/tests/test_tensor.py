import numpy as np
import pytest

from rrkd import ops
from rrkd.errors import ShapeError, TapeError
from rrkd.tensor import Parameter, Tape, Tensor, backward, detach


def test_sum_of_scaled_input_has_gradient_two():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.scale(x, 2))
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_shared_kernel_gradient_is_twice_single_use(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = Parameter(rng.standard_normal((4, 3, 3, 3)), "w", dtype=np.float64)
    with Tape():
        single = ops.sum_all(ops.conv2d(x, w, 1, 1))
    g1 = backward(single)["w"].copy()
    with Tape():
        double = ops.sum_all(ops.add(ops.conv2d(x, w, 1, 1), ops.conv2d(x, w, 1, 1)))
    g2 = backward(double)["w"]
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.square(x))
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_needs_scalar_and_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = ops.square(x)
    with pytest.raises(ShapeError):
        backward(y)
    with pytest.raises(TapeError):
        backward(ops.sum_all(ops.square(x)))


def test_unused_parameter_gets_zero_gradient_and_frozen_gets_none():
    a = Parameter(np.ones(3), "a", dtype=np.float64)
    frozen = Parameter(np.ones(3), "frozen", trainable=False, dtype=np.float64)
    with Tape():
        loss = ops.sum_all(ops.add(ops.square(a), frozen))
    grads = backward(loss)
    assert set(grads) == {"a"}
    assert frozen.grad is None
    np.testing.assert_array_equal(grads["a"], 2 * np.ones(3))


def test_no_recording_outside_tape():
    x = Tensor([1.0], requires_grad=True)
    y = ops.square(x)
    assert not y.requires_grad and y._tape is None


def test_detach_blocks_gradient():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = ops.sum_all(ops.add(ops.square(x), ops.square(detach(x))))
    backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0])


def test_gradient_is_sum_of_untied_copies(rng):
    """Exact additivity: a k-times-used tensor vs k copies of equal value."""
    data = rng.standard_normal((3, 2, 3, 3))
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    tied = Parameter(data.copy(), "tied", dtype=np.float64)
    copies = [Parameter(data.copy(), f"c{i}", dtype=np.float64) for i in range(3)]
    proj = [rng.standard_normal((2, 3, 4, 4)) for _ in range(3)]

    def loss_of(kernels):
        total = None
        for k, p in zip(kernels, proj):
            y = ops.conv2d(x, k, 1, 1)
            term = ops.sum_all(ops.square(ops.add(y, Tensor(p))))
            total = term if total is None else ops.add(total, term)
        return total

    with Tape():
        g_tied = backward(loss_of([tied] * 3))["tied"]
    with Tape():
        g = backward(loss_of(copies))
    summed = g["c0"] + g["c1"] + g["c2"]
    assert np.max(np.abs(g_tied - summed)) / np.max(np.abs(summed)) < 1e-12


def test_determinism_bit_identical(rng):
    data = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    kernel = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        w = Parameter(kernel.copy(), "w")
        with Tape():
            loss = ops.sum_all(ops.square(ops.conv2d(Tensor(data), w, 1, 1)))
        return loss.data.copy(), backward(loss)["w"]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_tensor_keeps_float64_and_defaults_float32():
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.float64(1.5)).dtype == np.float64
    assert Tensor(np.zeros(())).shape == ()
