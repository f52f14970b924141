import threading

import numpy as np
import pytest

from promptst import autodiff as ad
from promptst.autodiff import Tape, Tensor, backward, gradient_check, no_grad, numerical_gradient
from promptst.exceptions import DimensionError, NonFiniteError


def _grad(fn, *tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    return [t.grad for t in tensors]


def _check(fn, *tensors):
    analytic = _grad(fn, *tensors)
    for tensor, grad in zip(tensors, analytic):
        numeric = numerical_gradient(fn, tensor)
        assert gradient_check(grad, numeric), (tensor.name, grad, numeric)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    projector = Tensor([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(ad.matmul(projector, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), atol=1e-12)


def test_layer_norm_examples(rng):
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(ad.layer_norm(Tensor([4.0, 4.0, 4.0]), ones, zeros).data, 0.0)
    out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    x, gain, bias = rng.normal(size=5), rng.normal(size=5), rng.normal(size=5)
    mean = sum(x) / 5
    var = sum((v - mean) ** 2 for v in x) / 5
    expected = [(x[i] - mean) / np.sqrt(var + 1e-5) * gain[i] + bias[i] for i in range(5)]
    np.testing.assert_allclose(ad.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data, expected, atol=1e-10)


def test_concat_and_slice_examples():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.concat([a], axis=0).data, a.data)
    top, rest = Tensor(np.ones((1, 3))), Tensor(np.zeros((2, 3)))
    joined = ad.concat([top, rest], axis=0)
    assert joined.shape == (3, 3)
    np.testing.assert_array_equal(joined.data[0], [1, 1, 1])
    np.testing.assert_array_equal(ad.slice_axis(a, 1, 0, 3).data, a.data)
    np.testing.assert_array_equal(ad.slice_axis(joined, 0, 1, 3).data, rest.data)


def test_concat_and_slice_gradients():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    grad_a, = _grad(lambda: ad.sum_all(ad.concat([a, b], axis=0)), a)
    np.testing.assert_array_equal(grad_a, np.ones((2, 3)))

    x = Tensor(np.arange(5.0), requires_grad=True)
    grad_x, = _grad(lambda: ad.sum_all(ad.slice_axis(x, 0, 1, 3)), x)
    np.testing.assert_array_equal(grad_x, [0, 1, 1, 0, 0])


def test_slice_rejects_empty_range():
    with pytest.raises(DimensionError):
        ad.slice_axis(Tensor(np.ones(3)), 0, 2, 2)


def test_elementwise_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    x = Tensor([-3.0, 3.0], requires_grad=True)
    assert ad.relu(x).data.tolist() == [0.0, 3.0]
    grad, = _grad(lambda: ad.sum_all(ad.relu(x)), x)
    np.testing.assert_array_equal(grad, [0.0, 1.0])
    assert ad.mean_all(Tensor(np.ones((2, 2)))).item() == 1.0


def test_add_broadcasts_trailing_axes():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grad_a, grad_b = _grad(lambda: ad.sum_all(ad.add(a, b)), a, b)
    np.testing.assert_array_equal(grad_a, np.ones((2, 3)))
    np.testing.assert_array_equal(grad_b, [2.0, 2.0, 2.0])


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True)
    grad, = _grad(lambda: ad.sum_all(x), x)
    np.testing.assert_array_equal(grad, [1.0, 1.0])
    x.grad = None
    with Tape():
        backward(ad.sum_all(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape(), pytest.raises(DimensionError):
        backward(x * x)


def test_backward_needs_an_active_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        backward(ad.sum_all(x * x))


def test_backward_rejects_loss_from_another_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = ad.sum_all(x * x)
    with Tape() as other, pytest.raises(DimensionError):
        other.backward(loss)
    assert x.grad is None


def test_nothing_recorded_outside_a_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(5):
        y = ad.sum_all(x * x)
    assert len(ad.current_tape()) == 0
    assert not y.requires_grad


def test_item_needs_a_single_element():
    assert Tensor([[3.0]]).item() == 3.0
    with pytest.raises(DimensionError):
        Tensor([1.0, 2.0]).item()


def test_frozen_tensors_get_no_gradient():
    frozen = Tensor([1.0, 2.0])
    live = Tensor([3.0, 4.0], requires_grad=True)
    _grad(lambda: ad.sum_all(frozen * live), live)
    assert frozen.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = x * x
        assert len(tape) == 0
    assert not y.requires_grad


def test_non_finite_output_names_the_op():
    with pytest.raises(NonFiniteError) as info:
        ad.sqrt(Tensor([-1.0]))
    assert info.value.op == "sqrt"


def test_tapes_are_thread_local():
    x = Tensor([2.0], requires_grad=True)
    seen = {}

    def worker():
        seen["length"] = len(ad.current_tape())

    with Tape() as tape:
        _ = x * x
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
        assert len(tape) == 1
    assert seen["length"] == 0


UNARY_OPS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "sqrt": lambda x: ad.sqrt(ad.mul(x, x) + 1.0),
    "abs": ad.abs,
    "softmax": ad.softmax,
    "transpose_last2": ad.transpose_last2,
    "mean_all": ad.mean_all,
    "sum_axis": lambda x: ad.sum_axis(x, 0),
    "reshape": lambda x: ad.reshape(x, (4, 3)),
    "permute": lambda x: ad.permute(x, (1, 0)),
    "broadcast_to": lambda x: ad.broadcast_to(x, (2, 3, 4)),
    "slice_axis": lambda x: ad.slice_axis(x, 1, 1, 3),
    "scale": lambda x: x * 2.5,
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_op_gradients(name, rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="x")
    weights = Tensor(rng.normal(size=UNARY_OPS[name](Tensor(x.data)).shape))
    _check(lambda: ad.sum_all(ad.mul(UNARY_OPS[name](x), weights)), x)


def test_binary_op_gradients(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(4,)), requires_grad=True, name="b")
    c = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="c")
    _check(lambda: ad.sum_all(ad.mul(ad.add(a, b), ad.sub(a, b))), a, b)
    _check(lambda: ad.sum_all(ad.matmul(ad.mul(a, a), c)), a, c)
    _check(lambda: ad.sum_all(ad.concat([a, ad.mul(a, a)], axis=1) * 0.3), a)


def test_layer_norm_gradient(rng):
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="x")
    gain = Tensor(rng.normal(size=5), requires_grad=True, name="gain")
    bias = Tensor(rng.normal(size=5), requires_grad=True, name="bias")
    weights = Tensor(rng.normal(size=(3, 5)))
    _check(lambda: ad.sum_all(ad.mul(ad.layer_norm(x, gain, bias), weights)), x, gain, bias)


def test_gradient_check_floor():
    assert gradient_check(np.array([1e-10]), np.array([1.5e-10]))
    assert not gradient_check(np.array([1.0]), np.array([1.01]))
