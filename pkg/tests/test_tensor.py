import math

import numpy as np
import pytest

from pifenet import ops
from pifenet.tensor import (GradTape, NonFiniteError, Parameter, Tensor, default_dtype, no_grad,
                            precision)


def test_add_and_max_values():
    assert ops.add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]
    assert ops.maximum(Tensor([1, 5]), Tensor([5, 1])).data.tolist() == [5, 5]


def test_mul_broadcast_constants():
    out = ops.mul(Tensor(np.ones((2, 2, 1))), Tensor(np.full((2, 1, 2), 2.0)))
    assert out.shape == (2, 2, 2)
    assert np.all(out.data == 2)


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_nonfinite_result_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.mul(Tensor([1e30]), Tensor([1e30])) * Tensor([1e30])


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_max_tie_routes_to_first_operand():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    ops.maximum(a, b).sum().backward()
    assert a.grad.tolist() == [1.0] and b.grad.tolist() == [0.0]


def test_linear_examples():
    assert ops.linear(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0])).data.tolist() == [1, 0]
    assert ops.linear(Tensor([1.0, 2.0]), Tensor([[1.0], [1.0]]), Tensor([1.0])).data.tolist() == [4]


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError):
        ops.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))))


def test_conv_identity_and_valid_sum():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 3)))
    k = Tensor(np.eye(3).reshape(1, 1, 3, 3))
    np.testing.assert_array_equal(ops.conv2d(x, k).data, x.data)
    out = ops.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), padding="valid")
    assert out.data.reshape(-1).tolist() == [9]


@pytest.mark.parametrize("H,W,stride", [(5, 5, 2), (6, 7, 2), (8, 8, 1), (9, 4, 3)])
def test_conv_same_output_extent(H, W, stride):
    out = ops.conv2d(Tensor(np.ones((H, W, 2))), Tensor(np.ones((3, 3, 2, 4))), stride=stride)
    assert out.shape == (math.ceil(H / stride), math.ceil(W / stride), 4)


def test_conv_errors():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), padding="valid")
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3))
    got = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=2).data
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(got)
    for i in range(got.shape[0]):
        for j in range(got.shape[1]):
            patch = pad[2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[i, j] = np.einsum("abc,abcd->d", patch, k)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_reduce_examples():
    x = Tensor([[1.0, 3.0], [2.0, 4.0]])
    assert ops.reduce(x, 0, "mean").data.tolist() == [[1.5, 3.5]]
    assert ops.reduce(x, 1, "max").data.tolist() == [[3], [4]]


def test_reduce_gradients_one_hot_and_uniform():
    x = Tensor(np.array([[1.0, 5.0, 5.0], [0.0, -1.0, 2.0]]), requires_grad=True)
    ops.reduce(x, 1, "max").sum().backward()
    assert x.grad.tolist() == [[0, 1, 0], [0, 0, 1]]
    x.grad = None
    ops.reduce(x, 1, "mean").sum().backward()
    np.testing.assert_allclose(x.grad.sum(axis=1), 1.0)
    np.testing.assert_allclose(x.grad, 1 / 3)


def test_masked_reduce_ignores_padding():
    x = Tensor(np.array([[[1.0], [3.0], [100.0]]]))
    mask = np.array([[[True], [True], [False]]])
    assert ops.reduce(x, 1, "mean", mask).data.item() == 2.0
    assert ops.reduce(x, 1, "max", mask).data.item() == 3.0


def test_activation_values():
    assert ops.swish(Tensor([0.0])).data.item() == 0.0
    assert ops.activation(Tensor([0.0]), "shifted_sigmoid").data.item() == 0.0
    assert ops.relu(Tensor([-3.0, 2.0])).data.tolist() == [0, 2]
    with precision(np.float64):
        assert ops.swish(Tensor([1.0])).data.item() == pytest.approx(0.7310585786300049, abs=1e-12)


def test_shifted_sigmoid_range():
    y = ops.activation(Tensor(np.linspace(-40, 40, 101)), "shifted_sigmoid").data
    assert np.all(y >= -1) and np.all(y <= 1)


def test_resample_examples():
    assert ops.upsample(Tensor(np.ones((1, 1, 1)))).data.reshape(2, 2).tolist() == [[1, 1], [1, 1]]
    assert ops.downsample(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])).data.item() == 4
    x = np.random.default_rng(0).normal(size=(3, 5, 2))
    np.testing.assert_array_equal(ops.downsample(ops.upsample(Tensor(x))).data, Tensor(x).data)
    with pytest.raises(ValueError):
        ops.downsample(Tensor(np.ones((3, 4, 1))))


def test_concat():
    assert ops.concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1).data.tolist() == [[1, 2]]
    x = Tensor(np.ones((2, 3)))
    assert ops.concat([x] * 4, axis=0).shape == (8, 3)
    a, b = Tensor(np.ones((2, 1)), requires_grad=True), Tensor(np.ones((2, 2)), requires_grad=True)
    ops.concat([a, b], axis=1).sum().backward()
    assert np.all(a.grad == 1) and np.all(b.grad == 1)
    with pytest.raises(ValueError):
        ops.concat([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))], axis=1)


def test_scatter_rejects_duplicates_and_out_of_grid():
    rows = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ops.scatter_rows(rows, np.array([0, 0]), np.array([1, 1]), 2, 2)
    with pytest.raises(ValueError):
        ops.scatter_rows(rows, np.array([0, 2]), np.array([0, 0]), 2, 2)


def test_backward_square_and_constant():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [6.0]
    p = Parameter(np.ones(3))
    c = Tensor([2.0], requires_grad=True)
    (c * 0.0).sum().backward()
    assert c.grad.tolist() == [0.0] and np.all(p.grad == 0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_tape_is_topological_and_fills_each_grad_once():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    h = a * b
    root = (h + h * a).sum()
    tape = root.backward()
    seen = {a.uid, b.uid}
    for entry in tape.entries:
        assert all(i in seen for i in entry.inputs)
        seen.add(entry.output)
    np.testing.assert_allclose(a.grad, b.data + 2 * a.data * b.data)
    np.testing.assert_allclose(b.grad, a.data + a.data ** 2)
    assert isinstance(tape, GradTape)


def test_precision_and_no_grad():
    assert default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(5)
    x, k = rng.normal(size=(8, 8, 4)), rng.normal(size=(3, 3, 4, 4))
    a = ops.conv2d(Tensor(x), Tensor(k)).data
    b = ops.conv2d(Tensor(x), Tensor(k)).data
    assert a.tobytes() == b.tobytes()


def test_batch_norm_uses_running_stats_when_given():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4, 2)), dtype=np.float64)
    stats = (np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    out, _ = ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0, stats)
    np.testing.assert_allclose(out.data, (x.data - stats[0]) / np.sqrt(stats[1]), rtol=1e-6)
