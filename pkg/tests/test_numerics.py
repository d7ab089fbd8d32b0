"""Tests for the tensor and autodiff module."""

import numpy as np
import pytest

from src.errors import NumericsError, ShapeError
from src.numerics import (
    Function,
    Tensor,
    add,
    add_bias,
    backward,
    finite_diff_check,
    layer_norm,
    matmul,
    mse_loss,
    mul,
    no_grad,
    permute,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    take_rows,
    transpose,
)


@pytest.fixture
def rng():
    """Seeded generator for random test inputs."""
    return np.random.default_rng(1234)


def leaf(array) -> Tensor:
    return Tensor(array, requires_grad=True)


class SkewedHalfSquare(Function):
    """c·x²/2 elementwise, with a backward pass multiplied by `skew`."""

    def __init__(self, x: Tensor, *, c: float, skew: float):
        super().__init__(x)
        self.c, self.skew = c, skew

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return 0.5 * self.c * x * x

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.c * self.x * self.skew,)


class TestTensor:
    """Tests for Tensor construction and accessors."""

    def test_stores_float64(self):
        """Test that integer input is stored as float64."""
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.ndim == 2
        assert t.size == 4

    def test_rejects_non_finite(self):
        """Test that NaN and infinity are refused."""
        with pytest.raises(NumericsError):
            Tensor([1.0, np.nan])
        with pytest.raises(NumericsError):
            Tensor([np.inf])

    def test_rejects_empty_dimension(self):
        """Test that a zero-length dimension is a shape error."""
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_item_needs_single_element(self):
        """Test item() on scalar and vector tensors."""
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_does_not_alias_input(self):
        """Test that a tensor keeps its values when the source array changes."""
        values = np.array([1.0, 2.0])
        t = Tensor(values)
        values[0] = 99.0
        assert t.data[0] == 1.0

    def test_scalar_stays_zero_dimensional(self):
        """Test that 0-d input gives a 0-d tensor."""
        assert Tensor(3.5).shape == ()
        assert Tensor(np.float64(2.0)).ndim == 0

    def test_numpy_returns_copy(self):
        """Test that numpy() does not alias the tensor data."""
        t = Tensor([1.0, 2.0])
        copy = t.numpy()
        copy[0] = 99.0
        assert t.data[0] == 1.0

    def test_operators(self):
        """Test the arithmetic operator overloads."""
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        assert np.array_equal((a + b).data, [4.0, 7.0])
        assert np.array_equal((b - a).data, [2.0, 3.0])
        assert np.array_equal((a * b).data, [3.0, 10.0])
        assert np.array_equal((2.0 * a).data, [2.0, 4.0])
        assert np.array_equal((-a).data, [-1.0, -2.0])


class TestShapes:
    """Tests for shape-checked primitives."""

    def test_matmul_matches_numpy(self, rng):
        """Test 2-D, matrix-vector and batched products."""
        a, b, v = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)
        assert np.allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)
        assert np.allclose(matmul(Tensor(a), Tensor(v)).data, a @ v)
        x, y = rng.normal(size=(5, 2, 3)), rng.normal(size=(5, 3, 2))
        assert np.allclose(matmul(Tensor(x), Tensor(y)).data, x @ y)

    def test_matmul_mismatch(self):
        """Test that incompatible inner dimensions raise ShapeError."""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_no_implicit_broadcast(self):
        """Test that add refuses tensors of different shapes."""
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_add_bias_rows(self):
        """Test that add_bias adds the vector to every row."""
        out = add_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        with pytest.raises(ShapeError):
            add_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))

    def test_reshape_and_permute(self):
        """Test reshape size check and permute axis check."""
        x = Tensor(np.arange(1.0, 7.0))
        assert reshape(x, (2, 3)).shape == (2, 3)
        with pytest.raises(ShapeError):
            reshape(x, (4, 2))
        y = Tensor(np.ones((2, 3, 4)))
        assert permute(y, (2, 0, 1)).shape == (4, 2, 3)
        with pytest.raises(ShapeError):
            permute(y, (0, 0, 1))

    def test_transpose_swaps_last_axes(self):
        """Test transpose on a batched tensor."""
        assert transpose(Tensor(np.ones((5, 2, 3)))).shape == (5, 3, 2)


class TestSoftmax:
    """Tests for row-wise softmax."""

    def test_rows_sum_to_one(self, rng):
        """Test normalisation of every row."""
        out = softmax_rows(Tensor(rng.normal(size=(4, 6))))
        assert np.allclose(out.data.sum(axis=-1), 1.0)

    def test_large_values_are_stable(self):
        """Test that max subtraction prevents overflow."""
        out = softmax_rows(Tensor([[1000.0, 1000.0], [-1000.0, 0.0]]))
        assert np.allclose(out.data[0], [0.5, 0.5])
        assert np.all(np.isfinite(out.data))

    def test_masked_entries_are_exactly_zero(self):
        """Test that masked positions receive probability 0."""
        mask = np.array([[True, False, True], [True, False, False]])
        out = softmax_rows(Tensor([[1.0, 50.0, 1.0], [2.0, 3.0, 4.0]]), mask=mask)
        assert out.data[0, 1] == 0.0
        assert np.array_equal(out.data[1], [1.0, 0.0, 0.0])
        assert np.allclose(out.data[0], [0.5, 0.0, 0.5])

    def test_fully_masked_row(self):
        """Test that a row with no unmasked entry is an error."""
        with pytest.raises(NumericsError):
            softmax_rows(Tensor(np.ones((1, 2))), mask=np.zeros((1, 2), dtype=bool))


class TestBackward:
    """Tests for reverse-mode gradients."""

    def test_requires_scalar_loss(self):
        """Test that a non-scalar loss is refused."""
        x = leaf([1.0, 2.0])
        with pytest.raises(NumericsError):
            backward(mul(x, x))

    def test_product_gradient(self):
        """Test d/da sum(a*b) = b and d/db = a."""
        a, b = leaf([1.0, 2.0, 3.0]), leaf([4.0, 5.0, 6.0])
        backward(reduce_sum(mul(a, b)))
        assert np.array_equal(a.grad, [4.0, 5.0, 6.0])
        assert np.array_equal(b.grad, [1.0, 2.0, 3.0])

    def test_shared_input_accumulates(self):
        """Test that a tensor used twice receives both gradient contributions."""
        x = leaf([1.0, -2.0])
        backward(reduce_sum(mul(x, x)))
        assert np.array_equal(x.grad, [2.0, -4.0])

    def test_frozen_tensor_gets_no_grad(self):
        """Test that tensors without requires_grad never receive a gradient."""
        w = Tensor([[1.0, 2.0], [3.0, 4.0]])
        x = leaf([1.0, 1.0])
        backward(reduce_sum(matmul(w, x)))
        assert w.grad is None
        assert np.array_equal(x.grad, [4.0, 6.0])

    def test_gradients_accumulate_across_calls(self):
        """Test that a second backward adds to the existing gradient."""
        x = leaf([3.0])
        backward(reduce_sum(x))
        backward(reduce_sum(x))
        assert np.array_equal(x.grad, [2.0])
        x.zero_grad()
        assert x.grad is None

    def test_take_rows_repeated_index(self):
        """Test that repeated embedding rows accumulate gradient."""
        table = leaf(np.ones((3, 2)))
        backward(reduce_sum(take_rows(table, np.array([0, 0, 2]))))
        assert np.array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_add_bias_gradient_sums_rows(self):
        """Test the bias gradient of add_bias."""
        bias = leaf([0.0, 0.0])
        backward(reduce_sum(add_bias(Tensor(np.ones((3, 2))), bias)))
        assert np.array_equal(bias.grad, [3.0, 3.0])

    def test_mse_gradient(self):
        """Test d/dp mean((p - t)^2) = 2(p - t)/n."""
        pred = leaf([1.0, 3.0])
        loss = mse_loss(pred, Tensor([0.0, 0.0]))
        assert loss.item() == 5.0
        backward(loss)
        assert np.allclose(pred.grad, [1.0, 3.0])

    def test_reductions_are_scalars(self):
        """Test that losses and reductions are 0-d and accepted by backward."""
        pred = leaf([[1.0, 2.0], [3.0, 4.0]])
        target = Tensor(np.zeros((2, 2)))
        for loss in (mse_loss(pred, target), reduce_sum(pred), reduce_mean(pred)):
            assert loss.shape == ()
            pred.zero_grad()
            backward(loss)
            assert pred.grad.shape == (2, 2)

    def test_no_grad_disables_tracking(self):
        """Test that outputs computed under no_grad are untracked."""
        x = leaf([1.0, 2.0])
        with no_grad():
            y = reduce_sum(mul(x, x))
        assert not y.requires_grad
        assert y.is_leaf


class TestFiniteDiff:
    """Analytic gradients agree with central differences."""

    def test_matmul_chain(self, rng):
        """Test a two-layer linear map."""
        w1, w2 = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(2, 4)))
        x = leaf(rng.normal(size=3))
        assert finite_diff_check(lambda t: reduce_sum(matmul(w2, matmul(w1, t))), x) < 1e-6

    def test_softmax(self, rng):
        """Test row softmax weighted by a fixed matrix."""
        w = Tensor(rng.normal(size=(3, 5)))
        x = leaf(rng.normal(size=(3, 5)))
        assert finite_diff_check(lambda t: reduce_sum(mul(softmax_rows(t), w)), x) < 1e-6

    def test_masked_softmax(self, rng):
        """Test gradients through a masked softmax."""
        mask = np.array([[True, True, False], [False, True, True]])
        w = Tensor(rng.normal(size=(2, 3)))
        x = leaf(rng.normal(size=(2, 3)))
        def f(t: Tensor) -> Tensor:
            return reduce_sum(mul(softmax_rows(t, mask), w))

        assert finite_diff_check(f, x) < 1e-6

    def test_layer_norm_input_and_gain(self, rng):
        """Test layer norm gradients for the input and the gain."""
        w = Tensor(rng.normal(size=(3, 4)))
        gain, bias = leaf(rng.normal(size=4)), Tensor(rng.normal(size=4))
        x = leaf(rng.normal(size=(3, 4)))
        assert finite_diff_check(lambda t: reduce_sum(mul(layer_norm(t, gain, bias), w)), x) < 1e-6
        assert finite_diff_check(lambda g: reduce_sum(mul(layer_norm(x, g, bias), w)), gain) < 1e-6

    def test_sigmoid_and_mean(self, rng):
        """Test sigmoid followed by a mean reduction."""
        x = leaf(rng.normal(size=(2, 3)))
        assert finite_diff_check(lambda t: reduce_mean(sigmoid(t)), x) < 1e-6

    def test_relu_network(self, rng):
        """Test a small ReLU network."""
        w1, w2 = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(1, 6)))
        x = leaf(rng.normal(size=(3, 4)))
        def f(t: Tensor) -> Tensor:
            return reduce_sum(matmul(relu(matmul(t, transpose(w1))), transpose(w2)))

        assert finite_diff_check(f, x) < 1e-6

    def test_relu_kink_is_skipped(self):
        """Test that a coordinate sitting on a ReLU kink is excluded."""
        x = leaf([0.0, 1.0, -1.0])
        assert finite_diff_check(lambda t: reduce_sum(relu(t)), x) < 1e-6

    def test_small_gradients_checked_relatively(self, rng):
        """Test that a one percent error in gradients of order 1e-4 is reported."""
        x = leaf(rng.uniform(0.5, 1.5, size=6))
        error = finite_diff_check(
            lambda t: reduce_sum(SkewedHalfSquare.apply(t, c=1e-4, skew=1.01)), x
        )
        assert error == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_small_correct_gradients_pass(self, rng):
        """Test that exact gradients of order 1e-4 agree closely."""
        x = leaf(rng.uniform(0.5, 1.5, size=6))
        error = finite_diff_check(
            lambda t: reduce_sum(SkewedHalfSquare.apply(t, c=1e-4, skew=1.0)), x
        )
        assert error < 1e-9

    def test_input_is_restored(self, rng):
        """Test that the perturbed tensor holds its original values afterwards."""
        values = rng.normal(size=4)
        x = leaf(values.copy())
        finite_diff_check(lambda t: reduce_sum(mul(t, t)), x)
        assert np.array_equal(x.data, values)

    def test_argument_checks(self):
        """Test eps range and leaf requirements."""
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: reduce_sum(t), leaf([1.0]), eps=0.5)
        with pytest.raises(NumericsError):
            finite_diff_check(lambda t: reduce_sum(t), Tensor([1.0]))


class TestClosedForms:
    """Hand-computed values for individual primitives."""

    def test_matmul_values(self):
        """Test identity and a 2x2 by 2x1 product."""
        identity = Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(matmul(identity, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_relu_values_and_gradient(self):
        """Test relu output and its gradient under a unit upstream."""
        assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        assert np.array_equal(relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])
        x = leaf([-1.0, 2.0])
        backward(reduce_sum(relu(x)))
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_softmax_values(self):
        """Test symmetric, saturated and closed-form rows."""
        out = softmax_rows(Tensor([[0.0, 0.0], [1000.0, 0.0], [0.0, np.log(3.0)]]))
        assert np.allclose(out.data[0], [0.5, 0.5])
        assert out.data[1, 0] == pytest.approx(1.0)
        assert out.data[1, 1] == pytest.approx(0.0, abs=1e-300)
        assert np.allclose(out.data[2], [0.25, 0.75], atol=1e-12)
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) <= 1e-12)

    def test_layer_norm_values(self):
        """Test constant rows, a two-element row and a zero gain."""
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        assert np.array_equal(layer_norm(Tensor([[5.0, 5.0]]), ones, zeros).data, [[0.0, 0.0]])
        out = layer_norm(Tensor([[1.0, 3.0]]), ones, zeros)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)
        bias = Tensor([0.5, -0.5])
        out = layer_norm(Tensor([[1.0, 3.0], [2.0, 7.0]]), zeros, bias)
        assert np.array_equal(out.data, [[0.5, -0.5], [0.5, -0.5]])

    def test_layer_norm_statistics(self, rng):
        """Test per-row zero mean and near-unit variance before gain and bias."""
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 32)))
        out = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)))
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_mse_values(self):
        """Test zero loss, a closed-form loss and a length mismatch."""
        assert mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert mse_loss(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 12.5
        with pytest.raises(ShapeError):
            mse_loss(Tensor([0.0, 0.0]), Tensor([1.0]))

    def test_sum_gradient_is_ones(self):
        """Test d/dx sum(x) = 1."""
        x = leaf([1.0, 2.0, 3.0])
        backward(reduce_sum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_finite_difference(self):
        """Test f = x^2 at x = 3, whose gradient is 6."""
        x = leaf(3.0)
        assert finite_diff_check(lambda t: mul(t, t), x) < 1e-8

    def test_linear_finite_difference(self, rng):
        """Test that a linear function agrees to machine precision."""
        w = Tensor(rng.normal(size=5))
        x = leaf(rng.normal(size=5))
        assert finite_diff_check(lambda t: reduce_sum(mul(w, t)), x) < 1e-9

    def test_mse_of_linear_map(self, rng):
        """Test mse(Wx, y) gradients for W against finite differences."""
        x, y = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=2))
        w = leaf(rng.normal(size=(2, 3)))
        assert finite_diff_check(lambda m: mse_loss(matmul(m, x), y), w) < 1e-6

    def test_deterministic(self, rng):
        """Test that identical inputs give bitwise-identical outputs."""
        a = rng.normal(size=(3, 3))
        first = softmax_rows(matmul(Tensor(a), Tensor(a))).data
        second = softmax_rows(matmul(Tensor(a), Tensor(a))).data
        assert np.array_equal(first, second)
