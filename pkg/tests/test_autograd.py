"""Tests for the autograd tensor engine."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from patchrec.autograd import (
    Tensor, concat, gelu, gradient_check, layer_norm, matmul, mean_pool, mul, no_grad,
    numerical_gradient, relative_error, slice_cols, slice_rows, softmax, softmax_cross_entropy,
    sum_all, take_rows, transpose,
)
from patchrec.utils import EmptyPoolError, NoSupervisionError, ShapeError


def uniform(rng, *shape, requires_grad=True, name=None):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=requires_grad, name=name)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """A scalar that depends on every output entry with a distinct weight."""
    return sum_all(mul(out, Tensor(weights)))


class TestMatmul:
    """Tests for the matrix product."""

    @pytest.mark.unit
    def test_identity(self):
        """I2 @ I2 is I2."""
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))

    @pytest.mark.unit
    def test_hand_arithmetic(self):
        """[[1,2],[3,4]] @ [[1],[1]] is [[3],[7]]."""
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    @pytest.mark.unit
    def test_shape_mismatch_names_both_shapes(self):
        """Mismatched inner dimensions raise a ShapeError naming both shapes."""
        with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 5\]"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    @pytest.mark.unit
    def test_gradient_matches_finite_differences(self, rng):
        """Random 5x4 @ 4x3 gradients agree with central differences."""
        a, b = uniform(rng, 5, 4, name="a"), uniform(rng, 4, 3, name="b")
        weights = rng.uniform(-1, 1, size=(5, 3))
        errors = gradient_check(lambda: weighted_sum(matmul(a, b), weights), {"a": a, "b": b})
        assert max(errors.values()) < 1e-6


class TestMeanPool:
    """Tests for mean pooling."""

    @pytest.mark.unit
    def test_single_row_is_identity(self):
        """Pooling one row returns that row."""
        row = Tensor([[0.5, -2.0, 3.0]])
        np.testing.assert_array_equal(mean_pool(row).data, row.data)

    @pytest.mark.unit
    def test_symmetric_rows(self):
        """[[2,0],[0,2]] pools to [1,1]."""
        np.testing.assert_array_equal(mean_pool(Tensor([[2.0, 0.0], [0.0, 2.0]])).data, [[1.0, 1.0]])

    @pytest.mark.unit
    def test_backward_distributes_one_over_n(self, rng):
        """d sum(pool) / d row is exactly 1/7 for a 7x16 input."""
        rows = uniform(rng, 7, 16)
        sum_all(mean_pool(rows)).backward()
        np.testing.assert_array_equal(rows.grad, np.full((7, 16), 1.0 / 7))

    @pytest.mark.unit
    def test_backward_hands_g_over_n(self, rng):
        """An arbitrary incoming gradient g reaches each row as g / n."""
        rows = uniform(rng, 3, 4)
        g = rng.uniform(-1, 1, size=(1, 4))
        mean_pool(rows).backward(g)
        for i in range(3):
            np.testing.assert_array_equal(rows.grad[i], (g / 3)[0])

    @pytest.mark.unit
    def test_empty_pool_raises(self):
        """Zero rows cannot be pooled."""
        with pytest.raises(EmptyPoolError):
            mean_pool(Tensor(np.zeros((0, 4))))


class TestSoftmaxCrossEntropy:
    """Tests for masked cross-entropy."""

    @pytest.mark.unit
    def test_confident_correct_prediction(self):
        """Logits +20 at the target give a loss below 1e-6."""
        logits = np.zeros((3, 5))
        targets = [1, 4, 0]
        logits[np.arange(3), targets] = 20.0
        loss = softmax_cross_entropy(Tensor(logits), targets, [True] * 3)
        assert loss.item() < 1e-6

    @pytest.mark.unit
    def test_uniform_logits_closed_form(self):
        """Uniform logits over V=4 cost ln 4 on the single supervised row."""
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 2, 3], [False, True, False])
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    @pytest.mark.unit
    def test_masked_rows_get_exact_zero_gradient(self, rng):
        """Rows with mask False receive a gradient of exactly zero."""
        logits = uniform(rng, 4, 6)
        softmax_cross_entropy(logits, [1, 2, 3, 4], [True, False, True, False]).backward()
        assert np.all(logits.grad[1] == 0.0)
        assert np.all(logits.grad[3] == 0.0)
        assert np.any(logits.grad[0] != 0.0)

    @pytest.mark.unit
    def test_shift_invariance(self, rng):
        """Adding a constant to one row's logits leaves the loss unchanged."""
        logits = rng.uniform(-1, 1, size=(3, 7))
        targets, mask = [0, 3, 6], [True, True, True]
        shifted = logits.copy()
        shifted[1] += 123.456
        a = softmax_cross_entropy(Tensor(logits), targets, mask).item()
        b = softmax_cross_entropy(Tensor(shifted), targets, mask).item()
        assert abs(a - b) < 1e-10

    @pytest.mark.unit
    def test_all_false_mask_raises(self):
        """A mask selecting nothing is a no-supervision error."""
        with pytest.raises(NoSupervisionError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])

    @pytest.mark.unit
    def test_length_mismatch_raises(self):
        """targets and mask must match the number of rows."""
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0], [True])

    @pytest.mark.unit
    def test_gradient_matches_finite_differences(self, rng):
        """Cross-entropy gradients agree with central differences."""
        logits = uniform(rng, 5, 6)
        errors = gradient_check(
            lambda: softmax_cross_entropy(logits, [0, 1, 2, 3, 4], [True, False, True, True, False]),
            {"logits": logits},
        )
        assert errors["logits"] < 1e-5


class TestPrimitiveGradients:
    """Every primitive against central finite differences on inputs in [-1, 1]."""

    @pytest.mark.unit
    @pytest.mark.parametrize("name", [
        "add_broadcast", "sub", "mul_broadcast", "gelu", "transpose", "take_rows",
        "slice_cols", "slice_rows", "concat_rows", "concat_cols", "mean_pool",
        "softmax", "softmax_masked", "layer_norm", "matmul",
    ])
    def test_primitive(self, name, rng):
        """Max relative error stays below 1e-5."""
        x = uniform(rng, 4, 5, name="x")
        y = uniform(rng, 4, 5, name="y")
        row = uniform(rng, 5, name="row")
        gamma = Tensor(rng.uniform(0.5, 1.5, size=5), requires_grad=True)
        beta = uniform(rng, 5, name="beta")
        table = uniform(rng, 6, 5, name="table")
        w = uniform(rng, 5, 3, name="w")
        mask = np.triu(np.ones((4, 5), dtype=bool), k=1)

        builders = {
            "add_broadcast": (lambda: x + row, {"x": x, "row": row}),
            "sub": (lambda: x - y, {"x": x, "y": y}),
            "mul_broadcast": (lambda: x * row, {"x": x, "row": row}),
            "gelu": (lambda: gelu(x), {"x": x}),
            "transpose": (lambda: transpose(x), {"x": x}),
            "take_rows": (lambda: take_rows(table, [0, 3, 3, 5]), {"table": table}),
            "slice_cols": (lambda: slice_cols(x, 1, 4), {"x": x}),
            "slice_rows": (lambda: slice_rows(x, 1, 3), {"x": x}),
            "concat_rows": (lambda: concat([x, y], axis=0), {"x": x, "y": y}),
            "concat_cols": (lambda: concat([x, y], axis=1), {"x": x, "y": y}),
            "mean_pool": (lambda: mean_pool(x), {"x": x}),
            "softmax": (lambda: softmax(x), {"x": x}),
            "softmax_masked": (lambda: softmax(x, mask=mask), {"x": x}),
            "layer_norm": (lambda: layer_norm(x, gamma, beta), {"x": x, "gamma": gamma, "beta": beta}),
            "matmul": (lambda: matmul(x, w), {"x": x, "w": w}),
        }
        build, params = builders[name]
        weights = rng.uniform(-1, 1, size=build().shape)
        errors = gradient_check(lambda: weighted_sum(build(), weights), params)
        assert max(errors.values()) < 1e-5, errors


class TestComputationTape:
    """Tests for the backward traversal."""

    @pytest.mark.unit
    def test_shared_node_visited_once(self):
        """A node used twice is traversed once and its gradient summed."""
        x = Tensor([[1.5, -2.0]], requires_grad=True)
        h = x * x
        out = sum_all(h + h)
        tape = out.backward()
        assert len(tape.visited) == len(tape.entries)
        assert tape.visited.count("mul") == 1
        np.testing.assert_allclose(x.grad, 4.0 * x.data)

    @pytest.mark.unit
    def test_reverse_topological_order(self, rng):
        """Every node is visited after all of its consumers."""
        a = uniform(rng, 2, 3)
        b = uniform(rng, 3, 2)
        out = sum_all(gelu(matmul(a, b)))
        tape = out.backward()
        assert tape.visited == ["sum", "gelu", "matmul"]

    @pytest.mark.unit
    def test_gradients_accumulate_across_backward_calls(self):
        """Two backward passes add into the leaf gradient."""
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        sum_all(x * 3.0).backward()
        sum_all(x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [[6.0, 6.0]])

    @pytest.mark.unit
    def test_no_grad_records_nothing(self):
        """Inside no_grad results carry no graph."""
        x = Tensor([[1.0]], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf

    @pytest.mark.unit
    def test_backward_needs_scalar_without_seed(self):
        """Non-scalar backward without a seed gradient is a ShapeError."""
        with pytest.raises(ShapeError):
            (Tensor(np.ones((2, 2)), requires_grad=True) * 2.0).backward()


class TestGradientCheckHelpers:
    """Tests for the finite-difference helpers."""

    @pytest.mark.unit
    def test_numerical_gradient_of_square(self):
        """d(x^2)/dx = 2x."""
        x = Tensor([[3.0, -1.0]])
        grad = numerical_gradient(lambda: float((x.data ** 2).sum()), x)
        np.testing.assert_allclose(grad, [[6.0, -2.0]], atol=1e-8)
        np.testing.assert_array_equal(x.data, [[3.0, -1.0]])

    @pytest.mark.unit
    def test_relative_error_floor(self):
        """Tiny absolute differences on near-zero gradients do not blow up."""
        assert relative_error(np.array([1e-12]), np.array([0.0])) < 1e-8
        assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
