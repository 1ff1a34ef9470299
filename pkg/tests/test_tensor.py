import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lmam.gradcheck import run_suite
from lmam.tensor import (
    Layer,
    Parameter,
    ShapeError,
    add,
    concat_cols,
    gelu_ew,
    init_matrix,
    layer_norm_rows,
    make_rng,
    matmul,
    relu_ew,
    scale,
    softmax_rows,
    split_cols,
    tanh_ew,
    transpose,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_inner_product(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_random_matches_triple_loop(self):
        rng = make_rng(3)
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
        np.testing.assert_allclose(matmul(a, b), oracles.matmul(a.tolist(), b.tolist()),
                                   rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    def test_property_triple_loop(self, n, k, m, seed):
        rng = make_rng(seed)
        a, b = rng.uniform(-2, 2, (n, k)), rng.uniform(-2, 2, (k, m))
        np.testing.assert_allclose(matmul(a, b), oracles.matmul(a.tolist(), b.tolist()),
                                   rtol=0, atol=1e-12)


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-9)

    def test_matches_scalar(self):
        np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0],
                                   oracles.softmax([1.0, 2.0, 3.0]), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
    def test_rows_sum_to_one(self, rows, cols, seed):
        x = make_rng(seed).uniform(-1e4, 1e4, (rows, cols))
        y = softmax_rows(x)
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


class TestElementwise:
    def test_fixed_points(self):
        assert tanh_ew(np.zeros((1, 1)))[0, 0] == 0.0
        assert relu_ew(np.array([[-1.0]]))[0, 0] == 0.0
        assert gelu_ew(np.zeros((1, 1)))[0, 0] == 0.0

    def test_relu_positive_identity(self):
        assert relu_ew(np.array([[2.5]]))[0, 0] == 2.5

    def test_gelu_exact_cdf_form(self):
        # independent evaluation of x * Phi(x) through math.erf
        assert gelu_ew(np.array([[1.0]]))[0, 0] == pytest.approx(oracles.gelu(1.0), abs=1e-15)
        assert gelu_ew(np.array([[1.0]]))[0, 0] == pytest.approx(0.8413447460685429, abs=1e-15)

    def test_gelu_differs_from_tanh_approximation(self):
        x = 1.5
        approx = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        assert abs(gelu_ew(np.array([[x]]))[0, 0] - approx) > 1e-5


class TestLayerNorm:
    ones = np.ones((1, 2))
    zeros = np.zeros((1, 2))

    def test_constant_row_is_zero(self):
        out = layer_norm_rows(np.full((1, 4), 3.0), np.ones((1, 4)), np.zeros((1, 4)), 1e-5)
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_two_point(self):
        out = layer_norm_rows(np.array([[1.0, 3.0]]), self.ones, self.zeros, 1e-12)
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-10)

    def test_matches_scalar(self):
        rng = make_rng(5)
        x = rng.uniform(-2, 2, (1, 6))
        g, b = rng.uniform(0.5, 1.5, (1, 6)), rng.uniform(-1, 1, (1, 6))
        np.testing.assert_allclose(
            layer_norm_rows(x, g, b, 1e-5)[0],
            oracles.layer_norm(x[0].tolist(), g[0].tolist(), b[0].tolist(), 1e-5),
            atol=1e-10,
        )

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 10), st.integers(0, 10_000))
    def test_standardizes_rows(self, rows, cols, seed):
        x = make_rng(seed).uniform(-10, 10, (rows, cols))
        x = x[x.var(axis=1) >= 1e-3]
        out = layer_norm_rows(x, np.ones((1, cols)), np.zeros((1, cols)), 1e-5)
        assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
        # eps shrinks the output variance to var / (var + eps)
        var = x.var(axis=1)
        np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), rtol=1e-9)

    def test_variance_within_tolerance_for_unit_scale_rows(self):
        x = make_rng(0).uniform(-2, 2, (20, 8))
        out = layer_norm_rows(x, np.ones((1, 8)), np.zeros((1, 8)), 1e-5)
        ratio = x.var(axis=1) / (x.var(axis=1) + 1e-5)
        np.testing.assert_allclose(out.var(axis=1), ratio, atol=1e-12)

    def test_bad_gain_shape(self):
        with pytest.raises(ShapeError):
            layer_norm_rows(np.zeros((2, 3)), np.ones((1, 2)), np.zeros((1, 3)))


class TestStructural:
    def test_concat(self):
        out = concat_cols([np.ones((2, 1)), np.zeros((2, 1))])
        assert out.tolist() == [[1.0, 0.0], [1.0, 0.0]]

    def test_concat_row_mismatch(self):
        with pytest.raises(ShapeError):
            concat_cols([np.ones((2, 1)), np.ones((3, 1))])

    def test_split_inverts_concat(self):
        rng = make_rng(1)
        parts = [rng.normal(size=(3, w)) for w in (1, 4, 2)]
        for p, q in zip(parts, split_cols(concat_cols(parts), [1, 4, 2])):
            np.testing.assert_array_equal(p, q)

    def test_add_identity_and_mismatch(self):
        x = make_rng(2).normal(size=(3, 2))
        np.testing.assert_array_equal(add(x, np.zeros_like(x)), x)
        with pytest.raises(ShapeError):
            add(x, np.zeros((2, 3)))

    def test_transpose_involution(self):
        x = make_rng(2).normal(size=(3, 5))
        np.testing.assert_array_equal(transpose(transpose(x)), x)

    def test_scale(self):
        assert scale(np.array([[1.0, -2.0]]), 3).tolist() == [[3.0, -6.0]]


class TestInit:
    def test_range(self):
        w = init_matrix(make_rng(0), 50, 40, 16)
        assert np.all(np.abs(w) <= 0.25)

    def test_determinism(self):
        np.testing.assert_array_equal(init_matrix(make_rng(9), 4, 4, 4), init_matrix(make_rng(9), 4, 4, 4))

    def test_mean_near_zero(self):
        w = init_matrix(make_rng(11), 1000, 100, 3)
        assert abs(w.mean()) < 0.01

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            init_matrix(make_rng(0), 2, 2, 0)


class TestLayerBase:
    def test_parameter_discovery_order_and_zero_grad(self):
        class Inner(Layer):
            def __init__(self):
                self.w = Parameter(np.ones((2, 2)))

        class Outer(Layer):
            def __init__(self):
                self.a = Parameter(np.zeros((1, 3)))
                self.blocks = [Inner(), Inner()]
                self._hidden = Parameter(np.zeros((1, 1)))

        layer = Outer()
        assert list(layer.named_parameters()) == ["a", "blocks.0.w", "blocks.1.w"]
        assert layer.num_parameters() == 11
        layer.blocks[0].w.grad += 1.0
        layer.zero_grad()
        assert all(np.all(p.grad == 0) for p in layer.parameters())


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_kernel_chain_gradients(seed):
    for result in run_suite("kernel", seed):
        assert result.max_rel_error < 1e-4, result
