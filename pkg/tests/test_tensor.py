import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from attnlens import tensor as T
from attnlens.errors import ContractError, DimensionError


def const(values, dtype=np.float64):
    g = T.Graph(dtype)
    return g, g.constant(values)


class TestMatmul:
    def test_identity(self):
        g = T.Graph()
        out = T.matmul(g.constant(np.eye(2)), g.constant([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])

    def test_dot_product(self):
        g = T.Graph()
        out = T.matmul(g.constant([[1, 2]]), g.constant([[3], [4]]))
        assert out.value.tolist() == [[11.0]]

    def test_zero_annihilates(self, rng):
        g = T.Graph()
        out = T.matmul(g.constant(np.zeros((2, 3))), g.constant(rng.random((3, 2))))
        np.testing.assert_array_equal(out.value, np.zeros((2, 2)))

    def test_inner_mismatch(self):
        g = T.Graph()
        with pytest.raises(DimensionError):
            T.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        _, x = const([0.0, 0.0])
        np.testing.assert_allclose(T.softmax_lastdim(x).value, [0.5, 0.5])

    def test_closed_form(self):
        _, x = const([math.log(1), math.log(3)])
        np.testing.assert_allclose(T.softmax_lastdim(x).value, [0.25, 0.75], atol=1e-12)

    def test_no_overflow(self):
        _, x = const([1000.0, 0.0], np.float32)
        p = T.softmax_lastdim(x).value
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-30)

    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=8),
                      elements=st.floats(-50, 50, width=32)))
    def test_rows_are_distributions(self, x):
        g = T.Graph(np.float32)
        p = T.softmax_lastdim(g.constant(x)).value
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def _ln(self, x, gain, bias, eps):
        g = T.Graph(np.float64)
        return T.layer_norm(g.constant(x), g.constant(gain), g.constant(bias), eps)

    def test_constant_token(self):
        out, stats = self._ln([[5, 5, 5, 5]], np.ones(4), np.zeros(4), 1e-5)
        np.testing.assert_allclose(out.value, 0, atol=1e-12)
        assert stats.std[0] == pytest.approx(math.sqrt(1e-5))

    def test_two_values(self):
        # mean 2, population variance 1
        out, stats = self._ln([[1, 3]], np.ones(2), np.zeros(2), 0.0)
        np.testing.assert_allclose(out.value, [[-1, 1]])
        assert stats.std[0] == 1.0 and stats.mean[0] == 2.0

    def test_zero_gain_gives_bias(self, rng):
        bias = np.array([0.1, -0.2, 0.3])
        out, _ = self._ln(rng.normal(size=(4, 3)), np.zeros(3), bias, 1e-5)
        np.testing.assert_allclose(out.value, np.tile(bias, (4, 1)))

    @given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                      elements=st.floats(-1e4, 1e4, width=32)))
    def test_never_nan(self, x):
        g = T.Graph(np.float32)
        d = x.shape[1]
        out, stats = T.layer_norm(g.constant(x), g.constant(np.ones(d)), g.constant(np.zeros(d)), 1e-5)
        assert np.all(np.isfinite(out.value))
        assert np.all(stats.std >= np.float32(math.sqrt(1e-5)) * (1 - 1e-6))


class TestElementwise:
    def test_clamp(self):
        _, x = const([-1.0, 0.0, 2.0])
        assert T.elementwise("clamp_nonneg", x).value.tolist() == [0, 0, 2]

    def test_add(self):
        g = T.Graph()
        assert T.elementwise("add", g.constant([1, 2]), g.constant([3, 4])).value.tolist() == [4, 6]

    def test_scalar_mul(self):
        _, x = const([2.0, 3.0])
        assert T.elementwise("mul", x, 0.5).value.tolist() == [1, 1.5]

    def test_shape_mismatch(self):
        g = T.Graph()
        with pytest.raises(DimensionError):
            T.add(g.constant([1, 2, 3]), g.constant([1, 2]))

    def test_unknown_kind(self):
        _, x = const([1.0])
        with pytest.raises(ContractError):
            T.elementwise("tanh", x)

    def test_clamp_gradient_at_zero_is_zero(self):
        g = T.Graph(np.float64)
        x = g.variable([-1.0, 0.0, 2.0], mark=True)
        grads = g.backward(T.sum(T.clamp_nonneg(x)))
        assert grads[x.id].tolist() == [0, 0, 1]


class TestBackward:
    def test_sum(self, rng):
        g = T.Graph(np.float64)
        x = g.variable(rng.random((3, 4)), mark=True)
        np.testing.assert_array_equal(g.backward(T.sum(x))[x.id], np.ones((3, 4)))

    def test_square(self):
        g = T.Graph(np.float64)
        x = g.variable([3.0], mark=True)
        assert g.backward(T.mul(x, x))[x.id].tolist() == [6.0]

    def test_untouched_marked_node_gets_zeros(self):
        g = T.Graph(np.float64)
        x = g.variable([1.0, 2.0], mark=True)
        y = g.variable([[5.0]], mark=True)
        grads = g.backward(T.sum(x))
        np.testing.assert_array_equal(grads[y.id], [[0.0]])

    def test_non_scalar_output(self):
        g = T.Graph(np.float64)
        x = g.variable([1.0, 2.0], mark=True)
        with pytest.raises(ContractError):
            g.backward(x)

    def test_nothing_marked(self):
        g = T.Graph(np.float64)
        with pytest.raises(ContractError):
            g.backward(T.sum(g.constant([1.0])))

    def test_pure(self, rng):
        x = rng.normal(size=(4, 5)).astype(np.float32)

        def run():
            g = T.Graph(np.float32)
            n = g.constant(x)
            out, _ = T.layer_norm(T.gelu(n), g.constant(np.ones(5)), g.constant(np.zeros(5)))
            return T.softmax_lastdim(out).value

        assert run().tobytes() == run().tobytes()


class TestFiniteDiff:
    def test_sum(self, rng):
        np.testing.assert_allclose(T.finite_diff_grad(np.sum, rng.random((2, 3)), 1e-3), 1, atol=1e-8)

    def test_square(self):
        fd = T.finite_diff_grad(lambda v: v[0] ** 2, [3.0], 1e-3)
        assert fd[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self, rng):
        np.testing.assert_array_equal(T.finite_diff_grad(lambda v: 4.0, rng.random(5), 1e-3), 0)


def _composite(x, w, b, gain, mix, use_clamp):
    """A random-ish composition touching every differentiable op."""
    g = x.graph
    h = T.add(T.matmul(x, g.constant(w)), g.constant(b))
    h = T.gelu(h)
    h, _ = T.layer_norm(h, g.constant(gain), g.constant(np.zeros(len(gain))), 1e-5)
    h = T.softmax_lastdim(T.scale(h, 1.7))
    h = T.mul(h, g.constant(mix))
    if use_clamp:
        h = T.clamp_nonneg(T.add(h, -0.05))
    t = T.transpose(h, (1, 0))
    r = T.reshape(T.matmul(t, h), (-1,))
    r = T.take(r, np.arange(r.shape[0])[::-1])
    return T.sum(T.concat([r, T.mean(T.reshape(h, (1, -1)), axis=1)]))


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 8), k=st.integers(1, 8), n=st.integers(2, 8),
       seed=st.integers(0, 2**31 - 1), use_clamp=st.booleans())
def test_backward_matches_finite_differences(m, k, n, seed, use_clamp):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(m, k))
    w, b = rng.normal(size=(k, n)), rng.normal(size=n)
    gain, mix = rng.uniform(0.5, 1.5, size=n), rng.normal(size=(m, n))

    def f(xv):
        g = T.Graph(np.float64)
        return _composite(g.constant(xv), w, b, gain, mix, use_clamp).value[0]

    if use_clamp:
        # keep clear of the kink so central differences are meaningful
        g = T.Graph(np.float64)
        pre = T.mul(T.softmax_lastdim(T.scale(T.layer_norm(T.gelu(T.add(
            T.matmul(g.constant(x0), g.constant(w)), g.constant(b))), g.constant(gain),
            g.constant(np.zeros(n)), 1e-5)[0], 1.7)), g.constant(mix)).value - 0.05
        assume(np.abs(pre).min() > 1e-2)

    g = T.Graph(np.float64)
    x = g.variable(x0, mark=True)
    grad = g.backward(_composite(x, w, b, gain, mix, use_clamp))[x.id]
    # eps 1e-4: sharply curved compositions (layer norm over 2 features)
    # leave ~1e-4 truncation error at eps 1e-3
    fd = T.finite_diff_grad(f, x0, 1e-4)
    keep = np.abs(grad) > 1e-6
    rel = np.abs(grad - fd)[keep] / np.maximum(np.abs(grad), np.abs(fd))[keep]
    assert rel.size == 0 or rel.max() < 1e-4
