import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mvgate import tensor as tc
from mvgate.gradcheck import grad_check
from mvgate.tensor import GraphError, NumericOverflowError, ShapeError, Tensor, backward


def _leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 7))
        out = tc.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
        np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, _triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(2)
        a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4, 2)))
        c = tc.matmul(a, b)
        up = rng.normal(size=(3, 2))
        loss = tc.mul(c, Tensor(up))
        loss = tc.mean_over_time(tc.reshape(loss, (1, 6, 1)), np.ones((1, 6), bool))
        backward(tc.reshape(loss, ()))
        np.testing.assert_allclose(a.grad, (up / 6) @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ (up / 6), atol=1e-12)

    def test_batched_with_shared_rhs_gradcheck(self):
        rng = np.random.default_rng(3)
        a, w = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(4, 5)))
        rep = grad_check(lambda: tc.bce(tc.sigmoid(tc.reshape(tc.matmul(a, w), (30,))), np.ones(30)),
                         {"a": a, "w": w})
        assert rep.max_rel_err < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax_lastdim(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)), st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = tc.softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        assert (p > 0).all()
        np.testing.assert_allclose(tc.softmax_lastdim(Tensor(x + c)).data, p, atol=1e-9)

    def test_masked_entries_exactly_zero(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        mask = np.array([[True, False, True, False]])
        p = tc.softmax_lastdim(x, mask).data
        assert p[0, 1] == 0.0 and p[0, 3] == 0.0
        np.testing.assert_allclose(p[0, [0, 2]], tc.softmax_reference(np.array([1.0, 3.0])))

    def test_all_masked_row_raises(self):
        with pytest.raises(ValueError):
            tc.softmax_lastdim(Tensor(np.zeros((1, 3))), np.zeros((1, 3), bool))


class TestLayerNormAndFriends:
    def test_layer_norm_moments(self):
        x = np.random.default_rng(4).normal(3.0, 5.0, size=(7, 16))
        y = tc.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)

    def test_layer_norm_gradcheck(self):
        rng = np.random.default_rng(5)
        x, g, b = _leaf(rng.normal(size=(3, 6))), _leaf(rng.normal(size=6)), _leaf(rng.normal(size=6))
        rep = grad_check(lambda: tc.bce(tc.sigmoid(tc.reshape(tc.take(tc.layer_norm(x, g, b), 0, 1), (3,))),
                                        np.array([1, 0, 1])), {"x": x, "g": g, "b": b})
        assert rep.max_rel_err < 1e-6

    def test_bce_values(self):
        for y in (0, 1):
            assert tc.bce(Tensor(np.array([0.5])), np.array([y])).item() == pytest.approx(np.log(2), abs=1e-12)
        assert tc.bce(Tensor(np.array([1 - 1e-7])), np.array([1])).item() == pytest.approx(1e-7, rel=1e-3)
        pair = tc.bce(Tensor(np.array([0.9, 0.1])), np.array([1, 0])).item()
        assert pair == pytest.approx(-np.log(0.9), abs=1e-12)

    def test_bce_clamps_at_exact_zero_and_one(self):
        v = tc.bce(Tensor(np.array([0.0, 1.0])), np.array([1, 0])).item()
        assert np.isfinite(v) and v == pytest.approx(-np.log(1e-7), rel=1e-6)

    def test_mean_over_time_ignores_masked(self):
        x = Tensor(np.arange(12, dtype=float).reshape(1, 4, 3))
        m = np.array([[False, True, True, False]])
        np.testing.assert_allclose(tc.mean_over_time(x, m).data, [[4.5, 5.5, 6.5]])

    def test_mean_over_time_empty_raises(self):
        with pytest.raises(ValueError):
            tc.mean_over_time(Tensor(np.ones((1, 2, 3))), np.zeros((1, 2), bool))

    def test_scale_rows(self):
        k = np.arange(6, dtype=float).reshape(1, 3, 2)
        g = np.array([[0.5, 1.0, 2.0]])
        np.testing.assert_array_equal(tc.scale_rows(Tensor(k), Tensor(g)).data, k * g[..., None])

    def test_embedding_lookup_accumulates_repeated_ids(self):
        table = _leaf(np.random.default_rng(6).normal(size=(5, 3)))
        out = tc.embedding_lookup(table, np.array([[1, 1, 4]]))
        backward(tc.bce(tc.sigmoid(tc.reshape(tc.take(out, 0, 2), (3,))), np.zeros(3)))
        assert np.count_nonzero(table.grad[[0, 2, 3]]) == 0
        assert np.all(table.grad[1, 1:] == 0) and table.grad[1, 0] != 0

    def test_embedding_lookup_out_of_range(self):
        with pytest.raises(IndexError):
            tc.embedding_lookup(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_non_finite_output_raises(self):
        with pytest.raises(NumericOverflowError):
            tc.mul(Tensor(np.array([1e308])), Tensor(np.array([1e10])))


class TestBackward:
    def test_square(self):
        x = _leaf(3.0)
        y = tc.mul(x, x)
        backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_unused_leaf_gets_zero_grad(self):
        x, unused = _leaf(2.0), _leaf(np.ones((2, 2)))
        backward(tc.mul(x, x), leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(GraphError):
            backward(tc.mul(_leaf(np.ones(3)), Tensor(np.ones(3))))

    def test_second_backward_rejected(self):
        x = _leaf(2.0)
        y = tc.mul(x, x)
        backward(y)
        with pytest.raises(GraphError):
            backward(y)

    def test_diamond_visits_each_node_once(self):
        x = _leaf(1.5)
        a = tc.mul(x, Tensor(2.0))
        y = tc.add(tc.mul(a, a), a)   # y = 4x^2 + 2x
        assert len(tc.topological_order(y)) == len({id(n) for n in tc.topological_order(y)})
        backward(y)
        assert x.grad == pytest.approx(8 * 1.5 + 2)

    def test_broadcast_add_reduces_gradient(self):
        x, b = _leaf(np.ones((4, 3))), _leaf(np.zeros(3))
        backward(tc.bce(tc.sigmoid(tc.reshape(tc.take(tc.add(x, b), 0, 1), (4,))), np.ones(4)))
        assert b.grad.shape == (3,)
        assert b.grad[0] != 0 and b.grad[1] == 0

    def test_dropout_identity_without_rng(self):
        x = Tensor(np.ones((3, 3)))
        assert tc.dropout(x, 0.5, None) is x

    def test_dropout_preserves_expectation(self):
        x = Tensor(np.ones(200_000))
        y = tc.dropout(x, 0.25, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 1 / 0.75}
        assert y.mean() == pytest.approx(1.0, abs=0.01)

    def test_xavier_bounds(self):
        w = tc.xavier_uniform(np.random.default_rng(0), 10, 30)
        assert np.abs(w).max() <= np.sqrt(6 / 40)
