import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import finite_difference_check, leaf
from egnn.autodiff import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    clip,
    concat,
    elementwise,
    exp,
    index_rows,
    log,
    matmul,
    reduce,
    reduce_mean,
    reduce_sum,
    reshape,
    segment_sum,
    sigmoid,
    sqrt,
    square,
    swish,
    tanh,
    transpose,
)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("m,k,n", [(1, 1, 1), (2, 3, 4), (8, 8, 8), (5, 1, 7), (7, 8, 3)])
    def test_small_shapes_bitwise_equal_to_loop(self, rng, m, k, n):
        for _ in range(20):
            a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
            np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        finite_difference_check(lambda: reduce_sum(square(matmul(a, b))), [a, b])


class TestElementwise:
    def test_sigmoid_and_swish_definitions(self):
        x = np.array([-30.0, -2.0, 0.0, 0.5, 40.0])
        s = 1.0 / (1.0 + np.exp(-x))
        np.testing.assert_allclose(sigmoid(Tensor(x)).data, s, rtol=1e-14, atol=1e-300)
        np.testing.assert_allclose(swish(Tensor(x)).data, x * s, rtol=1e-14, atol=1e-300)

    def test_sigmoid_extreme_inputs_are_finite(self):
        out = sigmoid(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    def test_dispatch_table(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        np.testing.assert_array_equal(elementwise("add", Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_array_equal(elementwise("sub", Tensor(a), Tensor(b)).data, a - b)
        np.testing.assert_array_equal(elementwise("mul", Tensor(a), Tensor(b)).data, a * b)
        np.testing.assert_array_equal(elementwise("square", Tensor(a)).data, a * a)
        np.testing.assert_array_equal(elementwise("tanh", Tensor(a)).data, np.tanh(a))
        with pytest.raises(ContractError):
            elementwise("cube", Tensor(a))

    def test_row_bias_broadcast(self):
        out = Tensor(np.zeros((2, 3))) + Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3, 4))) * Tensor(np.ones((3, 4)))

    @pytest.mark.parametrize("op", [sigmoid, swish, tanh, exp, square])
    def test_unary_gradients(self, rng, op):
        a = leaf(rng, 4, 3)
        finite_difference_check(lambda: reduce_sum(op(a) * op(a)), [a])

    def test_log_sqrt_clip_gradients(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        finite_difference_check(lambda: reduce_sum(log(a) + sqrt(a) * clip(a, 0.7, 1.5)), [a])

    def test_broadcast_gradients(self, rng):
        m, row, col = leaf(rng, 4, 3), leaf(rng, 3), leaf(rng, 4, 1)
        finite_difference_check(lambda: reduce_sum(square((m + row) * col - row)), [m, row, col])


class TestReductions:
    def test_examples(self):
        np.testing.assert_array_equal(reduce_sum(Tensor([[1, 2], [3, 4]]), axis=0).data, [4, 6])
        assert reduce_mean(Tensor([2.0, 4.0])).item() == 3.0

    def test_sum_matches_loop(self, rng):
        a = rng.standard_normal((5, 3))
        expected = np.array([sum(a[i, j] for j in range(3)) for i in range(5)])
        np.testing.assert_array_equal(reduce_sum(Tensor(a), axis=1).data, expected)
        expected = np.array([sum(a[i, j] for i in range(5)) for j in range(3)])
        np.testing.assert_array_equal(reduce_sum(Tensor(a), axis=0).data, expected)

    @pytest.mark.parametrize("shape", [(1, 1), (3, 5), (8, 8), (8, 1)])
    def test_small_reductions_bitwise_equal_to_loop(self, rng, shape):
        a = rng.standard_normal(shape)
        rows = [sum(a[i].tolist(), 0.0) for i in range(shape[0])]
        cols = [sum(a[:, j].tolist(), 0.0) for j in range(shape[1])]
        total = sum(a.ravel().tolist(), 0.0)
        np.testing.assert_array_equal(reduce_sum(Tensor(a), axis=1).data, rows)
        np.testing.assert_array_equal(reduce_sum(Tensor(a), axis=0).data, cols)
        assert reduce_sum(Tensor(a)).item() == total
        assert reduce_mean(Tensor(a)).item() == total / a.size

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            reduce_sum(Tensor(np.ones((2, 2))), axis=2)

    def test_reduce_dispatch(self):
        assert reduce("mean", Tensor([1.0, 3.0])).item() == 2.0
        with pytest.raises(ContractError):
            reduce("max", Tensor([1.0]))

    def test_gradients(self, rng):
        a = leaf(rng, 4, 3)
        finite_difference_check(
            lambda: reduce_sum(square(reduce_mean(a, axis=0))) + reduce_sum(square(reduce_sum(a, axis=1, keepdims=True))),
            [a],
        )


class TestIndexing:
    def test_gather_and_scatter_gradients(self, rng):
        a = leaf(rng, 4, 3)
        idx = np.array([0, 2, 2, 3, 0, 1])
        seg = np.array([1, 0, 1, 1, 2, 0])
        finite_difference_check(lambda: reduce_sum(square(segment_sum(index_rows(a, idx), seg, 3))), [a])

    def test_segment_sum_matches_loop(self, rng):
        a = rng.standard_normal((6, 2))
        seg = np.array([2, 0, 2, 1, 0, 2])
        out = segment_sum(Tensor(a), seg, 4).data
        for s in range(4):
            np.testing.assert_allclose(out[s], a[seg == s].sum(axis=0), atol=1e-15)

    def test_boolean_mask(self, rng):
        a = leaf(rng, 3, 3)
        mask = ~np.eye(3, dtype=bool)
        np.testing.assert_array_equal(a[mask].data, a.data[mask])
        finite_difference_check(lambda: reduce_sum(square(a[mask])), [a])

    def test_concat_reshape_transpose_gradients(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 1)
        finite_difference_check(
            lambda: reduce_sum(square(matmul(transpose(concat([a, b], axis=1)), reshape(a, (2, 3))))), [a, b]
        )

    def test_segment_sum_row_mismatch(self):
        with pytest.raises(DimensionError):
            segment_sum(Tensor(np.ones((3, 2))), np.array([0, 1]), 2)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        reduce_sum(w).backward()
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_square(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        reduce_sum(w * w).backward()
        np.testing.assert_array_equal(w.grad, [2, 4])

    def test_accumulates_until_zeroed(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        reduce_sum(w * w).backward()
        reduce_sum(w * w).backward()
        np.testing.assert_array_equal(w.grad, [4, 8])
        w.zero_grad()
        assert w.grad is None

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_untracked_loss_rejected(self):
        with pytest.raises(ContractError):
            reduce_sum(Tensor([1.0])).backward()

    def test_tape_is_topological(self, rng):
        a, b = leaf(rng, 3), leaf(rng, 3)
        c = a * b
        loss = reduce_sum(c * a + exp(c))
        tape = Tape.record(loss)
        position = {id(n): k for k, n in enumerate(tape.nodes)}
        for k, node in enumerate(tape.nodes):
            assert node.node_id == k
            for parent in node._parents:
                if parent.requires_grad:
                    assert position[id(parent)] < k

    def test_untracked_inputs_are_not_recorded(self):
        out = Tensor([1.0]) * Tensor([2.0])
        assert out._parents == () and not out.requires_grad

    def test_replay_is_deterministic(self, rng):
        def grads():
            r = np.random.default_rng(7)
            w = Tensor(r.standard_normal((4, 4)), requires_grad=True)
            x = Tensor(r.standard_normal((5, 4)))
            loss = reduce_sum(swish(matmul(x, w)))
            loss.backward()
            return loss.item(), w.grad

        (l1, g1), (l2, g2) = grads(), grads()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)

    def test_shared_subexpression_gradient(self, rng):
        a = leaf(rng, 3, 2)
        finite_difference_check(lambda: (lambda s: reduce_sum(s * s * s))(tanh(a)), [a])


finite = st.floats(-5, 5, allow_nan=False)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_property(a, b):
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (4, 3), elements=finite))
def test_grad_shape_matches_data(a):
    t = Tensor(a, requires_grad=True)
    reduce_sum(square(swish(t)) + Tensor([1.0, 2.0, 3.0])).backward()
    assert t.grad.shape == t.data.shape


@given(arrays(np.float64, (5,), elements=st.floats(-30, 30)))
def test_sigmoid_strictly_bounded_for_moderate_inputs(x):
    # beyond |x| ~ 36 the upper tail rounds to exactly 1.0 in float64
    s = sigmoid(Tensor(x)).data
    assert np.all(s > 0) and np.all(s < 1)


@given(arrays(np.float64, (5,), elements=st.floats(-1e300, 1e300)))
def test_sigmoid_closed_interval_for_any_finite_input(x):
    s = sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(s)) and np.all(s >= 0) and np.all(s <= 1)
