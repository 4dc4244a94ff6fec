import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpchoi import gradsuite
from cpchoi import tensor as T
from cpchoi.tensor import NonFiniteError, Tape, Tensor, TensorError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def grad_of(fn, *xs):
    with Tape() as tape:
        tape.backward(fn(*xs))
    return [tape.grad(x) for x in xs]


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_mul_by_zero(self):
        np.testing.assert_array_equal(T.mul(Tensor([2.0, 3.0]), 0.0).data, [0.0, 0.0])

    def test_elementwise_dispatch(self):
        assert T.elementwise("sub", Tensor([5.0]), 2.0).data[0] == 3.0
        assert T.elementwise("exp", Tensor([0.0])).data[0] == 1.0
        with pytest.raises(TensorError):
            T.elementwise("nope", Tensor([1.0]))

    def test_trailing_broadcast(self):
        out = Tensor(np.ones((2, 3))) + Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))

    def test_log_domain(self):
        with pytest.raises(TensorError):
            T.log(Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(TensorError):
            Tensor([1.0]) / Tensor([0.0])

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.exp(Tensor([1000.0]))
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_maximum_tie_goes_to_first(self):
        a, b = leaf([1.0]), leaf([1.0])
        ga, gb = grad_of(lambda x, y: T.maximum(x, y).sum(), a, b)
        assert ga[0] == 1.0 and gb[0] == 0.0


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_small_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-14)

    def test_batched_with_shared_right_operand(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out[1], a[1] @ b)

    def test_inner_mismatch(self):
        with pytest.raises(TensorError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_inputs(self):
        np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_normalized(self):
        assert abs(T.softmax(Tensor([1.0, 2.0, 3.0])).data.sum() - 1.0) < 1e-12

    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax(Tensor(x), -1).data
        assert np.abs(y.sum(-1) - 1.0).max() < 1e-12
        np.testing.assert_allclose(T.softmax(Tensor(x + c), -1).data, y, atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(TensorError):
            T.softmax(Tensor(np.zeros((2, 2))), 2)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = T.layernorm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_centering(self, rng):
        out = T.layernorm(Tensor(rng.normal(size=(5, 7)) * 4 + 3), Tensor(np.ones(7)), Tensor(np.zeros(7)))
        assert np.abs(out.data.mean(-1)).max() < 1e-10

    def test_gradient(self, rng):
        err = T.gradcheck(lambda x, g, b: (T.layernorm(x, g, b) * Tensor(np.arange(12.0).reshape(2, 6))).sum(),
                          [leaf(rng.normal(size=(2, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))])
        assert err < 1e-4

    def test_gamma_shape(self):
        with pytest.raises(TensorError):
            T.layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestReduce:
    def test_mean(self):
        assert T.reduce("mean", Tensor([1.0, 2.0, 3.0])).data == 2.0

    def test_sum_axis(self):
        np.testing.assert_array_equal(T.reduce("sum", Tensor(np.ones((2, 3))), 1).data, [3.0, 3.0])

    def test_max_routes_to_first_argmax(self):
        x = leaf([1.0, 5.0, 5.0, 2.0])
        (g,) = grad_of(lambda t: t.max(), x)
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])

    def test_unknown_kind(self):
        with pytest.raises(TensorError):
            T.reduce("median", Tensor([1.0]))


class TestBackward:
    def test_product_rule(self):
        a, b = leaf(2.0), leaf(3.0)
        ga, gb = grad_of(lambda x, y: x * y, a, b)
        assert ga == 3.0 and gb == 2.0

    def test_root_gradient_is_one(self):
        a = leaf(1.5)
        with Tape() as tape:
            y = a * 2.0
            grads = tape.backward(y)
        assert grads[y.node_id] == 1.0

    def test_sigmoid_linear_gradient(self, rng):
        w, x = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        assert T.gradcheck(lambda w_: T.sigmoid(T.matmul(w_, x)).sum(), [w]) < 1e-4

    def test_disconnected_parameter(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        with Tape() as tape:
            tape.backward((a * a).sum())
        np.testing.assert_array_equal(tape.grad(b), [0.0])

    def test_non_scalar_root(self):
        a = leaf([1.0, 2.0])
        with Tape() as tape:
            with pytest.raises(TensorError):
                tape.backward(a * 2.0)

    def test_topological_ids(self, rng):
        x = leaf(rng.normal(size=(2, 3)))
        with Tape() as tape:
            T.softmax(x * 2.0 + 1.0, -1).sum()
        for nid, node in enumerate(tape.nodes):
            assert all(i < nid for i in node.inputs)

    def test_reused_leaf_accumulates(self):
        a = leaf(3.0)
        (g,) = grad_of(lambda x: x * x + x, a)
        assert g == 7.0

    def test_deterministic(self, rng):
        x = rng.normal(size=(4, 5))
        runs = [grad_of(lambda t: T.log_softmax(t * t, -1).sum(), leaf(x))[0] for _ in range(2)]
        assert runs[0].tobytes() == runs[1].tobytes()

    def test_untracked_outside_tape(self):
        a = leaf([1.0])
        out = a * 2.0
        assert not out.requires_grad and out.node_id is None


class TestShapes:
    def test_getitem_fancy_accumulates(self):
        x = leaf([1.0, 2.0, 3.0])
        (g,) = grad_of(lambda t: t[np.array([0, 0, 2])].sum(), x)
        np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])

    def test_concat_and_split_gradients(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0])
        ga, gb = grad_of(lambda x, y: (T.concat([x, y]) * Tensor([1.0, 2.0, 3.0])).sum(), a, b)
        np.testing.assert_array_equal(ga, [1.0, 2.0])
        np.testing.assert_array_equal(gb, [3.0])

    def test_reshape_size(self):
        with pytest.raises(TensorError):
            T.reshape(Tensor(np.zeros(6)), (4,))


class TestGradientSuite:
    @pytest.mark.parametrize("name", [c[0] for c in gradsuite.op_cases(np.random.default_rng(0))])
    def test_hundred_random_tensors(self, name):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            cases = {n: (fn, arrs) for n, fn, arrs in gradsuite.op_cases(rng)}
            fn, arrs = cases[name]
            worst = max(worst, gradsuite.check_op(fn, arrs, rng))
        assert worst < gradsuite.OP_TOLERANCE

    def test_rel_error_floor(self):
        assert T.rel_error(0.0, 1e-9) == pytest.approx(1e-3)
