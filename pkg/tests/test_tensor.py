import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from t2md import tensor as T
from t2md.gradcheck import OP_CASES, gradient_error, projected, run_case


@pytest.mark.parametrize("case", OP_CASES, ids=lambda c: c.name)
def test_op_gradients_match_finite_differences(case):
    errs = [run_case(case, seed) for seed in range(20)]
    assert max(errs) < 1e-6


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layer_norm_of_constant_is_zero():
    out = T.layer_norm(T.tensor(np.full((2, 5), 3.0)))
    assert np.all(out.data == 0) and np.isfinite(out.data).all()


def test_backward_sum_and_square():
    x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, [1, 1, 1])
    y = T.tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(y * y))
    assert np.allclose(y.grad, [2, 4])


def test_gradients_accumulate_across_backward_calls():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(x * 3.0))
    T.backward(T.sum(x * 3.0))
    assert np.allclose(x.grad, [6, 6])


def test_non_scalar_loss_rejected():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0)


def test_matmul_gradient_tight():
    rng = np.random.default_rng(3)
    err = gradient_error(projected(T.matmul, 0), [rng.standard_normal((2, 3)), rng.standard_normal((3, 4))])
    assert err < 1e-6


def test_three_layer_mlp_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5))

    def loss(w1, w2, w3):
        h = T.gelu(T.matmul(T.tensor(x), w1))
        h = T.silu(T.matmul(h, w2))
        return T.mean(T.square(T.matmul(h, w3)))

    err = gradient_error(loss, [rng.standard_normal((5, 6)), rng.standard_normal((6, 6)), rng.standard_normal((6, 2))])
    assert err < 1e-6


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.tensor(np.ones((2, 3))), T.tensor(np.ones(4)))


def test_non_finite_output_flagged():
    with pytest.raises(T.NonFiniteError):
        T.exp(T.tensor([1000.0]))
    with pytest.raises(T.NonFiniteError):
        T.log(T.tensor([0.0]))


def test_advanced_indexing_rejected():
    with pytest.raises(TypeError):
        T.tensor(np.arange(4.0))[np.array([0, 2])]


def test_precision_context_and_no_grad():
    assert T.get_default_dtype() == np.float32
    with T.precision(np.float64):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.tensor([1.0]).dtype == np.float32
    x = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_graph_not_recorded_without_grad_inputs():
    y = T.tensor([1.0]) * 2.0
    assert not y.requires_grad


def test_diamond_graph_visits_each_node_once():
    x = T.tensor([2.0], requires_grad=True)
    a = x * 3.0
    T.backward(T.sum(a * a + a))
    assert np.allclose(x.grad, [2 * 9 * 2.0 + 3])


def test_forward_is_bit_identical_across_runs():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    r1 = T.softmax(T.matmul(T.tensor(a), T.tensor(b))).data
    r2 = T.softmax(T.matmul(T.tensor(a), T.tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(small)
def test_reshape_and_transpose_round_trip(x):
    t = T.tensor(x)
    assert np.array_equal(T.reshape(T.reshape(t, (-1,)), x.shape).data, t.data)
    assert np.array_equal(T.transpose(T.transpose(t, 0, 1), 0, 1).data, t.data)


@settings(max_examples=40, deadline=None)
@given(small)
def test_softmax_rows_sum_to_one(x):
    with T.precision(np.float64):
        s = T.softmax(T.tensor(x)).data
    assert np.allclose(s.sum(-1), 1.0) and (s >= 0).all()


@settings(max_examples=40, deadline=None)
@given(small)
def test_cumsum_matches_numpy(x):
    with T.precision(np.float64):
        assert np.allclose(T.cumsum(T.tensor(x), axis=1).data, np.cumsum(x, axis=1))


def test_ops_preserve_float32():
    from t2md.gradcheck import OP_CASES
    rng = np.random.default_rng(0)
    for case in OP_CASES:
        fn, inputs = case.build(rng)
        out = fn(*[T.tensor(x.astype(np.float32), requires_grad=True) for x in inputs])
        assert out.dtype == np.float32, case.name
