import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mphil import ndtensor as nd
from mphil.encoder import adjacency

from conftest import gradcheck, random_weights, weighted_sum

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(min_rows=1, max_rows=6, min_cols=1, max_cols=6):
    return st.tuples(st.integers(min_rows, max_rows), st.integers(min_cols, max_cols)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(nd.NonFiniteError):
            nd.Tensor([[1.0, float("nan")]])

    def test_overflow_surfaces_as_error(self):
        with pytest.raises(nd.NonFiniteError):
            nd.exp(nd.Tensor([[1000.0]]))

    def test_shape_promotion(self):
        assert nd.Tensor(3.0).shape == (1, 1)
        assert nd.Tensor([1.0, 2.0]).shape == (1, 2)
        with pytest.raises(nd.ShapeError):
            nd.Tensor(np.zeros((2, 2, 2)))

    def test_no_recording_without_tape(self):
        x = nd.parameter([[1.0, 2.0]])
        y = nd.exp(x)
        assert not y.requires_grad


class TestMatmul:
    def test_identity(self, rng):
        X = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(nd.matmul(nd.Tensor(np.eye(2)), nd.Tensor(X)).data, X)

    def test_hand_arithmetic(self):
        out = nd.matmul(nd.Tensor([[1, 2], [3, 4]]), nd.Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_error_names_shapes(self):
        with pytest.raises(nd.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nd.matmul(nd.Tensor(np.ones((2, 3))), nd.Tensor(np.ones((2, 3))))

    def test_gradient_of_sum(self, rng):
        a = nd.parameter(rng.standard_normal((5, 4)))
        b = nd.parameter(rng.standard_normal((4, 3)))
        assert gradcheck(lambda a, b: nd.reduce("sum", nd.matmul(a, b)), [a, b]) < 1e-6


class TestUnary:
    def test_values(self):
        assert nd.sigmoid(nd.Tensor(0.0)).item() == 0.5
        assert nd.relu(nd.Tensor(-3.0)).item() == 0.0
        assert nd.relu(nd.Tensor(3.0)).item() == 3.0
        assert nd.apply_unary("neg", nd.Tensor(2.0)).item() == -2.0

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = nd.sigmoid(nd.Tensor([[-800.0, 800.0]])).data
        assert out[0, 0] >= 0 and out[0, 1] == 1.0

    def test_log_domain_error_names_index(self):
        with pytest.raises(nd.DomainError, match=r"\(0, 1\)"):
            nd.log(nd.Tensor([[1.0, 0.0]]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            nd.apply_unary("tanh", nd.Tensor(1.0))

    def test_exp_gradient(self, rng):
        x = nd.parameter(rng.standard_normal((3, 3)))
        w = random_weights(rng, (3, 3))
        assert gradcheck(lambda x: weighted_sum(nd.exp(x), w), [x]) < 1e-6

    @pytest.mark.parametrize("kind", ["sigmoid", "relu", "log", "neg"])
    def test_other_gradients(self, rng, kind):
        data = rng.standard_normal((4, 3))
        if kind == "log":
            data = np.abs(data) + 0.5
        x = nd.parameter(data)
        w = random_weights(rng, (4, 3))
        assert gradcheck(lambda x: weighted_sum(nd.apply_unary(kind, x), w), [x]) < 1e-6


class TestSoftmax:
    def test_equal_row(self):
        np.testing.assert_allclose(nd.softmax_rows(nd.Tensor([[2.0, 2.0, 2.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(nd.softmax_rows(nd.Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(matrices())
    def test_rows_sum_to_one(self, x):
        s = nd.softmax_rows(nd.Tensor(x)).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, rtol=0, atol=1e-12)


class TestNormalize:
    def test_345(self):
        np.testing.assert_allclose(nd.l2_normalize_rows(nd.Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        v = np.array([[0.6, 0.8]])
        np.testing.assert_allclose(nd.l2_normalize_rows(nd.Tensor(v)).data, v, rtol=0, atol=1e-12)

    def test_degenerate_row(self):
        with pytest.raises(nd.DegenerateRowError):
            nd.l2_normalize_rows(nd.Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_gradient(self, rng):
        x = nd.parameter(rng.standard_normal((4, 6)))
        w = random_weights(rng, (4, 6))
        assert gradcheck(lambda x: weighted_sum(nd.l2_normalize_rows(x), w), [x]) < 1e-6

    @settings(max_examples=200, deadline=None)
    @given(matrices(max_cols=8))
    def test_unit_norm_and_idempotent(self, x):
        if (np.linalg.norm(x, axis=1) < 1e-6).any():
            return
        once = nd.l2_normalize_rows(nd.Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, rtol=0, atol=1e-9)
        twice = nd.l2_normalize_rows(nd.Tensor(once)).data
        np.testing.assert_allclose(twice, once, rtol=0, atol=1e-12)


def _loop_segment_sum(values, ids, n):
    out = np.zeros((n, values.shape[1]))
    for e in range(values.shape[0]):
        for j in range(values.shape[1]):
            out[ids[e], j] += values[e, j]
    return out


class TestSegmentSum:
    def test_single_segment(self, rng):
        v = rng.standard_normal((5, 3))
        out = nd.segment_sum(nd.Tensor(v), np.zeros(5, dtype=int), 1).data
        np.testing.assert_allclose(out, v.sum(axis=0, keepdims=True), atol=1e-14)

    def test_hand_arithmetic(self):
        out = nd.segment_sum(nd.Tensor([[1.0], [2.0], [3.0]]), [0, 1, 0], 2).data
        np.testing.assert_array_equal(out, [[4.0], [2.0]])

    def test_empty_segment_is_zero(self):
        out = nd.segment_sum(nd.Tensor([[1.0]]), [2], 3).data
        np.testing.assert_array_equal(out, [[0.0], [0.0], [1.0]])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            nd.segment_sum(nd.Tensor([[1.0]]), [3], 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_loop_oracle_exact(self, seed):
        r = np.random.default_rng(seed)
        v = r.standard_normal((40, 5)) * 10 ** r.uniform(-3, 3, (40, 1))
        ids = r.integers(0, 7, 40)
        np.testing.assert_array_equal(nd.segment_sum(nd.Tensor(v), ids, 7).data, _loop_segment_sum(v, ids, 7))

    def test_gradient(self, rng):
        v = nd.parameter(rng.standard_normal((8, 3)))
        ids = rng.integers(0, 4, 8)
        w = random_weights(rng, (4, 3))
        assert gradcheck(lambda v: weighted_sum(nd.segment_sum(v, ids, 4), w), [v]) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_neighbor_sum_matches_segment_sum_exactly(self, seed):
        r = np.random.default_rng(seed)
        n = 12
        pairs = {tuple(sorted(p)) for p in r.integers(0, n, (30, 2)).tolist() if p[0] != p[1]}
        e = np.array(sorted(pairs))
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        h = nd.Tensor(r.standard_normal((n, 4)) * 1e3)
        fused = nd.neighbor_sum(h, adjacency(src, dst, n)).data
        reference = nd.segment_sum(nd.gather_rows(h, src), dst, n).data
        np.testing.assert_array_equal(fused, reference)


class TestReduce:
    def test_mean(self):
        assert nd.reduce("mean", nd.Tensor([[2.0, 4.0]])).item() == 3.0

    def test_max_first_tie(self):
        x = nd.parameter([[1.0, 5.0, 5.0]])
        with nd.Tape() as tape:
            m = nd.reduce("max_over_axis", x, axis=1)
            loss = nd.reduce("sum", m)
        assert m.item() == 5.0
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_mean_gradient(self, rng):
        x = nd.parameter(rng.standard_normal((3, 4)))
        with nd.Tape() as tape:
            loss = nd.reduce("mean", x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full((3, 4), 1 / 12), atol=1e-15)
        assert gradcheck(lambda x: nd.reduce("mean", x), [x]) < 1e-6

    def test_empty_axis(self):
        with pytest.raises(nd.ShapeError):
            nd.reduce("sum", nd.Tensor(np.zeros((0, 3))), axis=0)

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            nd.reduce("sum", nd.Tensor([[1.0]]), axis=2)


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = nd.parameter(rng.standard_normal((3, 2)))
        with nd.Tape() as tape:
            loss = nd.reduce("sum", x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square_grad(self, rng):
        x = nd.parameter(rng.standard_normal((3, 2)))
        with nd.Tape() as tape:
            loss = nd.reduce("sum", nd.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_non_scalar_loss(self, rng):
        x = nd.parameter(rng.standard_normal((3, 2)))
        with nd.Tape() as tape:
            y = nd.exp(x)
        with pytest.raises(nd.ShapeError):
            tape.backward(y)

    def test_loss_not_on_tape(self):
        with nd.Tape() as tape:
            pass
        with pytest.raises(nd.TensorError):
            tape.backward(nd.Tensor(1.0))

    def test_two_consumers_add(self, rng):
        x = nd.parameter(rng.standard_normal((2, 3)))
        with nd.Tape() as tape:
            loss = nd.add(nd.reduce("sum", nd.exp(x)), nd.reduce("sum", nd.scale(x, 3.0)))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.exp(x.data) + 3.0, atol=1e-14)

    def test_tape_is_topologically_ordered(self, rng):
        x = nd.parameter(rng.standard_normal((2, 2)))
        with nd.Tape() as tape:
            nd.reduce("sum", nd.exp(nd.matmul(x, x)))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in seen for t in node.inputs if t.requires_grad)
            seen.add(id(node.output))


BINARY_OPS = {
    "add": (nd.add, (3, 4), (3, 4)),
    "sub": (nd.sub, (3, 4), (3, 4)),
    "mul": (nd.mul, (3, 4), (3, 4)),
    "div": (nd.div, (3, 4), (3, 4)),
    "add_row": (nd.add_row, (3, 4), (1, 4)),
    "add_col": (nd.add_col, (3, 4), (3, 1)),
    "mul_col": (nd.mul_col, (3, 4), (3, 1)),
    "div_col": (nd.div_col, (3, 4), (3, 1)),
    "scale_by": (nd.scale_by, (3, 4), (1, 1)),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
def test_binary_op_gradients(name, rng):
    op, sa, sb = BINARY_OPS[name]
    a = nd.parameter(rng.standard_normal(sa))
    b_data = rng.standard_normal(sb)
    if name.startswith("div"):
        b_data = np.sign(b_data) * (np.abs(b_data) + 0.5)
    b = nd.parameter(b_data)
    w = random_weights(rng, sa)
    assert gradcheck(lambda a, b: weighted_sum(op(a, b), w), [a, b]) < 1e-6


def test_structural_op_gradients(rng):
    x = nd.parameter(rng.standard_normal((4, 3)))
    y = nd.parameter(rng.standard_normal((2, 3)))
    w1 = random_weights(rng, (3, 4))
    assert gradcheck(lambda x: weighted_sum(nd.transpose(x), w1), [x]) < 1e-6
    w2 = random_weights(rng, (6, 3))
    assert gradcheck(lambda x, y: weighted_sum(nd.concat([x, y], 0), w2), [x, y]) < 1e-6
    w3 = random_weights(rng, (5, 3))
    idx = [0, 3, 3, 1, 2]
    assert gradcheck(lambda x: weighted_sum(nd.gather_rows(x, idx), w3), [x]) < 1e-6
    w4 = random_weights(rng, (4, 2))
    assert gradcheck(lambda x: weighted_sum(nd.gather_cols(x, [2, 0]), w4), [x]) < 1e-6
    w5 = random_weights(rng, (12, 1))
    assert gradcheck(lambda x: weighted_sum(nd.reshape(x, 12, 1), w5), [x]) < 1e-6
    w6 = random_weights(rng, (4, 1))
    assert gradcheck(lambda x: weighted_sum(nd.reduce("max_over_axis", x, axis=1), w6), [x]) < 1e-6
