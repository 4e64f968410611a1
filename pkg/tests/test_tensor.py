import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixbound import tensor as T
from mixbound.tensor import DimensionError, NumericDomainError, Tensor, UsageError

from oracles import fd_max_rel_error, op_cases, run_gradient_suite, REL_TOL


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(T.matmul(T.constant(a), T.constant(np.eye(4))).data, a)

    def test_hand_arithmetic(self):
        out = T.matmul(T.constant([[1, 2], [3, 4]]), T.constant([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))

    def test_sum_gradient_matches_fd(self):
        rng = np.random.default_rng(1)
        err = fd_max_rel_error(lambda ts: T.sum_(T.matmul(ts[0], ts[1])), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
        assert err < REL_TOL


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(T.constant(0.0)).item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(T.constant([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_square_derivative(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(T.pow_(x, 2))
        assert x.grad == pytest.approx(6.0)

    def test_abs_subgradient_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        T.backward(T.abs_(x))
        assert x.grad == 0.0

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_log_domain(self, bad):
        with pytest.raises(NumericDomainError):
            T.log(T.constant([1.0, bad]))

    def test_pow_domain(self):
        with pytest.raises(NumericDomainError):
            T.pow_(T.constant([-1.0]), 0.5)
        with pytest.raises(NumericDomainError):
            T.pow_(T.constant([0.0]), -1.0)

    def test_dispatch_by_name(self):
        assert T.elementwise("mul", T.constant(2.0), 3.0).item() == 6.0
        with pytest.raises(UsageError):
            T.elementwise("cosh", T.constant(1.0))

    def test_only_scalar_broadcasting(self):
        with pytest.raises(DimensionError):
            T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((1, 3))))
        assert T.add(T.constant(np.ones((2, 3))), 1.0).shape == (2, 3)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(T.row_softmax(T.constant([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_stability(self):
        out = T.row_softmax(T.constant([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        out = T.row_softmax(T.constant(x)).data
        assert np.all((out >= 0) & (out <= 1))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12, rtol=0)

    def test_mask_gives_exact_zeros(self):
        mask = np.array([[True, False, True]])
        out = T.row_softmax(T.constant([[1.0, 50.0, 1.0]]), mask).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


class TestLogsumexp:
    def test_two_zeros(self):
        assert T.logsumexp(T.constant([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_singleton(self):
        assert T.logsumexp(T.constant([3.25])).item() == 3.25

    def test_large_values(self):
        assert T.logsumexp(T.constant([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2))

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)),
        st.data(),
    )
    def test_strictly_monotone(self, x, data):
        i = data.draw(st.integers(0, x.size - 1))
        bump = data.draw(st.floats(1e-3, 5.0))
        y = x.copy()
        y[i] += bump
        a, b = T.logsumexp(T.constant(x)).item(), T.logsumexp(T.constant(y)).item()
        assert b >= a
        # the true increase is at least w_i * bump; strict only if float64 can resolve it
        w = np.exp(x[i] - a)
        if w * bump > 4 * np.spacing(abs(a) + 1.0):
            assert b > a


class TestGatherRows:
    def test_duplicate_ids_double_gradient(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = T.gather_rows(table, [0, 0])
        np.testing.assert_array_equal(out.data, [[0, 1], [0, 1]])
        T.backward(T.sum_(out))
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [0, 0]])

    def test_empty_ids(self):
        out = T.gather_rows(T.constant(np.ones((3, 2))), [])
        assert out.shape == (0, 2)

    def test_out_of_range(self):
        with pytest.raises(IndexError, match="id 3"):
            T.gather_rows(T.constant(np.ones((3, 2))), [0, 3])

    def test_scatter_add_matches_fd(self):
        ids = [2, 0, 2, 1]
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 2))
        err = fd_max_rel_error(lambda ts: T.sum_(T.gather_rows(ts[0], ids) * T.constant(w)), [rng.standard_normal((3, 2))])
        assert err < REL_TOL


class TestBackward:
    def test_reuse_accumulates(self):
        x = Tensor(1.5, requires_grad=True)
        T.backward(x + x)
        assert x.grad == 2.0

    def test_disconnected_leaf(self):
        x = Tensor(1.0, requires_grad=True)
        z = Tensor(2.0, requires_grad=True)
        T.backward(z * 3.0)
        assert x.grad is None or x.grad == 0.0
        assert z.grad == 3.0

    def test_non_scalar_root(self):
        with pytest.raises(UsageError):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_disjoint_subgraphs_are_independent(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, -1.0], requires_grad=True)
        T.backward(T.sum_(a * a) + T.sum_(T.exp(b)))
        np.testing.assert_allclose(a.grad, [2.0, 4.0])
        np.testing.assert_allclose(b.grad, np.exp([3.0, -1.0]))

    def test_tape_order_and_single_visit(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.tanh(x)
        root = T.sum_(y * y + y)
        tape = T.Tape.from_root(root)
        ids = [r.node_id for r in tape.records]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)
        for rec in tape.records:
            for p in rec._parents:
                if p.node_id is not None:
                    assert p.node_id < rec.node_id

    def test_two_layer_net_matches_fd(self):
        rng = np.random.default_rng(7)
        x = T.constant(rng.standard_normal((5, 3)))
        target = rng.standard_normal((5, 1))

        def build(ts):
            w1, b1, w2 = ts
            h = T.tanh(T.matmul(x, w1) + T.broadcast_rows(b1, 5))
            out = T.matmul(h, w2)
            d = out - T.constant(target)
            return T.mean(d * d)

        err = fd_max_rel_error(build, [rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), rng.standard_normal((4, 1))])
        assert err < REL_TOL

    def test_deterministic_gradients(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            x = T.constant(rng.standard_normal((6, 4)))
            T.backward(T.logsumexp(T.row_softmax(T.matmul(x, w))))
            return w.grad.tobytes()

        assert run() == run()

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.node_id is None


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients_fd_suite(name):
    worst = run_gradient_suite({name: op_cases()[name]}, n_cases=100)[name]
    assert worst < REL_TOL
