"""Core tensor ops against brute-force oracles plus gradient checks."""

import numpy as np
import pytest

from convnmt import tensor as T
from convnmt.errors import ConfigError, ShapeError


def matmul_oracle(a, b):
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_oracle(x, w, b):
    """Direct-summation same-padded convolution."""
    k, d_in, d_out = w.shape
    T_, pad = x.shape[0], (k - 1) // 2
    out = np.tile(b, (T_, 1))
    for t in range(T_):
        for u in range(k):
            s = t + u - pad
            if 0 <= s < T_:
                for i in range(d_in):
                    for j in range(d_out):
                        out[t, j] += w[u, i, j] * x[s, i]
    return out


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, T.Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_scalar_case(self):
        out = T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-12)

    def test_vector_cases(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=5), rng.normal(size=(5, 3))
        assert np.allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, a @ b)
        assert np.allclose(T.matmul(T.Tensor(b.T), T.Tensor(a)).data, b.T @ a)

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


class TestConv1d:
    def test_center_tap_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 4))
        w = np.zeros((3, 4, 4))
        w[1] = np.eye(4)
        out = T.conv1d_same(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(4)))
        assert np.allclose(out.data, x)

    def test_uniform_kernel_equals_window_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 4))
        k = 5
        w = np.zeros((k, 4, 4))
        for u in range(k):
            w[u] = np.eye(4) / k
        via_conv = T.conv1d_same(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(4)))
        via_mean = T.window_mean_rows(T.Tensor(x), k)
        assert np.allclose(via_conv.data, via_mean.data, atol=1e-12)

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(9, 4))
        w = rng.normal(size=(3, 4, 6))
        b = rng.normal(size=6)
        out = T.conv1d_same(T.Tensor(x), T.Tensor(w), T.Tensor(b))
        assert np.allclose(out.data, conv_oracle(x, w, b), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.conv1d_same(T.Tensor(np.zeros((4, 2))), T.Tensor(np.zeros((2, 2, 2))), T.Tensor(np.zeros(2)))

    @pytest.mark.parametrize("t", [1, 2, 5, 17])
    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_length_preserved(self, t, k):
        rng = np.random.default_rng(t * 10 + k)
        x = rng.normal(size=(t, 3))
        w = rng.normal(size=(k, 3, 2))
        out = T.conv1d_same(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(2)))
        assert out.data.shape == (t, 2)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(T.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6))
        a = T.softmax_rows(T.Tensor(x)).data
        b = T.softmax_rows(T.Tensor(x + 123.456)).data
        assert np.allclose(a, b, atol=1e-12)

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        out = T.softmax_rows(T.Tensor(x)).data
        assert np.allclose(out, np.exp(x) / np.exp(x).sum(), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(10, 7)) * 30
        y = T.softmax_rows(T.Tensor(x)).data
        assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert (y >= 0).all() and (y <= 1).all()

    def test_masked_entries_exact_zero(self):
        x = np.array([1.0, -np.inf, 2.0, -np.inf])
        y = T.softmax_rows(T.Tensor(x)).data
        assert y[1] == 0.0 and y[3] == 0.0
        assert np.isclose(y.sum(), 1.0)

    def test_fully_masked_row_raises(self):
        with pytest.raises(ValueError, match="empty attention support"):
            T.softmax_rows(T.Tensor(np.full((2, 3), -np.inf)))


class TestElementwise:
    def test_tanh_sigmoid_at_zero(self):
        assert T.tanh(T.Tensor(np.zeros(3))).data.sum() == 0.0
        assert np.allclose(T.sigmoid(T.Tensor(np.zeros(3))).data, 0.5)

    def test_reverse_rows_involution(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        out = T.reverse_rows(T.reverse_rows(T.Tensor(x)))
        assert np.array_equal(out.data, x)

    def test_add_gradient_is_one(self):
        x = T.Tensor(np.array([0.2, -0.7]))
        err = T.finite_difference_check(lambda t: T.sum_all(T.add(t, T.Tensor([1.0, 2.0]))), x)
        assert err < 1e-9

    def test_concat_and_scale(self):
        a, b = T.Tensor([1.0, 2.0]), T.Tensor([3.0])
        assert np.array_equal(T.concat_last_dim(a, b).data, [1.0, 2.0, 3.0])
        assert np.array_equal(T.scale(a, 2.0).data, [2.0, 4.0])


class TestBackward:
    def test_sum_of_squares_exact(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
            tape.backward(loss)
        assert np.array_equal(x.grad, 2 * x.data)

    def test_unused_leaf_gets_no_grad(self):
        x = T.Tensor(np.ones(2), requires_grad=True)
        w = T.Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(x)
            tape.backward(loss)
        assert w.grad is None

    def test_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        w = rng.normal(size=(4, 5))

        def f(x):
            h = T.tanh(T.matmul(x, T.Tensor(w)))
            p = T.softmax_rows(h)
            return T.sum_all(T.mul(p, p))

        err = T.finite_difference_check(f, T.Tensor(rng.normal(size=(3, 4))), eps=1e-5)
        assert err < 1e-6

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
            tape.backward(loss)
            tape.backward(loss)
        assert np.allclose(x.grad, 2 * 2 * x.data)


class TestFiniteDifferenceCheck:
    def test_linear_function_near_exact(self):
        x = T.Tensor(np.array([0.5, -1.5, 2.0]))
        err = T.finite_difference_check(lambda t: T.sum_all(T.scale(t, 3.0)), x)
        assert err < 1e-10

    def test_tanh_small_error(self):
        err = T.finite_difference_check(lambda t: T.sum_all(T.tanh(t)), T.Tensor(np.array([0.3])))
        assert err < 1e-7

    def test_injected_fault_detected(self):
        def faulty(t):
            out = T.Tensor(t.data * 2.0, t.requires_grad)
            tape = T.active_tape()
            if tape is not None and t.requires_grad:
                # deliberately wrong rule: claims d(out)/d(t) == 4
                tape.record(lambda: t.accumulate_grad(T._grad_of(out) * 4.0))
            return T.sum_all(out)

        err = T.finite_difference_check(faulty, T.Tensor(np.array([0.7])))
        assert err == pytest.approx(1.0, abs=1e-6)


def _sq(t):
    """Scalar loss sum(t*t); curves the output so fd checks see the chain."""
    return T.sum_all(T.mul(t, t))


def _fd_cases(rng):
    """One (f, x) pair per differentiable primitive, at a random small shape."""
    m = int(rng.integers(2, 6))
    n = int(rng.integers(2, 6))
    k = int(rng.integers(2, 5))
    w = rng.normal(size=(n, k))
    cw = rng.normal(size=(3, n, k))
    cb = rng.normal(size=k)
    other = rng.normal(size=(m, n))
    ids = rng.integers(0, m, size=4)
    gates = rng.normal(size=4 * n)
    state_c = rng.normal(size=n)
    targets = rng.integers(0, n, size=m)
    return {
        "matmul": (lambda x: _sq(T.matmul(x, T.Tensor(w))), (m, n)),
        "conv1d_same": (
            lambda x: T.sum_all(T.tanh(T.conv1d_same(x, T.Tensor(cw), T.Tensor(cb)))),
            (m, n),
        ),
        "conv1d_kernel": (
            lambda x: _sq(T.conv1d_same(T.Tensor(other), x, T.Tensor(cb))),
            (3, n, k),
        ),
        "window_mean": (lambda x: _sq(T.window_mean_rows(x, 3)), (m, n)),
        "softmax_rows": (lambda x: _sq(T.softmax_rows(x)), (m, n)),
        "add": (lambda x: _sq(T.add(x, T.Tensor(other))), (m, n)),
        "mul": (lambda x: _sq(T.mul(x, T.Tensor(other))), (m, n)),
        "tanh": (lambda x: _sq(T.tanh(x)), (m, n)),
        "sigmoid": (lambda x: _sq(T.sigmoid(x)), (m, n)),
        "scale": (lambda x: _sq(T.scale(x, -1.7)), (m, n)),
        "concat": (lambda x: _sq(T.concat_last_dim(x, T.Tensor(other))), (m, n)),
        "reverse_rows": (lambda x: _sq(T.mul(T.reverse_rows(x), T.Tensor(other))), (m, n)),
        "take_rows": (lambda x: _sq(T.take_rows(x, ids)), (m, n)),
        "stack_rows": (lambda x: _sq(T.stack_rows([T.take_rows(x, i) for i in range(m)])), (m, n)),
        "lstm_gates_input": (
            lambda x: _sq(T.concat_last_dim(*T.lstm_gates(x, T.Tensor(state_c)))),
            (4 * n,),
        ),
        "lstm_gates_state": (
            lambda x: _sq(T.concat_last_dim(*T.lstm_gates(T.Tensor(gates), x))),
            (n,),
        ),
        "cross_entropy": (lambda x: T.cross_entropy_rows(x, targets), (m, n)),
    }


def test_every_primitive_passes_fd_on_random_shapes():
    for trial in range(5):
        rng = np.random.default_rng(100 + trial)
        for name, (f, shape) in _fd_cases(rng).items():
            x = T.Tensor(rng.normal(size=shape) * 0.5)
            err = T.finite_difference_check(f, x, eps=1e-5)
            assert err < 1e-4, f"{name} failed fd check at trial {trial}: {err}"


def test_replay_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        with T.Tape() as tape:
            h = T.tanh(T.matmul(x, w))
            loss = T.cross_entropy_rows(h, np.array([0, 1, 2, 1]))
            tape.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)
