import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fafnet.errors import GradientCheckError, ShapeError
from fafnet.tensor import (
    BN_EPS,
    ParamStore,
    Tape,
    Tensor,
    apply_activation,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    finite_diff_check,
    linear_map,
    lrelu,
    no_grad,
    slice_channels,
    tsum,
)


def direct_conv(x, w, b, pad):
    """Nested-loop reference convolution (cross-correlation, stride 1)."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for r in range(h):
                for c in range(wd):
                    acc = b[o]
                    for ch in range(cin):
                        for dr in range(k):
                            for dc in range(k):
                                acc += xp[i, ch, r + dr, c + dc] * w[o, ch, dr, dc]
                    out[i, o, r, c] = acc
    return out


def leaf(a, dtype=np.float64):
    t = Tensor(np.asarray(a, dtype=dtype), requires_grad=True)
    t.zero_grad()
    return t


class TestConv2d:
    def test_all_ones_kernel_on_2x2(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, Tensor(np.zeros(1)), padding=1)
        np.testing.assert_array_equal(out.data[0, 0], [[10, 10], [10, 10]])

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_nested_loop_oracle(self, k):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        want = direct_conv(x, w, b, (k - 1) // 2)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    def test_single_precision_matches_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        got = conv2d(Tensor(x), Tensor(w)).data
        want = direct_conv(x.astype(np.float64), w.astype(np.float64), np.zeros(3), 1)
        assert np.max(np.abs(got - want)) <= 1e-6 * np.max(np.abs(want)) * 10

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 7, 5)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)

    def test_zero_input_gives_bias(self):
        out = conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5])))
        for c, b in enumerate([1.0, -2.0, 0.5]):
            assert np.all(out.data[0, c] == b)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
    def test_linearity(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 1, 2, 6, 6))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        lhs = conv2d(Tensor(alpha * x + beta * y), w).data
        rhs = alpha * conv2d(Tensor(x), w).data + beta * conv2d(Tensor(y), w).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(rhs)))

    def test_shape_errors_name_dims(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ShapeError, match="Cin=2"):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ShapeError, match="kernel size"):
            conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
        with pytest.raises(ShapeError, match="padding"):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), padding=0)


class TestActivations:
    def test_lrelu_values(self):
        out = apply_activation(Tensor(np.array([-1.0, 3.5, 0.0])), "lrelu").data
        np.testing.assert_allclose(out, [-0.2, 3.5, 0.0])

    def test_tanh_zero_and_bounded(self):
        out = apply_activation(Tensor(np.array([0.0, 50.0, -50.0])), "tanh").data
        assert out[0] == 0.0
        assert np.all(np.abs(out) <= 1.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply_activation(Tensor(np.zeros(2)), "relu6")


class TestBatchNorm:
    def _run(self, x, gamma, beta, train=True, mean=None, var=None):
        c = x.shape[1]
        rm = np.zeros(c) if mean is None else mean
        rv = np.ones(c) if var is None else var
        return batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, train), rm, rv

    def test_two_value_hand_example(self):
        x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
        out, _, _ = self._run(x, np.ones(1), np.zeros(1))
        # batch variance of {-1, 1} is 1
        np.testing.assert_allclose(out.data.ravel(), [-1 / np.sqrt(1 + BN_EPS), 1 / np.sqrt(1 + BN_EPS)], rtol=1e-15)

    def test_gamma_zero_gives_beta(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 4, 4))
        out, _, _ = self._run(x, np.zeros(2), np.array([0.3, -0.7]))
        assert np.all(out.data[:, 0] == 0.3) and np.all(out.data[:, 1] == -0.7)

    def test_eval_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        out, _, _ = self._run(x, np.ones(3), np.zeros(3), train=False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + BN_EPS), rtol=1e-12)

    def test_running_stats_ema(self):
        x = np.random.default_rng(2).normal(2.0, 3.0, size=(4, 1, 5, 5))
        _, rm, rv = self._run(x, np.ones(1), np.zeros(1))
        np.testing.assert_allclose(rm, 0.1 * x.mean())
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(ddof=1))

    def test_single_value_per_channel_fails(self):
        with pytest.raises(ShapeError):
            self._run(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


class TestConcatLinear:
    def test_concat_shapes_and_roundtrip(self):
        a = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
        b = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
        out = concat_channels(Tensor(a), Tensor(b))
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(slice_channels(out, 0, 2).data, a)
        np.testing.assert_array_equal(concat_channels(Tensor(a), Tensor(np.zeros((2, 0, 3, 3)))).data, a)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))

    def test_linear_hand_example(self):
        out = linear_map(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([5.0])))
        assert out.data.tolist() == [[16.0]]

    def test_linear_identity_and_onehot(self):
        z = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(linear_map(Tensor(z), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, z)
        w = np.arange(12.0).reshape(3, 4)
        onehot = np.eye(4)[[2]]
        np.testing.assert_array_equal(linear_map(Tensor(onehot), Tensor(w)).data[0], w[:, 2])

    def test_linear_mismatch(self):
        with pytest.raises(ShapeError):
            linear_map(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        backward(tsum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_lrelu_negative_region_chain_rule(self):
        x = np.array([1.0, 2.0, 3.0])
        w = leaf([-0.5])
        loss = lrelu(w * Tensor(x)).mean()
        backward(loss)
        np.testing.assert_allclose(w.grad, [0.2 * x.sum() / 3])

    def test_disconnected_param_has_zero_grad(self):
        ps = ParamStore()
        a = ps.add("a", np.ones(3))
        ps.add("b", np.ones(2))
        ps.zero_grad()
        backward(tsum(a * a))
        assert np.array_equal(ps["b"].grad, np.zeros(2))
        assert np.array_equal(a.grad, 2 * np.ones(3))

    def test_non_scalar_terminal(self):
        with pytest.raises(ShapeError):
            backward(leaf(np.ones(3)) * 2.0)

    def test_tape_visits_each_node_once(self):
        x = leaf(np.ones(2))
        y = x * x
        z = y + y + x
        loss = tsum(z * y)
        tape = Tape(loss)
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
        pos = {id(n): k for k, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n.parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = x * x
        backward(tsum(y + y))  # d/dx 2x^2 = 4x
        assert x.grad[0] == 8.0

    def test_deep_chain_does_not_recurse(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(tsum(y))
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            y = x * 3.0
        assert y.parents == () and not y.requires_grad


class TestFiniteDiff:
    def test_quadratic_exact(self):
        ps = ParamStore()
        ps.add("p", np.array([3.0]))
        rep = finite_diff_check(lambda s: tsum(s["p"] * s["p"]) * 0.5, ps, step=1e-4, n_coords=1)
        name, idx, analytic, numeric, err = rep.records[0]
        assert analytic == 3.0 and abs(numeric - 3.0) < 1e-8 and err < 1e-8

    def test_nondeterministic_rejected(self):
        ps = ParamStore()
        ps.add("p", np.array([1.0]))
        counter = iter(range(100))
        with pytest.raises(GradientCheckError):
            finite_diff_check(lambda s: tsum(s["p"]) * float(next(counter)), ps)


class TestParamStore:
    def test_deterministic_order_and_duplicates(self):
        ps = ParamStore(1)
        for name in ("z", "a", "m"):
            ps.add(name, np.zeros(2))
        assert ps.names() == ["z", "a", "m"]
        with pytest.raises(KeyError):
            ps.add("a", np.zeros(1))
        assert all(t.grad.shape == t.data.shape for _, t in ps.items())

    def test_astype_is_deep(self):
        ps = ParamStore()
        ps.add("w", np.ones(2, np.float32))
        ps.add_buffer("m", np.zeros(2, np.float32))
        d = ps.astype(np.float64)
        d["w"].data[0] = 5
        assert ps["w"].data[0] == 1 and d["w"].dtype == np.float64 and d.buffers["m"].dtype == np.float64
