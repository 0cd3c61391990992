import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, naive_conv2d, rel_error, scatter_conv_transpose2d
from radiomap import tensor as T
from radiomap.tensor import conv as conv_module
from radiomap.tensor import Tensor, backward, conv2d, conv_transpose2d, tape_scope


def grad_check(fn, arrays, eps=1e-6, tol=1e-6):
    """Compare backward() against central differences for every array (f64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def scalar(arrs):
        with tape_scope():
            return fn(*[Tensor(a) for a in arrs]).item()

    with tape_scope():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        grads = backward(loss, wrt=leaves, accumulate=False)
    for i, leaf in enumerate(leaves):
        numeric = central_difference(scalar, arrays, i, eps)
        assert rel_error(grads[leaf.id], numeric) < tol, f"argument {i}"


class TestConv2d:
    def test_scaling_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_center_sums_neighbourhood(self, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        assert out.shape == (1, 1, 5, 5)
        assert out.data[0, 0, 2, 2] == pytest.approx(x[0, 0, 1:4, 1:4].sum())
        np.testing.assert_allclose(out.data, naive_conv2d(x, np.ones((1, 1, 3, 3)), [0.0], 1, 1, 1), atol=1e-12)

    def test_dilated_receptive_field(self):
        x = np.zeros((1, 1, 9, 9))
        x[0, 0, 4, 4] = 1.0
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), dilation=2, padding=2)
        expected = naive_conv2d(x, np.ones((1, 1, 3, 3)), [0.0], 1, 2, 2)
        np.testing.assert_array_equal(out.data, expected)
        rows, cols = np.nonzero(out.data[0, 0])
        assert sorted(zip(rows.tolist(), cols.tolist())) == [(r, c) for r in (2, 4, 6) for c in (2, 4, 6)]

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    @pytest.mark.parametrize("padding", [0, 1, 2])
    def test_matches_naive_loops(self, rng, stride, dilation, padding):
        size = dilation * 2 + 3
        x = rng.normal(size=(2, 3, size, size + 1)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, dilation, padding)
        assert rel_error(out.data, naive_conv2d(x, k, b, stride, dilation, padding)) < 1e-5

    @pytest.mark.parametrize("cin,cout", [(3, 1), (4, 4), (2, 5), (8, 2)])
    @pytest.mark.parametrize("dilation,padding", [(1, 1), (2, 0), (8, 8)])
    def test_both_lowerings_match_naive(self, rng, monkeypatch, cin, cout, dilation, padding):
        x = rng.normal(size=(2, cin, 19, 19)).astype(np.float32)
        k = rng.normal(size=(cout, cin, 3, 3)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        expected = naive_conv2d(x, k, b, 1, dilation, padding)
        for factor in (0, 1e9):
            monkeypatch.setattr(conv_module, "NARROW_FACTOR", factor)
            out = conv2d(Tensor(x), Tensor(k), Tensor(b), 1, dilation, padding)
            assert rel_error(out.data, expected) < 1e-5, factor

    def test_channel_mismatch_rejected(self):
        with pytest.raises(T.ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_empty_output_rejected(self):
        with pytest.raises(T.ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))), dilation=2)


class TestConvTranspose:
    def test_block_fill(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = conv_transpose2d(x, Tensor(np.ones((1, 1, 2, 2))), stride=2)
        expected = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_identity(self):
        out = conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1))))
        assert out.data.item() == 5.0

    @pytest.mark.parametrize("stride,padding,output_padding", [(1, 0, 0), (2, 1, 1), (2, 0, 0), (3, 1, 2)])
    def test_matches_scatter_oracle(self, rng, stride, padding, output_padding):
        x = rng.normal(size=(2, 3, 4, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = conv_transpose2d(Tensor(x), Tensor(k), None, stride, padding, output_padding)
        assert rel_error(out.data, scatter_conv_transpose2d(x, k, stride, padding, output_padding)) < 1e-12

    def test_negative_size_rejected(self):
        with pytest.raises(T.ShapeError):
            conv_transpose2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))), padding=1)

    def test_adjoint_identity_random_geometries(self, rng):
        for _ in range(100):
            stride = int(rng.integers(1, 4))
            k = int(rng.integers(1, 5))
            pad = int(rng.integers(0, k))
            h = int(rng.integers(k + 1, 10))
            w = h
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            kern = rng.normal(size=(cout, cin, k, k))
            x = rng.normal(size=(2, cin, h, w))
            y_shape = conv2d(Tensor(x), Tensor(kern), None, stride, 1, pad).shape
            y = rng.normal(size=y_shape)
            lhs = np.sum(conv2d(Tensor(x), Tensor(kern), None, stride, 1, pad).data * y)
            # the conv2d kernel (Cout,Cin,..) is read by conv_transpose2d as (Cin',Cout',..)
            op = (h + 2 * pad - k) % stride
            back = conv_transpose2d(Tensor(y), Tensor(kern), None, stride, pad, op).data
            assert back.shape == x.shape
            rhs = np.sum(x * back)
            assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


class TestElementwise:
    def test_scalar_values(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        np.testing.assert_array_equal(T.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_concat_shape_law(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.zeros((1, 3, 4, 4)))
        assert T.concat_channels([a, b]).shape == (1, 5, 4, 4)
        with pytest.raises(T.ShapeError):
            T.concat_channels([a, Tensor(np.zeros((1, 3, 4, 5)))])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: T.sum_(T.relu(x)),
            lambda x: T.sum_(T.leaky_relu(x, 0.2)),
            lambda x: T.sum_(T.sigmoid(x) * x),
            lambda x: T.mean(T.softplus(x)),
            lambda x: T.sum_(T.abs_(x) * x),
            lambda x: T.mean(T.square(x)),
            lambda x: T.sum_(T.sqrt(T.square(x) + 1.0)),
            lambda x: T.sum_(T.amax(x, axis=(2, 3), keepdims=True) * 3.0),
            lambda x: T.sum_(T.amax(x, axis=1) * 2.0),
            lambda x: T.sum_(T.mean(x, axis=1, keepdims=True) * T.sum_(x, axis=(2, 3), keepdims=True)),
            lambda x: T.sum_(T.scale(x, -2.5) / (T.square(x) + 1.0)),
            lambda x: T.sum_(T.matmul(T.reshape(x, (2, 3, 16)), T.transpose(T.reshape(x, (2, 3, 16)), (0, 2, 1)))),
            lambda x: T.sum_(T.concat_channels([x, T.square(x)]) * T.concat_channels([x, x])),
        ],
    )
    def test_gradients_match_finite_differences(self, rng, fn):
        x = rng.normal(size=(2, 3, 4, 4))
        grad_check(fn, [x])

    def test_binary_broadcast_gradients(self, rng):
        a = rng.normal(size=(2, 3, 4, 4))
        b = rng.normal(size=(2, 1, 4, 4))
        grad_check(lambda a, b: T.sum_(T.mul(a, b) - T.div(a, T.square(b) + 2.0) + T.add(a, b)), [a, b])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with tape_scope():
            grads = backward(T.sum_(x * x))
        np.testing.assert_array_equal(grads[x.id], [2.0, 4.0, 6.0])
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones((2, 2)), requires_grad=True)
        with tape_scope():
            grads = backward(T.sum_(x), wrt=[x, y])
        np.testing.assert_array_equal(grads[y.id], np.zeros((2, 2)))

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with tape_scope():
            grads = backward(T.sum_(x + x + x))
        assert grads[x.id][0] == 3.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with tape_scope(), pytest.raises(T.ShapeError):
            backward(x * 2.0)

    def test_constants_stay_off_tape(self):
        with tape_scope() as tape:
            T.relu(Tensor(np.ones(3))) * 2.0
        assert tape.nodes == []

    def test_reverse_order_traversal(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with tape_scope() as tape:
            y = T.relu(x)
            z = T.sum_(y * x)
            kinds = [n.kind for n in tape.nodes]
            backward(z)
        assert kinds == ["relu", "mul", "sum"]

    @pytest.mark.parametrize(
        "stride,dilation,padding", [(1, 1, 0), (2, 1, 1), (1, 2, 2), (1, 4, 4), (2, 8, 8)]
    )
    def test_conv_mse_gradients_f64(self, rng, stride, dilation, padding):
        size = 2 * dilation + 3
        x = rng.normal(size=(2, 2, size, size))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        ho = (size + 2 * padding - 2 * dilation - 1) // stride + 1
        target = Tensor(rng.normal(size=(2, 3, ho, ho)))

        def fn(x, k, b):
            return T.mean(T.square(conv2d(x, k, b, stride, dilation, padding) - target))

        grad_check(fn, [x, k, b])

    @pytest.mark.parametrize("factor", [0, 1e9])
    @pytest.mark.parametrize("cin,cout,dilation,padding", [(3, 1, 1, 1), (4, 2, 2, 2), (2, 2, 1, 0), (3, 3, 4, 4)])
    def test_stride_one_gradients_both_lowerings(self, rng, monkeypatch, factor, cin, cout, dilation, padding):
        monkeypatch.setattr(conv_module, "NARROW_FACTOR", factor)
        size = 2 * dilation + 4
        x = rng.normal(size=(2, cin, size, size))
        k = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        ho = size + 2 * padding - 2 * dilation
        target = Tensor(rng.normal(size=(2, cout, ho, ho)))

        def fn(x, k, b):
            return T.mean(T.square(conv2d(x, k, b, 1, dilation, padding) - target))

        grad_check(fn, [x, k, b])

    def test_conv_transpose_gradients_f64(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=2)
        target = Tensor(rng.normal(size=(2, 2, 8, 8)))

        def fn(x, k, b):
            return T.mean(T.square(conv_transpose2d(x, k, b, 2, 1, 1) - target))

        grad_check(fn, [x, k, b])

    def test_conv_gradient_f32_loose(self, rng):
        x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        k = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        target = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float32))
        kt = Tensor(k, requires_grad=True)
        with tape_scope():
            loss = T.mean(T.square(conv2d(Tensor(x), kt, padding=1) - target))
            g = backward(loss)[kt.id]
        k64 = k.astype(np.float64)

        def f(arrs):
            out = naive_conv2d(x.astype(np.float64), arrs[0], [0, 0], 1, 1, 1)
            return float(np.mean((out - target.data) ** 2))

        assert rel_error(g, central_difference(f, [k64], 0, 1e-3)) < 1e-3

    def test_determinism(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)

        def run():
            kt = Tensor(k.copy(), requires_grad=True)
            with tape_scope():
                loss = T.mean(T.square(T.sigmoid(conv2d(Tensor(x), kt, padding=1))))
                g = backward(loss)[kt.id]
            return loss.data.tobytes(), g.tobytes()

        assert run() == run()


class TestAdam:
    def test_zero_gradient_decays_moments(self):
        p = Tensor(np.array([1.0, -2.0]))
        state = T.AdamState()
        state.m["p"] = np.array([0.5, 0.5])
        state.v["p"] = np.array([0.25, 0.25])
        state.step["p"] = 3
        T.adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=1e-4)
        np.testing.assert_allclose(state.m["p"], [0.25, 0.25])
        np.testing.assert_allclose(state.v["p"], [0.25 * 0.999] * 2)

    def test_zero_gradient_from_fresh_state(self):
        p = Tensor(np.array([1.0, -2.0]))
        T.adam_step({"p": p}, {"p": np.zeros(2)}, T.AdamState(), lr=1e-4)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]))
        T.adam_step({"p": p}, {"p": np.array([1.0])}, T.AdamState(), lr=1e-4)
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_constant_gradient_step_converges(self):
        p = Tensor(np.array([0.0]))
        state = T.AdamState()
        prev = 0.0
        for _ in range(5000):
            T.adam_step({"p": p}, {"p": np.array([-3.0])}, state, lr=1e-3)
            step = p.data[0] - prev
            prev = p.data[0]
        assert step == pytest.approx(1e-3, rel=1e-4)

    def test_non_finite_gradient_skipped(self):
        p = Tensor(np.array([1.0]))
        q = Tensor(np.array([1.0]))
        state = T.AdamState()
        T.adam_step({"p": p, "q": q}, {"p": np.array([np.nan]), "q": np.array([1.0])}, state, lr=0.1)
        assert p.data[0] == 1.0 and q.data[0] < 1.0
        assert state.skipped == 1

    def test_deterministic(self):
        def run():
            p = Tensor(np.array([0.3, 0.7]))
            s = T.AdamState()
            for i in range(10):
                T.adam_step({"p": p}, {"p": np.array([np.sin(i), np.cos(i)])}, s, lr=1e-2)
            return p.data.tobytes()

        assert run() == run()


@settings(max_examples=40, deadline=None)
@given(
    stride=st.integers(1, 2),
    dilation=st.sampled_from([1, 2, 4, 8]),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv2d_property_against_oracle(stride, dilation, padding, seed):
    r = np.random.default_rng(seed)
    size = dilation * 2 + 1 + int(r.integers(0, 4))
    x = r.normal(size=(1, 2, size, size)).astype(np.float32)
    k = r.normal(size=(2, 2, 3, 3)).astype(np.float32)
    b = r.normal(size=2).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride, dilation, padding)
    assert rel_error(out.data, naive_conv2d(x, k, b, stride, dilation, padding)) < 1e-5
