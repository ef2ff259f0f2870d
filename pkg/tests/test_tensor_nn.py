import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from escnet import nn
from escnet.nn import functional as F
from escnet.nn import GraphError, ShapeError, Tensor, backward, no_grad, precision


def fd_check(fn, shapes, seed=0, h=1e-6, samples=15):
    """Worst relative error between analytic and central-difference gradients of sum(w * fn(...))."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        ts = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
        w = rng.standard_normal(fn(*ts).shape)
        backward(F.sum(F.mul(fn(*ts), Tensor(w))))
        worst = 0.0
        for t in ts:
            flat = t.data.reshape(-1)
            for i in rng.choice(flat.size, min(samples, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + h
                lp = np.sum(fn(*ts).data * w)
                flat[i] = old - h
                lm = np.sum(fn(*ts).data * w)
                flat[i] = old
                num = (lp - lm) / (2 * h)
                an = t.grad.reshape(-1)[i]
                worst = max(worst, abs(num - an) / max(1e-8, abs(num) + abs(an)))
    return worst


def naive_conv(x, w, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o])
    return out


OPS = {
    "conv3x3": (lambda x, w: F.conv2d(x, w, stride=2, padding=1), [(2, 3, 8, 8), (4, 3, 3, 3)]),
    "conv1x1_bias": (lambda x, w, b: F.conv2d(x, w, b, stride=2), [(2, 3, 8, 8), (4, 3, 1, 1), (4,)]),
    "conv7x7": (lambda x, w: F.conv2d(x, w, stride=2, padding=3), [(1, 2, 9, 11), (3, 2, 7, 7)]),
    "depthwise_freq": (lambda x, w: F.depthwise_conv2d(x, w, 1, (3, 0)), [(2, 3, 8, 8), (3, 1, 7, 1)]),
    "depthwise_time": (lambda x, w: F.depthwise_conv2d(x, w, 2, (0, 3)), [(2, 3, 8, 8), (3, 1, 1, 7)]),
    "dwsep": (lambda x, d, p: F.depthwise_separable_conv2d(x, d, p, 1, (0, 3)),
              [(2, 3, 5, 8), (3, 1, 1, 7), (4, 3, 1, 1)]),
    "bn_train": (lambda x, g, b: F.batch_norm2d(x, g, b, np.zeros(3), np.ones(3), True),
                 [(2, 3, 4, 4), (3,), (3,)]),
    "bn_eval": (lambda x, g, b: F.batch_norm2d(x, g, b, np.full(3, 0.3), np.full(3, 2.0), False),
                [(2, 3, 4, 4), (3,), (3,)]),
    "maxpool": (lambda x: F.max_pool2d(x, 3, 2, 1), [(2, 3, 7, 8)]),
    "gap": (F.global_avg_pool2d, [(2, 3, 7, 8)]),
    "linear": (F.linear, [(4, 5), (3, 5), (3,)]),
    "sigmoid": (F.sigmoid, [(4, 5)]),
    "relu": (F.relu, [(4, 5)]),
    "xent": (lambda z: F.reshape(F.softmax_cross_entropy(z, [0, 1, 2, 1]), (1,)), [(4, 3)]),
    "matmul": (F.matmul, [(4, 3), (3, 2)]),
    "concat": (lambda a, b: F.concat([a, b]), [(4, 3), (2, 3)]),
    "mean": (lambda a: F.reshape(F.mean(a), (1,)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    assert fd_check(fn, shapes) < 1e-5


@pytest.mark.parametrize("stride, pad, k", [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (3, 1, 2)])
def test_conv_matches_nested_loops(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 9, 10))
    w = rng.standard_normal((4, 3, k, k))
    with precision(np.float64):
        got = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, pad), atol=1e-12)


def test_depthwise_separable_equals_dense_conv():
    # dense weight W[o, c] = pointwise[o, c] * depthwise[c]
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 9))
    d = rng.standard_normal((3, 1, 1, 7))
    p = rng.standard_normal((5, 3, 1, 1))
    dense = p[:, :, 0, 0][:, :, None, None] * d[:, 0][None]
    with precision(np.float64):
        got = F.depthwise_separable_conv2d(Tensor(x), Tensor(d), Tensor(p), 2, (0, 3)).data
    np.testing.assert_allclose(got, naive_conv_hw(x, dense, 2, (0, 3)), atol=1e-12)


def naive_conv_hw(x, w, stride, pad):
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh, kw = w.shape[2:]
    Ho = (xp.shape[2] - kh) // stride + 1
    Wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out


def test_batch_norm_statistics_and_running_update():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    with precision(np.float64):
        out = F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_max_pool_ties_route_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(F.sum(F.max_pool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_padding_never_wins():
    x = np.full((1, 1, 3, 3), -5.0)
    out = F.max_pool2d(Tensor(x), 3, 2, 1).data
    assert np.all(out == -5.0)


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    backward(F.sum(x * x + x))
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_second_backward_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = F.sum(F.relu(x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_needs_scalar_and_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(F.relu(x))
    with pytest.raises(GraphError):
        backward(Tensor(np.ones(())))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.sum(x)
    assert not y.requires_grad and y.is_leaf


def test_default_dtype_and_precision():
    assert nn.default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
    with pytest.raises(ValueError):
        nn.set_default_dtype(np.int32)


def test_shape_errors():
    with pytest.raises(ShapeError):
        F.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).item()


def test_cross_entropy_is_stable_for_large_logits():
    z = Tensor(np.array([[1000.0, 0.0], [0.0, 1000.0]]), dtype=np.float64)
    assert F.softmax_cross_entropy(z, [0, 1]).item() == pytest.approx(0.0, abs=1e-12)
    assert F.softmax_cross_entropy(z, [1, 1]).item() == pytest.approx(500.0)


def test_module_state_round_trip():
    rng = np.random.default_rng(5)
    a = nn.Sequential(nn.Conv2d(3, 4, 3, rng=rng), nn.BatchNorm2d(4), nn.ReLU())
    b = nn.Sequential(nn.Conv2d(3, 4, 3, rng=rng), nn.BatchNorm2d(4), nn.ReLU())
    a[1].running_mean[:] = 7
    assert list(a.state_dict()) == ["0.weight", "1.weight", "1.bias", "1.running_mean", "1.running_var"]
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(b.state_dict()[k], v)
    with pytest.raises(KeyError):
        b.load_state_dict({"0.weight": a.state_dict()["0.weight"]})


def test_train_eval_flag_propagates():
    m = nn.Sequential(nn.BatchNorm2d(2), nn.Sequential(nn.BatchNorm2d(2)))
    m.eval()
    assert not any(sub.training for _, sub in m.named_modules())


def test_trace_kinks_records_patterns():
    x = Tensor(np.array([[[[-1.0, 2.0], [3.0, -4.0]]]]))
    with F.trace_kinks() as kinks:
        F.max_pool2d(F.relu(x), 2, 2)
    assert len(kinks) == 2
    np.testing.assert_array_equal(kinks[0], x.data > 0)
    assert int(kinks[1].reshape(-1)[0]) == 2


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 2, 5, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 2, 5, 5), elements=st.floats(-10, 10)),
       st.floats(-3, 3))
def test_conv_is_linear_in_input(a, b, c):
    w = Tensor(np.random.default_rng(6).standard_normal((3, 2, 3, 3)))
    with precision(np.float64):
        lhs = F.conv2d(Tensor(a + c * b), w, padding=1).data
        rhs = F.conv2d(Tensor(a), w, padding=1).data + c * F.conv2d(Tensor(b), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_sigmoid_range_and_symmetry(x):
    with precision(np.float64):
        s = F.sigmoid(Tensor(x)).data
        s_neg = F.sigmoid(Tensor(-x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + s_neg, 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 5), elements=st.floats(-100, 100)))
def test_max_pool_bounds(x):
    out = F.max_pool2d(Tensor(x, dtype=np.float64), 3, 2, 1).data
    assert out.max() == x.max()
    assert out.min() >= x.min()


def test_small_op_examples():
    with precision(np.float64):
        ones = Tensor(np.ones((1, 1, 3, 3)))
        assert F.conv2d(ones, ones).item() == 9.0
        x = Tensor(np.random.default_rng(7).standard_normal((2, 3, 4, 5)))
        ident = Tensor(np.eye(3)[:, :, None, None])
        np.testing.assert_array_equal(F.conv2d(x, ident).data, x.data)
        dw = Tensor(np.ones((3, 1, 1, 1)))
        np.testing.assert_array_equal(F.depthwise_separable_conv2d(x, dw, ident).data, x.data)
        assert F.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
        assert F.sigmoid(Tensor(np.zeros(1))).item() == 0.5
        assert F.global_avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).item() == 2.5
        assert F.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2).item() == 4.0
        assert np.all(F.max_pool2d(Tensor(np.full((1, 2, 5, 5), 3.5)), 3, 2, 1).data == 3.5)
        v = Tensor(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(F.linear(v, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, v.data)
        assert F.linear(v, Tensor(np.ones((1, 3)))).item() == 6.0
        uniform = Tensor(np.zeros((4, 50)))
        assert F.softmax_cross_entropy(uniform, [0, 1, 2, 3]).item() == pytest.approx(np.log(50))


def test_depthwise_separable_parameter_arithmetic():
    rng = np.random.default_rng(0)
    sep = nn.DepthwiseSeparableConv2d(64, 64, 3, padding=1, rng=rng)
    dense = nn.Conv2d(64, 64, 3, padding=1, rng=rng)
    assert (sep.num_parameters(), dense.num_parameters()) == (4672, 36864)


def test_batch_norm_eval_identity_and_constant_channel():
    x = np.random.default_rng(1).standard_normal((2, 2, 3, 3))
    with precision(np.float64):
        out = F.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                             False, eps=0.0).data
        np.testing.assert_array_equal(out, x)
        const = F.batch_norm2d(Tensor(np.full((2, 1, 3, 3), 4.0)), Tensor(np.ones(1)), Tensor(np.full(1, 0.7)),
                               np.zeros(1), np.ones(1), True).data
    np.testing.assert_allclose(const, 0.7)
    with pytest.raises(ShapeError):
        F.batch_norm2d(Tensor(np.ones((0, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       np.zeros(1), np.ones(1), True)


def test_simple_gradients():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.array([3.0]), requires_grad=True)
    backward(F.sum(y * y))
    assert y.grad[0] == 6.0


def test_tiny_network_finite_differences():
    # conv -> bn -> relu -> global pool -> fc -> cross-entropy, parameters from N(0, 1)
    rng = np.random.default_rng(11)
    with precision(np.float64):
        params = {
            "w": Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True),
            "g": Tensor(rng.standard_normal(4), requires_grad=True),
            "b": Tensor(rng.standard_normal(4), requires_grad=True),
            "fw": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
            "fb": Tensor(rng.standard_normal(3), requires_grad=True),
        }
        x = Tensor(rng.standard_normal((3, 2, 6, 6)))
        labels = [0, 2, 1]

        def loss_fn():
            h = F.conv2d(x, params["w"], padding=1)
            h = F.relu(F.batch_norm2d(h, params["g"], params["b"], np.zeros(4), np.ones(4), True))
            return F.softmax_cross_entropy(F.linear(F.flatten(F.global_avg_pool2d(h)), params["fw"], params["fb"]),
                                           labels)

        backward(loss_fn())
        worst = 0.0
        h = 1e-5
        for t in params.values():
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = loss_fn().item()
                flat[i] = old - h
                lm = loss_fn().item()
                flat[i] = old
                num = (lp - lm) / (2 * h)
                an = t.grad.reshape(-1)[i]
                worst = max(worst, abs(num - an) / max(abs(num), abs(an), 1e-6))
    assert worst <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
       st.integers(1, 3), st.integers(0, 10_000))
def test_conv_matches_loops_on_small_shapes(h, w, k, stride, pad, c, seed):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, h, w))
    wt = rng.standard_normal((2, c, k, k))
    with precision(np.float64):
        got = F.conv2d(Tensor(x), Tensor(wt), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, wt, stride, pad), atol=1e-12)
