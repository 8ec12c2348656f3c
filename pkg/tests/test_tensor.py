import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbc import tensor as T
from sbc.errors import ContractError, DimensionError


# ---------------------------------------------------------------- oracles


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_conv(x, k, stride):
    c, h, w = x.shape
    co, ci, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for cc in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            acc += x[cc, y * stride + i, xx * stride + j] * k[o, cc, i, j]
                out[o, y, xx] = acc
    return out


def naive_pool(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    for cc in range(c):
        for i in range(0, h, 2):
            for j in range(0, w, 2):
                out[cc, i // 2, j // 2] = max(x[cc, i, j], x[cc, i, j + 1], x[cc, i + 1, j], x[cc, i + 1, j + 1])
    return out


def finite_diff(f, arr, eps=1e-5, idx=None):
    """Central differences of scalar f() wrt entries of arr (mutated in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, np.eye(2)).data, a)


def test_matmul_annihilation():
    out = T.matmul(np.array([[1.0, 0], [0, 0]]), np.array([[0.0, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    with T.exact_accumulation():
        out = T.matmul(a, b).data
    assert np.array_equal(out, naive_matmul(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- conv / pool


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6, 5))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, k).data, x)


def test_conv_constant_input_averaging_kernel():
    x = np.full((1, 7, 7), 2.5)
    k = np.full((1, 1, 3, 3), 1.0 / 9.0)
    out = T.conv2d(x, k).data
    assert out.shape == (1, 5, 5)
    np.testing.assert_allclose(out, 2.5, rtol=1e-15)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loop_exactly(stride):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 5))
    k = rng.standard_normal((2, 1, 3, 3))
    with T.exact_accumulation():
        out = T.conv2d(x, k, stride=stride).data
    assert np.array_equal(out, naive_conv(x, k, stride))


def test_conv_multichannel_batch_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 7))
    k = rng.standard_normal((4, 3, 2, 3))
    with T.exact_accumulation():
        out = T.conv2d(x, k).data
    for n in range(2):
        assert np.array_equal(out[n], naive_conv(x[n], k, 1))


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_pool_constant():
    out = T.max_pool2(np.full((2, 4, 6), -1.5)).data
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out, -1.5)


def test_pool_single_window():
    assert T.max_pool2(np.array([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 4.0


def test_pool_matches_window_scan():
    x = np.random.default_rng(4).standard_normal((3, 6, 6))
    assert np.array_equal(T.max_pool2(x).data, naive_pool(x))


def test_pool_odd_dims():
    with pytest.raises(DimensionError):
        T.max_pool2(np.ones((1, 5, 4)))


def test_pool_gradient_routes_to_argmax():
    x = T.Tensor(np.array([[[1.0, 5.0], [3.0, 4.0]]]), requires_grad=True)
    g = T.Graph()
    with g:
        loss = T.max_pool2(x).sum()
    T.gradients(loss, g)
    np.testing.assert_array_equal(x.grad, [[[0, 1], [0, 0]]])


# ---------------------------------------------------------------- relu / xent


def test_relu_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_identity_on_positive():
    x = np.array([0.5, 3.0, 1e-9])
    np.testing.assert_array_equal(T.relu(x).data, x)


def test_relu_gradient_mask_vs_finite_differences():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal(20)
    x = T.Tensor(xv, requires_grad=True)
    g = T.Graph()
    with g:
        loss = (T.relu(x) * np.arange(20.0)).sum()
    T.gradients(loss, g)
    fd = finite_diff(lambda: float((np.maximum(xv, 0) * np.arange(20.0)).sum()), xv)
    np.testing.assert_allclose(x.grad, [fd[i] for i in range(20)], rtol=1e-6)
    np.testing.assert_array_equal(x.grad, (xv > 0) * np.arange(20.0))


def test_relu_gradient_zero_at_zero():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    g = T.Graph()
    with g:
        loss = T.relu(x).sum()
    T.gradients(loss, g)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_xent_uniform_logits():
    loss = T.softmax_xent(np.zeros((4, 7)), np.array([0, 3, 6, 2]))
    assert loss.item() == pytest.approx(np.log(7), rel=1e-15)


def test_xent_saturation():
    logits = np.zeros((1, 3))
    logits[0, 1] = 1000.0
    assert T.softmax_xent(logits, np.array([1])).item() == pytest.approx(0.0, abs=1e-300)


def test_xent_matches_extended_precision_oracle():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((8, 5)) * 3
    labels = rng.integers(0, 5, size=8)
    ld = logits.astype(np.longdouble)
    p = np.exp(ld) / np.exp(ld).sum(axis=1, keepdims=True)
    oracle = float(-np.mean(np.log(p[np.arange(8), labels])))
    assert T.softmax_xent(logits, labels).item() == pytest.approx(oracle, rel=1e-14)


def test_xent_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


# ---------------------------------------------------------------- gradients


def test_gradients_of_sum_is_ones():
    w = T.Tensor(np.random.default_rng(7).standard_normal((3, 4)), requires_grad=True)
    g = T.Graph()
    with g:
        loss = w.sum()
    grads = T.gradients(loss, g)
    np.testing.assert_array_equal(grads[w], np.ones((3, 4)))


def test_gradients_of_half_square_is_identity():
    w = T.Tensor(np.random.default_rng(8).standard_normal(6), requires_grad=True)
    g = T.Graph()
    with g:
        loss = (w * w).sum() * 0.5
    T.gradients(loss, g)
    np.testing.assert_allclose(w.grad, w.data, rtol=0, atol=0)


def test_non_scalar_loss_rejected():
    w = T.Tensor(np.ones(3), requires_grad=True)
    g = T.Graph()
    with g:
        y = w * 2.0
    with pytest.raises(ContractError):
        T.gradients(y, g)


def _lenet300_loss(params, x, y):
    w1, b1, w2, b2, w3, b3 = params
    h = T.relu(T.matmul(x, w1) + b1)
    h = T.relu(T.matmul(h, w2) + b2)
    return T.softmax_xent(T.matmul(h, w3) + b3, y)


def test_lenet300_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    sizes = [784, 300, 100, 10]
    arrays = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        arrays.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        arrays.append(rng.standard_normal(b) * 0.1)
    params = [T.Tensor(a, requires_grad=True) for a in arrays]
    x = rng.random((4, 784))
    y = rng.integers(0, 10, size=4)
    g = T.Graph()
    with g:
        loss = _lenet300_loss(params, x, y)
    grads = T.gradients(loss, g)

    def f():
        return _lenet300_loss([T.Tensor(a) for a in arrays], x, y).item()

    worst = 0.0
    for arr, p in zip(arrays, params):
        idx = rng.choice(arr.size, size=min(arr.size, 40), replace=False)
        fd = finite_diff(f, arr, idx=idx)
        for i, v in fd.items():
            worst = max(worst, rel_err(grads[p].reshape(-1)[i], v))
    assert worst <= 1e-4


def test_conv_and_pool_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    xv = rng.standard_normal((2, 2, 8, 8))
    kv = rng.standard_normal((3, 2, 3, 3))
    wv = rng.standard_normal((27, 4))
    y = np.array([1, 3])

    def build(x, k, w):
        h = T.max_pool2(T.relu(T.conv2d(x, k)))[:, :, :, :]
        h = T.reshape(h, (2, 27))
        return T.softmax_xent(T.matmul(h, w), y)

    x = T.Tensor(xv, requires_grad=True)
    k = T.Tensor(kv, requires_grad=True)
    w = T.Tensor(wv, requires_grad=True)
    g = T.Graph()
    with g:
        loss = build(x, k, w)
    T.gradients(loss, g)

    def f():
        return build(T.Tensor(xv), T.Tensor(kv), T.Tensor(wv)).item()

    for arr, t in [(xv, x), (kv, k), (wv, w)]:
        fd = finite_diff(f, arr, idx=range(0, arr.size, max(1, arr.size // 30)))
        for i, v in fd.items():
            assert rel_err(t.grad.reshape(-1)[i], v) <= 1e-4


def test_strided_conv_gradient():
    rng = np.random.default_rng(11)
    xv = rng.standard_normal((1, 2, 7, 7))
    kv = rng.standard_normal((2, 2, 3, 3))
    x = T.Tensor(xv, requires_grad=True)
    k = T.Tensor(kv, requires_grad=True)
    g = T.Graph()
    with g:
        loss = T.square(T.conv2d(x, k, stride=2)).sum()
    T.gradients(loss, g)
    f = lambda: float((T.conv2d(xv, kv, stride=2).data ** 2).sum())  # noqa: E731
    for arr, t in [(xv, x), (kv, k)]:
        fd = finite_diff(f, arr)
        np.testing.assert_allclose(t.grad.reshape(-1), [fd[i] for i in range(arr.size)], rtol=1e-6, atol=1e-8)


def test_three_layer_network_all_parameters():
    rng = np.random.default_rng(12)
    arrays = [rng.standard_normal((6, 5)), rng.standard_normal(5), rng.standard_normal((5, 4)),
              rng.standard_normal(4), rng.standard_normal((4, 3)), rng.standard_normal(3)]
    x = rng.standard_normal((5, 6))
    y = rng.integers(0, 3, size=5)
    params = [T.Tensor(a, requires_grad=True) for a in arrays]
    g = T.Graph()
    with g:
        loss = _lenet300_loss(params, x, y)
    T.gradients(loss, g)
    f = lambda: _lenet300_loss([T.Tensor(a) for a in arrays], x, y).item()  # noqa: E731
    for arr, p in zip(arrays, params):
        fd = finite_diff(f, arr)
        for i, v in fd.items():
            assert rel_err(p.grad.reshape(-1)[i], v) <= 1e-4


# ---------------------------------------------------------------- determinism / replay


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(13)
        params = [T.Tensor(rng.standard_normal((20, 8)), requires_grad=True),
                  T.Tensor(rng.standard_normal(8), requires_grad=True)]
        g = T.Graph()
        with g:
            loss = T.softmax_xent(T.matmul(rng.standard_normal((7, 20)), params[0]) + params[1],
                                  rng.integers(0, 8, 7))
        T.gradients(loss, g)
        return loss.data.copy(), [p.grad.copy() for p in params]

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_graph_replay_reproduces_forward_values():
    rng = np.random.default_rng(14)
    x = T.Tensor(rng.standard_normal((2, 1, 6, 6)))
    k = T.Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((8, 3)), requires_grad=True)
    g = T.Graph()
    with g:
        h = T.max_pool2(T.relu(T.conv2d(x, k)))
        out = T.softmax_xent(T.matmul(T.reshape(h, (2, 8)), w), np.array([0, 2]))
        T.logsumexp(T.exp(w) / 3.0 - T.sqrt(T.square(w)), axis=1).sum()
    replayed = g.replay()
    assert len(replayed) == len(g.nodes)
    for node, v in zip(g.nodes, replayed):
        assert np.array_equal(node.out.data, v)
    assert g.parameters == [k, w]
    assert out.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_exact_mode_matches_loop_for_any_shape(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    with T.exact_accumulation():
        assert np.array_equal(T.matmul(a, b).data, naive_matmul(a, b))


def test_broadcast_gradient_reduces_to_parameter_shape():
    b = T.Tensor(np.zeros(3), requires_grad=True)
    g = T.Graph()
    with g:
        loss = (T.Tensor(np.ones((4, 3))) + b).sum()
    T.gradients(loss, g)
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_elementwise_gradients():
    rng = np.random.default_rng(15)
    xv = rng.random(6) + 0.5
    fns = [T.exp, T.log, T.sqrt, T.sigmoid, T.softplus, T.erf, T.digamma, T.square,
           lambda t: t ** 3, lambda t: 1.0 / t]
    np_fns = [np.exp, np.log, np.sqrt, lambda v: 1 / (1 + np.exp(-v)), lambda v: np.log1p(np.exp(v)),
              None, None, np.square, lambda v: v ** 3, lambda v: 1 / v]
    for fn, nf in zip(fns, np_fns):
        x = T.Tensor(xv.copy(), requires_grad=True)
        g = T.Graph()
        with g:
            loss = fn(x).sum()
        T.gradients(loss, g)
        f = lambda: fn(T.Tensor(xv)).sum().item()  # noqa: E731
        fd = finite_diff(f, xv)
        np.testing.assert_allclose(x.grad, [fd[i] for i in range(6)], rtol=1e-6)
        if nf is not None:
            np.testing.assert_allclose(fn(T.Tensor(xv)).data, nf(xv), rtol=1e-14)
