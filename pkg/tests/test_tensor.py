import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pairflow import tensor as T
from pairflow.gradcheck import check_gradients
from pairflow.oracles import bilinear_point, block_mean, conv2d_loops, matmul_loops
from pairflow.tensor import ContractError, DimensionError, Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- conv2d

def test_conv2d_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, (0, 2))])
def test_conv2d_matches_loops(rng, stride, padding):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, stride, padding), atol=1e-10)


def test_conv2d_rectangular_kernel(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    k = rng.normal(size=(2, 2, 1, 5))
    out = T.conv2d(Tensor(x), Tensor(k), padding=(0, 2))
    assert out.shape == (1, 2, 4, 6)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, None, 1, (0, 2)), atol=1e-10)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_output_extent_formula():
    for H, k, p, s in [(9, 3, 1, 2), (8, 7, 3, 2), (10, 1, 0, 1)]:
        out = T.conv2d(Tensor(np.ones((1, 1, H, H))), Tensor(np.ones((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[-1] == (H + 2 * p - k) // s + 1


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 3)])
def test_conv2d_gradients(rng, stride, padding):
    x = leaf(rng.normal(size=(2, 3, 7, 7)))
    k = leaf(rng.normal(size=(4, 3, 3, 3)))
    b = leaf(rng.normal(size=4))
    w = Tensor(rng.normal(size=T.conv2d(x, k, b, stride, padding).shape))
    err = check_gradients(lambda: T.sum(T.conv2d(x, k, b, stride, padding) * w), [x, k, b])
    assert err < 1e-4


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_matmul_hand():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_loops(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)


def test_matmul_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients(rng):
    a, b = leaf(rng.normal(size=(2, 4, 3))), leaf(rng.normal(size=(2, 3, 5)))
    w = Tensor(rng.normal(size=(2, 4, 5)))
    assert check_gradients(lambda: T.sum(T.matmul(a, b) * w), [a, b]) < 1e-4


# ---------------------------------------------------------------- avg_pool2d

def test_avg_pool_constant():
    out = T.avg_pool2d(Tensor(np.full((2, 8, 8), 3.5)), 4)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 2), 3.5))


def test_avg_pool_hand():
    np.testing.assert_array_equal(T.avg_pool2d(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2).data, [[2.5]])


def test_avg_pool_block_mean(rng):
    x = rng.normal(size=(8, 8))
    np.testing.assert_allclose(T.avg_pool2d(Tensor(x), 4).data, block_mean(x, 4), rtol=0, atol=1e-15)


def test_avg_pool_not_divisible():
    with pytest.raises(DimensionError):
        T.avg_pool2d(Tensor(np.ones((6, 8))), 4)


def test_avg_pool_gradients(rng):
    x = leaf(rng.normal(size=(2, 1, 8, 8)))
    w = Tensor(rng.normal(size=(2, 1, 4, 4)))
    assert check_gradients(lambda: T.sum(T.avg_pool2d(x, 2) * w), [x]) < 1e-4


@given(arrays(np.float64, (3, 8, 8), elements=st.floats(-100, 100)),
       arrays(np.float64, (3, 8, 8), elements=st.floats(-100, 100)),
       st.sampled_from([1, 2, 4, 8]))
def test_avg_pool_linear(a, b, k):
    lhs = T.avg_pool2d(Tensor(a + b), k).data
    rhs = T.avg_pool2d(Tensor(a), k).data + T.avg_pool2d(Tensor(b), k).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-10)


@given(arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
       arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
       arrays(np.float64, (4, 2), elements=st.floats(-100, 100)))
def test_matmul_linear(a, b, c):
    lhs = T.matmul(Tensor(a + b), Tensor(c)).data
    rhs = T.matmul(Tensor(a), Tensor(c)).data + T.matmul(Tensor(b), Tensor(c)).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-8)


# ---------------------------------------------------------------- bilinear

def test_bilinear_lattice_point(rng):
    field = rng.normal(size=(3, 5, 6))
    out = T.bilinear_sample(Tensor(field), Tensor([[2.0, 3.0]]))
    np.testing.assert_array_equal(out.data[0], field[:, 3, 2])


def test_bilinear_midpoint():
    field = np.array([[[0.0, 0.0], [1.0, 1.0]]])
    out = T.bilinear_sample(Tensor(field), Tensor([[0.5, 0.5]]))
    assert out.data[0, 0] == 0.5


def test_bilinear_matches_formula(rng):
    field = rng.normal(size=(4, 6, 7))
    pts = np.stack([rng.uniform(0, 6, 50), rng.uniform(0, 5, 50)], axis=1)
    out = T.bilinear_sample(Tensor(field), Tensor(pts)).data
    ref = np.stack([bilinear_point(field, x, y) for x, y in pts])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bilinear_out_of_bounds_zero_padding(rng):
    field = rng.normal(size=(2, 4, 4))
    pts = np.array([[-3.0, 1.0], [10.0, 2.0], [-0.5, 1.0], [3.5, 3.5]])
    out = T.bilinear_sample(Tensor(field), Tensor(pts)).data
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_allclose(out[2], 0.5 * field[:, 1, 0])
    np.testing.assert_allclose(out[3], 0.25 * field[:, 3, 3])


def test_bilinear_gradients(rng):
    field = leaf(rng.normal(size=(3, 5, 6)))
    pts = leaf(np.stack([rng.uniform(-0.7, 6.2, 30), rng.uniform(-0.7, 5.2, 30)], axis=1))
    w = Tensor(rng.normal(size=(30, 3)))
    assert check_gradients(lambda: T.sum(T.bilinear_sample(field, pts) * w), [field, pts]) < 1e-4


# ---------------------------------------------------------------- activations

def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_sigmoid_extreme_finite():
    y = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_softmax_equal_logits():
    y = T.softmax_lastdim(Tensor(np.full((2, 9), 3.7))).data
    np.testing.assert_allclose(y, 1.0 / 9.0, rtol=0, atol=1e-15)


@given(arrays(np.float64, (4, 9), elements=st.floats(-15, 15)))
def test_softmax_rows(x):
    y = T.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(y > 0) and np.all(y < 1)


@given(arrays(np.float64, (4, 9), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_wide(x):
    # gaps beyond ~37 round to exactly 0 or 1 in float64
    y = T.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(y)) and np.all(y >= 0) and np.all(y <= 1)


@pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.relu, T.softmax_lastdim])
def test_activation_gradients(rng, op):
    x = leaf(rng.normal(size=(4, 9)))
    w = Tensor(rng.normal(size=(4, 9)))
    assert check_gradients(lambda: T.sum(op(x) * w), [x]) < 1e-4


def test_tanh_gradient_finite_difference(rng):
    xs = rng.normal(size=20)
    for x0 in xs:
        x = leaf([x0])
        T.tanh(x).sum().backward()
        eps = 1e-6
        fd = (np.tanh(x0 + eps) - np.tanh(x0 - eps)) / (2 * eps)
        assert abs(x.grad[0] - fd) / abs(fd) < 1e-6


# ---------------------------------------------------------------- detach / backward

def test_detach_blocks_gradient(rng):
    x, y = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    T.sum(T.detach(x) * y).backward()
    assert x.grad is None or np.all(x.grad == 0)
    np.testing.assert_array_equal(y.grad, x.data)


def test_detach_three_step_chain(rng):
    """f_{k+1} = detach(f_k) + d_k with loss = sum_k w_k <g_k, f_k>:
    by hand, dL/dd_k = w_k g_k only (without detach it would be sum_{j>=k} w_j g_j)."""
    f0 = Tensor(rng.normal(size=4))
    ds = [leaf(rng.normal(size=4)) for _ in range(3)]
    gs = [rng.normal(size=4) for _ in range(3)]
    ws = [0.64, 0.8, 1.0]
    f, loss = f0, None
    for d, g, w in zip(ds, gs, ws):
        f = T.detach(f) + d
        term = T.sum(f * Tensor(g)) * w
        loss = term if loss is None else loss + term
    loss.backward()
    for d, g, w in zip(ds, gs, ws):
        np.testing.assert_allclose(d.grad, w * g, atol=1e-15)
    # without detach, the gradient accumulates over later steps
    for d in ds:
        d.grad = None
    f, loss = f0, None
    for d, g, w in zip(ds, gs, ws):
        f = f + d
        term = T.sum(f * Tensor(g)) * w
        loss = term if loss is None else loss + term
    loss.backward()
    np.testing.assert_allclose(ds[0].grad, ws[0] * gs[0] + ws[1] * gs[1] + ws[2] * gs[2], atol=1e-12)


def test_backward_sum():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square(rng):
    x = leaf(rng.normal(size=(3, 3)))
    T.sum(x * x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_nonscalar():
    with pytest.raises(ContractError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_backward_accumulates_shared_use(rng):
    x = leaf(rng.normal(size=4))
    T.sum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_tape_visits_each_node_once(rng):
    x = leaf(rng.normal(size=(3, 3)))
    y = T.tanh(x)
    z = y * y + y          # y reused
    loss = T.sum(z)
    tape = T.build_tape(loss)
    seqs = [n.seq for n in tape]
    assert len(seqs) == len(set(seqs))
    assert seqs == sorted(seqs)
    assert [n.op for n in tape] == ["tanh", "mul", "add", "sum"]


def test_constant_branch_zero_gradient(rng):
    x = leaf(rng.normal(size=3))
    c = Tensor(rng.normal(size=3))
    T.sum(x * c + c * c).backward()
    assert c.grad is None
    np.testing.assert_allclose(x.grad, c.data)


def test_no_grad_records_nothing(rng):
    x = leaf(rng.normal(size=3))
    with T.no_grad():
        y = T.tanh(x)
    assert y.node is None and not y.requires_grad


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 9, 9))
    k = rng.normal(size=(4, 3, 3, 3))
    a = T.tanh(T.conv2d(Tensor(x), Tensor(k), padding=1)).data
    b = T.tanh(T.conv2d(Tensor(x), Tensor(k), padding=1)).data
    assert a.tobytes() == b.tobytes()


def test_no_implicit_broadcast():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))


# ---------------------------------------------------------------- structural ops

@pytest.mark.parametrize("build", [
    lambda a: T.transpose(T.reshape(a, (3, 8)), (1, 0)),
    lambda a: T.concat([a[:, :1], a[:, 1:] * 2.0], axis=1),
    lambda a: T.stack([a, a * a], axis=1),
    lambda a: T.broadcast_to(a[:1], (4, 2, 3)),
    lambda a: T.pad2d(a, 1, "zero"),
    lambda a: T.pad2d(a, (2, 1), "edge"),
    lambda a: T.normalize(a, (1, 2)),
    lambda a: T.absolute(a),
    lambda a: T.softmax(a, axis=0),
])
def test_structural_gradients(rng, build):
    a = leaf(rng.normal(size=(4, 2, 3)))
    w = Tensor(rng.normal(size=build(a).shape))
    assert check_gradients(lambda: T.sum(build(a) * w), [a]) < 1e-4


def test_channel_affine_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 4, 4)))
    wt, b = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    g = Tensor(rng.normal(size=(2, 3, 4, 4)))
    assert check_gradients(lambda: T.sum(T.channel_affine(x, wt, b) * g), [x, wt, b]) < 1e-4


def test_unfold3x3_layout(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    u = T.unfold3x3(Tensor(x)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for t in range(9):
        a, b = divmod(t, 3)
        np.testing.assert_array_equal(u[:, :, t], xp[:, :, a:a + 4, b:b + 5])


def test_profiles():
    T.set_profile("fast32")
    assert Tensor([1.0]).dtype == np.float32
    T.set_profile("test64")
    assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_profile("fp16")
