import numpy as np
import pytest
import torch

from searaft import tensorops as ops

FD_TOL = 1e-4


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def block_mean(x, f):
    n, c, h, w = x.shape
    out = np.zeros((n, c, -(-h // f), -(-w // f)))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            acc = 0.0
            for di in range(f):
                for dj in range(f):
                    acc = acc + x[:, :, min(i * f + di, h - 1), min(j * f + dj, w - 1)]
            out[:, :, i, j] = acc / (f * f)
    return out


def four_tap(m, coords):
    n, c, h, w = m.shape
    out = np.zeros((n, c) + coords.shape[1:3])
    for b in range(n):
        for i in range(coords.shape[1]):
            for j in range(coords.shape[2]):
                x, y = coords[b, i, j]
                x0, y0 = int(np.floor(x)), int(np.floor(y))
                for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
                    if 0 <= xx < w and 0 <= yy < h:
                        wt = (1 - abs(x - xx)) * (1 - abs(y - yy))
                        out[b, :, i, j] += wt * m[b, :, yy, xx]
    return out


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# --- conv2d ---------------------------------------------------------------


def test_conv_all_ones():
    out = ops.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel():
    x = torch.randn(2, 1, 5, 7)
    out = ops.conv2d(x, torch.ones(1, 1, 1, 1), torch.zeros(1))
    assert torch.equal(out, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ops.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad).numpy()
    want = naive_conv(x, w, b, stride, pad)
    assert got.shape == want.shape == (2, 4, (8 + 2 * pad - 3) // stride + 1, (8 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ops.ShapeError, match="input channels"):
        ops.conv2d(torch.ones(1, 2, 4, 4), torch.ones(1, 3, 3, 3))
    with pytest.raises(ValueError):
        ops.conv2d(torch.ones(1, 1, 4, 4), torch.ones(1, 1, 3, 3), stride=0)


def test_conv_kernel_gradient_counts_positions():
    # all-ones 5x5 input, 3x3 kernel, padding 1: weight (i, j) touches as many
    # in-bounds pixels as the shifted window allows
    x = torch.ones(1, 1, 5, 5, dtype=torch.float64)
    w = torch.ones(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    out = ops.conv2d(x, w, padding=1)
    (g,) = ops.backward(out.sum(), inputs=[w])
    expected = np.zeros((3, 3))
    for di in range(3):
        for dj in range(3):
            rows = sum(1 for i in range(5) if 0 <= i + di - 1 < 5)
            cols = sum(1 for j in range(5) if 0 <= j + dj - 1 < 5)
            expected[di, dj] = rows * cols
    np.testing.assert_array_equal(g[0, 0].numpy(), expected)
    assert expected[1, 1] == 25 and expected[0, 0] == 16


# --- avg_pool2 ------------------------------------------------------------


def test_pool_identity_and_mean():
    x = torch.randn(1, 2, 4, 4)
    assert torch.equal(ops.avg_pool2(x, 1), x)
    assert ops.avg_pool2(torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).item() == 2.5


@pytest.mark.parametrize("shape,factor", [((1, 2, 8, 8), 4), ((2, 3, 7, 5), 2), ((1, 1, 6, 9), 4)])
def test_pool_matches_block_mean(shape, factor):
    x = np.random.default_rng(0).normal(size=shape)
    got = ops.avg_pool2(t64(x), factor).numpy()
    np.testing.assert_allclose(got, block_mean(x, factor), atol=1e-6)


def test_pool_rejects_bad_factor():
    with pytest.raises(ValueError):
        ops.avg_pool2(torch.ones(1, 1, 4, 4), 0)
    with pytest.raises(ValueError):
        ops.avg_pool2(torch.ones(1, 1, 4, 4), 3)


@pytest.mark.parametrize("op", ["conv", "pool"])
def test_linearity(op):
    rng = np.random.default_rng(3)
    x, y = t64(rng.normal(size=(1, 2, 8, 8))), t64(rng.normal(size=(1, 2, 8, 8)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    f = (lambda z: ops.conv2d(z, w, padding=1)) if op == "conv" else (lambda z: ops.avg_pool2(z, 2))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(f(a * x + b * y).numpy(), (a * f(x) + b * f(y)).numpy(), atol=1e-6)


# --- bilinear_sample -------------------------------------------------------


def test_sample_integer_lattice_is_exact_gather():
    m = torch.randn(1, 3, 5, 6)
    ys, xs = torch.meshgrid(torch.arange(5.0), torch.arange(6.0), indexing="ij")
    coords = torch.stack((xs, ys), -1)[None]
    assert torch.equal(ops.bilinear_sample(m, coords), m)


def test_sample_midpoint():
    m = torch.tensor([[[[0.0, 1.0]]]])
    assert ops.bilinear_sample(m, torch.tensor([[[[0.5, 0.0]]]])).item() == 0.5


def test_sample_out_of_bounds_reads_zero():
    m = torch.ones(1, 1, 3, 3)
    out = ops.bilinear_sample(m, torch.tensor([[[[-5.0, 1.0], [1.0, 2.5]]]]))
    assert out[0, 0, 0, 0].item() == 0.0
    assert out[0, 0, 0, 1].item() == pytest.approx(0.5)


def test_sample_matches_four_tap_oracle():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(2, 3, 6, 7))
    coords = rng.uniform(-2, 8, size=(2, 5, 4, 2))
    got = ops.bilinear_sample(t64(m), t64(coords)).numpy()
    np.testing.assert_allclose(got, four_tap(m, coords), atol=1e-6)


def test_sample_coordinate_gradient_at_fraction():
    m = torch.tensor([[[[0.0, 2.0], [1.0, 5.0]]]], dtype=torch.float64)
    c = torch.tensor([[[[0.3, 0.6]]]], dtype=torch.float64)
    err = ops.finite_difference_check(ops.bilinear_sample, [m, c], wrt=[1])
    assert err <= FD_TOL


# --- gradient checks over every primitive -----------------------------------


def _primitive_cases(rng):
    def r(*shape):
        return t64(rng.normal(size=shape))

    return {
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        "depthwise": (lambda x, w: ops.depthwise_conv2d(x, w, padding=1), [r(1, 3, 4, 4), r(3, 1, 3, 3)]),
        "avg_pool2": (lambda x: ops.avg_pool2(x, 2), [r(1, 2, 5, 3)]),
        "bilinear": (
            ops.bilinear_sample,
            [r(2, 2, 4, 5), t64(rng.uniform(-1.5, 5.5, size=(2, 3, 2, 2)) + 0.013)],
        ),
        "gelu": (ops.gelu, [r(1, 2, 3, 3)]),
        "sigmoid": (ops.sigmoid, [r(1, 2, 3, 3)]),
        "add": (ops.add, [r(1, 2, 3, 3), r(1, 2, 3, 3)]),
        "mul": (ops.mul, [r(1, 2, 3, 3), r(1, 2, 3, 3)]),
        "concat": (lambda a, b: ops.concat([a, b]), [r(1, 2, 3, 3), r(1, 1, 3, 3)]),
        "channel_norm": (ops.channel_norm, [r(1, 4, 3, 3), r(4), r(4)]),
        "instance_norm": (ops.instance_norm, [r(1, 2, 3, 3)]),
        "softmax_group": (lambda x: ops.softmax_group(x, 3), [r(1, 6, 2, 2)]),
        "resize_bilinear": (lambda x: ops.resize(x, (5, 7)), [r(1, 2, 3, 4)]),
        "resize_nearest": (lambda x: ops.resize(x, (6, 8), "nearest"), [r(1, 2, 3, 4)]),
    }


@pytest.mark.parametrize("name", list(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    worst = 0.0
    for i in range(20):
        fn, inputs = _primitive_cases(np.random.default_rng(1000 + i))[name]
        worst = max(worst, ops.finite_difference_check(fn, inputs, seed_rng=i))
    assert worst <= FD_TOL, f"{name}: {worst:.2e}"


def test_backward_sum_gives_ones():
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    (g,) = ops.backward(x.sum(), inputs=[x])
    assert torch.equal(g, torch.ones_like(x))


def test_backward_requires_forward_graph():
    with pytest.raises(RuntimeError, match="no recorded forward"):
        ops.backward(torch.ones(2, 2))
    x = torch.ones(1, 1, 2, 2, requires_grad=True)
    with pytest.raises(ops.ShapeError):
        ops.backward(x * 2, seed=torch.ones(3))


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    m, c = torch.tensor(rng.normal(size=(2, 4, 9, 9)), dtype=torch.float32), torch.tensor(
        rng.uniform(0, 8, size=(2, 5, 5, 2)), dtype=torch.float32
    )
    assert torch.equal(ops.bilinear_sample(m, c), ops.bilinear_sample(m, c))


# --- dump format ------------------------------------------------------------


def test_dump_round_trip(tmp_path):
    x = torch.randn(2, 3, 4, 5)
    ops.dump_tensor(x, tmp_path / "x.t4")
    raw = (tmp_path / "x.t4").read_bytes()
    assert len(raw) == 16 + 4 * x.numel()
    assert np.frombuffer(raw[:16], "<i4").tolist() == [2, 3, 4, 5]
    assert torch.equal(ops.load_tensor(tmp_path / "x.t4"), x)


def test_dump_truncated(tmp_path):
    ops.dump_tensor(torch.ones(1, 1, 2, 2), tmp_path / "x.t4")
    p = tmp_path / "x.t4"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="payload"):
        ops.load_tensor(p)
