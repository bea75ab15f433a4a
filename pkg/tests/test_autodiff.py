import numpy as np
import pytest

from rmdepth import autodiff as ad
from rmdepth.errors import InvalidArgumentError, ShapeError

from fd import numeric_grad, rel_err


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision(64):
        yield


def check_grads(build_loss, arrays, tol=1e-4, step=1e-5):
    """build_loss maps a list of Tensors to a scalar Tensor."""
    tensors = [ad.parameter(a) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()

    def f(*arrs):
        ts = [ad.Tensor(a) for a in arrs]
        return build_loss(ts).item()

    num = numeric_grad(f, arrays, step=step)
    for t, n in zip(tensors, num):
        assert t.grad is not None
        assert rel_err(t.grad, n) < tol


def test_sigmoid_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5


def test_tanh_zero():
    assert ad.tanh(ad.Tensor(0.0)).item() == 0.0


def test_mul_backward_matches_product_rule():
    a = ad.parameter([1.0, 2.0])
    b = ad.parameter([3.0, 4.0])
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad, [3.0, 4.0])
    np.testing.assert_allclose(b.grad, [1.0, 2.0])


def test_backward_sum_gives_ones():
    x = ad.parameter(np.random.default_rng(0).normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = ad.parameter(np.random.default_rng(1).normal(size=(5,)))
    ((x * x).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_rejects_nonscalar():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = ad.parameter(np.ones(3))
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
    x.zero_grad()
    assert x.grad is None


def test_broadcast_shapes_and_errors():
    a = ad.Tensor(np.ones((2, 3, 4, 4)))
    b = ad.Tensor(np.ones((1, 3, 1, 1)))
    assert (a + b).shape == (2, 3, 4, 4)
    with pytest.raises(ShapeError):
        ad.add(a, ad.Tensor(np.ones((2, 5, 4, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 3.0, size=(2, 3))  # keep away from log/sqrt domain edges
    b = rng.uniform(0.5, 3.0, size=(2, 3))

    def loss(ts):
        x, y = ts
        z = ad.tanh(x) * ad.sigmoid(y) + ad.sqrt(x) / y + ad.log(x) + ad.elu(y - 3.0)
        return (z * z).mean()

    check_grads(loss, [a, b])


@pytest.mark.parametrize("seed", range(3))
def test_minmax_gradients(seed):
    rng = np.random.default_rng(seed + 10)
    a = rng.normal(size=(4, 4))
    b = a + rng.choice([-1.0, 1.0], size=(4, 4)) * (0.1 + rng.random((4, 4)))

    def loss(ts):
        return (ad.minimum(ts[0], ts[1]) + ad.maximum(ts[0], ts[1]) * 0.3).sum()

    check_grads(loss, [a, b])


def test_elementwise_dispatch():
    a = ad.Tensor([1.0, 2.0])
    np.testing.assert_allclose(ad.elementwise("exp", a).data, np.exp(a.data))
    with pytest.raises(InvalidArgumentError):
        ad.elementwise("nope", a)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = ad.Tensor(np.random.default_rng(2).normal(size=(1, 1, 5, 5)))
    w = ad.Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(ad.conv2d(x, w).data, x.data)


def test_conv2d_averaging_kernel_constant_image():
    c = 3.7
    x = ad.Tensor(np.full((1, 1, 6, 6), c))
    w = ad.Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    out = ad.conv2d(x, w, stride=1, pad=0)
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, c, rtol=1e-12)


def test_conv2d_output_shape_stride2():
    x = ad.Tensor(np.zeros((2, 3, 8, 10)))
    w = ad.Tensor(np.zeros((4, 3, 3, 3)))
    assert ad.conv2d(x, w, stride=2, pad=1).shape == (2, 4, 4, 5)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 1, 2, 2))), ad.Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 5, 5))), ad.Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(seed, stride, pad):
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(1, 1, 5, 5))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=(2,))

    def loss(ts):
        return ad.square(ad.conv2d(ts[0], ts[1], ts[2], stride=stride, pad=pad)).sum()

    check_grads(loss, [x, w, b])


@pytest.mark.parametrize("seed", range(3))
def test_conv2d_transpose_gradients(seed):
    rng = np.random.default_rng(seed + 200)
    x = rng.normal(size=(1, 2, 3, 4))
    w = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(3,))

    def loss(ts):
        return ad.square(ad.conv2d_transpose(ts[0], ts[1], ts[2], stride=2, pad=1)).sum()

    check_grads(loss, [x, w, b])


def test_conv2d_transpose_doubles_extent():
    out = ad.conv2d_transpose(ad.Tensor(np.zeros((1, 2, 3, 5))), ad.Tensor(np.zeros((2, 4, 4, 4))))
    assert out.shape == (1, 4, 6, 10)


# -- concat ------------------------------------------------------------------

def test_concat_shapes():
    a = ad.Tensor(np.zeros((1, 2, 4, 4)))
    b = ad.Tensor(np.zeros((1, 3, 4, 4)))
    assert ad.concat_channels([a, b]).shape == (1, 5, 4, 4)


def test_concat_single_is_identity():
    a = ad.Tensor(np.random.default_rng(3).normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(ad.concat_channels([a]).data, a.data)


def test_concat_backward_splits():
    a = ad.parameter(np.zeros((1, 2, 2, 2)))
    b = ad.parameter(np.zeros((1, 3, 2, 2)))
    ad.concat_channels([a, b]).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((1, 3, 2, 2)))


def test_concat_slice_roundtrip():
    rng = np.random.default_rng(4)
    a = ad.Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = ad.Tensor(rng.normal(size=(1, 4, 3, 3)))
    cat = ad.concat_channels([a, b])
    np.testing.assert_array_equal(cat.data[:, :2], a.data)
    np.testing.assert_array_equal(cat.data[:, 2:], b.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels([ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.zeros((1, 1, 5, 4)))])


# -- bilinear_resize ---------------------------------------------------------

def _scalar_bilinear(img, factor):
    """Independent scalar interpolation oracle (align-corners-false)."""
    H, W = img.shape
    OH, OW = int(H * factor), int(W * factor)
    out = np.zeros((OH, OW))
    for i in range(OH):
        for j in range(OW):
            sy = min(max((i + 0.5) / factor - 0.5, 0.0), H - 1.0)
            sx = min(max((j + 0.5) / factor - 0.5, 0.0), W - 1.0)
            y0, x0 = min(int(np.floor(sy)), H - 2) if H > 1 else 0, min(int(np.floor(sx)), W - 2) if W > 1 else 0
            fy, fx = sy - y0, sx - x0
            out[i, j] = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
                         + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
    return out


def test_resize_factor_one_identity():
    x = ad.Tensor(np.random.default_rng(5).normal(size=(1, 2, 4, 4)))
    np.testing.assert_array_equal(ad.bilinear_resize(x, 1).data, x.data)


def test_resize_constant_preserved():
    x = ad.Tensor(np.full((1, 1, 3, 3), 2.5))
    np.testing.assert_allclose(ad.bilinear_resize(x, 2).data, 2.5, rtol=1e-12)


def test_resize_matches_scalar_oracle():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.bilinear_resize(ad.Tensor(img[None, None]), 2).data[0, 0]
    np.testing.assert_allclose(out, _scalar_bilinear(img, 2), rtol=1e-12)
    rng = np.random.default_rng(6)
    img = rng.normal(size=(4, 6))
    out = ad.bilinear_resize(ad.Tensor(img[None, None]), 0.5).data[0, 0]
    np.testing.assert_allclose(out, _scalar_bilinear(img, 0.5), rtol=1e-12)


def test_resize_noninteger_extent_rejected():
    with pytest.raises(InvalidArgumentError):
        ad.bilinear_resize(ad.Tensor(np.zeros((1, 1, 3, 3))), 1.5)


@pytest.mark.parametrize("seed", range(5))
def test_resize_gradients(seed):
    rng = np.random.default_rng(seed + 300)
    x = rng.normal(size=(1, 2, 3, 4))

    def loss(ts):
        return ad.square(ad.bilinear_resize(ts[0], 2)).sum()

    check_grads(loss, [x])


# -- grid_sample -------------------------------------------------------------

def test_grid_sample_zero_flow_identity():
    rng = np.random.default_rng(7)
    img = ad.Tensor(rng.normal(size=(2, 3, 5, 6)))
    flow = ad.Tensor(np.zeros((2, 2, 5, 6)))
    np.testing.assert_array_equal(ad.grid_sample(img, flow).data, img.data)


def test_grid_sample_recovers_shift():
    rng = np.random.default_rng(8)
    base = rng.normal(size=(1, 1, 6, 8))
    shifted = np.roll(base, -1, axis=3)  # shifted[x] = base[x+1]
    flow = np.zeros((1, 2, 6, 8))
    flow[:, 0] = -1.0
    out = ad.grid_sample(ad.Tensor(shifted), ad.Tensor(flow)).data
    np.testing.assert_allclose(out[:, :, :, 1:], base[:, :, :, 1:], rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_grid_sample_gradients(seed):
    rng = np.random.default_rng(seed + 400)
    img = rng.normal(size=(1, 2, 5, 5))
    # non-integer sample points well inside the image
    flow = rng.uniform(-0.8, 0.8, size=(1, 2, 5, 5)) + 0.13

    def loss(ts):
        return ad.square(ad.grid_sample(ts[0], ts[1])).sum()

    check_grads(loss, [img, flow])


def test_grid_sample_nan_flow_counted():
    ad.reset_nan_flow_count()
    img = ad.Tensor(np.ones((1, 1, 4, 4)))
    flow = np.zeros((1, 2, 4, 4))
    flow[0, 0, 1, 1] = np.nan
    out = ad.grid_sample(img, ad.Tensor(flow))
    assert np.isnan(out.data[0, 0, 1, 1])
    assert np.isfinite(out.data[0, 0, 0, 0])
    assert ad.nan_flow_count() == 1
    ad.reset_nan_flow_count()


# -- box filter --------------------------------------------------------------

def test_box_filter_constant():
    x = ad.Tensor(np.full((1, 1, 5, 5), 4.2))
    out = ad.box_filter3(x)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out.data, 4.2, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_box_filter_gradients(seed):
    rng = np.random.default_rng(seed + 500)
    x = rng.normal(size=(1, 2, 5, 6))

    def loss(ts):
        return ad.square(ad.box_filter3(ts[0])).sum()

    check_grads(loss, [x])


# -- determinism and precision ----------------------------------------------

def test_forward_determinism():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    a = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=1, pad=1).data
    b = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=1, pad=1).data
    np.testing.assert_array_equal(a, b)


def test_precision_modes():
    with ad.precision(32):
        assert ad.Tensor([1.0]).dtype == np.float32
    with ad.precision(64):
        assert ad.Tensor([1.0]).dtype == np.float64


def test_unreachable_tensor_has_no_grad():
    x = ad.parameter(np.ones(3))
    y = ad.parameter(np.ones(3))
    x.sum().backward()
    assert y.grad is None
