import numpy as np
import pytest

from rmdepth import autodiff as ad
from rmdepth import geometry as geo
from rmdepth import losses
from rmdepth.errors import (InvalidArgumentError, InvalidConfigError,
                            TrainingDiagnosticError)

from fd import numeric_grad, rel_err


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision(64):
        yield


def _images(n, B=1, C=3, H=8, W=10, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((B, C, H, W)) for _ in range(n)]


# -- SSIM -------------------------------------------------------------------


def _scalar_box_mean_same(x):
    """Count-normalized 3x3 mean with the window clipped at the border."""
    H, W = x.shape
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            ys = slice(max(i - 1, 0), min(i + 2, H))
            xs = slice(max(j - 1, 0), min(j + 2, W))
            out[i, j] = x[ys, xs].mean()
    return out


def _scalar_ssim(a, b):
    mu_a = _scalar_box_mean_same(a)
    mu_b = _scalar_box_mean_same(b)
    var_a = _scalar_box_mean_same(a * a) - mu_a ** 2
    var_b = _scalar_box_mean_same(b * b) - mu_b ** 2
    cov = _scalar_box_mean_same(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + losses.SSIM_C1) * (2 * cov + losses.SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + losses.SSIM_C1) * (var_a + var_b + losses.SSIM_C2)
    return num / den


def test_ssim_matches_scalar_oracle():
    a, b = _images(2, C=1, seed=1)
    got = losses.ssim(ad.Tensor(a), ad.Tensor(b)).data[0, 0]
    want = _scalar_ssim(a[0, 0], b[0, 0])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_ssim_identical_images_is_one():
    (a,) = _images(1, seed=2)
    s = losses.ssim(ad.Tensor(a), ad.Tensor(a))
    np.testing.assert_allclose(s.data, 1.0, atol=1e-10)


def test_ssim_bounded():
    a, b = _images(2, seed=3)
    s = losses.ssim(ad.Tensor(a), ad.Tensor(b)).data
    assert (s <= 1.0 + 1e-12).all() and (s >= -1.0 - 1e-12).all()


# -- photometric error ------------------------------------------------------


def test_photometric_error_zero_for_identical():
    (a,) = _images(1, seed=4)
    pe = losses.photometric_error(ad.Tensor(a), ad.Tensor(a))
    np.testing.assert_allclose(pe.data, 0.0, atol=1e-10)


def test_photometric_error_pure_l1():
    (a,) = _images(1, seed=5)
    b = a + 0.125
    pe = losses.photometric_error(ad.Tensor(a), ad.Tensor(b), mix=0.0)
    np.testing.assert_allclose(pe.data, 0.125, atol=1e-12)


def test_photometric_error_shape_and_mix():
    a, b = _images(2, seed=6)
    pe = losses.photometric_error(ad.Tensor(a), ad.Tensor(b), mix=0.85)
    assert pe.shape == (1, 1, 8, 10)
    l1 = losses.photometric_error(ad.Tensor(a), ad.Tensor(b), mix=0.0)
    dssim = losses.photometric_error(ad.Tensor(a), ad.Tensor(b), mix=1.0)
    np.testing.assert_allclose(pe.data, 0.85 * dssim.data + 0.15 * l1.data, atol=1e-12)


def test_photometric_error_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        losses.photometric_error(ad.Tensor(np.zeros((1, 3, 4, 4))),
                                 ad.Tensor(np.zeros((1, 3, 4, 6))))


@pytest.mark.parametrize("seed", range(3))
def test_photometric_error_gradients(seed):
    rng = np.random.default_rng(seed + 40)
    a0 = rng.random((1, 2, 5, 6))
    b0 = rng.random((1, 2, 5, 6))

    at, bt = ad.parameter(a0), ad.parameter(b0)
    losses.photometric_error(at, bt).sum().backward()

    def f(a, b):
        return losses.photometric_error(ad.Tensor(a), ad.Tensor(b)).sum().item()

    num = numeric_grad(f, [a0, b0])
    assert rel_err(at.grad, num[0]) < 1e-6
    assert rel_err(bt.grad, num[1]) < 1e-6


# -- min reprojection + automask -------------------------------------------


def test_min_reprojection_picks_best_source_per_pixel():
    # each source matches the target exactly on one half of the image
    rng = np.random.default_rng(7)
    t = rng.random((1, 3, 8, 10))
    s1 = t.copy(); s1[:, :, :, 5:] = rng.random((1, 3, 8, 5))
    s2 = t.copy(); s2[:, :, :, :5] = rng.random((1, 3, 8, 5))
    loss, _ = losses.min_reprojection_with_automask(
        ad.Tensor(t), [ad.Tensor(s1), ad.Tensor(s2)],
        [ad.Tensor(rng.random(t.shape)), ad.Tensor(rng.random(t.shape))],
        mix=0.0)
    # the per-pixel minimum is exactly zero everywhere
    assert loss.item() < 1e-12


def test_automask_drops_pixels_warping_cannot_explain():
    # raw source already equals the target: warping it elsewhere only hurts,
    # so the strict < test removes every pixel of that source's contribution
    rng = np.random.default_rng(8)
    t = rng.random((1, 3, 8, 10))
    warped = t + 0.3
    loss, mask = losses.min_reprojection_with_automask(
        ad.Tensor(t), [ad.Tensor(warped)], [ad.Tensor(t.copy())], mix=0.0)
    assert mask.sum() == 0
    assert loss.item() == 0.0
    assert isinstance(mask, np.ndarray)


def test_automask_keeps_pixels_warping_improves():
    rng = np.random.default_rng(9)
    t = rng.random((1, 3, 8, 10))
    raw = t + 0.5
    warped = t + 0.01
    loss, mask = losses.min_reprojection_with_automask(
        ad.Tensor(t), [ad.Tensor(warped)], [ad.Tensor(raw)], mix=0.0)
    assert mask.sum() == mask.size
    assert abs(loss.item() - 0.01) < 1e-10


def test_invalid_pixels_excluded_from_minimum():
    rng = np.random.default_rng(10)
    t = rng.random((1, 3, 8, 10))
    good = t + 0.02          # valid everywhere
    bad = t.copy()           # perfect match but marked invalid on the left half
    v_good = np.ones((1, 1, 8, 10), dtype=bool)
    v_bad = np.ones((1, 1, 8, 10), dtype=bool)
    v_bad[:, :, :, :5] = False
    loss, _ = losses.min_reprojection_with_automask(
        ad.Tensor(t), [ad.Tensor(good), ad.Tensor(bad)],
        [ad.Tensor(t + 0.5), ad.Tensor(t + 0.5)], mix=0.0,
        valid_masks=[v_good, v_bad])
    # left half must fall back to the 0.02 source, right half uses the exact one
    assert abs(loss.item() - 0.01) < 1e-10


def test_min_reprojection_empty_sources():
    with pytest.raises(InvalidArgumentError):
        losses.min_reprojection_with_automask(ad.Tensor(np.zeros((1, 3, 4, 4))), [], [])


def test_min_reprojection_gradient_does_not_flow_through_mask():
    rng = np.random.default_rng(11)
    t = rng.random((1, 3, 6, 8))
    w0 = t + rng.uniform(0.05, 0.2, size=t.shape)  # clearly better than raw
    raw = t + 0.9
    wt = ad.parameter(w0)
    loss, mask = losses.min_reprojection_with_automask(
        ad.Tensor(t), [wt], [ad.Tensor(raw)], mix=0.0)
    loss.backward()

    def f(w):
        l, _ = losses.min_reprojection_with_automask(
            ad.Tensor(t), [ad.Tensor(w)], [ad.Tensor(raw)], mix=0.0)
        return l.item()

    num = numeric_grad(f, [w0])
    assert rel_err(wt.grad, num[0]) < 1e-6


# -- edge-aware smoothness --------------------------------------------------


def test_smoothness_zero_for_constant_field():
    (img,) = _images(1, seed=12)
    field = ad.Tensor(np.full((1, 1, 8, 10), 3.7))
    assert losses.edge_aware_smoothness(field, ad.Tensor(img)).item() < 1e-12


def test_smoothness_scale_invariant():
    # mean normalization: scaling the field must not change the penalty
    rng = np.random.default_rng(13)
    (img,) = _images(1, seed=13)
    f0 = rng.uniform(1, 5, size=(1, 1, 8, 10))
    s1 = losses.edge_aware_smoothness(ad.Tensor(f0), ad.Tensor(img)).item()
    s2 = losses.edge_aware_smoothness(ad.Tensor(10.0 * f0), ad.Tensor(img)).item()
    assert abs(s1 - s2) < 1e-7


def test_smoothness_discounted_at_image_edges():
    # the same field discontinuity costs less when it sits on an image edge
    H, W = 8, 10
    field = np.ones((1, 1, H, W)); field[:, :, :, W // 2:] = 2.0
    flat = np.full((1, 3, H, W), 0.5)
    edged = flat.copy(); edged[:, :, :, W // 2:] = 5.0
    s_flat = losses.edge_aware_smoothness(ad.Tensor(field), ad.Tensor(flat)).item()
    s_edge = losses.edge_aware_smoothness(ad.Tensor(field), ad.Tensor(edged)).item()
    assert s_edge < s_flat


def test_smoothness_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        losses.edge_aware_smoothness(ad.Tensor(np.zeros((1, 1, 4, 4))),
                                     ad.Tensor(np.zeros((1, 3, 8, 8))))


@pytest.mark.parametrize("seed", range(3))
def test_smoothness_gradients(seed):
    rng = np.random.default_rng(seed + 50)
    f0 = rng.uniform(1, 4, size=(1, 2, 5, 6))
    img = rng.random((1, 3, 5, 6))
    ft = ad.parameter(f0)
    losses.edge_aware_smoothness(ft, ad.Tensor(img)).backward()

    def f(a):
        return losses.edge_aware_smoothness(ad.Tensor(a), ad.Tensor(img)).item()

    num = numeric_grad(f, [f0])
    assert rel_err(ft.grad, num[0]) < 1e-5


# -- outlier-aware regularizer ---------------------------------------------


def _reg_value(field, mask):
    return losses.outlier_aware_reg(ad.Tensor(field), mask).item()


def test_reg_zero_field_zero():
    mask = np.ones((1, 1, 6, 8))
    assert _reg_value(np.zeros((1, 3, 6, 8)), mask) == 0.0


def test_reg_prefers_concentrated_motion():
    # same L1 mass, fewer active pixels -> strictly smaller penalty
    mask = np.ones((1, 1, 6, 8))
    spread = np.zeros((1, 3, 6, 8)); spread[0, 0] = 1.0 / 48
    dense = np.zeros((1, 3, 6, 8)); dense[0, 0, :3, :4] = 1.0 / 12
    peaky = np.zeros((1, 3, 6, 8)); peaky[0, 0, 0, 0] = 1.0
    g_spread = _reg_value(spread, mask)
    g_dense = _reg_value(dense, mask)
    g_peaky = _reg_value(peaky, mask)
    assert g_peaky < g_dense < g_spread


def test_reg_ignores_motion_outside_mask():
    rng = np.random.default_rng(14)
    field = rng.normal(size=(1, 3, 6, 8))
    mask = np.zeros((1, 1, 6, 8))
    assert _reg_value(field, mask) == 0.0
    # motion confined to the masked-out region adds nothing
    mask[:, :, :, :4] = 1.0
    base = _reg_value(field, mask)
    spiked = field.copy(); spiked[:, :, :, 4:] += 100.0
    assert abs(_reg_value(spiked, mask) - base) < 1e-12


def test_reg_mask_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        losses.outlier_aware_reg(ad.Tensor(np.zeros((1, 3, 6, 8))),
                                 np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_reg_gradients(seed):
    rng = np.random.default_rng(seed + 60)
    f0 = rng.uniform(0.2, 1.5, size=(1, 3, 5, 6)) * rng.choice([-1.0, 1.0], size=(1, 3, 5, 6))
    mask = (rng.random((1, 1, 5, 6)) > 0.3).astype(float)
    ft = ad.parameter(f0)
    losses.outlier_aware_reg(ft, mask).backward()

    def f(a):
        return losses.outlier_aware_reg(ad.Tensor(a), mask).item()

    num = numeric_grad(f, [f0])
    assert rel_err(ft.grad, num[0]) < 1e-4


# -- weights + total loss ---------------------------------------------------


def test_loss_weights_validation():
    with pytest.raises(InvalidConfigError):
        losses.LossWeights(w_photo=-1.0)
    with pytest.raises(InvalidConfigError):
        losses.LossWeights(ssim_mix=1.5)
    with pytest.raises(InvalidConfigError):
        losses.LossWeights(regularizer="l2")


def _total_loss_setup(seed=15, reg="outlier-aware"):
    rng = np.random.default_rng(seed)
    H, W = 16, 24
    K = geo.CameraIntrinsics(12.0, 12.0, (W - 1) / 2, (H - 1) / 2)
    target = ad.Tensor(rng.random((1, 3, H, W)))
    sources = [ad.Tensor(rng.random((1, 3, H, W))) for _ in range(2)]
    pyramid = [ad.parameter(rng.uniform(4, 8, size=(1, 1, H >> s, W >> s)))
               for s in (3, 2, 1)]
    poses, t_objs = [], []
    for i in range(2):
        aa = ad.parameter(rng.normal(scale=0.01, size=(1, 3)))
        tr = ad.parameter(rng.normal(scale=0.05, size=(1, 3)))
        poses.append((geo.axis_angle_to_matrix(aa), tr))
        t_objs.append(ad.parameter(rng.normal(scale=0.02, size=(1, 3, H // 4, W // 4))))
    weights = losses.LossWeights(regularizer=reg)
    return target, sources, pyramid, poses, t_objs, K, weights


def test_total_loss_finite_scalar_and_terms():
    target, sources, pyr, poses, t_objs, K, w = _total_loss_setup()
    total, terms = losses.total_loss(target, sources, pyr, poses, t_objs, K, w)
    assert total.shape == ()
    assert np.isfinite(total.item())
    assert set(terms) == {"photometric", "smooth_depth", "smooth_motion", "motion_reg"}
    assert all(np.isfinite(v) for v in terms.values())


def test_total_loss_gradient_reaches_all_heads():
    target, sources, pyr, poses, t_objs, K, w = _total_loss_setup(seed=16)
    total, _ = losses.total_loss(target, sources, pyr, poses, t_objs, K, w)
    total.backward()
    for d in pyr:
        assert d.grad is not None and np.abs(d.grad).max() > 0
    for t in t_objs:
        assert t.grad is not None and np.abs(t.grad).max() > 0


def test_total_loss_regularizer_none():
    target, sources, pyr, poses, t_objs, K, w = _total_loss_setup(seed=17, reg="none")
    _, terms = losses.total_loss(target, sources, pyr, poses, t_objs, K, w)
    assert terms["motion_reg"] == 0.0


def test_total_loss_no_object_motion_ablation():
    target, sources, pyr, poses, _, K, w = _total_loss_setup(seed=18)
    total, terms = losses.total_loss(target, sources, pyr, poses, [None, None], K, w)
    assert np.isfinite(total.item())
    assert terms["smooth_motion"] == 0.0 and terms["motion_reg"] == 0.0


def test_total_loss_nan_attribution():
    target, sources, pyr, poses, t_objs, K, w = _total_loss_setup(seed=19)
    pyr[0].data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiagnosticError):
        losses.total_loss(target, sources, pyr, poses, t_objs, K, w)


def test_total_loss_argument_validation():
    target, sources, pyr, poses, t_objs, K, w = _total_loss_setup(seed=20)
    with pytest.raises(InvalidArgumentError):
        losses.total_loss(target, [], pyr, [], [], K, w)
    with pytest.raises(InvalidArgumentError):
        losses.total_loss(target, sources, pyr, poses[:1], t_objs, K, w)
