"""Finite-difference verification of every differentiable operation.

Each check builds a small random instance, computes analytic gradients via
backpropagation, and compares against central differences in 64-bit mode.
Used by the command-line `grad-check` subcommand and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import losses
from .depthnet import RMU, DepthHead, ResidualUpsample
from .motionnet import MotionRefine

PER_OP_TOLERANCE = 1e-4
TOTAL_TOLERANCE = 1e-3


def numeric_grad(f, arrays, step: float = 1e-5):
    """Central-difference gradients of scalar f with respect to each array."""
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*arrays)
            flat[i] = orig - step
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def _check(build, seeds) -> float:
    """Worst relative error of a check over the given seeds.

    ``build(rng)`` returns (loss_fn, params): loss_fn(*arrays) -> float and a
    list of Tensors whose .data are the arrays being perturbed.
    """
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        loss_fn, params = build(rng)
        for p in params:
            p.zero_grad()
        arrays = [p.data.copy() for p in params]
        out = loss_fn(*arrays)
        out.backward()
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                    for p in params]

        def scalar(*arrs):
            return loss_fn(*arrs).item()

        numeric = numeric_grad(scalar, arrays)
        for a, n in zip(analytic, numeric):
            worst = max(worst, rel_err(a, n))
    return worst


def _tensorize(params, arrays):
    for p, a in zip(params, arrays):
        p.data[...] = a


def _conv2d(rng):
    x = ad.parameter(rng.normal(size=(1, 2, 5, 6)))
    w = ad.parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = ad.parameter(rng.normal(size=3))
    params = [x, w, b]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(ad.conv2d(x, w, b, stride=1, pad=1)).sum()

    return f, params


def _conv2d_transpose(rng):
    x = ad.parameter(rng.normal(size=(1, 2, 3, 4)))
    w = ad.parameter(rng.normal(size=(2, 3, 4, 4)) * 0.5)
    b = ad.parameter(rng.normal(size=3))
    params = [x, w, b]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(ad.conv2d_transpose(x, w, b, stride=2, pad=1)).sum()

    return f, params


def _bilinear_resize(rng):
    x = ad.parameter(rng.normal(size=(1, 2, 4, 6)))
    params = [x]

    def f(*arrs):
        _tensorize(params, arrs)
        up = ad.bilinear_resize(x, 2)
        return ad.square(ad.bilinear_resize(up, 0.5)).sum() + ad.square(up).sum()

    return f, params


def _grid_sample(rng):
    img = ad.parameter(rng.normal(size=(1, 2, 6, 7)))
    # keep flow away from integer lattice points, where bilinear
    # interpolation is not differentiable
    flow = ad.parameter(rng.uniform(0.2, 0.8, size=(1, 2, 6, 7)))
    params = [img, flow]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(ad.grid_sample(img, flow)).sum()

    return f, params


def _rmu_step(rng):
    unit = RMU(rng, 3)
    h = ad.parameter(rng.normal(size=(1, 3, 4, 4)) * 0.5)
    feat = ad.parameter(rng.normal(size=(1, 3, 4, 4)) * 0.5)
    params = list(unit.named_parameters().values()) + [h, feat]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(unit.step(feat, h)).sum()

    return f, params


def _residual_upsample(rng):
    up = ResidualUpsample(rng, 3, 2)
    x = ad.parameter(rng.normal(size=(1, 3, 3, 4)) * 0.5)
    params = list(up.named_parameters().values()) + [x]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(up(x)).sum()

    return f, params


def _depth_head(rng):
    head = DepthHead(rng, 4, 0.1, 100.0)
    h = ad.parameter(rng.normal(size=(1, 4, 4, 4)) * 0.5)
    params = list(head.named_parameters().values()) + [h]

    def f(*arrs):
        _tensorize(params, arrs)
        return head(h).mean()

    return f, params


def _refine_motion(rng):
    refine = MotionRefine(rng, 3, 4)
    t_prev = ad.parameter(rng.normal(size=(1, 3, 3, 3)) * 0.1)
    feat = ad.parameter(rng.normal(size=(1, 3, 6, 6)) * 0.5)
    params = list(refine.named_parameters().values()) + [t_prev, feat]

    def f(*arrs):
        _tensorize(params, arrs)
        return ad.square(refine(t_prev, feat)).sum()

    return f, params


def _photometric(rng):
    a = ad.parameter(rng.random((1, 2, 5, 6)))
    b = ad.parameter(rng.random((1, 2, 5, 6)))
    params = [a, b]

    def f(*arrs):
        _tensorize(params, arrs)
        return losses.photometric_error(a, b).sum()

    return f, params


def _smoothness(rng):
    field = ad.parameter(rng.uniform(1, 4, size=(1, 2, 5, 6)))
    image = ad.constant(rng.random((1, 3, 5, 6)))
    params = [field]

    def f(*arrs):
        _tensorize(params, arrs)
        return losses.edge_aware_smoothness(field, image)

    return f, params


def _outlier_reg(rng):
    field = ad.parameter(rng.uniform(0.2, 1.5, size=(1, 3, 4, 5))
                         * rng.choice([-1.0, 1.0], size=(1, 3, 4, 5)))
    mask = (rng.random((1, 1, 4, 5)) > 0.3).astype(np.float64)
    params = [field]

    def f(*arrs):
        _tensorize(params, arrs)
        return losses.outlier_aware_reg(field, mask)

    return f, params


def _in_general_position(target, source, depth, aa, t, t_obj, K, weights):
    """True when the objective is locally smooth around the drawn point.

    The full objective has isolated non-smooth sets: the bilinear sampling
    lattice, the auto-mask decision boundary, and the |t_obj| kink at zero.
    Central differences are only meaningful away from them, so draws that
    land within a margin (much larger than the 1e-5 step times the relevant
    sensitivities) are rejected.
    """
    H, W = target.shape[2:]
    pose = (geo.axis_angle_to_matrix(aa), t)
    flow, _, valid = geo.synthesize_correspondence(depth, K, pose, t_obj)
    if not valid.all():
        return False
    # margins are ~5x the change a 1e-5 parameter step can induce in the
    # respective quantity, so a central difference cannot cross the kink
    xs = flow.data[0, 0] + np.arange(W)
    ys = flow.data[0, 1] + np.arange(H).reshape(-1, 1)
    for c in (xs, ys):
        if np.abs(c - np.round(c)).min() < 5e-4:
            return False
    # smoothness terms take |first differences| of the fields: keep every
    # neighbor difference several steps away from the kink at zero
    for f, m in ((t_obj.data, 5e-5), (depth.data, 3e-4)):
        for ax in (2, 3):
            if np.abs(np.diff(f, axis=ax)).min() < m:
                return False
    warped = geo.warp(source, flow)
    pe = losses.photometric_error(target, warped, weights.ssim_mix)
    pe_raw = losses.photometric_error(target, source, weights.ssim_mix)
    return bool(np.abs(pe.data - pe_raw.data).min() > 2e-4)


def _total_loss(rng):
    H, W = 8, 8
    K = geo.CameraIntrinsics(6.0, 6.0, (W - 1) / 2, (H - 1) / 2)
    weights = losses.LossWeights()
    for _ in range(512):
        target = ad.constant(rng.random((1, 3, H, W)))
        sources = [ad.constant(rng.random((1, 3, H, W)))]
        depth = ad.parameter(rng.uniform(4, 6, size=(1, 1, H, W)))
        aa = ad.parameter(rng.normal(scale=0.02, size=(1, 3)))
        t = ad.parameter(rng.normal(scale=0.15, size=(1, 3)))
        t_obj = ad.parameter(rng.choice([-1.0, 1.0], size=(1, 3, H, W))
                             * rng.uniform(0.01, 0.04, size=(1, 3, H, W)))
        if _in_general_position(target, sources[0], depth, aa, t, t_obj,
                                K, weights):
            break
    else:
        raise RuntimeError("no draw in general position after 512 attempts")
    params = [depth, aa, t, t_obj]

    def f(*arrs):
        _tensorize(params, arrs)
        pose = (geo.axis_angle_to_matrix(aa), t)
        total, _ = losses.total_loss(target, sources, [depth], [pose], [t_obj],
                                     K, weights)
        return total

    return f, params


CHECKS = {
    "conv2d": (_conv2d, PER_OP_TOLERANCE),
    "conv2d_transpose": (_conv2d_transpose, PER_OP_TOLERANCE),
    "bilinear_resize": (_bilinear_resize, PER_OP_TOLERANCE),
    "grid_sample": (_grid_sample, PER_OP_TOLERANCE),
    "rmu_step": (_rmu_step, PER_OP_TOLERANCE),
    "residual_upsample": (_residual_upsample, PER_OP_TOLERANCE),
    "depth_head": (_depth_head, PER_OP_TOLERANCE),
    "refine_motion": (_refine_motion, PER_OP_TOLERANCE),
    "photometric_error": (_photometric, PER_OP_TOLERANCE),
    "edge_aware_smoothness": (_smoothness, PER_OP_TOLERANCE),
    "outlier_aware_reg": (_outlier_reg, PER_OP_TOLERANCE),
    "total_loss": (_total_loss, TOTAL_TOLERANCE),
}


def run_checks(seeds=range(5), names=None) -> dict:
    """Returns {name: (max_rel_err, tolerance, passed)} in 64-bit mode."""
    results = {}
    with ad.precision(64):
        for name, (build, tol) in CHECKS.items():
            if names is not None and name not in names:
                continue
            err = _check(build, seeds)
            results[name] = (err, tol, err < tol)
    return results
