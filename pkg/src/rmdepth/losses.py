"""The unsupervised objective.

Photometric reconstruction with per-pixel minimum over sources and
auto-masking of stationary pixels, edge-aware smoothness on depth and
object motion, and an outlier-aware sparsity regularizer on the motion
field restricted to rigid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import InvalidArgumentError, InvalidConfigError, TrainingDiagnosticError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
REGULARIZER_KINDS = ("outlier-aware", "plain-sparsity", "none")

# pixels excluded from the photometric minimum get this error value
_INVALID_PE = 1e6


@dataclass(frozen=True)
class LossWeights:
    w_photo: float = 1.0
    w_smooth_depth: float = 1e-3
    w_smooth_motion: float = 1e-3
    w_reg: float = 1.0
    ssim_mix: float = 0.85
    regularizer: str = "outlier-aware"
    motion_mask_alpha: float = 0.5

    def __post_init__(self):
        for name in ("w_photo", "w_smooth_depth", "w_smooth_motion", "w_reg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidConfigError(f"{name} must be finite and >= 0")
        if not 0.0 <= self.ssim_mix <= 1.0:
            raise InvalidConfigError("ssim_mix must lie in [0, 1]")
        if self.regularizer not in REGULARIZER_KINDS:
            raise InvalidConfigError(f"regularizer must be one of {REGULARIZER_KINDS}")


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM with a 3x3 mean filter; same spatial extent as inputs."""
    mu_a = ad.box_mean_same(a)
    mu_b = ad.box_mean_same(b)
    var_a = ad.box_mean_same(a * a) - mu_a * mu_a
    var_b = ad.box_mean_same(b * b) - mu_b * mu_b
    cov = ad.box_mean_same(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric_error(a: Tensor, b: Tensor, mix: float = 0.85) -> Tensor:
    """Per-pixel error map (B, 1, H, W): mix*(1-SSIM)/2 + (1-mix)*L1,
    averaged over color channels."""
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    l1 = ad.absolute(a - b).mean(axis=1, keepdims=True)
    if mix == 0.0:
        return l1
    dssim = ((1.0 - ssim(a, b)) * 0.5).mean(axis=1, keepdims=True)
    return dssim * mix + l1 * (1.0 - mix)


def min_reprojection_with_automask(target: Tensor, warped_sources, raw_sources,
                                   mix: float = 0.85, valid_masks=None):
    """Per-pixel minimum reprojection loss with stationary-pixel auto-masking.

    warped_sources / raw_sources: equal-length lists of source images after /
    before warping.  valid_masks: optional per-source numpy bool masks
    (B, 1, H, W) from the correspondence step; invalid pixels are excluded
    from the minimum.  Returns (scalar loss, automask numpy array); the
    automask carries no gradient.
    """
    warped_sources = list(warped_sources)
    raw_sources = list(raw_sources)
    if not warped_sources:
        raise InvalidArgumentError("need at least one source image")
    if len(warped_sources) != len(raw_sources):
        raise InvalidArgumentError("warped and raw source lists differ in length")

    min_warped = None
    for i, w in enumerate(warped_sources):
        pe = photometric_error(target, w, mix)
        if valid_masks is not None:
            v = valid_masks[i].astype(pe.dtype)
            pe = pe * ad.constant(v, dtype=pe.dtype) \
                + ad.constant((1.0 - v) * _INVALID_PE, dtype=pe.dtype)
        min_warped = pe if min_warped is None else ad.minimum(min_warped, pe)

    min_raw = None
    for r in raw_sources:
        pe = photometric_error(target.detach(), r.detach(), mix)
        min_raw = pe.data if min_raw is None else np.minimum(min_raw, pe.data)

    automask = (min_warped.data < min_raw).astype(target.dtype)
    denom = max(float(automask.sum()), 1.0)
    loss = (min_warped * ad.constant(automask, dtype=target.dtype)).sum() * (1.0 / denom)
    return loss, automask


def edge_aware_smoothness(field: Tensor, image: Tensor) -> Tensor:
    """Mean of first differences of the mean-normalized field, down-weighted
    where the image has strong gradients."""
    if field.shape[2:] != image.shape[2:]:
        raise InvalidArgumentError(
            f"field extents {field.shape} do not match image {image.shape}")
    # mean |field| normalization: equals the plain spatial mean for positive
    # fields (depth) and stays bounded for signed fields (object motion)
    norm = ad.absolute(field).mean(axis=(2, 3), keepdims=True) + 1e-7
    f = field / norm
    dfx = ad.absolute(f[:, :, :, 1:] - f[:, :, :, :-1]).mean(axis=1, keepdims=True)
    dfy = ad.absolute(f[:, :, 1:, :] - f[:, :, :-1, :]).mean(axis=1, keepdims=True)
    gx = np.abs(np.diff(image.data, axis=3)).mean(axis=1, keepdims=True)
    gy = np.abs(np.diff(image.data, axis=2)).mean(axis=1, keepdims=True)
    wx = ad.constant(np.exp(-gx), dtype=field.dtype)
    wy = ad.constant(np.exp(-gy), dtype=field.dtype)
    return (dfx * wx).mean() + (dfy * wy).mean()


def outlier_aware_reg(t_obj: Tensor, mask) -> Tensor:
    """Sparsity penalty on the motion field restricted to rigid pixels.

    mask: detached (B, 1, H, W) array, 1 on rigid pixels.  Per channel c with
    masked field Y_c and m_c = spatial mean of |Y_c|:
        g = sum_c 2 m_c ( mean sqrt(1 + |Y_c| / (m_c + eps)) - 1 )
    Concentrating a fixed L1 mass on fewer pixels strictly decreases g.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape[0] != t_obj.shape[0] or m.shape[2:] != t_obj.shape[2:]:
        raise InvalidArgumentError(f"mask {m.shape} incompatible with field {t_obj.shape}")
    y = ad.absolute(t_obj * ad.constant(m, dtype=t_obj.dtype))
    mc = y.mean(axis=(2, 3), keepdims=True)  # (B, 3, 1, 1)
    inner = ad.sqrt(1.0 + y / (mc + 1e-24)).mean(axis=(2, 3), keepdims=True) - 1.0
    return (mc * inner * 2.0).sum() * (1.0 / t_obj.shape[0])


def _upsample_to(x: Tensor, H: int, W: int) -> Tensor:
    if x.shape[2:] == (H, W):
        return x
    return ad.bilinear_resize(x, H // x.shape[2])


def total_loss(target: Tensor, sources, depth_pyramid, poses, t_objs,
               K: geo.CameraIntrinsics, weights: LossWeights):
    """Full objective over all scales and sources.

    sources: list of source images; poses: per-source (R, t) tensor pairs or
    PoseSE3; t_objs: per-source finest motion field Tensor (any scale) or
    None for the no-object-motion ablation; depth_pyramid: coarse-to-fine
    depth maps.  Photometric terms are computed at full resolution by
    upsampling the predictions.  Returns (scalar Tensor, dict of detached
    term values).
    """
    sources = list(sources)
    if not sources:
        raise InvalidArgumentError("need at least one source image")
    if len(poses) != len(sources) or len(t_objs) != len(sources):
        raise InvalidArgumentError("poses/t_objs must match sources")
    B, _, H, W = target.shape
    t_full = [None if t is None else _upsample_to(t, H, W) for t in t_objs]

    photo = None
    smooth_d = None
    for d in depth_pyramid:
        D = _upsample_to(d, H, W)
        warped, valids = [], []
        for img_s, pose, tf in zip(sources, poses, t_full):
            flow, _, valid = geo.synthesize_correspondence(D, K, pose, tf)
            warped.append(geo.warp(img_s, flow))
            valids.append(valid)
        term, _ = min_reprojection_with_automask(target, warped, sources,
                                                 weights.ssim_mix, valids)
        photo = term if photo is None else photo + term
        sd = edge_aware_smoothness(D, target)
        smooth_d = sd if smooth_d is None else smooth_d + sd
    n_scales = float(len(depth_pyramid))
    photo = photo * (1.0 / n_scales)
    smooth_d = smooth_d * (1.0 / n_scales)

    smooth_m = ad.constant(0.0, dtype=target.dtype)
    reg = ad.constant(0.0, dtype=target.dtype)
    D_fine = _upsample_to(depth_pyramid[-1], H, W)
    n_src = float(len(sources))
    for pose, tf in zip(poses, t_full):
        if tf is None:
            continue
        smooth_m = smooth_m + edge_aware_smoothness(tf, target) * (1.0 / n_src)
        if weights.regularizer == "none":
            continue
        if weights.regularizer == "outlier-aware":
            full, _, _ = geo.synthesize_correspondence(D_fine.detach(), K,
                                                       _detach_pose(pose), tf.detach())
            rig = geo.rigid_flow(D_fine.detach(), K, _detach_pose(pose))
            mask = geo.motion_mask(full, rig, weights.motion_mask_alpha)
        else:  # plain sparsity: no rigid-region gating
            mask = np.ones((B, 1, H, W), dtype=target.data.dtype)
        reg = reg + outlier_aware_reg(tf, mask) * (1.0 / n_src)

    terms = {"photometric": photo.item(), "smooth_depth": smooth_d.item(),
             "smooth_motion": smooth_m.item(), "motion_reg": reg.item()}
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingDiagnosticError(name)
    total = (photo * weights.w_photo + smooth_d * weights.w_smooth_depth
             + smooth_m * weights.w_smooth_motion + reg * weights.w_reg)
    return total, terms


def _detach_pose(pose):
    if isinstance(pose, geo.PoseSE3):
        return pose
    R, t = pose
    return (R.detach(), t.detach())
