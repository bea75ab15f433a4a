"""Joint camera-pose and object-motion network.

A shared encoder sees the target image concatenated with a warped source
image.  A pose decoder regresses an axis-angle + translation camera motion
from the first pass (object motion zero).  The per-pixel 3D object motion
field is then refined coarse to fine; at every level the source image is
re-warped with the latest (pose, motion) estimate so the encoder features
stay aligned to the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import InvalidConfigError, ShapeError
from .nn import Conv, Layer
from .depthnet import Encoder


@dataclass(frozen=True)
class MotionNetConfig:
    widths: tuple = (8, 16, 24, 32)     # shared encoder widths, level 1..top
    refine_levels: tuple = (4, 3, 2)    # coarse to fine object-motion levels
    refine_width: int = 16
    pose_hidden: int = 32
    pose_scale: float = 0.01            # keeps early pose estimates near identity
    warping: bool = True                # ablation: reuse pass-1 features when off
    seed: int = 0

    def __post_init__(self):
        if len(self.refine_levels) < 2:
            raise InvalidConfigError("need at least 2 refinement levels")
        lv = list(self.refine_levels)
        if lv != sorted(lv, reverse=True) or len(set(lv)) != len(lv):
            raise InvalidConfigError("refine_levels must be distinct, coarse first")
        for l in lv:
            if not 1 <= l <= len(self.widths):
                raise InvalidConfigError(f"refine level {l} outside encoder range")


class MotionEstimate:
    """Pose plus the coarse-to-fine motion pyramid for one source image."""

    def __init__(self, axis_angle: Tensor, rotation: Tensor, translation: Tensor,
                 pyramid: list[Tensor], level_flows: list[np.ndarray]):
        self.axis_angle = axis_angle
        self.rotation = rotation
        self.translation = translation
        self.pyramid = pyramid          # coarse to fine
        self.level_flows = level_flows  # warp-input flows per level (detached)

    @property
    def finest(self) -> Tensor:
        return self.pyramid[-1]

    def pose_numpy(self) -> geo.PoseSE3:
        return geo.PoseSE3(np.asarray(self.rotation.data[0], dtype=np.float64),
                           np.asarray(self.translation.data[0], dtype=np.float64))


class PoseDecoder(Layer):
    """Global pooling pose head: 6 numbers (axis-angle, translation)."""

    def __init__(self, rng: np.random.Generator, cin: int, hidden: int, scale: float):
        self.conv1 = Conv(rng, cin, hidden)
        self.conv2 = Conv(rng, hidden, hidden)
        self.conv3 = Conv(rng, hidden, 6, k=1)
        self.scale = scale

    def __call__(self, feat_top: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.elu(self.conv1(feat_top))
        x = ad.elu(self.conv2(x))
        x = self.conv3(x).mean(axis=(2, 3)) * self.scale  # (B, 6)
        return x[:, :3], x[:, 3:]


class MotionRefine(Layer):
    """Residual refinement: T_l = convs([up2(T), F_l]) + up2(T)."""

    def __init__(self, rng: np.random.Generator, feat_width: int, width: int):
        self.conv1 = Conv(rng, feat_width + 3, width)
        self.conv2 = Conv(rng, width, width)
        self.conv3 = Conv(rng, width, 3, gain=0.1)

    def __call__(self, t_prev: Tensor, feat: Tensor) -> Tensor:
        t_up = ad.bilinear_resize(t_prev, 2)
        if t_up.shape[2:] != feat.shape[2:]:
            raise ShapeError(f"upsampled motion {t_up.shape} does not match feature {feat.shape}")
        x = ad.concat_channels([t_up, feat])
        return self.conv3(ad.elu(self.conv2(ad.elu(self.conv1(x))))) + t_up


class MotionNet(Layer):
    def __init__(self, cfg: MotionNetConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg.widths, in_channels=6)
        self.pose_decoder = PoseDecoder(rng, cfg.widths[-1], cfg.pose_hidden,
                                        cfg.pose_scale)
        self.refiners = [MotionRefine(rng, cfg.widths[l - 1], cfg.refine_width)
                         for l in cfg.refine_levels]

    def __call__(self, image_t: Tensor, image_s: Tensor, depth_t: Tensor,
                 K: geo.CameraIntrinsics) -> MotionEstimate:
        """Estimate camera pose and object motion for one target/source pair.

        depth_t: (B, 1, H, W) full-resolution target depth (gradient-connected
        unless the caller detaches it).
        """
        if image_t.shape != image_s.shape:
            raise ShapeError(f"image shapes differ: {image_t.shape} vs {image_s.shape}")
        B, _, H, W = image_t.shape
        if depth_t.shape != (B, 1, H, W):
            raise ShapeError(f"depth shape {depth_t.shape} incompatible with images")
        cfg = self.cfg

        # pass 1: object motion zero and no camera estimate yet, so the warp
        # input flow is zero and the pair is (I_t, I_s)
        feats = self.encoder(ad.concat_channels([image_t, image_s]))
        aa, tr = self.pose_decoder(feats[-1])
        R = geo.axis_angle_to_matrix(aa)
        pose = (R, tr)

        coarsest = cfg.refine_levels[0]
        t_field = ad.constant(np.zeros((B, 3, H >> (coarsest + 1), W >> (coarsest + 1)),
                                       dtype=image_t.dtype))
        pyramid: list[Tensor] = []
        level_flows: list[np.ndarray] = []
        for l, refine in zip(cfg.refine_levels, self.refiners):
            t_full = _to_full_res(t_field, H, W)
            flow, _, _ = geo.synthesize_correspondence(depth_t, K, pose, t_full)
            level_flows.append(flow.data.copy())
            if cfg.warping:
                warped = geo.warp(image_s, flow)
                feats_l = self.encoder(ad.concat_channels([image_t, warped]))
            else:
                feats_l = feats
            t_field = refine(t_field, feats_l[l - 1])
            pyramid.append(t_field)
        return MotionEstimate(aa, R, tr, pyramid, level_flows)


def _to_full_res(t_field: Tensor, H: int, W: int) -> Tensor:
    factor = H // t_field.shape[2]
    if factor == 1:
        return t_field
    return ad.bilinear_resize(t_field, factor)
