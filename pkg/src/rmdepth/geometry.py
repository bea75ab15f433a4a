"""Pinhole camera geometry: back-projection, view synthesis, flow and masks.

All heavy operations work on (B, C, H, W) tensors and are differentiable
w.r.t. depth, pose, and the object motion field.  Pixel coordinates are
continuous with integer pixel centers (x = column index, y = row index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError, InvalidDepthError, ShapeError

# guards perspective division for points crossing the camera plane
EPS_Z = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix())

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera at a rescaled image resolution."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                (self.cx + 0.5) * factor - 0.5,
                                (self.cy + 0.5) * factor - 0.5)

    def flipped_lr(self, width: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx, self.fy, width - 1 - self.cx, self.cy)


class PoseSE3:
    """Rigid transform from the target to a source camera: p_s = R p_t + t."""

    def __init__(self, rotation: np.ndarray, translation: np.ndarray):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if rotation.shape != (3, 3):
            raise ShapeError("rotation must be 3x3")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-6:
            raise InvalidArgumentError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise InvalidArgumentError("rotation determinant must be +1")
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation) -> "PoseSE3":
        return cls(rodrigues(np.asarray(axis_angle, dtype=np.float64)), translation)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (3,) to rotation matrix (numpy, non-differentiable path)."""
    theta = float(np.linalg.norm(axis_angle))
    if theta < 1e-12:
        return np.eye(3)
    k = axis_angle / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def axis_angle_to_matrix(aa: Tensor) -> Tensor:
    """Differentiable exponential map: (B, 3) axis-angle to (B, 3, 3) rotation.

    Uses sin(t)/t and 0.5*(sin(t/2)/(t/2))^2 coefficients, which are
    numerically stable through t -> 0, so no explicit small-angle branch is
    required.
    """
    if aa.ndim != 2 or aa.shape[1] != 3:
        raise ShapeError("axis_angle_to_matrix expects shape (B, 3)")
    a = aa[:, 0:1]
    b = aa[:, 1:2]
    c = aa[:, 2:3]
    tsq = ad.square(a) + ad.square(b) + ad.square(c) + 1e-24
    t = ad.sqrt(tsq)
    half = t * 0.5
    A = ad.sin(t) / t
    sh = ad.sin(half) / half
    B = ad.square(sh) * 0.5
    one = ad.constant(np.ones_like(a.data), dtype=aa.dtype)
    r00 = one - B * (ad.square(b) + ad.square(c))
    r11 = one - B * (ad.square(a) + ad.square(c))
    r22 = one - B * (ad.square(a) + ad.square(b))
    r01 = -A * c + B * a * b
    r10 = A * c + B * a * b
    r02 = A * b + B * a * c
    r20 = -A * b + B * a * c
    r12 = -A * a + B * b * c
    r21 = A * a + B * b * c
    rows = ad.concat_channels([r00, r01, r02, r10, r11, r12, r20, r21, r22])
    return rows.reshape(aa.shape[0], 3, 3)


def back_project(x, d, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) x with depth(s) d to 3D: p = d * K^-1 (x, 1)^T."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise InvalidDepthError("depth must be positive")
    px = (x[..., 0] - K.cx) / K.fx * d
    py = (x[..., 1] - K.cy) / K.fy * d
    return np.stack([px, py, d], axis=-1)


def project(p, K: CameraIntrinsics, pose: PoseSE3 | None = None) -> np.ndarray:
    """Perspective projection of 3D point(s) p, optionally after a rigid move."""
    p = np.asarray(p, dtype=np.float64)
    if pose is not None:
        p = p @ pose.rotation.T + pose.translation
    z = p[..., 2]
    return np.stack([K.fx * p[..., 0] / z + K.cx,
                     K.fy * p[..., 1] / z + K.cy], axis=-1)


def _as_pose_tensors(pose, batch: int, dtype):
    """Accept PoseSE3 or (rotation Tensor (B,3,3), translation Tensor (B,3))."""
    if isinstance(pose, PoseSE3):
        R = ad.constant(np.broadcast_to(pose.rotation, (batch, 3, 3)).copy(), dtype=dtype)
        t = ad.constant(np.broadcast_to(pose.translation, (batch, 3)).copy(), dtype=dtype)
        return R, t
    R, t = pose
    if R.shape != (batch, 3, 3) or t.shape != (batch, 3):
        raise ShapeError(f"pose tensors must be ({batch},3,3) and ({batch},3)")
    return R, t


def synthesize_correspondence(depth: Tensor, K: CameraIntrinsics, pose,
                              t_obj: Tensor | None = None, eps_z: float = EPS_Z):
    """Project every target pixel into the source view.

    depth: (B, 1, H, W) target depth; pose: PoseSE3 or (R, t) tensors;
    t_obj: optional (B, 3, H, W) per-pixel object translation, composed
    additively in the source frame after the rigid rotation.

    Returns (flow, source_depth, valid): flow (B, 2, H, W) = x_s - x_t,
    source_depth (B, 1, H, W) is the z-coordinate after the move, valid is a
    numpy bool mask (B, 1, H, W), false where that z <= eps_z.
    """
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError("depth must have shape (B, 1, H, W)")
    Bn, _, H, W = depth.shape
    if t_obj is not None and t_obj.shape != (Bn, 3, H, W):
        raise ShapeError(f"t_obj shape {t_obj.shape} incompatible with depth {depth.shape}")
    dt = depth.dtype
    R, t = _as_pose_tensors(pose, Bn, dt)
    xg = np.arange(W, dtype=dt)
    yg = np.arange(H, dtype=dt).reshape(-1, 1)
    X = depth * ad.constant((xg - K.cx) / K.fx, dtype=dt)
    Y = depth * ad.constant((yg - K.cy) / K.fy, dtype=dt)
    Z = depth

    def rot(i, j):
        return R[:, i, j].reshape(Bn, 1, 1, 1)

    def tr(i):
        return t[:, i].reshape(Bn, 1, 1, 1)

    px = rot(0, 0) * X + rot(0, 1) * Y + rot(0, 2) * Z + tr(0)
    py = rot(1, 0) * X + rot(1, 1) * Y + rot(1, 2) * Z + tr(1)
    pz = rot(2, 0) * X + rot(2, 1) * Y + rot(2, 2) * Z + tr(2)
    if t_obj is not None:
        px = px + t_obj[:, 0:1]
        py = py + t_obj[:, 1:2]
        pz = pz + t_obj[:, 2:3]
    valid = pz.data > eps_z
    zc = ad.maximum(pz, ad.constant(np.full((1, 1, 1, 1), eps_z), dtype=dt))
    xs = px / zc * K.fx + K.cx
    ys = py / zc * K.fy + K.cy
    u = xs - ad.constant(np.broadcast_to(xg, (1, 1, H, W)).copy(), dtype=dt)
    v = ys - ad.constant(np.broadcast_to(yg, (1, 1, H, W)).copy(), dtype=dt)
    flow = ad.concat_channels([u, v])
    return flow, pz, valid


def rigid_flow(depth: Tensor, K: CameraIntrinsics, pose) -> Tensor:
    """Flow induced by camera motion alone (t_obj identically zero)."""
    flow, _, _ = synthesize_correspondence(depth, K, pose, t_obj=None)
    return flow


def motion_mask(u_full, u_rig, alpha: float = 0.5) -> np.ndarray:
    """Binary rigid-region mask: 1 where ||u_full - u_rig||_2 < alpha (strict).

    Detached by construction: operates on raw values and returns numpy.
    """
    if alpha <= 0:
        raise InvalidArgumentError("alpha must be positive")
    uf = u_full.data if isinstance(u_full, Tensor) else np.asarray(u_full)
    ur = u_rig.data if isinstance(u_rig, Tensor) else np.asarray(u_rig)
    if uf.shape != ur.shape:
        raise ShapeError(f"flow shapes differ: {uf.shape} vs {ur.shape}")
    diff = uf - ur
    mag = np.sqrt((diff * diff).sum(axis=-3, keepdims=True))
    return (mag < alpha).astype(uf.dtype)


def warp(image: Tensor, flow: Tensor) -> Tensor:
    """Inverse-warp ``image`` by ``flow`` (delegates to grid_sample)."""
    return ad.grid_sample(image, flow)
