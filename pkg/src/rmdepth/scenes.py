"""Procedural 3-frame scenes with exact ground truth.

The world is a textured fronto-parallel background plane plus textured
fronto-parallel boxes at distinct depths, each translating with a constant
3D velocity.  Frames are rendered by analytic ray casting, so depth, camera
pose, per-pixel object motion, moving masks, and occlusion are all known in
closed form.  The central frame is the target view; the outer frames are
sources at time offsets -1 and +1.

Datasets round-trip losslessly through a documented little-endian binary
layout (magic "RMDS") plus a text `meta` file.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, rodrigues
from .errors import FormatError, InvalidConfigError

DATASET_MAGIC = b"RMDS"
DATASET_VERSION = 1
TEXTURE_KINDS = ("noise", "checker", "gradient")

# a surface strictly in front by this margin (source-camera depth units)
# occludes; exact-surface self hits tie within float error
_OCCLUSION_EPS = 1e-9


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 128
    texture: str = "noise"
    bg_depth_range: tuple = (8.0, 12.0)
    n_boxes: int = 2
    box_depth_range: tuple = (3.0, 6.0)
    box_size_range: tuple = (0.8, 1.6)       # world units (square boxes)
    box_speed_range: tuple = (0.02, 0.08)    # world units per frame, per axis
    cam_translation: float = 0.08            # max |t| component per source
    cam_rotation: float = 0.02               # max |axis-angle| component (rad)
    seed: int = 0

    def __post_init__(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise InvalidConfigError("image extents must be multiples of 32")
        if self.texture not in TEXTURE_KINDS:
            raise InvalidConfigError(f"texture must be one of {TEXTURE_KINDS}")
        for name in ("bg_depth_range", "box_depth_range", "box_size_range",
                     "box_speed_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise InvalidConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.box_depth_range[1] >= self.bg_depth_range[0]:
            raise InvalidConfigError("boxes must sit strictly in front of the background")
        if self.n_boxes < 0:
            raise InvalidConfigError("n_boxes must be >= 0")
        if self.cam_translation < 0 or self.cam_rotation < 0:
            raise InvalidConfigError("camera motion ranges must be >= 0")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.width / 2.0, self.width / 2.0,
                                (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class SceneSample:
    """One 3-frame sequence with full ground truth for the central frame.

    frames: (3, 3, H, W) float32 in [0, 1], quantized to the 8-bit grid.
    gt_depth: (H, W) float64 target depth.  gt_poses: 2 target-to-source
    poses (time offsets -1, +1).  gt_t_obj: (2, 3, H, W) per-source object
    translation field in the source frame (applied after the rigid
    rotation).  gt_box_translations: (2, n_boxes, 3) the same quantity per
    box.  gt_moving_mask: (H, W) 1 on pixels of moving boxes.  occlusion:
    (2, H, W) 1 where the target pixel is occluded or out of view in that
    source.
    """

    frames: np.ndarray
    gt_depth: np.ndarray
    gt_poses: list
    gt_t_obj: np.ndarray
    gt_box_translations: np.ndarray
    gt_moving_mask: np.ndarray
    occlusion: np.ndarray
    intrinsics: CameraIntrinsics

    @property
    def target(self) -> np.ndarray:
        return self.frames[1]

    @property
    def sources(self) -> list:
        return [self.frames[0], self.frames[2]]

    def equals(self, other: "SceneSample") -> bool:
        if not all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("frames", "gt_depth", "gt_t_obj",
                             "gt_box_translations", "gt_moving_mask", "occlusion")):
            return False
        if self.intrinsics != other.intrinsics:
            return False
        return all(np.array_equal(a.rotation, b.rotation)
                   and np.array_equal(a.translation, b.translation)
                   for a, b in zip(self.gt_poses, other.gt_poses))


# -- surfaces ----------------------------------------------------------------


@dataclass
class _Surface:
    """Fronto-parallel textured rectangle (the background has no bounds)."""

    sid: int
    depth: float                       # world z at time 0
    velocity: np.ndarray               # (3,) world units / frame
    bounds: tuple | None               # (x0, x1, y0, y1) world, time 0; None = plane
    texture: dict = field(default_factory=dict)

    def hit(self, qx, qy, dt):
        """Membership of world points (at time dt) in this surface."""
        if self.bounds is None:
            return np.ones_like(qx, dtype=bool)
        x0, x1, y0, y1 = self.bounds
        dx, dy = self.velocity[0] * dt, self.velocity[1] * dt
        return ((qx >= x0 + dx) & (qx <= x1 + dx)
                & (qy >= y0 + dy) & (qy <= y1 + dy))

    def depth_at(self, dt):
        return self.depth + self.velocity[2] * dt


def _make_texture(rng: np.random.Generator, kind: str, px_per_unit: float) -> dict:
    """Analytic texture parameters.  Frequencies are capped so the pattern
    period stays >= ~8 px when projected, keeping bilinear resampling faithful."""
    if kind == "noise":
        n = 4
        fmax = px_per_unit / 8.0
        return {"kind": kind,
                "freq": rng.uniform(-fmax, fmax, size=(3, n, 2)),
                "phase": rng.uniform(0, 2 * np.pi, size=(3, n)),
                "amp": rng.uniform(0.05, 0.45 / n, size=(3, n))}
    if kind == "checker":
        period = max(8.0 / px_per_unit, 1e-3)
        return {"kind": kind, "period": period,
                "lo": rng.uniform(0.1, 0.4, size=3),
                "hi": rng.uniform(0.6, 0.9, size=3)}
    # gradient
    g = rng.uniform(-1, 1, size=(3, 2))
    g *= px_per_unit / 16.0
    return {"kind": kind, "grad": g, "base": rng.uniform(0.3, 0.7, size=3)}


def _texture_color(tex: dict, x, y):
    """Color (3, ...) of a texture at material coordinates (x, y)."""
    if tex["kind"] == "noise":
        freq, phase, amp = tex["freq"], tex["phase"], tex["amp"]
        out = np.full((3,) + x.shape, 0.5)
        for c in range(3):
            for j in range(freq.shape[1]):
                arg = 2 * np.pi * (freq[c, j, 0] * x + freq[c, j, 1] * y)
                out[c] += amp[c, j] * np.sin(arg + phase[c, j])
        return np.clip(out, 0.0, 1.0)
    if tex["kind"] == "checker":
        p = tex["period"]
        cell = (np.floor(x / p) + np.floor(y / p)) % 2
        lo, hi = tex["lo"], tex["hi"]
        return lo[:, None] * (1 - cell)[None] + hi[:, None] * cell[None] \
            if x.ndim == 1 else \
            lo.reshape(3, 1, 1) * (1 - cell) + hi.reshape(3, 1, 1) * cell
    g, base = tex["grad"], tex["base"]
    shape = (3,) + (1,) * x.ndim
    out = base.reshape(shape) + g[:, 0].reshape(shape) * x + g[:, 1].reshape(shape) * y
    return np.clip(out, 0.0, 1.0)


# -- ray casting -------------------------------------------------------------


def _raycast(K: CameraIntrinsics, pose: PoseSE3, dt, surfaces, xs, ys):
    """Cast rays through continuous pixel coords (xs, ys) of the camera at
    ``pose`` (target-to-camera) and time offset dt.

    Returns (sid, lam, qx, qy): nearest surface id, camera depth of the hit,
    and world-plane coordinates of the hit point.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    d = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])
    Rd = np.tensordot(pose.rotation.T, d, axes=1)        # ray dirs, world frame
    Rt = pose.rotation.T @ pose.translation

    lam = np.full(xs.shape, np.inf)
    sid = np.full(xs.shape, -1, dtype=np.int32)
    qx = np.zeros_like(xs)
    qy = np.zeros_like(xs)
    for s in surfaces:
        denom = Rd[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            l = (s.depth_at(dt) + Rt[2]) / denom
        px = l * Rd[0] - Rt[0]
        py = l * Rd[1] - Rt[1]
        ok = (l > 0) & np.isfinite(l) & s.hit(px, py, dt) & (l < lam - _OCCLUSION_EPS)
        lam = np.where(ok, l, lam)
        sid = np.where(ok, s.sid, sid)
        qx = np.where(ok, px, qx)
        qy = np.where(ok, py, qy)
    return sid, lam, qx, qy


def _render(K: CameraIntrinsics, pose: PoseSE3, dt, surfaces, H: int, W: int):
    """Render one frame; returns (image (3,H,W), sid, lam, qx, qy)."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    sid, lam, qx, qy = _raycast(K, pose, dt, surfaces, xs, ys)
    img = np.zeros((3, H, W))
    for s in surfaces:
        m = sid == s.sid
        if not m.any():
            continue
        # textures ride with their surface
        tx = qx[m] - s.velocity[0] * dt
        ty = qy[m] - s.velocity[1] * dt
        img[:, m] = _texture_color(s.texture, tx, ty)
    return img, sid, lam, qx, qy


def _quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return (u8.astype(np.float32) / np.float32(255.0))


# -- generation --------------------------------------------------------------


def generate(cfg: SceneConfig) -> SceneSample:
    """Render one 3-frame sequence with exact ground truth."""
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    K = cfg.intrinsics()

    bg_depth = rng.uniform(*cfg.bg_depth_range)
    surfaces = [_Surface(0, bg_depth, np.zeros(3), None,
                         _make_texture(rng, cfg.texture, K.fx / bg_depth))]
    for b in range(cfg.n_boxes):
        z = rng.uniform(*cfg.box_depth_range)
        size = rng.uniform(*cfg.box_size_range)
        half_px_x = K.fx * size / 2.0 / z
        half_px_y = K.fy * size / 2.0 / z
        margin = 2.0
        if (half_px_x + margin >= W / 2.0) or (half_px_y + margin >= H / 2.0):
            raise InvalidConfigError("box projects larger than the image")
        u = rng.uniform(half_px_x + margin, W - 1 - half_px_x - margin)
        v = rng.uniform(half_px_y + margin, H - 1 - half_px_y - margin)
        cx_w = (u - K.cx) * z / K.fx
        cy_w = (v - K.cy) * z / K.fy
        speed = rng.uniform(*cfg.box_speed_range, size=3) * rng.choice([-1.0, 1.0], 3)
        speed[2] *= 0.25  # keep depth change gentle relative to lateral motion
        bounds = (cx_w - size / 2, cx_w + size / 2, cy_w - size / 2, cy_w + size / 2)
        surfaces.append(_Surface(b + 1, z, speed, bounds,
                                 _make_texture(rng, cfg.texture, K.fx / z)))

    poses, dts = [], (-1.0, 1.0)
    for _ in dts:
        aa = rng.uniform(-cfg.cam_rotation, cfg.cam_rotation, size=3)
        t = rng.uniform(-cfg.cam_translation, cfg.cam_translation, size=3)
        poses.append(PoseSE3(rodrigues(aa), t))

    target_img, sid_t, lam_t, qx_t, qy_t = _render(K, PoseSE3.identity(), 0.0,
                                                   surfaces, H, W)
    frames = np.empty((3, 3, H, W), dtype=np.float32)
    frames[1] = _quantize(target_img)

    t_obj = np.zeros((2, 3, H, W))
    box_tr = np.zeros((2, cfg.n_boxes, 3))
    occl = np.zeros((2, H, W), dtype=np.uint8)

    for i, (pose, dt) in enumerate(zip(poses, dts)):
        img, _, _, _, _ = _render(K, pose, dt, surfaces, H, W)
        frames[0 if dt < 0 else 2] = _quantize(img)

        for s in surfaces[1:]:
            tr = pose.rotation @ (s.velocity * dt)
            box_tr[i, s.sid - 1] = tr
            t_obj[i, :, sid_t == s.sid] = tr

        # exact correspondence of each target pixel into this source, then an
        # analytic re-cast at the continuous hit coordinates: a different
        # nearest surface there means the pixel is occluded
        v_pix = np.zeros((3, H, W))
        for s in surfaces:
            v_pix[:, sid_t == s.sid] = s.velocity[:, None]
        q = np.stack([qx_t, qy_t, lam_t]) + v_pix * dt
        p_s = np.tensordot(pose.rotation, q, axes=1) + pose.translation.reshape(3, 1, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = K.fx * p_s[0] / p_s[2] + K.cx
            ys = K.fy * p_s[1] / p_s[2] + K.cy
        out = (~np.isfinite(xs)) | (~np.isfinite(ys)) | (p_s[2] <= 0) \
            | (xs < 0) | (xs > W - 1) | (ys < 0) | (ys > H - 1)
        xs_c = np.where(out, 0.0, xs)
        ys_c = np.where(out, 0.0, ys)
        sid_s, lam_s, _, _ = _raycast(K, pose, dt, surfaces, xs_c, ys_c)
        hidden = (sid_s != sid_t) | (lam_s < p_s[2] - 1e-6)
        # a bilinear footprint that straddles a surface boundary blends two
        # textures; such pixels cannot be reconstructed exactly, so the
        # stored mask excludes them too
        x0, y0 = np.floor(xs_c), np.floor(ys_c)
        for cx_ in (x0, np.minimum(x0 + 1, W - 1)):
            for cy_ in (y0, np.minimum(y0 + 1, H - 1)):
                sid_c, _, _, _ = _raycast(K, pose, dt, surfaces, cx_, cy_)
                hidden |= sid_c != sid_t
        occl[i] = (out | hidden).astype(np.uint8)

    moving = np.zeros((H, W), dtype=np.uint8)
    for s in surfaces[1:]:
        if np.any(s.velocity != 0):
            moving[sid_t == s.sid] = 1

    return SceneSample(frames=frames, gt_depth=lam_t, gt_poses=poses,
                       gt_t_obj=t_obj, gt_box_translations=box_tr,
                       gt_moving_mask=moving, occlusion=occl, intrinsics=K)


def generate_many(cfg: SceneConfig, count: int) -> list:
    """Independent samples with seeds derived from the config seed."""
    if count < 1:
        raise InvalidConfigError("count must be >= 1")
    seeds = np.random.SeedSequence(cfg.seed).generate_state(count)
    return [generate(replace(cfg, seed=int(s))) for s in seeds]


# -- serialization -----------------------------------------------------------


def _write_array(fh, a: np.ndarray, dtype) -> None:
    fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read_array(fh, shape, dtype) -> np.ndarray:
    dt = np.dtype(dtype)
    n = int(np.prod(shape)) * dt.itemsize
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated sample file")
    return np.frombuffer(buf, dtype=dt).reshape(shape).copy()


def save_sample(sample: SceneSample, path: str) -> None:
    H, W = sample.gt_depth.shape
    n_boxes = sample.gt_box_translations.shape[1]
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", DATASET_VERSION, H, W, n_boxes))
        K = sample.intrinsics
        fh.write(struct.pack("<dddd", K.fx, K.fy, K.cx, K.cy))
        _write_array(fh, np.round(sample.frames * 255.0), "<u1")
        _write_array(fh, sample.gt_depth, "<f8")
        _write_array(fh, sample.gt_moving_mask, "<u1")
        _write_array(fh, sample.occlusion, "<u1")
        for pose in sample.gt_poses:
            _write_array(fh, pose.rotation, "<f8")
            _write_array(fh, pose.translation, "<f8")
        _write_array(fh, sample.gt_box_translations, "<f8")
        _write_array(fh, sample.gt_t_obj, "<f8")
    os.replace(tmp, path)


def load_sample(path: str) -> SceneSample:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}")
        head = fh.read(16)
        if len(head) != 16:
            raise FormatError("truncated sample header")
        version, H, W, n_boxes = struct.unpack("<IIII", head)
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported sample version {version}")
        fx, fy, cx, cy = struct.unpack("<dddd", fh.read(32))
        frames_u8 = _read_array(fh, (3, 3, H, W), "<u1")
        gt_depth = _read_array(fh, (H, W), "<f8")
        moving = _read_array(fh, (H, W), "<u1")
        occl = _read_array(fh, (2, H, W), "<u1")
        poses = []
        for _ in range(2):
            R = _read_array(fh, (3, 3), "<f8")
            t = _read_array(fh, (3,), "<f8")
            poses.append(PoseSE3(R, t))
        box_tr = _read_array(fh, (2, n_boxes, 3), "<f8")
        t_obj = _read_array(fh, (2, 3, H, W), "<f8")
    frames = frames_u8.astype(np.float32) / np.float32(255.0)
    return SceneSample(frames=frames, gt_depth=gt_depth, gt_poses=poses,
                       gt_t_obj=t_obj, gt_box_translations=box_tr,
                       gt_moving_mask=moving, occlusion=occl,
                       intrinsics=CameraIntrinsics(fx, fy, cx, cy))


def save_dataset(samples, directory: str) -> None:
    samples = list(samples)
    if not samples:
        raise InvalidConfigError("cannot save an empty dataset")
    os.makedirs(directory, exist_ok=True)
    H, W = samples[0].gt_depth.shape
    K = samples[0].intrinsics
    for i, s in enumerate(samples):
        save_sample(s, os.path.join(directory, f"sample_{i:05d}.rmds"))
    meta = (f"version={DATASET_VERSION}\ncount={len(samples)}\n"
            f"height={H}\nwidth={W}\n"
            f"fx={K.fx!r}\nfy={K.fy!r}\ncx={K.cx!r}\ncy={K.cy!r}\n")
    tmp = os.path.join(directory, "meta.tmp")
    with open(tmp, "w") as fh:
        fh.write(meta)
    os.replace(tmp, os.path.join(directory, "meta"))


def load_dataset(directory: str) -> list:
    meta_path = os.path.join(directory, "meta")
    if not os.path.exists(meta_path):
        raise FormatError(f"no meta file in {directory}")
    meta = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"malformed meta line: {line!r}")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    if int(meta.get("version", -1)) != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {meta.get('version')}")
    count = int(meta["count"])
    samples = []
    for i in range(count):
        path = os.path.join(directory, f"sample_{i:05d}.rmds")
        if not os.path.exists(path):
            raise FormatError(f"dataset lists {count} samples but {path} is missing")
        samples.append(load_sample(path))
    return samples
