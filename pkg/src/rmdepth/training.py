"""Joint optimization of the depth and motion networks.

Includes the Adam optimizer, the line-oriented run configuration format,
binary checkpoints ("RMCK"), and the training loop with ablation switches.
"""

from __future__ import annotations

import ast
import configparser
import json
import os
import struct
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .depthnet import DepthNet, DepthNetConfig
from .evaluation import EvalProtocol, depth_metrics
from .motionnet import MotionNet, MotionNetConfig
from .errors import (ConfigMismatchError, FormatError, InvalidConfigError,
                     TrainingDiagnosticError)

CHECKPOINT_MAGIC = b"RMCK"
CHECKPOINT_VERSION = 1


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in self.params]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    lr_drop_epoch: int = 10
    lr_dropped: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hflip: bool = True
    jitter: bool = True
    object_motion: bool = True
    checkpoint_every: int = 0          # epochs between checkpoints; 0 = final only
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise InvalidConfigError("lr_drop_epoch must lie within the run")
        if self.lr < 0 or self.lr_dropped < 0:
            raise InvalidConfigError("learning rates must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidConfigError("invalid Adam moments")
        if self.checkpoint_every < 0:
            raise InvalidConfigError("checkpoint_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr_dropped


@dataclass(frozen=True)
class RunConfig:
    depth: DepthNetConfig = field(default_factory=DepthNetConfig)
    motion: MotionNetConfig = field(default_factory=MotionNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: losses.LossWeights = field(default_factory=losses.LossWeights)

    def to_dict(self) -> dict:
        return {"depth": asdict(self.depth), "motion": asdict(self.motion),
                "train": asdict(self.train), "loss": asdict(self.loss)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(depth=_build_cfg(DepthNetConfig, d.get("depth", {})),
                   motion=_build_cfg(MotionNetConfig, d.get("motion", {})),
                   train=_build_cfg(TrainConfig, d.get("train", {})),
                   loss=_build_cfg(losses.LossWeights, d.get("loss", {})))


_SECTIONS = {"depth": DepthNetConfig, "motion": MotionNetConfig,
             "train": TrainConfig, "loss": losses.LossWeights}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build_cfg(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in values.items()})


def _parse_value(cls, key: str, raw: str):
    spec = {f.name: f for f in fields(cls)}.get(key)
    if spec is None:
        raise InvalidConfigError(f"unknown key '{key}' for section [{_section_of(cls)}]")
    default = getattr(cls(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _tuplify(list(ast.literal_eval(raw)))
        return raw
    except (ValueError, SyntaxError) as e:
        raise InvalidConfigError(f"cannot parse '{key} = {raw}': {e}") from e


def _section_of(cls):
    return next(k for k, v in _SECTIONS.items() if v is cls)


def parse_config(text: str) -> RunConfig:
    """Parse the line-oriented run configuration.

    Sections [depth], [motion], [train], [loss] with `key = value` entries;
    unknown sections or keys are errors.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise InvalidConfigError(f"malformed config: {e}") from e
    out = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise InvalidConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        out[section] = {k: _parse_value(cls, k, v) for k, v in cp.items(section)}
    return RunConfig.from_dict(out)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise InvalidConfigError(f"cannot read config {path}: {e}") from e


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section, sub in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in sub.items():
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# -- augmentation ------------------------------------------------------------


def augment_frames(frames: np.ndarray, rng: np.random.Generator,
                   hflip: bool = True, jitter: bool = True) -> np.ndarray:
    """Per-sequence augmentation of (B, 3, 3, H, W) frame stacks.

    A sequence is flipped/jittered as a unit so its geometry and photometry
    stay mutually consistent.  Centered principal points make a horizontal
    flip intrinsics-preserving.
    """
    out = frames.copy()
    for b in range(out.shape[0]):
        if hflip and rng.random() < 0.5:
            out[b] = out[b, :, :, :, ::-1]
        if jitter:
            contrast = rng.uniform(0.8, 1.2)
            brightness = rng.uniform(-0.1, 0.1)
            out[b] = np.clip((out[b] - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    return out


# -- checkpoints -------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<H", _must_read(fh, 2))
    return _must_read(fh, n).decode("utf-8")


def _must_read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint")
    return buf


def _write_tensor_table(fh, tensors: dict) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        fh.write(_pack_str(name))
        fh.write(_pack_str(a.dtype.newbyteorder("<").str))
        fh.write(struct.pack("<B", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_tensor_table(fh) -> dict:
    (count,) = struct.unpack("<I", _must_read(fh, 4))
    out = {}
    for _ in range(count):
        name = _unpack_str(fh)
        dtype = np.dtype(_unpack_str(fh))
        (ndim,) = struct.unpack("<B", _must_read(fh, 1))
        shape = struct.unpack(f"<{ndim}I", _must_read(fh, 4 * ndim)) if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        out[name] = np.frombuffer(_must_read(fh, n), dtype=dtype).reshape(shape).copy()
    return out


@dataclass
class CheckpointData:
    run_cfg: RunConfig
    tensors: dict
    adam_t: int
    epoch: int
    rng_state: dict


def save_checkpoint(path: str, run_cfg: RunConfig, named_tensors: dict,
                    adam_t: int, epoch: int, rng_state: dict) -> None:
    """Atomic write of the versioned binary container (magic "RMCK")."""
    tmp = path + ".tmp"
    cfg_blob = json.dumps(run_cfg.to_dict(), sort_keys=True).encode("utf-8")
    rng_blob = json.dumps(rng_state, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        _write_tensor_table(fh, named_tensors)
        fh.write(struct.pack("<II", adam_t, epoch))
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", _must_read(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _must_read(fh, 4))
        run_cfg = RunConfig.from_dict(json.loads(_must_read(fh, n).decode("utf-8")))
        tensors = _read_tensor_table(fh)
        adam_t, epoch = struct.unpack("<II", _must_read(fh, 8))
        (n,) = struct.unpack("<I", _must_read(fh, 4))
        rng_state = json.loads(_must_read(fh, n).decode("utf-8"))
    return CheckpointData(run_cfg, tensors, adam_t, epoch, rng_state)


def _canonical_rng_state(state: dict) -> dict:
    return json.loads(json.dumps(state, sort_keys=True, default=int))


def build_networks(run_cfg: RunConfig):
    """Fresh (depth_net, motion_net, named-parameter dict) for a run config."""
    depth_net = DepthNet(run_cfg.depth)
    motion_net = MotionNet(run_cfg.motion)
    named = {}
    named.update({"depth." + k: v for k, v in depth_net.named_parameters().items()})
    named.update({"motion." + k: v for k, v in motion_net.named_parameters().items()})
    return depth_net, motion_net, named


def load_weights(named: dict, tensors: dict) -> None:
    """Copy checkpoint tensors into live parameters, shape-checked by name."""
    for name, p in named.items():
        if name not in tensors:
            raise ConfigMismatchError(f"checkpoint is missing tensor '{name}'")
        a = tensors[name]
        if a.shape != p.data.shape:
            raise ConfigMismatchError(
                f"tensor '{name}' has shape {a.shape}, expected {p.data.shape}")
        p.data[...] = a.astype(p.data.dtype, copy=False)


def load_networks(path: str):
    """Build both networks from a checkpoint file and load their weights."""
    ckpt = load_checkpoint(path)
    depth_net, motion_net, named = build_networks(ckpt.run_cfg)
    load_weights(named, ckpt.tensors)
    return depth_net, motion_net, ckpt



# -- trainer -----------------------------------------------------------------


class Trainer:
    """Joint optimization of the depth and motion networks.

    Deterministic given (config, precision mode): data order, augmentation,
    and initialization all derive from the config seeds.
    """

    def __init__(self, samples, run_cfg: RunConfig, val_samples=None):
        self.samples = list(samples)
        if not self.samples:
            raise InvalidConfigError("dataset must be nonempty")
        self.val_samples = list(val_samples) if val_samples else []
        self.cfg = run_cfg
        self.depth_net, self.motion_net, self.named = build_networks(run_cfg)
        t = run_cfg.train
        self.optimizer = Adam(list(self.named.values()), lr=t.lr,
                              beta1=t.beta1, beta2=t.beta2, eps=t.eps)
        self.rng = np.random.default_rng(t.seed)
        self.epoch = 0
        self.log = []
        self.K = self.samples[0].intrinsics
        self.last_dead = []

    # -- forward/backward ----------------------------------------------------

    def _stack_frames(self, batch) -> np.ndarray:
        return np.stack([s.frames for s in batch]).astype(ad.default_dtype())

    def compute_loss(self, frames: np.ndarray):
        """Objective for a (B, 3, 3, H, W) frame stack; frame 1 is the target."""
        target = ad.constant(frames[:, 1])
        sources = [ad.constant(frames[:, 0]), ad.constant(frames[:, 2])]
        pyramid = self.depth_net(target)
        d_full = ad.bilinear_resize(pyramid[-1], 2)
        poses, t_objs = [], []
        for src in sources:
            est = self.motion_net(target, src, d_full, self.K)
            poses.append((est.rotation, est.translation))
            t_objs.append(est.finest if self.cfg.train.object_motion else None)
        return losses.total_loss(target, sources, pyramid, poses, t_objs,
                                 self.K, self.cfg.loss)

    def train_step(self, batch) -> dict:
        frames = augment_frames(self._stack_frames(batch), self.rng,
                                self.cfg.train.hflip, self.cfg.train.jitter)
        self.optimizer.zero_grad()
        total, terms = self.compute_loss(frames)
        total.backward()
        self.last_dead = [n for n, p in self.named.items()
                          if p.grad is None or not np.abs(p.grad).any()]
        self.optimizer.lr = self.cfg.train.lr_at(self.epoch)
        self.optimizer.step()
        terms["total"] = sum(v * w for v, w in
                             zip([terms["photometric"], terms["smooth_depth"],
                                  terms["smooth_motion"], terms["motion_reg"]],
                                 [self.cfg.loss.w_photo, self.cfg.loss.w_smooth_depth,
                                  self.cfg.loss.w_smooth_motion, self.cfg.loss.w_reg]))
        return terms

    def run_epoch(self) -> dict:
        order = self.rng.permutation(len(self.samples))
        bs = self.cfg.train.batch_size
        sums, count = {}, 0
        for start in range(0, len(order), bs):
            batch = [self.samples[i] for i in order[start:start + bs]]
            terms = self.train_step(batch)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row = {"epoch": self.epoch, "lr": self.cfg.train.lr_at(self.epoch)}
        row.update({k: v / count for k, v in sums.items()})
        if self.val_samples:
            row.update(self.validate())
        self.epoch += 1
        self.log.append(row)
        return row

    def predict_depth(self, image: np.ndarray) -> np.ndarray:
        """Full-resolution depth for one (3, H, W) image (no weight update)."""
        x = ad.constant(image[None].astype(ad.default_dtype()))
        d = ad.bilinear_resize(self.depth_net(x)[-1], 2)
        return np.asarray(d.data[0, 0], dtype=np.float64)

    def validate(self) -> dict:
        abs_rel, photo = [], []
        for s in self.val_samples:
            pred = self.predict_depth(s.frames[1])
            m = depth_metrics(pred, s.gt_depth, EvalProtocol())
            abs_rel.append(m.abs_rel)
            _, terms = self.compute_loss(self._stack_frames([s]))
            photo.append(terms["photometric"])
        return {"val_abs_rel": float(np.mean(abs_rel)),
                "val_photometric": float(np.mean(photo))}

    # -- persistence ---------------------------------------------------------

    def state_tensors(self) -> dict:
        out = {name: p.data for name, p in self.named.items()}
        for name, m, v in zip(self.named, self.optimizer.m, self.optimizer.v):
            out["opt.m." + name] = m
            out["opt.v." + name] = v
        return out

    def save(self, path: str) -> None:
        save_checkpoint(path, self.cfg, self.state_tensors(), self.optimizer.t,
                        self.epoch, _canonical_rng_state(self.rng.bit_generator.state))

    def restore(self, ckpt: CheckpointData) -> None:
        if ckpt.run_cfg != self.cfg:
            raise ConfigMismatchError("checkpoint config does not match this run")
        load_weights(self.named, ckpt.tensors)
        for i, name in enumerate(self.named):
            self.optimizer.m[i][...] = ckpt.tensors["opt.m." + name]
            self.optimizer.v[i][...] = ckpt.tensors["opt.v." + name]
        self.optimizer.t = ckpt.adam_t
        self.epoch = ckpt.epoch
        self.rng.bit_generator.state = ckpt.rng_state

    @classmethod
    def from_checkpoint(cls, path: str, samples, val_samples=None,
                        expected: RunConfig | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        if expected is not None and ckpt.run_cfg != expected:
            raise ConfigMismatchError("checkpoint config does not match the request")
        trainer = cls(samples, ckpt.run_cfg, val_samples)
        trainer.restore(ckpt)
        return trainer


def train(samples, run_cfg: RunConfig, val_samples=None,
          checkpoint_dir: str | None = None) -> Trainer:
    """Run the configured number of epochs; on a non-finite loss, save the
    last-good checkpoint (if a directory is given) and re-raise with the
    offending term named."""
    trainer = Trainer(samples, run_cfg, val_samples)
    resume_training(trainer, checkpoint_dir)
    return trainer


def resume_training(trainer: Trainer, checkpoint_dir: str | None = None) -> None:
    cfg = trainer.cfg.train
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    while trainer.epoch < cfg.epochs:
        try:
            trainer.run_epoch()
        except TrainingDiagnosticError:
            if checkpoint_dir:
                trainer.save(os.path.join(checkpoint_dir, "last_good.rmck"))
            raise
        if checkpoint_dir:
            every = cfg.checkpoint_every
            at_end = trainer.epoch == cfg.epochs
            if at_end or (every and trainer.epoch % every == 0):
                trainer.save(os.path.join(checkpoint_dir,
                                          f"epoch_{trainer.epoch:03d}.rmck"))
