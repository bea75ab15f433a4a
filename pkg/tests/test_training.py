import os

import numpy as np
import pytest

from rmdepth import autodiff as ad
from rmdepth import losses, scenes
from rmdepth import training as tr
from rmdepth.depthnet import DepthNetConfig
from rmdepth.motionnet import MotionNetConfig
from rmdepth.errors import (ConfigMismatchError, FormatError,
                            InvalidConfigError, TrainingDiagnosticError)


# -- Adam --------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    p = ad.parameter(np.array([1.0, -2.0, 3.0]))
    opt = tr.Adam([p], lr=0.1)
    before = p.data.copy()
    for _ in range(5):
        opt.step([np.zeros(3)])
    np.testing.assert_array_equal(p.data, before)
    assert opt.t == 5


def test_adam_constant_gradient_steady_state():
    # with a constant gradient, |update| approaches lr
    p = ad.parameter(np.array([0.0]))
    lr = 0.01
    opt = tr.Adam([p], lr=lr)
    g = np.array([3.7])
    prev = p.data.copy()
    for _ in range(200):
        prev = p.data.copy()
        opt.step([g])
    assert abs(abs(float(p.data[0] - prev[0])) - lr) < 0.01 * lr


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
    p = ad.parameter(np.array([0.5]), dtype=np.float64)
    opt = tr.Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
    x, m, v = 0.5, 0.0, 0.0
    for t in range(1, 101):
        g = rng.normal()
        opt.step([np.array([g])])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(float(p.data[0]) - x) < 1e-12


def test_adam_uses_stored_grads_by_default():
    p = ad.parameter(np.array([1.0]))
    (p * p).sum().backward()
    before = p.data.copy()
    tr.Adam([p], lr=0.1).step()
    assert p.data[0] != before[0]


# -- config parsing ----------------------------------------------------------


def test_config_round_trip():
    cfg = tr.RunConfig(
        depth=DepthNetConfig(widths=(4, 6, 8, 10), rmu_counts=((4, 1), (3, 1), (2, 1))),
        motion=MotionNetConfig(widths=(4, 6, 8, 10), refine_width=6, pose_hidden=8),
        train=tr.TrainConfig(epochs=2, batch_size=2, lr_drop_epoch=1),
        loss=losses.LossWeights(regularizer="plain-sparsity"))
    assert tr.parse_config(tr.format_config(cfg)) == cfg


def test_config_partial_sections_use_defaults():
    cfg = tr.parse_config("[train]\nepochs = 30\nlr = 0.01\n")
    assert cfg.train.epochs == 30 and cfg.train.lr == 0.01
    assert cfg.depth == DepthNetConfig()


def test_config_unknown_section():
    with pytest.raises(InvalidConfigError):
        tr.parse_config("[optimizer]\nlr = 1\n")


def test_config_unknown_key():
    with pytest.raises(InvalidConfigError):
        tr.parse_config("[train]\nlearning_rate = 1e-4\n")


def test_config_bad_value():
    with pytest.raises(InvalidConfigError):
        tr.parse_config("[train]\nepochs = many\n")


def test_config_tuple_and_bool_values():
    cfg = tr.parse_config("[depth]\nwidths = 4, 6, 8, 10\n"
                          "rmu_counts = (4, 2), (3, 1), (2, 1)\n"
                          "[train]\nhflip = false\n[motion]\nwarping = no\n")
    assert cfg.depth.widths == (4, 6, 8, 10)
    assert cfg.depth.rmu_counts == ((4, 2), (3, 1), (2, 1))
    assert cfg.train.hflip is False and cfg.motion.warping is False


def test_config_invalid_values_hit_dataclass_validation():
    with pytest.raises(InvalidConfigError):
        tr.parse_config("[train]\nbatch_size = 0\n")


def test_config_file_not_found(tmp_path):
    with pytest.raises(InvalidConfigError):
        tr.load_config(str(tmp_path / "missing.cfg"))


# -- augmentation ------------------------------------------------------------


def _frames(B=2, H=32, W=64, seed=0):
    return np.random.default_rng(seed).random((B, 3, 3, H, W)).astype(np.float32)


def test_augment_deterministic():
    f = _frames()
    a = tr.augment_frames(f, np.random.default_rng(1))
    b = tr.augment_frames(f, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_augment_noop_when_disabled():
    f = _frames()
    out = tr.augment_frames(f, np.random.default_rng(2), hflip=False, jitter=False)
    np.testing.assert_array_equal(out, f)


def test_augment_hflip_is_pure_mirror():
    f = _frames(B=8)
    out = tr.augment_frames(f, np.random.default_rng(3), hflip=True, jitter=False)
    flipped = 0
    for b in range(8):
        if np.array_equal(out[b], f[b, :, :, :, ::-1]):
            flipped += 1
        else:
            np.testing.assert_array_equal(out[b], f[b])
    assert 0 < flipped < 8


def test_augment_jitter_stays_in_range():
    f = _frames()
    out = tr.augment_frames(f, np.random.default_rng(4), hflip=False, jitter=True)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, f)


# -- trainer -----------------------------------------------------------------


def _small_run_cfg(**train_kw):
    kw = dict(epochs=1, batch_size=2, lr_drop_epoch=1, seed=0)
    kw.update(train_kw)
    return tr.RunConfig(
        depth=DepthNetConfig(widths=(4, 6, 8, 10), rmu_counts=((4, 1), (3, 1), (2, 1))),
        motion=MotionNetConfig(widths=(4, 6, 8, 10), refine_width=6, pose_hidden=8),
        train=tr.TrainConfig(**kw),
        loss=losses.LossWeights())


def _small_dataset(n=4, seed=0):
    cfg = scenes.SceneConfig(height=32, width=64, n_boxes=1,
                             box_size_range=(0.4, 0.8), seed=seed)
    return scenes.generate_many(cfg, n)


def test_one_epoch_smoke():
    trainer = tr.train(_small_dataset(), _small_run_cfg())
    assert trainer.epoch == 1
    assert len(trainer.log) == 1
    row = trainer.log[0]
    assert np.isfinite(row["total"]) and np.isfinite(row["photometric"])


def test_zero_learning_rate_freezes_weights():
    ds = _small_dataset()
    cfg = _small_run_cfg(lr=0.0, lr_dropped=0.0)
    trainer = tr.Trainer(ds, cfg)
    before = {k: v.data.copy() for k, v in trainer.named.items()}
    trainer.run_epoch()
    for k, v in trainer.named.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_seeded_determinism():
    ds = _small_dataset()
    a = tr.train(ds, _small_run_cfg())
    b = tr.train(ds, _small_run_cfg())
    assert a.log == b.log
    for k in a.named:
        np.testing.assert_array_equal(a.named[k].data, b.named[k].data)


def test_gradient_reaches_every_parameter():
    trainer = tr.Trainer(_small_dataset(), _small_run_cfg())
    trainer.train_step(trainer.samples[:2])
    assert trainer.last_dead == []


def test_object_motion_off_leaves_refiners_dead():
    trainer = tr.Trainer(_small_dataset(), _small_run_cfg(object_motion=False))
    trainer.train_step(trainer.samples[:2])
    dead = set(trainer.last_dead)
    refine_params = {n for n in trainer.named if n.startswith("motion.refiners.")}
    assert refine_params <= dead
    # everything outside the object-motion subgraph still trains
    assert all(n.startswith("motion.refiners.") for n in dead)


def test_validation_metrics_logged():
    ds = _small_dataset(6)
    trainer = tr.Trainer(ds[:4], _small_run_cfg(), val_samples=ds[4:])
    row = trainer.run_epoch()
    assert np.isfinite(row["val_abs_rel"]) and np.isfinite(row["val_photometric"])


def test_lr_schedule_applied():
    cfg = _small_run_cfg(epochs=2, lr_drop_epoch=1, lr=1e-3, lr_dropped=1e-5)
    trainer = tr.Trainer(_small_dataset(2), cfg)
    trainer.run_epoch()
    assert trainer.log[0]["lr"] == 1e-3
    trainer.run_epoch()
    assert trainer.log[1]["lr"] == 1e-5


def test_nan_loss_aborts_with_term_and_checkpoint(tmp_path):
    ds = _small_dataset(2)
    trainer = tr.Trainer(ds, _small_run_cfg())
    next(iter(trainer.named.values())).data[...] = np.nan
    with pytest.raises(TrainingDiagnosticError):
        tr.resume_training(trainer, checkpoint_dir=str(tmp_path))
    assert os.path.exists(tmp_path / "last_good.rmck")


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_and_idempotence(tmp_path):
    trainer = tr.train(_small_dataset(2), _small_run_cfg())
    p1 = str(tmp_path / "a.rmck")
    p2 = str(tmp_path / "b.rmck")
    trainer.save(p1)
    ckpt = tr.load_checkpoint(p1)
    restored = tr.Trainer(trainer.samples, trainer.cfg)
    restored.restore(ckpt)
    restored.save(p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    trainer = tr.Trainer(_small_dataset(2), _small_run_cfg())
    path = str(tmp_path / "c.rmck")
    trainer.save(path)
    data = open(path, "rb").read()
    open(path, "wb").write(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        tr.load_checkpoint(path)
    open(path, "wb").write(data[:len(data) // 3])
    with pytest.raises(FormatError):
        tr.load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    ds = _small_dataset(2)
    trainer = tr.Trainer(ds, _small_run_cfg())
    path = str(tmp_path / "d.rmck")
    trainer.save(path)
    other = tr.Trainer(ds, _small_run_cfg(epochs=7))
    with pytest.raises(ConfigMismatchError):
        other.restore(tr.load_checkpoint(path))
    with pytest.raises(ConfigMismatchError):
        tr.Trainer.from_checkpoint(path, ds, expected=other.cfg)


def test_resume_equivalence(tmp_path):
    ds = _small_dataset(4)
    cfg = _small_run_cfg(epochs=3, lr_drop_epoch=2)
    straight = tr.train(ds, cfg)

    # run one epoch, checkpoint, and continue in a fresh trainer
    part = tr.Trainer(ds, cfg)
    part.run_epoch()
    path = str(tmp_path / "e1.rmck")
    part.save(path)
    resumed = tr.Trainer.from_checkpoint(path, ds)
    assert resumed.epoch == 1
    tr.resume_training(resumed)

    for k in straight.named:
        np.testing.assert_array_equal(straight.named[k].data, resumed.named[k].data)
    assert straight.log[1:] == resumed.log
