"""Train a small configuration for a few epochs and watch the loss terms.

Run: python3 demos/04_training_loop.py   (about a minute on a laptop CPU)
"""

from rmdepth import scenes
from rmdepth import training as tr
from rmdepth.depthnet import DepthNetConfig
from rmdepth.motionnet import MotionNetConfig

run_cfg = tr.RunConfig(
    depth=DepthNetConfig(widths=(8, 12, 16, 24), rmu_counts=((4, 2), (3, 1), (2, 1))),
    motion=MotionNetConfig(widths=(6, 8, 12, 16), refine_width=8, pose_hidden=16),
    train=tr.TrainConfig(epochs=4, batch_size=2, lr_drop_epoch=3, seed=0))

print(tr.format_config(run_cfg))

data = scenes.generate_many(scenes.SceneConfig(height=32, width=64, seed=5), 10)
trainer = tr.Trainer(data[:8], run_cfg, val_samples=data[8:])
for _ in range(run_cfg.train.epochs):
    row = trainer.run_epoch()
    print(f"epoch {row['epoch']}: photometric {row['photometric']:.4f} "
          f"smooth_d {row['smooth_depth']:.4f} reg {row['motion_reg']:.4f} "
          f"val AbsRel {row['val_abs_rel']:.3f}")

trainer.save("/tmp/demo_checkpoint.rmck")
restored = tr.Trainer.from_checkpoint("/tmp/demo_checkpoint.rmck", data[:8])
print("checkpoint round trip: epoch", restored.epoch,
      "| params preserved:",
      all((restored.named[k].data == trainer.named[k].data).all()
          for k in trainer.named))
