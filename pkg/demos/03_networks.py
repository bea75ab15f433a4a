"""Forward passes of the depth and motion networks on a synthetic scene.

Run: python3 demos/03_networks.py
"""

import numpy as np

from rmdepth import autodiff as ad
from rmdepth import scenes
from rmdepth.depthnet import DepthNet, DepthNetConfig, count_parameters
from rmdepth.motionnet import MotionNet, MotionNetConfig

sample = scenes.generate(scenes.SceneConfig(seed=2))

depth_cfg = DepthNetConfig()
depth_net = DepthNet(depth_cfg)
print(f"depth net: widths {depth_cfg.widths}, "
      f"{depth_net.count_parameters():,} parameters "
      f"(full-size shape would have {count_parameters(DepthNetConfig.paper_shape()):,})")

target = ad.constant(sample.frames[1][None])
pyramid = depth_net(target)
print("depth pyramid (coarse to fine):",
      [tuple(d.shape[2:]) for d in pyramid])
d_full = ad.bilinear_resize(pyramid[-1], 2)
print(f"depth range at init: [{d_full.data.min():.2f}, {d_full.data.max():.2f}] "
      f"(bounded to [{depth_cfg.d_min}, {depth_cfg.d_max}])")

motion_net = MotionNet(MotionNetConfig())
source = ad.constant(sample.frames[2][None])
est = motion_net(target, source, d_full, sample.intrinsics)
aa = est.axis_angle.data[0]
print(f"pose estimate: |axis-angle| {np.linalg.norm(aa):.4f} rad, "
      f"|t| {np.linalg.norm(est.translation.data[0]):.4f}")
print("object-motion pyramid:", [tuple(t.shape[2:]) for t in est.pyramid])
print("rotation orthonormality error:",
      np.abs(est.rotation.data[0].T @ est.rotation.data[0] - np.eye(3)).max())
