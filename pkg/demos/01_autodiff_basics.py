"""Tour of the tensor engine: define-by-run graphs, backward, precision modes.

Run: python3 demos/01_autodiff_basics.py
"""

import numpy as np

from rmdepth import autodiff as ad

# Build a small expression.  Every op records its inputs; backward() walks the
# graph in reverse topological order and accumulates gradients.
x = ad.parameter(np.array([1.0, 2.0, 3.0]))
y = ad.sigmoid(x * 2.0 - 1.0).sum()
y.backward()
print("sigmoid chain value:", y.item())
print("analytic gradient:  ", x.grad)

# Compare against central finite differences in 64-bit mode.
with ad.precision(64):
    a = ad.parameter(np.random.default_rng(0).normal(size=(2, 3)))

    def f(v):
        a.data[...] = v
        return ad.square(ad.tanh(a)).sum().item()

    base = a.data.copy()
    ad.square(ad.tanh(a)).sum().backward()
    step = 1e-6
    num = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        hi = base.copy(); hi[i] += step
        lo = base.copy(); lo[i] -= step
        num[i] = (f(hi) - f(lo)) / (2 * step)
    a.data[...] = base
    print("max |analytic - numeric|:", np.abs(a.grad - num).max())

# Convolution and bilinear resampling are first-class differentiable ops.
img = ad.parameter(np.random.default_rng(1).random((1, 3, 8, 8)))
w = ad.parameter(np.random.default_rng(2).normal(size=(4, 3, 3, 3)) * 0.1)
b = ad.parameter(np.zeros(4))
feat = ad.elu(ad.conv2d(img, w, b, stride=2, pad=1))
up = ad.bilinear_resize(feat, 2)
print("conv pyramid:", img.shape, "->", feat.shape, "->", up.shape)
up.sum().backward()
print("image gradient shape:", img.grad.shape)
