"""Minimal layer framework on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Layer:
    """Base class: collects trainable tensors by attribute walk (insertion order)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, v in vars(self).items():
            if isinstance(v, Tensor):
                if v.requires_grad:
                    out[prefix + k] = v
            elif isinstance(v, Layer):
                out.update(v.named_parameters(prefix + k + "."))
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Layer):
                        out.update(item.named_parameters(f"{prefix}{k}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def count_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


class Conv(Layer):
    """3x3 (or kxk) convolution with bias, He fan-in init."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3,
                 stride: int = 1, pad: int | None = None, gain: float = 1.0):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.w = ad.parameter(he_init(rng, (cout, cin, k, k), cin * k * k, gain))
        self.b = ad.parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose(Layer):
    """Learned x2 upsampling: transposed convolution, k=4, stride 2, pad 1."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, gain: float = 1.0):
        self.w = ad.parameter(he_init(rng, (cin, cout, 4, 4), cin * 16, gain))
        self.b = ad.parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d_transpose(x, self.w, self.b, stride=2, pad=1)
