"""Single-image depth network.

A compact convolutional encoder feeds a recurrent decoder.  At each decoder
level the encoder feature is fused into the hidden state by a recurrent
modulation unit (RMU): the encoder feature is affinely modulated conditioned
on the hidden state, then blended in through a learned element-wise gate.
The hidden state is carried to the next (finer) level by two-band residual
upsampling, and a bounded sigmoid head emits depth at every scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfigError, ShapeError
from .nn import Conv, ConvTranspose, Layer

FUSION_MODES = ("rmu", "static-concat", "rmu-no-modulation")
UPSAMPLE_MODES = ("residual", "conventional")


@dataclass(frozen=True)
class DepthNetConfig:
    widths: tuple = (16, 32, 64, 128)          # encoder widths, level 1..top
    rmu_counts: tuple = ((4, 9), (3, 2), (2, 2))  # (level, iterations), coarse first
    d_min: float = 0.1
    d_max: float = 100.0
    upsample_mode: str = "residual"
    fusion_mode: str = "rmu"
    seed: int = 0

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise InvalidConfigError("need 0 < d_min < d_max")
        if self.fusion_mode not in FUSION_MODES:
            raise InvalidConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise InvalidConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        levels = [l for l, _ in self.rmu_counts]
        if levels != sorted(levels, reverse=True) or len(set(levels)) != len(levels):
            raise InvalidConfigError("rmu_counts must list distinct levels, coarse first")
        for l, n in self.rmu_counts:
            if n < 1:
                raise InvalidConfigError("RMU count must be >= 1 for active levels")
            if not 2 <= l <= len(self.widths):
                raise InvalidConfigError(f"decoder level {l} outside encoder range")
        if levels and levels[0] != len(self.widths):
            raise InvalidConfigError("top decoder level must match the encoder top level")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @classmethod
    def paper_shape(cls) -> "DepthNetConfig":
        """Encoder widths mirroring the full-size model, for parameter counting."""
        return cls(widths=(64, 64, 128, 256))


class Encoder(Layer):
    """Strided conv pyramid; level l output has extents input / 2^l."""

    def __init__(self, rng: np.random.Generator, widths, in_channels: int = 3):
        self.convs_down = []
        self.convs_keep = []
        prev = in_channels
        for i, w in enumerate(widths):
            self.convs_down.append(Conv(rng, prev, w, stride=2))
            self.convs_keep.append(Conv(rng, w, w) if i > 0 else None)
            prev = w

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for down, keep in zip(self.convs_down, self.convs_keep):
            x = ad.elu(down(x))
            if keep is not None:
                x = ad.elu(keep(x))
            feats.append(x)
        return feats


class RMU(Layer):
    """Recurrent modulation unit: one set of weights, iterated in place.

    Modulation: (w, b) = conv_wb(conv_hid(h) + conv_feat(F)); the conv_feat
    term is independent of the iteration and can be cached per image.
    F' = tanh(conv_mod(w ⊙ F + b)); update: h' = (1-z) ⊙ h + z ⊙ F' with
    z = sigmoid(conv_gate([h, F'])).
    """

    def __init__(self, rng: np.random.Generator, width: int):
        self.conv_hid = Conv(rng, width, width)
        self.conv_feat = Conv(rng, width, width)
        self.conv_wb = Conv(rng, width, 2 * width)
        self.conv_mod = Conv(rng, width, width)
        self.conv_gate = Conv(rng, 2 * width, width)
        self.width = width

    def precompute(self, feat: Tensor) -> Tensor:
        return self.conv_feat(feat)

    def step(self, feat: Tensor, h: Tensor, cache: Tensor | None = None,
             modulate: bool = True) -> Tensor:
        if feat.shape[2:] != h.shape[2:]:
            raise ShapeError(f"feature {feat.shape} and hidden {h.shape} extents differ")
        if modulate:
            base = self.conv_hid(h) + (cache if cache is not None else self.conv_feat(feat))
            wb = self.conv_wb(base)
            w = wb[:, :self.width]
            b = wb[:, self.width:]
            fmod = ad.tanh(self.conv_mod(w * feat + b))
        else:
            fmod = ad.tanh(self.conv_mod(feat))
        z = ad.sigmoid(self.conv_gate(ad.concat_channels([h, fmod])))
        return (1.0 - z) * h + z * fmod


class StaticFusion(Layer):
    """Concat-then-convolve baseline fusion (fixed kernels, no recurrence)."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.conv = Conv(rng, 2 * width, width)

    def __call__(self, x: Tensor, feat: Tensor) -> Tensor:
        if x.shape[2:] != feat.shape[2:]:
            raise ShapeError(f"spatial mismatch: {x.shape} vs {feat.shape}")
        return ad.elu(self.conv(ad.concat_channels([x, feat])))


class HiddenInit(Layer):
    """h_0 = tanh(convs(F_top)); all values in (-1, 1)."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.conv1 = Conv(rng, width, width)
        self.conv2 = Conv(rng, width, width)

    def __call__(self, feat_top: Tensor) -> Tensor:
        return ad.tanh(self.conv2(ad.elu(self.conv1(feat_top))))


class ResidualUpsample(Layer):
    """Two-band x2 upsampling: bilinear low band + learned high band.

    residual mode:     x' = ELU( bilinear2(conv1x1(x)) + deconv2(x) )
    conventional mode: x' = ELU( deconv2(x) )   (single learned filter)
    """

    def __init__(self, rng: np.random.Generator, cin: int, cout: int,
                 mode: str = "residual"):
        if mode not in UPSAMPLE_MODES:
            raise InvalidConfigError(f"unknown upsample mode {mode}")
        self.mode = mode
        self.high = ConvTranspose(rng, cin, cout)
        self.proj = Conv(rng, cin, cout, k=1) if mode == "residual" else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.elu(self.linear_part(x))

    def linear_part(self, x: Tensor) -> Tensor:
        if self.mode == "residual":
            return ad.bilinear_resize(self.proj(x), 2) + self.high(x)
        return self.high(x)


class DepthHead(Layer):
    """Bounded depth: D = d_min (1 - s) + d_max s with s = sigmoid(convs(h))."""

    def __init__(self, rng: np.random.Generator, width: int, d_min: float, d_max: float):
        mid = max(width // 2, 4)
        self.conv1 = Conv(rng, width, mid)
        self.conv2 = Conv(rng, mid, 1)
        self.d_min = d_min
        self.d_max = d_max

    def __call__(self, h: Tensor) -> Tensor:
        s = ad.sigmoid(self.conv2(ad.elu(self.conv1(h))))
        return s * (self.d_max - self.d_min) + self.d_min


class DepthNet(Layer):
    def __init__(self, cfg: DepthNetConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg.widths)
        top_w = cfg.widths[-1]
        self.hidden_init = HiddenInit(rng, top_w)
        self.fusions = []
        self.heads = []
        self.upsamplers = []
        levels = [l for l, _ in cfg.rmu_counts]
        for l in levels:
            w = cfg.widths[l - 1]
            if cfg.fusion_mode == "static-concat":
                self.fusions.append(StaticFusion(rng, w))
            else:
                self.fusions.append(RMU(rng, w))
            self.heads.append(DepthHead(rng, w, cfg.d_min, cfg.d_max))
            w_next = cfg.widths[l - 2]  # level below; bottom upsampler targets level 1 width
            self.upsamplers.append(ResidualUpsample(rng, w, w_next, cfg.upsample_mode))
        self.final_head = DepthHead(rng, cfg.widths[levels[-1] - 2], cfg.d_min, cfg.d_max)
        self._levels = levels

    def __call__(self, image: Tensor) -> list[Tensor]:
        """Returns depth maps coarse to fine; finest is at input extents / 2."""
        if image.ndim != 4:
            raise ShapeError("image must be (B, C, H, W)")
        H, W = image.shape[2:]
        div = 1 << self.cfg.levels
        if H % div or W % div:
            raise ShapeError(f"extents {(H, W)} not divisible by 2^{self.cfg.levels}")
        feats = self.encoder(image)
        h = self.hidden_init(feats[-1])
        depths = []
        for l, fusion, head, up in zip(self._levels, self.fusions, self.heads,
                                       self.upsamplers):
            feat = feats[l - 1]
            if isinstance(fusion, RMU):
                count = dict(self.cfg.rmu_counts)[l]
                modulate = self.cfg.fusion_mode != "rmu-no-modulation"
                cache = fusion.precompute(feat) if modulate else None
                for _ in range(count):
                    h = fusion.step(feat, h, cache=cache, modulate=modulate)
            else:
                h = fusion(h, feat)
            depths.append(head(h))
            h = up(h)
        depths.append(self.final_head(h))
        return depths


def count_parameters(cfg: DepthNetConfig) -> int:
    return DepthNet(cfg).count_parameters()
