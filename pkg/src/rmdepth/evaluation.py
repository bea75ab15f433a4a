"""Depth, motion-segmentation, and flow metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import EmptyEvaluationError, InvalidArgumentError

SCALING_MODES = ("median", "none")


@dataclass(frozen=True)
class EvalProtocol:
    cap: float = 80.0
    scaling: str = "median"

    def __post_init__(self):
        if self.cap <= 0:
            raise InvalidArgumentError("cap must be positive")
        if self.scaling not in SCALING_MODES:
            raise InvalidArgumentError(f"scaling must be one of {SCALING_MODES}")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float

    FIELDS = ("abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def depth_metrics(pred, gt, protocol: EvalProtocol = EvalProtocol(),
                  valid=None) -> DepthMetrics:
    """Standard monocular depth error/accuracy metrics.

    With median scaling, pred is first multiplied by median(gt)/median(pred);
    both maps are then clamped to (0, cap].
    """
    p = _np(pred).astype(np.float64).ravel()
    g = _np(gt).astype(np.float64).ravel()
    if p.shape != g.shape:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {g.shape}")
    keep = np.ones_like(g, dtype=bool) if valid is None \
        else np.asarray(valid, dtype=bool).ravel()
    keep = keep & (g > 0) & np.isfinite(p) & np.isfinite(g)
    if not keep.any():
        raise EmptyEvaluationError("no valid pixels to evaluate")
    p, g = p[keep], g[keep]
    if (p <= 0).any():
        raise InvalidArgumentError("predicted depth must be positive on valid pixels")
    if protocol.scaling == "median":
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, None, protocol.cap)
    g = np.clip(g, None, protocol.cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rms=float(np.sqrt(np.mean(diff ** 2))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


@dataclass(frozen=True)
class SegIoU:
    overall: float
    static: float
    moving: float


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = (a | b).sum()
    if union == 0:
        return 1.0  # both empty: perfect agreement by convention
    return float((a & b).sum() / union)


def seg_iou(pred_mask, gt_mask) -> SegIoU:
    """Intersection over union of binary moving-region masks; reported for
    the moving class, the static complement, and their mean."""
    a = _np(pred_mask).astype(bool)
    b = _np(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mask shapes differ: {a.shape} vs {b.shape}")
    moving = _iou(a, b)
    static = _iou(~a, ~b)
    return SegIoU(overall=0.5 * (moving + static), static=static, moving=moving)


def flow_aee(pred_flow, gt_flow, valid=None) -> float:
    """Average endpoint error: mean ||pred - gt||_2 over valid pixels.

    Flows are (..., 2, H, W); valid is a broadcastable boolean mask over the
    spatial extent.
    """
    p = _np(pred_flow).astype(np.float64)
    g = _np(gt_flow).astype(np.float64)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"flow shapes differ: {p.shape} vs {g.shape}")
    err = np.sqrt(((p - g) ** 2).sum(axis=-3))
    if valid is not None:
        keep = np.broadcast_to(np.asarray(valid, dtype=bool), err.shape)
        if not keep.any():
            raise EmptyEvaluationError("no valid pixels to evaluate")
        err = err[keep]
    if err.size == 0:
        raise EmptyEvaluationError("no valid pixels to evaluate")
    return float(err.mean())
