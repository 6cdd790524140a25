"""Training loss and forecast-verification metrics.

The multi-sigmoid loss is a differentiable surrogate for threshold skill:
for each critical point c it penalizes the squared difference between
sigmoid-sharpened indicators sigma((I - c) * s) of target and forecast.
Thresholds live on the normalized [0, 1] intensity scale (dBZ / 70); a raw
dBZ scale can be requested by passing unnormalized critical points and data.

CSI follows the hits / (hits + misses + false alarms) convention after
binarizing at >= threshold; frames with an all-zero denominator are reported
as undefined and excluded from averages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

MAX_DBZ = 70.0
DEFAULT_CRITICAL_POINTS = (20.0 / 70.0, 30.0 / 70.0, 40.0 / 70.0)
DEFAULT_CSI_THRESHOLD = 20.0 / 70.0


@dataclass
class LossConfig:
    critical_points: tuple[float, ...] = DEFAULT_CRITICAL_POINTS
    scale: float = 15.0
    lambda_mse: float = 1.0
    # (s_start, s_end, iterations) or None for a fixed scale
    scale_schedule: tuple[float, float, int] | None = None

    def __post_init__(self):
        pts = tuple(float(c) for c in self.critical_points)
        if pts and not all(0.0 < a < 1.0 for a in pts):
            raise ValueError(f"critical points must lie strictly in (0,1): {pts}")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"critical points must be strictly increasing: {pts}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        self.critical_points = pts


@dataclass
class ConfusionCounts:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.hits + other.hits,
                               self.misses + other.misses,
                               self.false_alarms + other.false_alarms,
                               self.correct_negatives + other.correct_negatives)


def normalize(dbz):
    """Map reflectivity in dBZ [0, 70] to [0, 1]; out-of-range values clamp
    with a warning."""
    dbz = np.asarray(dbz, dtype=np.float64)
    if np.any(dbz < 0) or np.any(dbz > MAX_DBZ):
        warnings.warn("reflectivity outside [0, 70] dBZ clamped", stacklevel=2)
        dbz = np.clip(dbz, 0.0, MAX_DBZ)
    out = dbz / MAX_DBZ
    return float(out) if out.ndim == 0 else out


def denormalize(p):
    p = np.asarray(p, dtype=np.float64)
    out = p * MAX_DBZ
    return float(out) if out.ndim == 0 else out


def _sigmoid(x: Array) -> Array:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def single_sigmoid_loss(target: Array, pred: Array, c: float,
                        s: float) -> tuple[float, Array]:
    """Squared Frobenius distance between sharpened threshold indicators.

    Returns the scalar loss and its gradient with respect to ``pred``.
    """
    target = np.asarray(target)
    pred = np.asarray(pred)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {pred.shape}")
    st = _sigmoid((target - c) * s)
    sp = _sigmoid((pred - c) * s)
    diff = st - sp
    loss = float((diff * diff).sum())
    grad = (-2.0 * diff * sp * (1.0 - sp) * s).astype(pred.dtype, copy=False)
    return loss, grad


def multi_sigmoid_loss(target: Array, pred: Array, cfg: LossConfig,
                       s: float | None = None) -> tuple[float, Array]:
    """Sum of single sigmoid losses over all critical points, plus an optional
    ``lambda_mse * ||target - pred||_F^2`` term."""
    if not cfg.critical_points:
        raise ValueError("multi_sigmoid_loss requires at least one critical point")
    scale = cfg.scale if s is None else float(s)
    total = 0.0
    grad = np.zeros_like(np.asarray(pred))
    for c in cfg.critical_points:
        l, g = single_sigmoid_loss(target, pred, c, scale)
        total += l
        grad += g
    if cfg.lambda_mse > 0:
        diff = np.asarray(pred) - np.asarray(target)
        total += cfg.lambda_mse * float((diff * diff).sum())
        grad += 2.0 * cfg.lambda_mse * diff
    return total, grad


def confusion(pred: Array, gt: Array, threshold: float) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred >= threshold
    g = gt >= threshold
    return ConfusionCounts(
        hits=int(np.count_nonzero(p & g)),
        misses=int(np.count_nonzero(~p & g)),
        false_alarms=int(np.count_nonzero(p & ~g)),
        correct_negatives=int(np.count_nonzero(~p & ~g)),
    )


def csi(pred: Array, gt: Array,
        threshold: float = DEFAULT_CSI_THRESHOLD) -> tuple[float | None, ConfusionCounts]:
    """Critical success index; ``None`` marks the 0/0 degenerate case (nothing
    at or above threshold in either field), which callers exclude from means."""
    counts = confusion(pred, gt, threshold)
    denom = counts.hits + counts.misses + counts.false_alarms
    if denom == 0:
        return None, counts
    return counts.hits / denom, counts


def sequence_csi(pred_seq: Array, gt_seq: Array,
                 threshold: float = DEFAULT_CSI_THRESHOLD) -> tuple[float | None, int]:
    """Per-frame CSI averaged over a sequence, excluding undefined frames.

    Returns (mean CSI or None if every frame was undefined, undefined count).
    """
    pred_seq = np.asarray(pred_seq)
    gt_seq = np.asarray(gt_seq)
    if pred_seq.shape != gt_seq.shape:
        raise ValueError(f"shape mismatch: {pred_seq.shape} vs {gt_seq.shape}")
    values = []
    undefined = 0
    for p, g in zip(pred_seq, gt_seq):
        v, _ = csi(p, g, threshold)
        if v is None:
            undefined += 1
        else:
            values.append(v)
    return (float(np.mean(values)) if values else None), undefined


def frame_mse(pred_seq: Array, gt_seq: Array) -> float:
    """Mean over frames of the squared Frobenius distance, on normalized values."""
    pred_seq = np.asarray(pred_seq)
    gt_seq = np.asarray(gt_seq)
    if pred_seq.shape != gt_seq.shape:
        raise ValueError(f"length/shape mismatch: {pred_seq.shape} vs {gt_seq.shape}")
    n_frames = pred_seq.shape[0]
    diff = (pred_seq - gt_seq).reshape(n_frames, -1)
    return float((diff * diff).sum() / n_frames)
