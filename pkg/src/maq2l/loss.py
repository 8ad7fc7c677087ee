"""Asymmetric multi-label loss with static and dynamic class reweighting.

Per label: p = sigmoid(z); the positive term is (1-p)^g+ * log(p), the
negative term shifts the probability by a margin before focusing,
p_m = max(p - margin, 0), giving p_m^g- * log(1 - p_m). With both gammas
zero and margin zero this is exactly binary cross-entropy; with equal
gammas and margin zero it is focal loss. Per-class multipliers raise the
loss share of bottleneck categories, either from a fixed set or from the
per-class AP gap refreshed during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .metrics import ClassTable

ALPHA_MODES = ("off", "static", "dynamic")


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    prob_margin: float = 0.05
    alpha_mode: str = "off"
    alpha_value: float = 2.0          # static multiplier for bottleneck classes
    alpha_top_m: int = 4              # dynamic: number of worst classes to boost
    alpha_clamp_min: float = 1.0      # dynamic: floor for every multiplier
    eps: float = 1e-8                 # log-argument clamp

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("focusing parameters must be >= 0")
        if not 0.0 <= self.prob_margin < 1.0:
            raise ConfigError(f"prob_margin must lie in [0,1), got {self.prob_margin}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}, got {self.alpha_mode!r}")
        if self.alpha_mode == "static" and self.alpha_value < 1.0:
            raise ConfigError("static alpha value must be >= 1")


@dataclass
class AlphaVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @classmethod
    def ones(cls, n: int) -> "AlphaVector":
        return cls(np.ones(n))


def asl_binary(logit: float, y: int, cfg: LossConfig) -> float:
    """Scalar asymmetric loss for one (logit, target) pair."""
    if y not in (0, 1):
        raise ConfigError(f"target must be binary, got {y}")
    if logit >= 0:
        p = 1.0 / (1.0 + math.exp(-logit))
    else:
        e = math.exp(logit)
        p = e / (1.0 + e)
    if y == 1:
        return -((1.0 - p) ** cfg.gamma_pos) * math.log(max(p, cfg.eps))
    pm = max(p - cfg.prob_margin, 0.0)
    return -(pm ** cfg.gamma_neg) * math.log(max(1.0 - pm, cfg.eps))


def total_loss(logits: T.Tensor, targets: T.Tensor, alpha: AlphaVector, cfg: LossConfig) -> T.Tensor:
    """Mean over the batch of the per-class-weighted loss sum. Differentiable."""
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} must be equal (B,N)")
    b, n = logits.shape
    if alpha.values.shape != (n,):
        raise ShapeError(f"alpha has {alpha.values.shape}, expected ({n},)")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ConfigError("targets must be binary")

    p = T.sigmoid(logits)
    pos = T.pow_const(1.0 - p, cfg.gamma_pos) * T.log(T.maximum_const(p, cfg.eps))
    pm = T.maximum_const(p - cfg.prob_margin, 0.0)
    neg = T.pow_const(pm, cfg.gamma_neg) * T.log(T.maximum_const(1.0 - pm, cfg.eps))
    per_label = -(targets * pos + (1.0 - targets) * neg)
    weighted = per_label * T.tensor(alpha.values)
    return weighted.sum() * (1.0 / b)


def per_class_mean_loss(logits, targets, cfg: LossConfig) -> np.ndarray:
    """Batch-mean unweighted loss per class, for logging and linearity checks."""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets)
    out = np.zeros(logits.shape[1])
    for j in range(logits.shape[1]):
        out[j] = float(np.mean([asl_binary(z, int(y), cfg)
                                for z, y in zip(logits[:, j], targets[:, j])]))
    return out


def static_alpha(table: ClassTable, value: float) -> AlphaVector:
    """`value` on the table's bottleneck classes, 1 elsewhere."""
    idx = table.bottleneck_indices()
    if not idx:
        raise ConfigError("static alpha weighting needs a non-empty bottleneck set")
    if value < 1.0:
        raise ConfigError("static alpha value must be >= 1")
    values = np.ones(len(table))
    values[idx] = value
    return AlphaVector(values)


def dynamic_alpha(per_class_ap, top_m: int, clamp_min: float = 1.0) -> AlphaVector:
    """AP-gap weights: the top_m classes furthest below the mean AP get
    (mean - AP)/10, everything else 1, all floored at clamp_min.

    APs are on the percent scale. Ties in the gap ordering break by class
    index ascending so runs are reproducible.
    """
    ap = np.asarray(per_class_ap, dtype=float)
    n = ap.size
    if not 1 <= top_m <= n:
        raise ConfigError(f"top_m must lie in [1, {n}], got {top_m}")
    if np.any(ap < 0) or np.any(ap > 100):
        raise ConfigError("per-class AP values must be on the percent scale [0, 100]")
    gap = ap.mean() - ap
    order = sorted(range(n), key=lambda i: (-gap[i], i))
    values = np.ones(n)
    for i in order[:top_m]:
        values[i] = gap[i] / 10.0
    return AlphaVector(np.maximum(values, clamp_min))


def alpha_for_epoch(table: ClassTable, cfg: LossConfig, val_ap=None) -> AlphaVector:
    """Resolve the multiplier vector for the coming epoch.

    Dynamic mode needs validation APs (percent); classes whose AP is
    undefined (no positives) are treated as sitting at the mean, which
    leaves them unweighted.
    """
    n = len(table)
    if cfg.alpha_mode == "off":
        return AlphaVector.ones(n)
    if cfg.alpha_mode == "static":
        return static_alpha(table, cfg.alpha_value)
    if val_ap is None:
        return AlphaVector.ones(n)
    present = [a for a in val_ap if a is not None]
    fill = float(np.mean(present)) if present else 0.0
    ap = np.array([fill if a is None else a for a in val_ap]) * 100.0
    return dynamic_alpha(ap, cfg.alpha_top_m, cfg.alpha_clamp_min)
