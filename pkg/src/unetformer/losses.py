"""Training objective: cross-entropy plus soft dice, with an auxiliary term.

Pixels labeled with the ignore value take part in neither loss. The dice
term is the per-element soft form 1 - (2/N) * sum(p*y / (p + y + eps)),
which is 0 for a perfect one-hot prediction and 1 - 2/(K+1) for a uniform
one over K classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ConfigError, ShapeError
from .tensor import Tensor

IGNORE_LABEL = 255
AUX_WEIGHT = 0.4
DICE_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    """Objective knobs: auxiliary weight, dice smoothing, ignored label."""

    aux_weight: float = AUX_WEIGHT
    dice_eps: float = DICE_EPS
    ignore_label: int = IGNORE_LABEL

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.aux_weight:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if not 0.0 < self.dice_eps:
            raise ConfigError(f"dice_eps must be > 0, got {self.dice_eps}")
        if not 0 <= self.ignore_label <= 255:
            raise ConfigError(
                f"ignore_label must be in [0, 255], got {self.ignore_label}")
        return self


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components.

    By construction `principal == ce + dice` and
    `total == principal + aux_weight * aux` hold exactly.
    """

    total: float
    ce: float
    dice: float
    principal: float
    aux: float
    aux_weight: float
    valid_pixels: int


def _one_hot(target: np.ndarray, num_classes: int,
             ignore_label: int) -> tuple[np.ndarray, int]:
    """One-hot (B, K, H, W) float mask; ignored pixels are all-zero rows."""
    if target.ndim != 3:
        raise ShapeError(f"target must be (B, H, W), got {target.shape}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ShapeError(f"target must be integer-typed, got {target.dtype}")
    valid = target != ignore_label
    bad = valid & ((target < 0) | (target >= num_classes))
    if bad.any():
        raise ShapeError(
            f"target contains labels outside [0, {num_classes}) that are not "
            f"the ignore value {ignore_label}")
    b, h, w = target.shape
    onehot = np.zeros((b, num_classes, h, w), dtype=np.float32)
    bi, hi, wi = np.nonzero(valid)
    onehot[bi, target[bi, hi, wi], hi, wi] = 1.0
    return onehot, int(valid.sum())


def cross_entropy(logits: Tensor, target: np.ndarray,
                  ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (B, K, H, W), got {logits.shape}")
    onehot, n = _one_hot(target, logits.shape[1], ignore_label)
    if logits.shape[0] != onehot.shape[0] or logits.shape[2:] != onehot.shape[2:]:
        raise ShapeError(f"logits {logits.shape} do not match target {target.shape}")
    logp = tensor.log_softmax(logits, axis=1)
    picked = tensor.sum_(logp * Tensor(onehot))
    return picked * (-1.0 / max(n, 1))


def dice_loss(logits: Tensor, target: np.ndarray,
              ignore_label: int = IGNORE_LABEL, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss over softmax probabilities and one-hot targets."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (B, K, H, W), got {logits.shape}")
    onehot, n = _one_hot(target, logits.shape[1], ignore_label)
    if logits.shape[0] != onehot.shape[0] or logits.shape[2:] != onehot.shape[2:]:
        raise ShapeError(f"logits {logits.shape} do not match target {target.shape}")
    p = tensor.softmax(logits, axis=1)
    y = Tensor(onehot)
    overlap = tensor.sum_((p * y) / (p + y + eps))
    if n == 0:
        return overlap * 0.0
    return 1.0 - overlap * (2.0 / n)


def total_loss(logits: Tensor, aux_logits: Tensor | None,
               target: np.ndarray,
               cfg: LossConfig | None = None) -> tuple[Tensor, LossReport]:
    """Composite objective: (ce + dice) on the main logits, plus weighted
    cross-entropy on the auxiliary logits when given.

    Returns the differentiable total and a float report whose `principal`
    and `total` fields are reconstructed from the component floats, so the
    decomposition identities hold exactly on the report.
    """
    cfg = (cfg or LossConfig()).validate()
    ce = cross_entropy(logits, target, cfg.ignore_label)
    dice = dice_loss(logits, target, cfg.ignore_label, cfg.dice_eps)
    total = ce + dice
    aux_value = 0.0
    if aux_logits is not None:
        aux = cross_entropy(aux_logits, target, cfg.ignore_label)
        total = total + aux * cfg.aux_weight
        aux_value = aux.item()
    valid = int((np.asarray(target) != cfg.ignore_label).sum())
    ce_value, dice_value = ce.item(), dice.item()
    principal = ce_value + dice_value
    report = LossReport(total=principal + cfg.aux_weight * aux_value,
                        ce=ce_value, dice=dice_value, principal=principal,
                        aux=aux_value, aux_weight=cfg.aux_weight,
                        valid_pixels=valid)
    return total, report
