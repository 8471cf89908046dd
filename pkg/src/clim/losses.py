"""Contrastive, supervised, mutual-information and domain objectives.

Every loss accepts plain arrays (returns a float) or a tape node (returns a
scalar node whose backward pass uses the fused kernel gradient).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import ContractError, DomainError, Node, add, scale, value_of


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    lambda_con: float = 1.0
    lambda_sent: float = 1.0
    mi_entropy_threshold: float = None
    n_classes: int = 2
    mi_gate: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.lambda_con < 0 or self.lambda_sent < 0:
            raise ContractError("loss weights must be non-negative")
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")
        if self.mi_entropy_threshold is None:
            object.__setattr__(self, "mi_entropy_threshold", 0.9 * math.log(self.n_classes))
        if not 0 < self.mi_entropy_threshold <= math.log(self.n_classes) + 1e-15:
            raise ContractError("mi_entropy_threshold must lie in (0, ln C]")


def _wrap(x, loss, grad):
    """Record a fused scalar loss on ``x``'s tape, or return the plain float."""
    if not isinstance(x, Node):
        return float(loss)
    return x.tape.record(np.float64(loss), (x,), lambda g: (g * grad,))


def info_nce(z, tau):
    zv = np.ascontiguousarray(value_of(z), dtype=np.float64)
    if zv.ndim != 2 or zv.shape[0] < 2 or zv.shape[0] % 2:
        raise ContractError(f"info_nce needs an even number (>= 2) of rows, got shape {zv.shape}")
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if np.any(np.einsum("ij,ij->i", zv, zv) == 0):
        raise DomainError("info_nce received a zero-norm row")
    loss, grad = _kernels.info_nce(zv, float(tau))
    return _wrap(z, loss, grad)


def _xent(logits, labels, n_classes=None):
    lv = np.ascontiguousarray(value_of(logits), dtype=np.float64)
    labels = np.asarray(labels)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ContractError("need one label per logits row")
    if lv.shape[0] == 0:
        raise ContractError("empty batch")
    c = lv.shape[1] if n_classes is None else n_classes
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must be integers in [0, {c})")
    loss, grad = _kernels.xent(lv, labels.astype(np.int64))
    return _wrap(logits, loss, grad)


def sentiment_ce(logits, labels):
    return _xent(logits, labels)


def domain_ce(domain_logits, domain_labels):
    return _xent(domain_logits, domain_labels, n_classes=2)


def _mi(probs, cfg):
    pv = np.ascontiguousarray(value_of(probs), dtype=np.float64)
    if pv.ndim != 2 or pv.shape[0] < 1:
        raise ContractError("mi_loss needs at least one probability row")
    if np.any(pv < 0) or np.any(np.abs(pv.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("rows must be non-negative and sum to 1")
    return _kernels.mi(pv, cfg.mi_entropy_threshold, cfg.mi_gate)


def mi_loss(probs, cfg):
    """Conditional entropy minus (gated) marginal entropy of a probability batch.

    The marginal is the batch mean of the rows. With ``cfg.mi_gate`` the
    marginal term contributes only while its entropy is below
    ``cfg.mi_entropy_threshold``; value and gradient switch together.
    """
    loss, grad, _, _ = _mi(probs, cfg)
    return _wrap(probs, loss, grad)


def mi_terms(probs, cfg):
    """``(loss, marginal_entropy, gate_active)`` without recording anything."""
    loss, _, h, active = _mi(probs, cfg)
    return float(loss), float(h), bool(active)


def total_loss(l_con, l_sent, l_mi, cfg):
    return add(add(scale(l_con, cfg.lambda_con), scale(l_sent, cfg.lambda_sent)), l_mi)
