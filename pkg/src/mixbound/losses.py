"""Segmentation-style losses over per-token machine probabilities.

``p`` is the machine probability per token, ``y`` the 0/1 gold label.  Region
losses (dice, Jaccard, Tversky) are macro-averaged over the machine class
``(p, y)`` and the human class ``(1 - p, 1 - y)`` using soft counts::

    I = sum(p * y),  P = sum(p),  G = sum(y)
    FP = sum(p * (1 - y)),  FN = sum((1 - p) * y)

Log-based terms clamp ``p`` to ``[1e-7, 1 - 1e-7]``; region terms use ``p``
as given.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLAMP = 1e-7

VARIANTS = ("bce", "dice", "bce_dice", "jaccard", "focal", "combo", "tversky", "bce_mae")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    variant: str = "bce"
    smooth: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    combo_alpha: float = 0.5
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    mae_weight: float = 1.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise LossConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.smooth <= 0:
            raise LossConfigError("smooth must be > 0")
        if self.focal_gamma < 0:
            raise LossConfigError("focal_gamma must be >= 0")
        for name in ("focal_alpha", "combo_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise LossConfigError(f"{name} must lie in [0, 1]")
        if self.tversky_alpha <= 0 or self.tversky_beta <= 0:
            raise LossConfigError("Tversky alpha and beta must be > 0")
        if self.mae_weight < 0:
            raise LossConfigError("mae_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _y(y) -> Tensor:
    return T.constant(np.asarray(y, dtype=np.float64).reshape(-1))


def _flat(p) -> Tensor:
    p = p if isinstance(p, Tensor) else T.constant(p)
    return p if p.ndim == 1 else T.reshape(p, (p.size,))


def bce(p, y) -> Tensor:
    p, y = _flat(p), _y(y)
    pc = T.clamp(p, CLAMP, 1.0 - CLAMP)
    ll = y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc)
    return -T.mean(ll)


def _class_counts(p: Tensor, y: Tensor):
    """Soft (I, P, G, FP, FN) for the machine class then the human class."""
    out = []
    for pc, yc in ((p, y), (1.0 - p, 1.0 - y)):
        inter = T.sum_(pc * yc)
        out.append((inter, T.sum_(pc), T.sum_(yc), T.sum_(pc * (1.0 - yc)), T.sum_((1.0 - pc) * yc)))
    return out


def dice_coefficients(p, y, smooth: float = 1.0) -> list[Tensor]:
    return [(2.0 * i + smooth) / (pp + g + smooth) for i, pp, g, _, _ in _class_counts(_flat(p), _y(y))]


def jaccard_indices(p, y, smooth: float = 1.0) -> list[Tensor]:
    return [(i + smooth) / (pp + g - i + smooth) for i, pp, g, _, _ in _class_counts(_flat(p), _y(y))]


def tversky_indices(p, y, alpha: float = 0.3, beta: float = 0.7, smooth: float = 1.0) -> list[Tensor]:
    return [
        (i + smooth) / (i + alpha * fp + beta * fn + smooth)
        for i, _, _, fp, fn in _class_counts(_flat(p), _y(y))
    ]


def _macro_loss(coefs: list[Tensor]) -> Tensor:
    return 1.0 - (coefs[0] + coefs[1]) * 0.5


def dice(p, y, smooth: float = 1.0) -> Tensor:
    return _macro_loss(dice_coefficients(p, y, smooth))


def jaccard(p, y, smooth: float = 1.0) -> Tensor:
    return _macro_loss(jaccard_indices(p, y, smooth))


def tversky(p, y, alpha: float = 0.3, beta: float = 0.7, smooth: float = 1.0) -> Tensor:
    return _macro_loss(tversky_indices(p, y, alpha, beta, smooth))


def bce_dice(p, y, smooth: float = 1.0) -> Tensor:
    return bce(p, y) + dice(p, y, smooth)


def combo(p, y, alpha: float = 0.5, smooth: float = 1.0) -> Tensor:
    return alpha * bce(p, y) + (1.0 - alpha) * dice(p, y, smooth)


def focal(p, y, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    p, yv = _flat(p), np.asarray(y, dtype=np.float64).reshape(-1)
    y = T.constant(yv)
    pc = T.clamp(p, CLAMP, 1.0 - CLAMP)
    pt = y * pc + (1.0 - y) * (1.0 - pc)
    at = T.constant(np.where(yv == 1, alpha, 1.0 - alpha))
    return -T.mean(at * T.pow_(1.0 - pt, gamma) * T.log(pt))


def soft_boundary(p) -> Tensor:
    """Soft count of human tokens, sum(1 - p)."""
    p = _flat(p)
    return T.sum_(1.0 - p)


def bce_mae(p, y, weight: float = 1.0) -> Tensor:
    """BCE plus weight * |soft human count - gold human count| / n."""
    p, yv = _flat(p), np.asarray(y, dtype=np.float64).reshape(-1)
    n = yv.size
    k = float(np.sum(1.0 - yv))
    return bce(p, yv) + (weight / n) * T.abs_(soft_boundary(p) - k)


def compute_loss(p, y, cfg: LossConfig) -> Tensor:
    v = cfg.variant
    if v == "bce":
        return bce(p, y)
    if v == "dice":
        return dice(p, y, cfg.smooth)
    if v == "bce_dice":
        return bce_dice(p, y, cfg.smooth)
    if v == "jaccard":
        return jaccard(p, y, cfg.smooth)
    if v == "focal":
        return focal(p, y, cfg.focal_gamma, cfg.focal_alpha)
    if v == "combo":
        return combo(p, y, cfg.combo_alpha, cfg.smooth)
    if v == "tversky":
        return tversky(p, y, cfg.tversky_alpha, cfg.tversky_beta, cfg.smooth)
    if v == "bce_mae":
        return bce_mae(p, y, cfg.mae_weight)
    raise LossConfigError(f"unknown loss variant {v!r}")


def machine_probability(logits: Tensor) -> Tensor:
    """Two-class softmax read as sigmoid(machine - human); returns shape (n,)."""
    z = T.slice_cols(logits, 1, 2) - T.slice_cols(logits, 0, 1)
    return T.reshape(T.sigmoid(z), (logits.shape[0],))


def masked(p: Tensor, y: np.ndarray, mask: np.ndarray | None):
    """Drop masked positions from both predictions and labels."""
    if mask is None:
        return p, np.asarray(y)
    keep = np.flatnonzero(np.asarray(mask, dtype=bool))
    if keep.size == p.size:
        return p, np.asarray(y)
    col = T.gather_rows(T.reshape(p, (p.size, 1)), keep)
    return T.reshape(col, (keep.size,)), np.asarray(y)[keep]
