"""Focal, contiguity and total segmentation losses with analytic gradients.

All losses treat the float raster as pre-sigmoid scores and are pixel sums,
not means (per-pixel means are a reporting convenience, see the CLI). The
log-sigmoid identities ``log(sigmoid(x)) = -softplus(-x)`` and
``log(1 - sigmoid(x)) = -softplus(x)`` keep every evaluation finite at
extreme scores. Reductions use numpy's pairwise summation over the row-major
buffer, which is deterministic for a fixed shape, so repeated evaluations are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .raster import LOGIT, BinaryMask, FloatRaster

__all__ = [
    "LossConfig",
    "LossValue",
    "ContiguityGradient",
    "GradientCheckResult",
    "focal_loss",
    "focal_loss_grad",
    "contiguity_loss",
    "contiguity_loss_grad",
    "total_loss",
    "gradient_check",
]


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``alpha`` balances foreground against background terms, ``gamma`` is the
    confidence-penalty exponent and ``contiguity_weight`` scales the
    contiguity term inside the total loss.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    contiguity_weight: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.contiguity_weight < 0.0:
            raise ValueError(
                f"contiguity_weight must be >= 0, got {self.contiguity_weight}"
            )


@dataclass(frozen=True)
class LossValue:
    focal: float
    contiguity: float
    total: float


class ContiguityGradient(NamedTuple):
    """Gradient raster plus a flag for the non-differentiable point.

    ``degenerate`` is True when every neighboring sigmoid difference is zero;
    the square root is not differentiable there and ``grad`` is all zeros by
    convention.
    """

    grad: FloatRaster
    degenerate: bool


def _check_pair(gt: BinaryMask, logits: FloatRaster) -> None:
    if gt.shape != logits.shape:
        raise ValueError(
            f"shape mismatch: mask {gt.shape} vs scores {logits.shape}"
        )


def focal_loss(gt: BinaryMask, logits: FloatRaster, cfg: LossConfig) -> float:
    """Class-balanced confidence-weighted cross entropy, summed over pixels.

    Per pixel the term is ``alpha * (1-p)^gamma * log p`` on foreground and
    ``(1-alpha) * p^gamma * log(1-p)`` on background, with ``p`` the sigmoid
    of the score; the negated sum is returned.
    """
    _check_pair(gt, logits)
    x = logits.values
    s = gt.values
    p = expit(x)
    q = expit(-x)  # 1 - p without cancellation
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    fg = cfg.alpha * np.power(q, cfg.gamma) * log_p
    bg = (1.0 - cfg.alpha) * np.power(p, cfg.gamma) * log_q
    return float(-np.sum(np.where(s, fg, bg)))


def focal_loss_grad(gt: BinaryMask, logits: FloatRaster, cfg: LossConfig) -> FloatRaster:
    """Analytic d(focal)/d(score) per pixel.

    The loss is a per-pixel sum, so the gradient at (h, w) depends only on
    that pixel's label and score.
    """
    _check_pair(gt, logits)
    x = logits.values
    s = gt.values
    p = expit(x)
    q = expit(-x)
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    g = cfg.gamma
    fg = cfg.alpha * np.power(q, g) * (g * p * log_p - q)
    bg = (1.0 - cfg.alpha) * np.power(p, g) * (p - g * q * log_q)
    return FloatRaster(np.where(s, fg, bg), LOGIT)


def _sigmoid_diff_sum(p: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    dv = p[1:, :] - p[:-1, :]
    dh = p[:, 1:] - p[:, :-1]
    total = float(np.sum(dv * dv) + np.sum(dh * dh))
    return dv, dh, total


def contiguity_loss(logits: FloatRaster) -> float:
    """Boundary-smoothness penalty on the sigmoid of the scores.

    Square root of the summed squared vertical and horizontal sigmoid
    differences, divided by the pixel count (the root covers the whole sum,
    the 1/(H*W) factor stays outside it). Rasters with no neighbor pairs
    give 0.
    """
    p = expit(logits.values)
    _, _, total = _sigmoid_diff_sum(p)
    h, w = logits.shape
    return float(np.sqrt(total) / (h * w))


def contiguity_loss_grad(logits: FloatRaster) -> ContiguityGradient:
    """Analytic d(contiguity)/d(score) per pixel, chained through the root.

    At the all-equal-sigmoid point the root is not differentiable; a zero
    gradient raster is returned with ``degenerate=True``.
    """
    x = logits.values
    p = expit(x)
    dv, dh, total = _sigmoid_diff_sum(p)
    h, w = logits.shape
    if total == 0.0:
        return ContiguityGradient(FloatRaster(np.zeros_like(p), LOGIT), True)
    # d(total)/dp, accumulated from both pair sets.
    dtotal = np.zeros_like(p)
    dtotal[1:, :] += 2.0 * dv
    dtotal[:-1, :] -= 2.0 * dv
    dtotal[:, 1:] += 2.0 * dh
    dtotal[:, :-1] -= 2.0 * dh
    dsig = p * expit(-x)
    grad = dtotal * dsig / (2.0 * np.sqrt(total) * h * w)
    return ContiguityGradient(FloatRaster(grad, LOGIT), False)


def total_loss(gt: BinaryMask, logits: FloatRaster, cfg: LossConfig) -> LossValue:
    """Focal plus weighted contiguity loss."""
    focal = focal_loss(gt, logits, cfg)
    contiguity = contiguity_loss(logits)
    return LossValue(focal, contiguity, focal + cfg.contiguity_weight * contiguity)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientCheckResult:
    focal_max_rel_err: float
    contiguity_max_rel_err: float
    pixels_checked: int


def _perturbed(values: np.ndarray, h: int, w: int, delta: float) -> FloatRaster:
    bumped = values.copy()
    bumped[h, w] += delta
    return FloatRaster(bumped, LOGIT)


def gradient_check(
    gt: BinaryMask,
    logits: FloatRaster,
    cfg: LossConfig,
    *,
    step: float = 1e-5,
    max_pixels: int = 64,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> GradientCheckResult:
    """Compare analytic gradients against central finite differences.

    Checks every pixel when the raster has at most ``max_pixels`` pixels,
    otherwise a deterministic random sample of ``max_pixels`` pixels. The
    reported figure is ``|fd - analytic| / max(|analytic|, |fd|, rel_floor)``
    maximized over the checked pixels; the floor keeps the ratio meaningful
    where both values vanish.
    """
    _check_pair(gt, logits)
    h, w = logits.shape
    n = h * w
    if n <= max_pixels:
        flat = np.arange(n)
    else:
        flat = np.random.default_rng(seed).choice(n, size=max_pixels, replace=False)
        flat.sort()
    focal_grad = focal_loss_grad(gt, logits, cfg).values
    contig_grad = contiguity_loss_grad(logits).grad.values

    worst_f = 0.0
    worst_c = 0.0
    for idx in flat:
        ph, pw = divmod(int(idx), w)
        plus = _perturbed(logits.values, ph, pw, step)
        minus = _perturbed(logits.values, ph, pw, -step)
        fd_f = (focal_loss(gt, plus, cfg) - focal_loss(gt, minus, cfg)) / (2 * step)
        fd_c = (contiguity_loss(plus) - contiguity_loss(minus)) / (2 * step)
        an_f = focal_grad[ph, pw]
        an_c = contig_grad[ph, pw]
        worst_f = max(worst_f, abs(fd_f - an_f) / max(abs(an_f), abs(fd_f), rel_floor))
        worst_c = max(worst_c, abs(fd_c - an_c) / max(abs(an_c), abs(fd_c), rel_floor))
    return GradientCheckResult(worst_f, worst_c, len(flat))
