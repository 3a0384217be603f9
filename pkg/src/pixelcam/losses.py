"""Image cross-entropy, partial pixel cross-entropy and their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300


class CrossEntropy(NamedTuple):
    loss: float
    grad: np.ndarray  # w.r.t. the logits that produced the probabilities
    flagged: bool  # log clamp hit (image CE) or empty label set (pixel CE)


def image_ce(probs, y) -> CrossEntropy:
    """``-ln probs[y]`` for one image (``K``) or the batch mean (``N x K``).

    The gradient is w.r.t. the pre-softmax logits: ``probs - onehot(y)``,
    divided by ``N`` for a batch.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p2 = p[None] if single else p
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(len(p2))
    picked = p2[rows, y]
    clamped = bool(np.any(picked < LOG_FLOOR))
    if clamped:
        log.warning("image CE: probability below %g clamped", LOG_FLOOR)
    loss = float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))
    grad = p2.copy()
    grad[rows, y] -= 1.0
    grad /= len(p2)
    return CrossEntropy(loss, grad[0] if single else grad, clamped)


def partial_pixel_ce(S, labels) -> CrossEntropy:
    """Mean cross-entropy over the sampled FG and BG locations only.

    ``S`` is an ``H x W x 2`` (background, foreground) probability map and
    ``labels`` a :class:`~pixelcam.pseudo_labels.PixelPseudoLabels`. The
    gradient is w.r.t. the 2-way pixel logits and is zero at every
    location that was not sampled.
    """
    S = np.asarray(S, dtype=np.float64)
    fg = np.asarray(labels.fg, dtype=np.int64).reshape(-1, 2)
    bg = np.asarray(labels.bg, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(S)
    m = len(fg) + len(bg)
    if m == 0:
        return CrossEntropy(0.0, grad, True)
    rows = np.concatenate([fg[:, 0], bg[:, 0]])
    cols = np.concatenate([fg[:, 1], bg[:, 1]])
    target = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    picked = S[rows, cols, target]
    loss = float(np.sum(-np.log(np.maximum(picked, LOG_FLOOR))) / m)
    contrib = S[rows, cols].copy()
    contrib[np.arange(m), target] -= 1.0
    np.add.at(grad, (rows, cols), contrib / m)
    return CrossEntropy(loss, grad, False)


@dataclass(frozen=True)
class LossBreakdown:
    image_ce: float
    pixel_ce: float
    total: float
    lam: float


def total_loss(image_ce_value: float, pixel_ce_value: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return LossBreakdown(
        float(image_ce_value), float(pixel_ce_value), float(image_ce_value + lam * pixel_ce_value), float(lam)
    )
