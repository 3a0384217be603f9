"""Foreground/background pixel pseudo-labels harvested from a CAM.

Two samplers are provided:

* :func:`sample_pb` draws foreground pixels from a multinomial with the CAM
  as weights and background pixels with ``1 - CAM`` as weights.
* :func:`sample_th` thresholds the CAM with Otsu's method and draws
  uniformly inside / outside the resulting mask.

Both draw without replacement, keep the two sets disjoint, and never raise
on a flat CAM: they fall back to uniform weights and record a flag instead.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

SAMPLERS = ("PB", "TH")
N_BINS = 256


@dataclass
class PixelPseudoLabels:
    fg: np.ndarray  # m x 2 (row, col)
    bg: np.ndarray  # m x 2 (row, col)
    flags: set = field(default_factory=set)

    @property
    def n(self) -> int:
        return len(self.fg)

    def to_dict(self):
        return {
            "fg": self.fg.tolist(),
            "bg": self.bg.tolist(),
            "flags": sorted(self.flags),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def _cam_array(cam) -> np.ndarray:
    m = getattr(cam, "map", cam)
    return np.asarray(m, dtype=np.float64)


def _check_n(n, size):
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    if n > size // 2:
        raise ConfigurationError(f"n={n} exceeds half the number of pixels ({size})")


def weighted_draw(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw up to ``n`` flat indices without replacement, proportionally to ``weights``.

    Exact sequential scheme: after each pick the chosen weight is zeroed and
    the remainder renormalized. Stops early when the support is exhausted.
    """
    w = np.array(weights, dtype=np.float64).ravel()
    picks = []
    for _ in range(n):
        cum = np.cumsum(w)
        total = cum[-1]
        if not total > 0.0:
            break
        idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
        if idx >= w.size or w[idx] <= 0.0:
            # u rounded up to the total: take the last index with positive weight
            idx = int(np.flatnonzero(w > 0.0)[-1])
        picks.append(idx)
        w[idx] = 0.0
    return np.asarray(picks, dtype=np.int64)


def _to_rc(idx, shape):
    return np.stack(np.unravel_index(idx, shape), axis=1).astype(np.int64)


def _harvest(fg_w, bg_w, shape, n, rng, flags) -> PixelPseudoLabels:
    if not np.any(fg_w > 0.0):
        fg_w = np.ones(shape)
        flags.add("fg_uniform_fallback")
    fg_idx = weighted_draw(fg_w, n, rng)
    bg_w = np.array(bg_w, dtype=np.float64).ravel()
    if not np.any(bg_w > 0.0):
        bg_w = np.ones(bg_w.size)
        flags.add("bg_uniform_fallback")
    bg_w[fg_idx] = 0.0
    bg_idx = weighted_draw(bg_w, n, rng)
    m = min(len(fg_idx), len(bg_idx))
    if m < n:
        flags.add("clamped")
        fg_idx, bg_idx = fg_idx[:m], bg_idx[:m]
    if flags:
        log.debug("pseudo-label flags: %s", sorted(flags))
    return PixelPseudoLabels(_to_rc(fg_idx, shape), _to_rc(bg_idx, shape), flags)


def sample_pb(cam, n: int, rng: np.random.Generator) -> PixelPseudoLabels:
    """Probability-based harvest: FG ~ CAM, BG ~ 1 - CAM (excluding FG picks)."""
    c = _cam_array(cam)
    _check_n(n, c.size)
    return _harvest(c, 1.0 - c, c.shape, n, rng, set())


def otsu_threshold(cam) -> tuple:
    """Otsu threshold of a [0, 1] map on a 256-bin histogram.

    Returns ``(t, degenerate)``. Pixels with value ``>= t`` form the upper
    class. Between-class variance is compared in exact integer arithmetic so
    ties resolve to the lowest threshold. A map occupying a single bin is
    degenerate and yields ``(0.0, True)``.
    """
    c = np.clip(_cam_array(cam), 0.0, 1.0)
    bins = np.minimum((c * N_BINS).astype(np.int64), N_BINS - 1).ravel()
    counts = np.bincount(bins, minlength=N_BINS)
    if np.count_nonzero(counts) < 2:
        return 0.0, True
    total = int(counts.sum())
    moment = int((counts * np.arange(N_BINS)).sum())
    best, best_k = Fraction(-1), 0
    n0 = s0 = 0
    for k in range(1, N_BINS):
        n0 += int(counts[k - 1])
        s0 += (k - 1) * int(counts[k - 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        score = Fraction((total * s0 - n0 * moment) ** 2, n0 * n1)
        if score > best:
            best, best_k = score, k
    return best_k / N_BINS, False


def sample_th(cam, n: int, rng: np.random.Generator) -> PixelPseudoLabels:
    """Threshold-based harvest: uniform inside / outside the Otsu mask of the CAM."""
    c = _cam_array(cam)
    _check_n(n, c.size)
    flags = set()
    t, degenerate = otsu_threshold(c)
    if degenerate:
        flags.add("threshold_degenerate")
        return _harvest(c, 1.0 - c, c.shape, n, rng, flags)
    fg_w = (c >= t).astype(np.float64)
    bg_w = (c < t).astype(np.float64)
    if not fg_w.any():
        flags.add("fg_region_empty")
        fg_w = c
    if not bg_w.any():
        flags.add("bg_region_empty")
        bg_w = 1.0 - c
    return _harvest(fg_w, bg_w, c.shape, n, rng, flags)


def get_sampler(name: str):
    try:
        return {"PB": sample_pb, "TH": sample_th}[name.upper()]
    except KeyError:
        raise ConfigurationError(f"sampler must be one of {SAMPLERS}, got {name!r}") from None
