"""Localization and classification metrics, FG/BG separability, paired t-tests."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, UndefinedMetricError

# ------------------------------------------------------------------ PxAP


def _pool(score_maps, masks):
    if len(score_maps) != len(masks):
        raise DimensionError(f"{len(score_maps)} score maps but {len(masks)} masks")
    scores, labels = [], []
    for s, m in zip(score_maps, masks):
        s = np.asarray(s, dtype=np.float64)
        m = np.asarray(m)
        if s.shape != m.shape:
            raise DimensionError(f"score map {s.shape} and mask {m.shape} differ")
        scores.append(s.ravel())
        labels.append(m.ravel() > 0.5)
    return np.concatenate(scores), np.concatenate(labels)


def average_precision(scores, labels) -> float:
    """Ranked AP with tied scores grouped into a single operating point.

    Every positive in a tie group receives the precision measured at the end
    of its group, so the value equals a sweep over every distinct score used
    as a ``>=`` threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("average precision is undefined without positive pixels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    cum_tp = np.cumsum(y)[ends]
    cum_n = ends + 1
    group_tp = np.diff(np.r_[0, cum_tp])
    return float(np.sum(group_tp * (cum_tp / cum_n)) / positives)


def pxap(score_maps, masks) -> float:
    """Pixel-wise average precision with all pixels of all images pooled."""
    return average_precision(*_pool(score_maps, masks))


def per_image_ap(score_maps, masks) -> list:
    """AP per image, ``None`` for images whose mask is empty."""
    out = []
    for s, m in zip(score_maps, masks):
        m = np.asarray(m) > 0.5
        out.append(average_precision(s, m) if m.any() else None)
    return out


# --------------------------------------------------------- classification


def predict_labels(probs) -> np.ndarray:
    """Arg-max class per row; ties go to the lower index."""
    return np.argmax(np.atleast_2d(probs), axis=1)


def cl_accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise DimensionError(f"{pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise UndefinedMetricError("accuracy of an empty list")
    return float(np.mean(pred == true))


class ConfusionRates(NamedTuple):
    pxtp: float | None
    pxfn: float | None
    pxtn: float | None
    pxfp: float | None


def confusion_rates(score_maps, masks, threshold: float = 0.5) -> ConfusionRates:
    """Pooled pixel TP/FN/TN/FP rates of ``score >= threshold``, normalized per GT class."""
    scores, labels = _pool(score_maps, masks)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    pxtp = pxfn = pxtn = pxfp = None
    if tp + fn:
        pxtp = tp / (tp + fn)
        pxfn = fn / (tp + fn)
    if tn + fp:
        pxtn = tn / (tn + fp)
        pxfp = fp / (tn + fp)
    return ConfusionRates(pxtp, pxfn, pxtn, pxfp)


def balanced_threshold(score_maps, masks, levels: int = 256) -> float:
    """Threshold on a uniform [0, 1] grid maximizing (PxTP + PxTN) / 2; ties -> lowest."""
    scores, labels = _pool(score_maps, masks)
    best_t, best = 0.0, -1.0
    for t in np.linspace(0.0, 1.0, levels):
        pred = scores >= t
        tpr = np.mean(pred[labels]) if labels.any() else 0.0
        tnr = np.mean(~pred[~labels]) if (~labels).any() else 0.0
        if (tpr + tnr) / 2 > best:
            best, best_t = (tpr + tnr) / 2, float(t)
    return best_t


# ------------------------------------------------------------ separability


def separability_index(features, mask) -> float:
    """FG/BG class separability ``J = tr(S_B) / tr(S_W)`` of pixel features.

    ``features`` is ``H x W x d``, ``mask`` the binary ``H x W`` ground truth.
    Traces are computed as sums of squared deviations, without forming the
    ``d x d`` scatter matrices. Returns ``nan`` when the mask holds a single
    class and ``inf`` when all points sit on their class means while the
    means differ.
    """
    f = np.asarray(features, dtype=np.float64)
    x = f.reshape(-1, f.shape[-1])
    lab = np.asarray(mask).ravel() > 0.5
    if lab.size != len(x):
        raise DimensionError(f"mask has {lab.size} pixels, features {len(x)}")
    if lab.all() or not lab.any():
        return float("nan")
    m = x.mean(axis=0)
    tr_w = tr_b = 0.0
    for sel in (lab, ~lab):
        xi = x[sel]
        mi = xi.mean(axis=0)
        tr_w += float(np.sum((xi - mi) ** 2))
        tr_b += len(xi) * float(np.sum((mi - m) ** 2))
    if tr_w == 0.0:
        return float("inf") if tr_b > 0.0 else 0.0
    return tr_b / tr_w


def j_histogram(values, bins: int = 20):
    """Fixed-width histogram over ``[0, max]`` of the finite values.

    Returns ``(edges, counts)``; empty input gives two empty arrays.
    """
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    hi = float(v.max())
    if hi <= 0.0:
        hi = 1.0
    counts, edges = np.histogram(v, bins=bins, range=(0.0, hi))
    return edges, counts


def histogram_csv(edges, counts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()


# ----------------------------------------------------------------- t-test


def _betacf(a, b, x, max_iter=300, eps=1e-15):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    # near t = 0 the complement argument keeps full precision
    if t2 < dof:
        return 1.0 - betainc(0.5, dof / 2.0, t2 / (dof + t2))
    return betainc(dof / 2.0, 0.5, dof / (dof + t2))


def student_t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * student_t_sf2(t, dof)
    return 1.0 - tail if t >= 0 else tail


class TTest(NamedTuple):
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_t_test(a, b) -> TTest:
    """Two-sided paired t-test on ``d = b - a`` with ``m - 1`` degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    m = len(a)
    if m < 2:
        raise UndefinedMetricError("paired t-test needs at least 2 pairs")
    d = b - a
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTest(0.0, 1.0, m - 1)
        return TTest(math.copysign(math.inf, mean), 0.0, m - 1, True)
    t = mean / (sd / math.sqrt(m))
    return TTest(t, student_t_sf2(t, m - 1), m - 1)


# ----------------------------------------------------------------- report


@dataclass
class MetricsReport:
    pxap: float | None = None
    cl_acc: float | None = None
    pxtp: float | None = None
    pxfn: float | None = None
    pxtn: float | None = None
    pxfp: float | None = None
    threshold: float = 0.5
    per_image_ap: list = field(default_factory=list)
    per_image_J: list = field(default_factory=list)
    image_ids: list = field(default_factory=list)
    mean_J: float | None = None
    n_images: int = 0
    degenerate: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_image_J"] = [_json_float(v) for v in self.per_image_J]
        return d

    def summary_row(self) -> dict:
        return {
            "pxap": self.pxap,
            "cl_acc": self.cl_acc,
            "pxtp": self.pxtp,
            "pxfn": self.pxfn,
            "pxtn": self.pxtn,
            "pxfp": self.pxfp,
            "mean_J": self.mean_J,
            "n_images": self.n_images,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "ap", "J"])
        for i, image_id in enumerate(self.image_ids):
            ap = self.per_image_ap[i] if i < len(self.per_image_ap) else None
            j = self.per_image_J[i] if i < len(self.per_image_J) else None
            w.writerow([image_id, "" if ap is None else repr(ap), "" if j is None else repr(j)])
        return buf.getvalue()


def _json_float(v):
    if v is None:
        return None
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def mean_finite(values):
    v = [x for x in values if x is not None and math.isfinite(x)]
    return float(np.mean(v)) if v else None
