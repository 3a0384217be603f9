"""Batched inference and MetricsReport assembly for CAM baselines and PixelCAM models."""

from __future__ import annotations

import numpy as np

from . import metrics as M
from .model import ModelParams, classify_pixels, encode, image_logits, normalize_cam, raw_cam
from .synth import apply_stain
from .tensor import softmax

EVAL_CHUNK = 16


def predict(params: ModelParams, images, kind: str, labels=None, with_features=False):
    """Run the encoder once per chunk and return per-image outputs.

    ``kind="pixelcam"`` scores pixels with the foreground map ``S[..., 1]``;
    ``kind="cam"`` uses the min-max normalized CAM of the class in
    ``labels`` (the ground-truth class). Returns ``(probs, score_maps,
    features)`` where ``features`` is ``None`` unless requested.
    """
    if kind not in ("pixelcam", "cam"):
        raise ValueError(f"kind must be 'pixelcam' or 'cam', got {kind!r}")
    if kind == "cam" and labels is None:
        raise ValueError("CAM scoring needs the class of every image")
    probs, scores, feats = [], [], []
    for start in range(0, len(images), EVAL_CHUNK):
        x = np.stack(images[start:start + EVAL_CHUNK])
        f = encode(x, params)
        probs.append(softmax(image_logits(f, params)))
        for j in range(len(x)):
            if kind == "pixelcam":
                scores.append(classify_pixels(f[j], params)[..., 1])
            else:
                scores.append(normalize_cam(raw_cam(f[j], params, int(labels[start + j])))[0])
            if with_features:
                feats.append(f[j])
    return np.concatenate(probs), scores, (feats if with_features else None)


def evaluate(params: ModelParams, samples, kind: str, threshold: float = 0.5, stain=None, meta=None):
    """Full metrics report of a model on a list of samples (optionally stain-shifted)."""
    images = [s.image if stain is None else apply_stain(s.image, stain) for s in samples]
    masks = [s.mask for s in samples]
    labels = np.array([s.label for s in samples])
    probs, scores, feats = predict(params, images, kind, labels, with_features=True)

    report = M.MetricsReport(threshold=float(threshold), n_images=len(samples), meta=dict(meta or {}))
    report.image_ids = [s.id for s in samples]
    report.cl_acc = M.cl_accuracy(M.predict_labels(probs), labels)
    if any(m.any() for m in masks):
        report.pxap = M.pxap(scores, masks)
    rates = M.confusion_rates(scores, masks, threshold)
    report.pxtp, report.pxfn, report.pxtn, report.pxfp = rates
    report.per_image_ap = M.per_image_ap(scores, masks)
    report.per_image_J = [M.separability_index(f, m) for f, m in zip(feats, masks)]
    report.mean_J = M.mean_finite(report.per_image_J)
    report.degenerate = {
        "empty_mask_images": sum(1 for ap in report.per_image_ap if ap is None),
        "undefined_J": sum(1 for j in report.per_image_J if np.isnan(j)),
        "infinite_J": sum(1 for j in report.per_image_J if np.isinf(j)),
    }
    return report


def validation_scores(params: ModelParams, samples, kind: str):
    """``(accuracy on all samples, PxAP on the fully supervised subset)``."""
    images = [s.image for s in samples]
    labels = np.array([s.label for s in samples])
    probs, scores, _ = predict(params, images, kind, labels)
    acc = M.cl_accuracy(M.predict_labels(probs), labels)
    sup = [i for i, s in enumerate(samples) if s.supervised and s.mask.any()]
    ap = M.pxap([scores[i] for i in sup], [samples[i].mask for i in sup]) if sup else float("nan")
    return acc, ap


def cam_threshold(params: ModelParams, val_samples) -> float:
    """Balanced-rate threshold of the baseline CAM on the supervised validation images."""
    sup = [s for s in val_samples if s.supervised and s.mask.any()]
    if not sup:
        return 0.5
    _, scores, _ = predict(params, [s.image for s in sup], "cam", [s.label for s in sup])
    return M.balanced_threshold(scores, [s.mask for s in sup])
