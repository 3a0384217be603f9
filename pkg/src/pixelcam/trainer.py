"""Two-stage training: CAM baseline (image CE only), then PixelCAM (image CE + pixel CE).

Randomness is split into independent streams derived from the run seed so
that turning the pixel branch on or off never perturbs the data order:

* data order and flips:   ``(seed, epoch, ORDER_TAG)``
* pseudo-label sampling:  ``(seed, epoch, image index, SAMPLE_TAG)``
* fresh pixel head init:  ``(seed, HEAD_TAG)``
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, TrainingError
from .evaluation import validation_scores
from .losses import image_ce, partial_pixel_ce, total_loss
from .model import (
    ModelConfig,
    ModelParams,
    baseline_cam,
    checkpoint_id,
    encode,
    encode_backward,
    encode_forward,
    init_params,
    init_pixel_head,
    input_statistics,
    normalize_cam,
    pixel_logits_backward,
    pixel_logits_forward,
    raw_cam,
    save_checkpoint,
)
from .pseudo_labels import get_sampler

log = logging.getLogger(__name__)

ORDER_TAG = 0x0D
SAMPLE_TAG = 0x5A
HEAD_TAG = 0x3E

LR_GRID = (1e-4, 1e-3, 1e-2)
DECAY_GRID = (0.1, 0.4, 0.9)
LAMBDA_GRID = (1.0, 0.5, 0.1, 0.01, 0.001)
NPIXELS_GRID = (1, 5, 10, 20)
CAM_SELECT = ("bloc", "bcl")


@dataclass
class TrainConfig:
    epochs: int = 24
    batch_size: int = 32
    lr: float = 0.01
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 1.0
    n_pixels: int = 5
    sampler: str = "PB"
    cam_select: str = "bloc"
    augment: bool = True
    seed: int = 0
    lr_grid: tuple = LR_GRID
    decay_grid: tuple = DECAY_GRID
    lambda_grid: tuple = LAMBDA_GRID
    npixels_grid: tuple = NPIXELS_GRID

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.n_pixels < 1:
            raise ConfigurationError(f"n_pixels must be >= 1, got {self.n_pixels}")
        get_sampler(self.sampler)
        if self.cam_select not in CAM_SELECT:
            raise ConfigurationError(f"cam_select must be one of {CAM_SELECT}, got {self.cam_select!r}")
        for name in ("lr_grid", "decay_grid", "lambda_grid", "npixels_grid"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} must not be empty")
        return self

    def lr_at(self, epoch: int) -> float:
        """Step decay by ``lr_decay`` once two thirds of the epochs have elapsed."""
        return self.lr * (self.lr_decay if epoch >= (2 * self.epochs) // 3 else 1.0)

    def to_dict(self):
        d = asdict(self)
        for k in ("lr_grid", "decay_grid", "lambda_grid", "npixels_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("lr_grid", "decay_grid", "lambda_grid", "npixels_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class SelectionRecord:
    val_acc: list = field(default_factory=list)
    val_pxap: list = field(default_factory=list)
    bloc_epoch: int = -1
    bcl_epoch: int = -1
    checkpoint_ids: dict = field(default_factory=dict)

    def update(self, epoch: int, acc: float, ap: float) -> tuple:
        """Record an epoch; returns ``(new_best_loc, new_best_cl)``. Ties keep the earlier epoch."""
        self.val_acc.append(float(acc))
        self.val_pxap.append(float(ap))
        best_loc = self.bloc_epoch < 0 or ap > self.val_pxap[self.bloc_epoch]
        best_cl = self.bcl_epoch < 0 or acc > self.val_acc[self.bcl_epoch]
        if best_loc:
            self.bloc_epoch = epoch
        if best_cl:
            self.bcl_epoch = epoch
        return best_loc, best_cl

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    checkpoints: dict  # "bloc" / "bcl" / "last" -> ModelParams
    selection: SelectionRecord
    log_rows: list


# ------------------------------------------------------------ single step


def forward_backward(params: ModelParams, x, y, pixel_labels=None, lam: float = 0.0):
    """Loss breakdown and gradients for one batch.

    ``pixel_labels`` is ``None`` for image-only training (Stage 1) or a list
    of per-image pseudo-label sets. Both loss terms are means over the batch.
    Returns ``(LossBreakdown, grads)``; grads cover ``enc.*``, ``img.*`` and,
    with pixel labels, ``pix.*``.
    """
    f, enc_cache = encode_forward(x, params)
    n = len(x)
    pooled = T.global_avg_pool(f)
    probs = T.softmax(pooled @ params["img.w"].T + params["img.b"])
    ice = image_ce(probs, y)
    grads = {"img.w": ice.grad.T @ pooled, "img.b": ice.grad.sum(axis=0)}
    grad_f = T.global_avg_pool_backward(ice.grad @ params["img.w"], f.shape)

    pce_value = 0.0
    if pixel_labels is not None:
        logits, pcache = pixel_logits_forward(f, params)
        s = T.softmax(logits)
        grad_logits = np.zeros_like(logits)
        for i in range(n):
            pce = partial_pixel_ce(s[i], pixel_labels[i])
            pce_value += pce.loss / n
            grad_logits[i] = pce.grad / n
        grad_f_pix, pix_grads = pixel_logits_backward(lam * grad_logits, pcache, params)
        grads.update(pix_grads)
        grad_f = grad_f + grad_f_pix

    _, enc_grads = encode_backward(grad_f, enc_cache)
    grads.update(enc_grads)
    return total_loss(ice.loss, pce_value, lam), grads


# --------------------------------------------------------- pseudo-labels


def harvest_pseudolabels(checkpoint: ModelParams, image, y: int, n: int, sampler: str, rng):
    """CAM of the true class from the frozen baseline, then one fresh sampler draw."""
    cam = baseline_cam(encode(image, checkpoint), checkpoint, int(y))
    return get_sampler(sampler)(cam, n, rng)


class CamCache:
    """Normalized true-class CAMs of a frozen baseline, keyed by (image index, flip)."""

    def __init__(self, baseline: ModelParams):
        self.baseline = baseline
        self.maps = {}

    def get(self, keys, images, labels):
        missing = [i for i, k in enumerate(keys) if k not in self.maps]
        if missing:
            f = encode(np.stack([images[i] for i in missing]), self.baseline)
            for j, i in enumerate(missing):
                self.maps[keys[i]] = normalize_cam(raw_cam(f[j], self.baseline, int(labels[i])))[0]
        return [self.maps[k] for k in keys]


# ------------------------------------------------------------ train loop


def _epoch_batches(n_samples, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch, ORDER_TAG])
    order = rng.permutation(n_samples)
    flips = rng.integers(0, 2, size=(n_samples, 2)) if cfg.augment else np.zeros((n_samples, 2), int)
    for start in range(0, n_samples, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        yield idx, flips[idx]


def _flip(image, fl):
    if fl[0]:
        image = image[::-1]
    if fl[1]:
        image = image[:, ::-1]
    return np.ascontiguousarray(image)


def _run(
    dataset,
    params: ModelParams,
    cfg: TrainConfig,
    stage: str,
    baseline: ModelParams | None = None,
    out_dir=None,
    on_step=None,
):
    cfg.validate()
    train, val = dataset["train"], dataset["val"]
    kind = "cam" if stage == "baseline" else "pixelcam"
    trainable = ("enc.", "img.") if stage == "baseline" else ("enc.", "img.", "pix.")
    sampler = get_sampler(cfg.sampler) if stage == "pixelcam" else None
    cams = CamCache(baseline) if stage == "pixelcam" else None

    labels_all = np.array([s.label for s in train])
    momentum = {}
    selection = SelectionRecord()
    best = {}
    rows = []
    step = 0
    last_good = params.copy()

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for idx, flips in _epoch_batches(len(train), cfg, epoch):
            x = np.stack([_flip(train[i].image, fl) for i, fl in zip(idx, flips)])
            y = labels_all[idx]
            pixel_labels = None
            if stage == "pixelcam":
                keys = [(int(i), int(fl[0]), int(fl[1])) for i, fl in zip(idx, flips)]
                maps = cams.get(keys, x, y)
                pixel_labels = [
                    sampler(m, cfg.n_pixels, np.random.default_rng([cfg.seed, epoch, int(i), SAMPLE_TAG]))
                    for m, i in zip(maps, idx)
                ]
            breakdown, grads = forward_backward(params, x, y, pixel_labels, cfg.lam)
            if not np.isfinite(breakdown.total):
                _save_failure(out_dir, last_good)
                raise TrainingError("non-finite loss", step=step)
            sub = {k: v for k, v in params.tensors.items() if k.startswith(trainable)}
            try:
                T.sgd_step(sub, {k: grads[k] for k in sub}, lr, cfg.weight_decay, momentum, cfg.momentum, step)
            except TrainingError:
                _save_failure(out_dir, last_good)
                raise
            rows.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "image_ce": breakdown.image_ce,
                    "pixel_ce": breakdown.pixel_ce,
                    "total": breakdown.total,
                    "lambda": breakdown.lam,
                }
            )
            if on_step is not None:
                on_step(step, params)
            step += 1
        last_good = params.copy()
        acc, ap = validation_scores(params, val, kind)
        new_loc, new_cl = selection.update(epoch, acc, ap)
        if new_loc:
            best["bloc"] = params.copy()
        if new_cl:
            best["bcl"] = params.copy()
        log.info("%s epoch %d: val acc %.4f, val PxAP %.4f", stage, epoch, acc, ap)

    checkpoints = {"bloc": best.get("bloc", params.copy()), "bcl": best.get("bcl", params.copy()), "last": params}
    selection.checkpoint_ids = {k: checkpoint_id(v) for k, v in checkpoints.items()}
    if out_dir is not None:
        write_run(out_dir, checkpoints, selection, rows, cfg, params.config, stage)
    return TrainResult(checkpoints, selection, rows)


def _save_failure(out_dir, params):
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, Path(out_dir) / "last_good.pxcm")


def train_baseline(dataset, model_config: ModelConfig, cfg: TrainConfig, init=None, out_dir=None, on_step=None):
    """Stage 1: optimize the image cross-entropy over encoder and image head.

    ``init`` continues training from existing parameters instead of a fresh
    initialization. A fresh model without input statistics takes the
    per-channel mean and deviation of the training images.
    """
    if init is not None:
        params = init.copy()
    else:
        if model_config.input_mean is None:
            mean, std = input_statistics([s.image for s in dataset["train"]])
            model_config = replace(model_config, input_mean=mean, input_std=std)
        params = init_params(model_config, cfg.seed)
    return _run(dataset, params, cfg, "baseline", out_dir=out_dir, on_step=on_step)


def fresh_pixelcam_params(baseline: ModelParams, model_config: ModelConfig, seed: int) -> ModelParams:
    """Encoder and image head from the baseline, pixel head newly Glorot-initialized."""
    tensors = {k: v.copy() for k, v in baseline.tensors.items() if not k.startswith("pix.")}
    tensors.update(init_pixel_head(model_config, np.random.default_rng([seed, HEAD_TAG])))
    return ModelParams(model_config, tensors)


def train_pixelcam(dataset, baseline: ModelParams, model_config: ModelConfig, cfg: TrainConfig, out_dir=None, on_step=None):
    """Stage 2: image CE + lambda * partial pixel CE with per-step pseudo-labels.

    Pseudo-labels come from the frozen ``baseline`` checkpoint throughout.
    """
    for name in ("widths", "kernel", "in_channels", "num_classes", "pool_after"):
        if getattr(baseline.config, name) != getattr(model_config, name):
            raise ConfigurationError(f"baseline checkpoint {name} differs from the model config")
    model_config = replace(model_config, input_mean=baseline.config.input_mean, input_std=baseline.config.input_std)
    params = fresh_pixelcam_params(baseline, model_config, cfg.seed)
    return _run(dataset, params, cfg, "pixelcam", baseline=baseline, out_dir=out_dir, on_step=on_step)


# -------------------------------------------------------------- persistence


LOG_FIELDS = ["step", "epoch", "image_ce", "pixel_ce", "total", "lambda"]


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_run(out_dir, checkpoints, selection, rows, cfg, model_config, stage):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, p in checkpoints.items():
        save_checkpoint(p, out / f"{name}.pxcm")
    write_log_csv(rows, out / "train_log.csv")
    (out / "selection.json").write_text(json.dumps(selection.to_dict(), indent=1, sort_keys=True) + "\n")
    snapshot = {"stage": stage, "train": cfg.to_dict(), "model": model_config.to_dict()}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n")


# -------------------------------------------------------------- grid search


def grid_search(dataset, model_config: ModelConfig, cfg: TrainConfig, stage="baseline", baseline=None, out_csv=None):
    """Train every (lr, decay) cell and pick the best by the ``cam_select`` criterion.

    Returns ``(best TrainConfig, rows)``. Ties keep the earlier cell.
    """
    rows = []
    best_cfg, best_val = None, -np.inf
    for lr, decay in itertools.product(cfg.lr_grid, cfg.decay_grid):
        cell = replace(cfg, lr=lr, lr_decay=decay)
        if stage == "baseline":
            res = train_baseline(dataset, model_config, cell)
        else:
            res = train_pixelcam(dataset, baseline, model_config, cell)
        sel = res.selection
        val_pxap = sel.val_pxap[sel.bloc_epoch] if sel.bloc_epoch >= 0 else float("nan")
        val_acc = sel.val_acc[sel.bcl_epoch] if sel.bcl_epoch >= 0 else float("nan")
        score = val_pxap if cfg.cam_select == "bloc" else val_acc
        rows.append({"lr": lr, "lr_decay": decay, "val_pxap": val_pxap, "val_acc": val_acc, "score": score})
        if best_cfg is None or score > best_val:
            best_cfg, best_val = cell, score
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return best_cfg, rows
