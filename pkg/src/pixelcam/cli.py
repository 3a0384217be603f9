"""Command-line entry point: ``pixelcam {generate,train,evaluate,ablate,report}``.

Every command writes into a fresh run directory holding a ``manifest.json``
that lists the command, configuration, seed, inputs, outputs, tool version
and wall-clock duration. Existing run directories are never overwritten: a
numeric suffix is appended instead (``generate`` refuses unless ``--force``).

Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr
and exit with status 1; usage errors exit with status 2 (argparse's own
usage messages keep their standard format).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, PixelCamError
from .evaluation import cam_threshold, evaluate
from .metrics import histogram_csv, j_histogram, paired_t_test
from .model import ModelConfig, checkpoint_id, load_checkpoint
from .synth import GenConfig, dataset_fingerprint, generate_dataset, load_dataset, save_dataset, stain_series
from .trainer import TrainConfig, train_baseline, train_pixelcam, write_run

log = logging.getLogger("pixelcam")

AXES = ("lambda", "npixels", "sampler", "head", "camselect")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(PixelCamError):
    """Invalid combination of command-line arguments."""


# ----------------------------------------------------------------- helpers


def _configure_logging():
    level = os.environ.get("PIXELCAM_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte offset {exc.pos}") from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def fresh_dir(path) -> Path:
    """``path`` if absent or empty, else the first free ``path-N``."""
    path = Path(path)
    candidate, n = path, 0
    while candidate.exists() and any(candidate.iterdir()):
        n += 1
        candidate = path.with_name(f"{path.name}-{n}")
    candidate.mkdir(parents=True, exist_ok=True)
    return candidate


def write_manifest(out_dir, command, config, seed, inputs, started):
    """Write ``manifest.json`` listing every file under ``out_dir``."""
    out_dir = Path(out_dir)
    own = out_dir / "manifest.json"
    outputs = sorted(str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file() and p != own)
    _write_json(
        out_dir / "manifest.json",
        {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": [str(p) for p in inputs],
            "outputs": outputs,
            "version": __version__,
            "duration_s": round(time.monotonic() - started, 3),
        },
    )


def _load_gen_config(args) -> GenConfig:
    cfg = GenConfig.from_dict(_read_json(args.config)) if args.config else GenConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _load_train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed,
        "lam": args.lam,
        "epochs": args.epochs,
        "lr": args.lr,
        "n_pixels": args.npixels,
        "sampler": args.sampler,
        "cam_select": args.cam_select,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def _load_model_config(args) -> ModelConfig:
    cfg = ModelConfig.from_dict(_read_json(args.model_config)) if args.model_config else ModelConfig()
    if args.head is not None:
        cfg = replace(cfg, pixel_head=args.head)
    return cfg.validate()


def _resolve_baseline(path, cam_select) -> Path:
    """A checkpoint file, or the ``bloc``/``bcl`` checkpoint of a baseline run directory."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{cam_select}.pxcm"
    if not path.is_file():
        raise UsageError(f"baseline checkpoint not found: {path}")
    return path


def _report_files(report, out_dir, stem="report"):
    out_dir = Path(out_dir)
    _write_json(out_dir / f"{stem}.json", report.to_dict())
    (out_dir / f"{stem}_per_image.csv").write_text(report.to_csv())
    (out_dir / f"{stem}_j_histogram.csv").write_text(histogram_csv(*j_histogram(report.per_image_J)))


def _csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in fields})
    return buf.getvalue()


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    cfg = _load_gen_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return
    if args.out is None:
        raise UsageError("generate needs an output directory")
    started = time.monotonic()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to replace it")
        shutil.rmtree(out)
    save_dataset(generate_dataset(cfg), out, cfg)
    write_manifest(out, "generate", cfg.to_dict(), cfg.seed, [args.config] if args.config else [], started)
    print(out)


def _train_run(data_dir, stage, train_cfg, model_cfg, baseline_path, out_dir):
    dataset = load_dataset(data_dir, ("train", "val"))
    if stage == "baseline":
        result = train_baseline(dataset, model_cfg, train_cfg)
    else:
        baseline = load_checkpoint(baseline_path)
        result = train_pixelcam(dataset, baseline, model_cfg, train_cfg)
    last = result.checkpoints["last"]
    write_run(out_dir, result.checkpoints, result.selection, result.log_rows, train_cfg, last.config, stage)
    return result


def cmd_train(args):
    train_cfg = _load_train_config(args)
    model_cfg = _load_model_config(args)
    if args.print_config:
        print(json.dumps({"train": train_cfg.to_dict(), "model": model_cfg.to_dict()}, indent=1, sort_keys=True))
        return
    if args.out is None or args.data is None:
        raise UsageError("train needs --data and an output directory")
    baseline_path = None
    if args.stage == "pixelcam":
        if args.baseline_checkpoint is None:
            raise UsageError("stage pixelcam requires --baseline-checkpoint")
        baseline_path = _resolve_baseline(args.baseline_checkpoint, train_cfg.cam_select)
    started = time.monotonic()
    out = fresh_dir(args.out)
    _train_run(args.data, args.stage, train_cfg, model_cfg, baseline_path, out)
    inputs = [args.data] + ([baseline_path] if baseline_path else [])
    config = {"stage": args.stage, "train": train_cfg.to_dict(), "model": model_cfg.to_dict()}
    write_manifest(out, f"train {args.stage}", config, train_cfg.seed, inputs, started)
    print(out)


def _evaluate_one(params, kind, data, threshold, stain=None, meta=None):
    report = evaluate(params, data["test"], kind, threshold, stain=stain, meta=meta)
    report.meta["test_fingerprint"] = dataset_fingerprint(data["test"])
    return report


def cmd_evaluate(args):
    if args.out is None or args.data is None:
        raise UsageError("evaluate needs a checkpoint, --data and an output directory")
    if args.stain_series is not None and args.target is not None:
        raise UsageError("--stain-series and --target are mutually exclusive")
    started = time.monotonic()
    params = load_checkpoint(args.checkpoint)
    source = load_dataset(args.data, ("val", "test"))
    kind = args.kind
    threshold = args.threshold
    if threshold is None:
        threshold = cam_threshold(params, source["val"]) if kind == "cam" else 0.5
    # content ids rather than paths keep reports identical across run directories
    base_meta = {"checkpoint": Path(args.checkpoint).name, "checkpoint_id": checkpoint_id(params), "kind": kind,
                 "domain": "source"}
    out = fresh_dir(args.out)
    inputs = [args.checkpoint, args.data]
    _report_files(_evaluate_one(params, kind, source, threshold, meta=base_meta), out)

    if args.stain_series is not None:
        rows = []
        for level, t in enumerate(stain_series(args.stain_series, args.seed or 0), start=1):
            meta = dict(base_meta, stain_level=level, stain_magnitude=t.magnitude, stain_distance=t.distance())
            rep = _evaluate_one(params, kind, source, threshold, stain=t, meta=meta)
            _report_files(rep, out, f"stain-{level:02d}")
            rows.append(dict(meta, **rep.summary_row()))
        fields = ["stain_level", "stain_magnitude", "stain_distance", "pxap", "cl_acc", "mean_J", "pxtp", "pxtn"]
        (out / "stain_series.csv").write_text(_csv_text(rows, fields))
    if args.target is not None:
        target = load_dataset(args.target, ("test",))
        meta = dict(base_meta, domain="target", target=Path(args.target).name)
        _report_files(_evaluate_one(params, kind, target, threshold, meta=meta), out, "target")
        inputs.append(args.target)

    config = {"kind": kind, "threshold": threshold, "stain_series": args.stain_series}
    write_manifest(out, "evaluate", config, args.seed, inputs, started)
    print(out)


def _ablation_values(axis, train_cfg):
    if axis == "lambda":
        return [("lam", v) for v in train_cfg.lambda_grid]
    if axis == "npixels":
        return [("n_pixels", v) for v in train_cfg.npixels_grid]
    if axis == "sampler":
        return [("sampler", v) for v in ("PB", "TH")]
    if axis == "head":
        return [("pixel_head", v) for v in ("linear", "multi-layer")]
    return [("cam_select", v) for v in ("bloc", "bcl")]


def _ablation_cell(job):
    """One ablation sub-run; module-level so it can run in a worker process."""
    data_dir, baseline_arg, train_cfg, model_cfg, field, value, sub_dir = job
    if field == "pixel_head":
        model_cfg = replace(model_cfg, pixel_head=value)
    else:
        train_cfg = replace(train_cfg, **{field: value})
    baseline_path = _resolve_baseline(baseline_arg, train_cfg.cam_select)
    sub_dir = Path(sub_dir)
    sub_dir.mkdir(parents=True, exist_ok=True)
    result = _train_run(data_dir, "pixelcam", train_cfg, model_cfg, baseline_path, sub_dir)
    data = load_dataset(data_dir, ("test",))
    report = _evaluate_one(result.checkpoints[train_cfg.cam_select], "pixelcam", data, 0.5)
    _report_files(report, sub_dir)
    sel = result.selection
    return {
        "value": value,
        "pxap": report.pxap,
        "cl_acc": report.cl_acc,
        "mean_J": report.mean_J,
        "val_pxap": sel.val_pxap[sel.bloc_epoch] if sel.bloc_epoch >= 0 else None,
        "val_acc": sel.val_acc[sel.bcl_epoch] if sel.bcl_epoch >= 0 else None,
        "run": sub_dir.name,
    }


def cmd_ablate(args):
    if args.out is None or args.data is None or args.baseline_checkpoint is None:
        raise UsageError("ablate needs --data, --baseline-checkpoint and an output directory")
    if args.axis == "camselect" and not Path(args.baseline_checkpoint).is_dir():
        raise UsageError("ablate camselect needs a baseline run directory holding bloc.pxcm and bcl.pxcm")
    train_cfg = _load_train_config(args)
    model_cfg = _load_model_config(args)
    started = time.monotonic()
    out = fresh_dir(args.out)
    jobs = [
        (args.data, args.baseline_checkpoint, train_cfg, model_cfg, f, v, str(out / f"{args.axis}={v}"))
        for f, v in _ablation_values(args.axis, train_cfg)
    ]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_ablation_cell, jobs))
    else:
        rows = [_ablation_cell(j) for j in jobs]
    for r in rows:
        r[args.axis] = r.pop("value")
    fields = [args.axis, "pxap", "cl_acc", "mean_J", "val_pxap", "val_acc", "run"]
    (out / f"ablation_{args.axis}.csv").write_text(_csv_text(rows, fields))
    config = {"axis": args.axis, "train": train_cfg.to_dict(), "model": model_cfg.to_dict()}
    write_manifest(out, f"ablate {args.axis}", config, train_cfg.seed, [args.data, args.baseline_checkpoint], started)
    print(out)


def _load_report(run_dir):
    path = Path(run_dir) / "report.json"
    if not path.is_file():
        raise UsageError(f"{run_dir} holds no report.json (run `pixelcam evaluate` first)")
    return _read_json(path)


def _paired_values(a, b, key):
    """Align two reports' per-image values on image id, skipping undefined entries."""
    bv = dict(zip(b["image_ids"], b[key]))
    xs, ys = [], []
    for image_id, x in zip(a["image_ids"], a[key]):
        y = bv.get(image_id)
        if isinstance(x, (int, float)) and isinstance(y, (int, float)) and np.isfinite(x) and np.isfinite(y):
            xs.append(float(x))
            ys.append(float(y))
    return xs, ys


def cmd_report(args):
    if args.out is None:
        raise UsageError("report needs --out")
    started = time.monotonic()
    reports = [(Path(r).name, _load_report(r)) for r in args.runs]
    ref_name, ref = reports[0]
    rows = []
    for name, rep in reports:
        row = {"run": name, **{k: rep.get(k) for k in ("pxap", "cl_acc", "pxtp", "pxfn", "pxtn", "pxfp", "mean_J")}}
        row["delta_pxap"] = (rep["pxap"] - ref["pxap"]) if rep.get("pxap") is not None and ref.get("pxap") is not None else None
        rows.append(row)

    tests = []
    for name, rep in reports[1:]:
        fa, fb = ref["meta"].get("test_fingerprint"), rep["meta"].get("test_fingerprint")
        if fa is None or fa != fb:
            raise UsageError(f"runs {ref_name} and {name} were evaluated on different test splits; refusing the t-test")
        for key, label in (("per_image_ap", "ap"), ("per_image_J", "J")):
            xs, ys = _paired_values(ref, rep, key)
            if len(xs) < 2:
                continue
            t = paired_t_test(xs, ys)
            tests.append({"a": ref_name, "b": name, "metric": label, "n": len(xs), "t": t.t, "p": t.p, "dof": t.dof})

    out = fresh_dir(args.out)
    fields = ["run", "pxap", "delta_pxap", "cl_acc", "pxtp", "pxfn", "pxtn", "pxfp", "mean_J"]
    (out / "comparison.csv").write_text(_csv_text(rows, fields))
    (out / "ttests.csv").write_text(_csv_text(tests, ["a", "b", "metric", "n", "t", "p", "dof"]))
    for name, rep in reports:
        vals = [v for v in rep["per_image_J"] if isinstance(v, (int, float))]
        (out / f"j_histogram_{name}.csv").write_text(histogram_csv(*j_histogram(vals)))
    (out / "comparison.md").write_text(_markdown(rows, fields, tests))
    write_manifest(out, "report", {"runs": [str(r) for r in args.runs]}, None, args.runs, started)
    print(out)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _markdown(rows, fields, tests) -> str:
    lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    lines += ["| " + " | ".join(_fmt(r.get(f)) for f in fields) + " |" for r in rows]
    if tests:
        tf = ["a", "b", "metric", "n", "t", "p"]
        lines += ["", "| " + " | ".join(tf) + " |", "|" + "---|" * len(tf)]
        lines += ["| " + " | ".join(_fmt(t[f]) for f in tf) + " |" for t in tests]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ parser


def _add_train_flags(p):
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--model-config", help="ModelConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--npixels", type=int)
    p.add_argument("--sampler", choices=("PB", "TH"))
    p.add_argument("--head", choices=("linear", "multi-layer"))
    p.add_argument("--cam-select", choices=("bloc", "bcl"))
    p.add_argument("--baseline-checkpoint", help="baseline checkpoint file or baseline run directory")
    p.add_argument("--data", help="dataset directory written by `generate`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelcam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("out", nargs="?")
    g.add_argument("--config", help="GenConfig JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.add_argument("--print-config", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a baseline or PixelCAM model")
    t.add_argument("stage", choices=("baseline", "pixelcam"))
    t.add_argument("out", nargs="?")
    _add_train_flags(t)
    t.add_argument("--print-config", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics report of a checkpoint on a test split")
    e.add_argument("checkpoint")
    e.add_argument("out", nargs="?")
    e.add_argument("--data")
    e.add_argument("--kind", choices=("pixelcam", "cam"), default="pixelcam")
    e.add_argument("--threshold", type=float, help="pixel threshold (default 0.5, or balanced on val for cam)")
    e.add_argument("--stain-series", type=int, metavar="K")
    e.add_argument("--target", help="dataset directory of a target domain")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="one PixelCAM run per value of an ablation axis")
    a.add_argument("axis", choices=AXES)
    a.add_argument("out", nargs="?")
    _add_train_flags(a)
    a.add_argument("--parallel", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="compare evaluation runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (PixelCamError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
