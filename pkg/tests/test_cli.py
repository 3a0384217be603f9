import csv
import json

import pytest

from pixelcam.cli import main

GEN = {"height": 16, "width": 16, "n_train": 8, "n_val": 4, "n_test": 4, "k_supervised": 1, "radius": [3.0, 5.0]}
TRAIN = {"epochs": 1, "batch_size": 4}
MODEL = {"widths": [4, 6]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, obj in (("gen.json", GEN), ("train.json", TRAIN), ("model.json", MODEL)):
        (root / name).write_text(json.dumps(obj))
    assert main(["generate", str(root / "data"), "--config", str(root / "gen.json"), "--seed", "4"]) == 0
    flags = ["--data", str(root / "data"), "--config", str(root / "train.json"), "--model-config", str(root / "model.json")]
    assert main(["train", "baseline", str(root / "base"), *flags]) == 0
    assert main(["train", "pixelcam", str(root / "pxcm"), *flags, "--baseline-checkpoint", str(root / "base"),
                 "--cam-select", "bloc"]) == 0
    return root, flags


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestGenerate:
    def test_manifests_and_counts(self, workspace):
        root, _ = workspace
        for split, n in (("train", 8), ("val", 4), ("test", 4)):
            assert json.loads((root / "data" / split / "manifest.json").read_text())["count"] == n
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert manifest["command"] == "generate" and manifest["seed"] == 4
        assert "train/manifest.json" in manifest["outputs"]

    def test_refuses_non_empty(self, workspace, capsys):
        root, _ = workspace
        assert main(["generate", str(root / "data"), "--config", str(root / "gen.json")]) == 2
        assert _error(capsys)["error"] == "UsageError"

    def test_same_seed_same_tree(self, workspace, tmp_path):
        root, _ = workspace
        main(["generate", str(tmp_path / "a"), "--config", str(root / "gen.json"), "--seed", "4"])
        for split in ("train", "val", "test"):
            for f in sorted((root / "data" / split).iterdir()):
                assert (tmp_path / "a" / split / f.name).read_bytes() == f.read_bytes()

    def test_force(self, workspace, tmp_path):
        root, _ = workspace
        main(["generate", str(tmp_path / "b"), "--config", str(root / "gen.json")])
        assert main(["generate", str(tmp_path / "b"), "--config", str(root / "gen.json"), "--force"]) == 0

    def test_print_config(self, capsys):
        assert main(["generate", "--print-config"]) == 0
        assert json.loads(capsys.readouterr().out)["n_train"] == 200


class TestTrain:
    def test_both_selections_emitted(self, workspace):
        root, _ = workspace
        for run in ("base", "pxcm"):
            assert {"bloc.pxcm", "bcl.pxcm", "selection.json", "manifest.json"} <= {p.name for p in (root / run).iterdir()}

    def test_missing_baseline(self, workspace, tmp_path, capsys):
        _, flags = workspace
        assert main(["train", "pixelcam", str(tmp_path / "x"), *flags]) == 2
        assert "baseline" in _error(capsys)["message"]

    def test_invalid_stage(self, workspace):
        with pytest.raises(SystemExit) as exc:
            main(["train", "stage3", "out"])
        assert exc.value.code != 0

    def test_lambda_zero_logs_pixel_ce(self, workspace):
        root, flags = workspace
        assert main(["train", "pixelcam", str(root / "lam0"), *flags, "--baseline-checkpoint", str(root / "base"),
                     "--lambda", "0"]) == 0
        rows = _rows(root / "lam0" / "train_log.csv")
        assert all(float(r["lambda"]) == 0.0 and float(r["pixel_ce"]) > 0 for r in rows)
        assert all(float(r["total"]) == float(r["image_ce"]) for r in rows)

    def test_never_overwrites(self, workspace):
        root, flags = workspace
        assert main(["train", "baseline", str(root / "base"), *flags]) == 0
        assert (root / "base-1" / "manifest.json").exists()

    def test_print_config(self, capsys):
        assert main(["train", "baseline", "--print-config", "--lambda", "0.1"]) == 0
        assert json.loads(capsys.readouterr().out)["train"]["lam"] == 0.1


class TestEvaluate:
    def test_reports_and_stain_series(self, workspace):
        root, _ = workspace
        assert main(["evaluate", str(root / "pxcm" / "bloc.pxcm"), str(root / "ev"), "--data", str(root / "data"),
                     "--stain-series", "3"]) == 0
        report = json.loads((root / "ev" / "report.json").read_text())
        assert report["n_images"] == 4 and len(report["per_image_J"]) == 4
        series = _rows(root / "ev" / "stain_series.csv")
        assert [int(r["stain_level"]) for r in series] == [1, 2, 3]
        d = [float(r["stain_distance"]) for r in series]
        assert d == sorted(d) and len(set(d)) == 3
        manifest = json.loads((root / "ev" / "manifest.json").read_text())
        assert set(manifest["outputs"]) == {p.name for p in (root / "ev").iterdir()} - {"manifest.json"}

    def test_target_domain(self, workspace, tmp_path):
        root, _ = workspace
        main(["generate", str(tmp_path / "tgt"), "--config", str(root / "gen.json"), "--seed", "9"])
        assert main(["evaluate", str(root / "base" / "bloc.pxcm"), str(tmp_path / "ev"), "--data", str(root / "data"),
                     "--kind", "cam", "--target", str(tmp_path / "tgt")]) == 0
        assert json.loads((tmp_path / "ev" / "report.json").read_text())["meta"]["domain"] == "source"
        assert json.loads((tmp_path / "ev" / "target.json").read_text())["meta"]["domain"] == "target"

    def test_bad_checkpoint(self, workspace, tmp_path, capsys):
        root, _ = workspace
        (tmp_path / "bad.pxcm").write_bytes(b"nope")
        assert main(["evaluate", str(tmp_path / "bad.pxcm"), str(tmp_path / "ev"), "--data", str(root / "data")]) == 1
        assert _error(capsys)["error"] == "FormatError"


class TestAblateAndReport:
    def test_sampler_axis(self, workspace):
        root, flags = workspace
        assert main(["ablate", "sampler", str(root / "abl"), *flags, "--baseline-checkpoint", str(root / "base")]) == 0
        rows = _rows(root / "abl" / "ablation_sampler.csv")
        assert [r["sampler"] for r in rows] == ["PB", "TH"]

    def test_unknown_axis(self):
        with pytest.raises(SystemExit):
            main(["ablate", "depth", "out"])

    def test_report_identical_runs(self, workspace):
        root, _ = workspace
        ck = str(root / "pxcm" / "bloc.pxcm")
        for name in ("r1", "r2"):
            main(["evaluate", ck, str(root / name), "--data", str(root / "data")])
        assert main(["report", str(root / "r1"), str(root / "r2"), "--out", str(root / "rep")]) == 0
        tests = _rows(root / "rep" / "ttests.csv")
        ap = next(t for t in tests if t["metric"] == "ap")
        assert (float(ap["t"]), float(ap["p"])) == (0.0, 1.0)
        comp = _rows(root / "rep" / "comparison.csv")
        assert len(comp) == 2 and float(comp[1]["delta_pxap"]) == 0.0

    def test_single_run(self, workspace):
        root, _ = workspace
        main(["evaluate", str(root / "base" / "bloc.pxcm"), str(root / "rb"), "--data", str(root / "data"),
              "--kind", "cam"])
        assert main(["report", str(root / "rb"), "--out", str(root / "rep1")]) == 0
        assert len(_rows(root / "rep1" / "comparison.csv")) == 1
        assert "delta_pxap" in (root / "rep1" / "comparison.md").read_text()

    def test_report_refuses_mismatched_splits(self, workspace, tmp_path, capsys):
        root, _ = workspace
        main(["generate", str(tmp_path / "other"), "--config", str(root / "gen.json"), "--seed", "11"])
        ck = str(root / "pxcm" / "bloc.pxcm")
        main(["evaluate", ck, str(tmp_path / "a"), "--data", str(root / "data")])
        main(["evaluate", ck, str(tmp_path / "b"), "--data", str(tmp_path / "other")])
        assert main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "rep")]) == 2
        assert "different test splits" in _error(capsys)["message"]
