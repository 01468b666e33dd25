"""Command-line workflow on a small synthetic dataset."""
import json
import subprocess
import sys

import numpy as np
import pytest

from hqforest import io
from hqforest.cli import confusion_matrix, inspect_lines, layer_metrics, main
from hqforest.forest import load_model
from oracles import macro_metrics_by_loops

HYPER = {"d1": 2, "g_tree": 1e-3, "lambdas": [0.2, 0.3, 0.4, 0.2], "n_lay": 4}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--dims", "24", "24", "24", "--n-clas", "3",
                 "--n-train", "2", "--n-val", "1", "--n-test", "1", "--seed", "2"]) == 0
    (root / "hyper.json").write_text(json.dumps(HYPER))
    assert main(["train", "--manifest", str(data / "manifest.json"), "--out",
                 str(root / "model.json"), "--hyper", str(root / "hyper.json")]) == 0
    return root


class TestWorkflow:
    def test_synth_outputs(self, workspace):
        man = io.load_manifest(workspace / "data" / "manifest.json")
        assert [e.split for e in man.volumes] == ["train", "train", "val", "test"]
        assert man.background == [1] and man.n_clas == 3
        vol = io.read_mrv1(man.resolve(man.volumes[0]))
        assert vol.dims == (24, 24, 24) and vol.labels is not None

    def test_train_outputs(self, workspace):
        model = load_model(workspace / "model.json")
        assert model.n_lay == 4 and model.n_weak == 5
        report = json.loads((workspace / "model.json.report.json").read_text())
        assert set(report["timings"]) == {"pyramid", "features", "smote", "tree_optimization"}
        assert report["degenerate"] is False and report["n_trees"] == 5

    def test_predict_and_eval(self, workspace, capsys):
        data, preds = workspace / "data", workspace / "preds"
        assert main(["predict", "--manifest", str(data / "manifest.json"), "--model",
                     str(workspace / "model.json"), "--out", str(preds)]) == 0
        with np.load(preds / "vol_003.pred.npz") as npz:
            assert npz["probs_0"].shape == (24 ** 3, 3) and tuple(npz["dims"]) == (24, 24, 24)
            assert set(npz.files) >= {f"labels_{r}" for r in range(5)}
        records = io.read_jsonl(preds / "vol_003.records.jsonl")
        assert records[0]["type"] == "header"
        capsys.readouterr()
        assert main(["eval", "--manifest", str(data / "manifest.json"), "--predictions",
                     str(preds), "--out", str(workspace / "eval.json")]) == 0
        assert "voxel macro precision" in capsys.readouterr().out
        report = json.loads((workspace / "eval.json").read_text())
        vox = report["pooled"]["0"]
        assert np.array(vox["confusion"]).sum() == 24 ** 3
        assert vox["macro_precision"] > 0.5 and vox["macro_recall"] > 0.5

    def test_inspect(self, workspace, capsys):
        assert main(["inspect", "--model", str(workspace / "model.json")]) == 0
        out = capsys.readouterr().out
        assert out.startswith("model: 5 trees") and "resolution-independent" in out
        lines = inspect_lines(load_model(workspace / "model.json"))
        assert out == "\n".join(lines) + "\n"

    def test_search(self, workspace):
        grids = {"d1": [1, 2], "g_tree": [1e-3], "lambda": [0.2, 0.4], "n_lay": 4}
        (workspace / "grids.json").write_text(json.dumps(grids))
        out = workspace / "searched.json"
        assert main(["train", "--manifest", str(workspace / "data" / "manifest.json"),
                     "--out", str(out), "--grids", str(workspace / "grids.json"),
                     "--max-trials", "2"]) == 0
        trials = io.read_jsonl(str(out) + ".trials.jsonl")
        assert 1 <= len(trials) <= 2
        report = json.loads((workspace / "searched.json.report.json").read_text())
        assert report["search"]["n_trials"] == len(trials)


class TestErrors:
    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["train", "--manifest", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "m.json")]) == 2
        assert "error" in capsys.readouterr().err

    def test_eval_without_predictions(self, workspace, tmp_path):
        assert main(["eval", "--manifest", str(workspace / "data" / "manifest.json"),
                     "--predictions", str(tmp_path)]) == 2

    def test_exclusive_options(self, workspace, tmp_path):
        assert main(["train", "--manifest", str(workspace / "data" / "manifest.json"),
                     "--out", str(tmp_path / "m.json"), "--hyper", "a", "--grids", "b"]) == 2

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "hqforest", "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "synth" in res.stdout


class TestMetricsHelpers:
    def test_confusion_rows_are_references(self):
        cm = confusion_matrix([1, 2, 2, 3], [1, 1, 2, 3], 3)
        np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])

    def test_layer_metrics(self):
        pred, ref = [1, 2, 2, 3, 3], [1, 1, 2, 3, 2]
        m = layer_metrics(pred, ref, 3, [2, 3])
        p, r = macro_metrics_by_loops(pred, ref, [2, 3])
        assert m["macro_precision"] == pytest.approx(p) and m["macro_recall"] == pytest.approx(r)
        assert m["per_class"]["3"] == {"precision": 0.5, "recall": 1.0}
