import json

import numpy as np
import pytest

from meg import cli
from meg.chem import parse_smiles
from meg.data import Dataset, Record, synth_task
from meg.gnn import PredictorModel, load_checkpoint, predict, save_checkpoint

FAST_EXPLAIN = ["--train-epochs", "40", "--q-hidden", "64,32", "--q-batch-size", "16"]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for name in list(os.environ):
        if name.startswith("MEG_"):
            monkeypatch.delenv(name)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    data = d / "n.csv"
    assert cli.main(["synth", "contains_nitrogen", "--n", "120", "--seed", "1", "--out", str(data)]) == 0
    ckpt, metrics = d / "m.ckpt", d / "metrics.jsonl"
    code = cli.main(
        ["train", str(data), "--checkpoint", str(ckpt), "--metrics", str(metrics), "--hidden-size", "32", "--epochs", "30"]
    )
    assert code == 0
    return d, data, ckpt, metrics


def test_train_writes_files(trained):
    _, _, ckpt, metrics = trained
    model = load_checkpoint(ckpt)
    assert model.task == "classification" and model.hidden_size == 32
    rows = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert rows[0]["epoch"] == 1
    assert set(rows[0]) == {"epoch", "train_loss", "train_metric", "val_loss", "val_metric"}


def test_train_skipped_report(tmp_path):
    data = tmp_path / "d.csv"
    good = synth_task("contains_nitrogen", 30, seed=0)
    data.write_text("smiles,label\n" + "".join(f"{r.smiles},{r.label}\n" for r in good.records) + "c1ccccc1,0\n")
    args = ["train", str(data), "--checkpoint", str(tmp_path / "m"), "--metrics", str(tmp_path / "x")]
    assert cli.main(args + ["--skipped", str(tmp_path / "s.jsonl"), "--epochs", "1", "--hidden-size", "4"]) == 0
    assert json.loads((tmp_path / "s.jsonl").read_text())["reason"] == "AromaticUnsupported"


def test_train_errors(tmp_path, trained):
    _, data, _, _ = trained
    assert cli.main(["train", str(tmp_path / "missing.csv")]) == cli.EXIT_DATA
    assert cli.main(["train", str(data), "--train-fraction", "0.9"]) == cli.EXIT_CONFIG


def test_train_diverged(tmp_path, trained, monkeypatch):
    from meg.gnn import NonFiniteLoss

    def boom(*a, **k):
        raise NonFiniteLoss("loss became nan")

    monkeypatch.setattr(cli, "train_predictor", boom)
    _, data, _, _ = trained
    assert cli.main(["train", str(data), "--checkpoint", str(tmp_path / "m")]) == cli.EXIT_DIVERGED


def test_explain_report(trained, capsys):
    _, _, ckpt, _ = trained
    assert cli.main(["explain", str(ckpt), "CCN"] + FAST_EXPLAIN) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["input"]["prediction"]["class"] == 1
    assert doc["config"]["train_epochs"] == 40
    assert any(c["prediction"]["class"] == 0 for c in doc["counterfactuals"])


def test_explain_byte_identical(trained, tmp_path):
    _, _, ckpt, _ = trained
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["explain", str(ckpt), "NCC=O", "--out", str(a)] + FAST_EXPLAIN) == 0
    assert cli.main(["explain", str(ckpt), "NCC=O", "--out", str(b)] + FAST_EXPLAIN) == 0
    assert a.read_bytes() == b.read_bytes()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]  # no temp files left


def test_explain_errors(trained, tmp_path, monkeypatch):
    _, _, ckpt, _ = trained
    assert cli.main(["explain", str(ckpt), "c1ccccc1"]) == cli.EXIT_BAD_MOLECULE
    assert cli.main(["explain", str(ckpt), "C(C"]) == cli.EXIT_BAD_MOLECULE
    assert cli.main(["explain", str(ckpt), "CCN", "--task", "regression"]) == cli.EXIT_TASK_MISMATCH
    assert cli.main(["explain", str(tmp_path / "nope.ckpt"), "CCN"]) == cli.EXIT_CONFIG
    assert cli.main(["explain", str(ckpt), "CCN", "--gamma", "3"]) == cli.EXIT_CONFIG

    from meg.rl import NoCounterfactualFound

    def none(*a, **k):
        raise NoCounterfactualFound("nothing")

    monkeypatch.setattr(cli, "explain", none)
    assert cli.main(["explain", str(ckpt), "CCN"]) == cli.EXIT_NO_COUNTERFACTUAL


def test_env_layer(trained, capsys, monkeypatch):
    _, _, ckpt, _ = trained
    monkeypatch.setenv("MEG_TOP_K", "2")
    assert cli.main(["explain", str(ckpt), "CCN"] + FAST_EXPLAIN) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["top_k"] == 2 and len(doc["counterfactuals"]) <= 2


def test_eval_perfect_classifier(trained, tmp_path, capsys):
    _, _, ckpt, _ = trained
    model = load_checkpoint(ckpt)
    mols = [parse_smiles(s) for s in ["CCN", "CCO", "CC=O", "NCO", "CCCC"]]
    data = tmp_path / "e.csv"
    # labels are the model's own decisions, so it is perfect on them by construction
    Dataset([Record(str(m), m, predict(model, m).label) for m in mols], "classification").to_csv(data)
    assert cli.main(["eval", str(ckpt), str(data)]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 1.0


def test_eval_constant_regressor(tmp_path, capsys):
    labels = [2.0, 3.0, 7.0, 4.0, 9.0]
    model = PredictorModel("regression", hidden_size=4, seed=0)
    last = model.head[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.zeros_like(last.bias.data)
    model.target_shift = float(np.mean(labels))
    ckpt = tmp_path / "c.ckpt"
    save_checkpoint(model, ckpt)
    data = tmp_path / "r.csv"
    data.write_text("smiles,label\n" + "".join(f"{'C' * k},{y}\n" for k, y in enumerate(labels, start=1)))
    assert cli.main(["eval", str(ckpt), str(data), "--out", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    # mean 5, squared deviations 9 4 4 1 16
    assert report["mse"] == pytest.approx(34 / 5, abs=1e-12)
    assert report["n"] == 5


def test_eval_errors(trained, tmp_path):
    _, data, ckpt, _ = trained
    assert cli.main(["eval", str(ckpt), str(tmp_path / "none.csv")]) == cli.EXIT_DATA
    assert cli.main(["eval", str(ckpt), str(data), "--task", "regression"]) == cli.EXIT_TASK_MISMATCH


def test_synth_stdout_deterministic(capsys):
    assert cli.main(["synth", "heavy_atom_count", "--n", "25", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["synth", "heavy_atom_count", "--n", "25", "--seed", "3"]) == 0
    assert capsys.readouterr().out == first
    assert first.splitlines()[0] == "smiles,label" and len(first.splitlines()) == 26


def test_synth_bad_size():
    assert cli.main(["synth", "contains_nitrogen", "--n", "5"]) == cli.EXIT_CONFIG
