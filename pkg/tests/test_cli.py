import json
from pathlib import Path

import numpy as np
import pytest

from risknet import model as mdl
from risknet.cli import main
from risknet.provisioning import load_scenario
from risknet.simulator import PenaltyTable

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "4", "generate", "--routers", "8", "--out", str(root / "s.json")]) == 0
    assert main(["build-dataset", "--topologies", "5", "--routers", "6", "8", "--years", "8",
                 "--seed", "2", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--epochs", "2", "--batch-size", "8",
                 "--iterations", "2", "--out", str(root / "run")]) == 0
    return root


def test_generate_and_simulate(capsys, workspace, tmp_path):
    scen = load_scenario(workspace / "s.json")
    assert scen.topology.n_routers == 8
    code, out, _ = run(capsys, "simulate", "--scenario", workspace / "s.json", "--years", 20,
                       "--seed", 7, "--out", tmp_path / "p.csv")
    assert code == 0
    doc = summary(out)
    assert doc["years"] == 20 and doc["seconds"] >= 0
    table = PenaltyTable.from_csv((tmp_path / "p.csv").read_text())
    assert table.years == 20 and table.n_slas == scen.n_slas
    assert doc["total_penalty"] == pytest.approx(table.penalties.sum())


def test_simulate_to_stdout_thread_independent(capsys, workspace):
    base = ["simulate", "--scenario", workspace / "s.json", "--years", 30, "--seed", 1,
            "--block-years", 5]
    code, one, err = run(capsys, *base)
    assert code == 0 and one.startswith("year,sla_id,penalty")
    assert summary(err)["command"] == "simulate"
    code, two, _ = run(capsys, *base, "--threads", 3)
    assert two == one


def test_global_flags_either_side(capsys, workspace, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(capsys, "--seed", 9, "generate", "--routers", 6, "--out", a)[0] == 0
    assert run(capsys, "generate", "--routers", 6, "--seed", 9, "--out", b)[0] == 0
    assert a.read_text() == b.read_text()


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "generate", "--routers", 6, "--bogus")
    assert code == 1
    assert "usage:" in err
    assert run(capsys)[0] == 1
    assert run(capsys, "explode")[0] == 1


def test_data_errors(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--scenario", tmp_path / "missing.json", "--years", 3)
    assert code == 2 and "missing.json" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "simulate", "--scenario", bad, "--years", 3)[0] == 2
    sndlib = tmp_path / "x.txt"
    sndlib.write_text("NODES (\n  A ( 0 0 )\n)\n")
    assert run(capsys, "import-sndlib", sndlib)[0] == 2


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,test_loss,val_loss,seconds"
    assert len(lines) == 3
    mdl.load_checkpoint(run_dir / "checkpoint.json")


def test_evaluate(capsys, workspace):
    code, out, _ = run(capsys, "evaluate", "--ckpt", workspace / "run" / "checkpoint.json",
                       "--data", workspace / "data")
    assert code == 0
    doc = json.loads(out)
    assert set(doc) >= {"model_nll", "baseline_nll", "bits", "n"}
    assert doc["bits"] == pytest.approx((doc["baseline_nll"] - doc["model_nll"]) / np.log(2))


def test_predict_and_risk(capsys, workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoint.json"
    code, out, _ = run(capsys, "predict", "--ckpt", ckpt, "--scenario", workspace / "s.json",
                       "--repeat", 3, "--out", tmp_path / "pred.json")
    assert code == 0 and summary(out)["seconds"] > 0
    pred = json.loads((tmp_path / "pred.json").read_text())
    n = load_scenario(workspace / "s.json").n_slas
    assert len(pred["mu"]) == len(pred["sigma"]) == n
    assert min(pred["sigma"]) > 0
    code, out, _ = run(capsys, "risk", "--ckpt", ckpt, "--scenario", workspace / "s.json")
    report = json.loads(out.splitlines()[0])
    assert all(c >= v for c, v in zip(report["cvar"], report["var"]))
    assert report["network_cvar_bound"] == pytest.approx(sum(report["cvar"]))


def test_ppplot(capsys, workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoint.json"
    code, out, _ = run(capsys, "ppplot", "--ckpt", ckpt, "--data", workspace / "data",
                       "--out", tmp_path / "pp.csv")
    assert code == 0
    rows = (tmp_path / "pp.csv").read_text().splitlines()
    assert rows[0] == "q,q_hat,n" and len(rows) == 100
    code, out, _ = run(capsys, "ppplot", "--baseline", "--data", workspace / "data")
    assert code == 0 and out.startswith("q,q_hat,n")


def test_import_sndlib(capsys, tmp_path):
    code, out, err = run(capsys, "import-sndlib", DATA / "abilene.txt")
    assert code == 0
    assert len(json.loads(out)["links"]) == 15
    code, _, _ = run(capsys, "--seed", 2, "import-sndlib", DATA / "abilene.txt", "--provision",
                     "--out", tmp_path / "ab.json")
    assert code == 0
    assert load_scenario(tmp_path / "ab.json").n_slas > 0
