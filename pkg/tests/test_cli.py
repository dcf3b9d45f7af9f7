import json
import shutil

import numpy as np
import pandas as pd
import pytest

from qrhawkes.cli import load_model, load_segments, main
from qrhawkes.lobdata import write_l1_csv
from qrhawkes.qrh1 import Qrh1Params
from qrhawkes.synthetic import synthetic_l1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    scripts = {}
    for i, seed in enumerate((101, 102)):
        recs, script = synthetic_l1(seed=seed, n_actions=4000, p_move=0.01)
        write_l1_csv(recs, d / f"day{i + 1}.csv")
        scripts[f"day{i + 1}"] = script
    cfg = {
        "inputs": ["day1.csv", "day2.csv"],
        "out": "out",
        "decays": [0.5, 5.0],
        "Q_max": 15,
        "n_buckets": 3,
        "tol": 1e-7,
        "seed": 3,
        "sim": {"horizon": 2000, "burn_in": 100, "sample_interval": 5, "mode": "mechanical", "q0": 5, "q0_ab": [5, 5]},
    }
    (d / "config.json").write_text(json.dumps(cfg))
    assert main(["preprocess", "--config", str(d / "config.json")]) == 0
    return d, scripts


def run(ws, *args):
    return main([args[0], "--config", str(ws / "config.json"), *args[1:]])


def snapshot(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.is_file()}


def test_preprocess_outputs_and_line_count_oracle(workspace):
    ws, scripts = workspace
    out = ws / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert [d["day"] for d in summary["days"]] == ["day1", "day2"]
    ev8 = pd.read_csv(out / "events8.csv")
    for day, script in scripts.items():
        # one events8 line per scripted action
        assert (ev8["day"] == day).sum() == len(script)
        s = next(x for x in summary["days"] if x["day"] == day)
        assert sum(s["events8"].values()) == len(script)
        assert s["events8"]["P+"] == sum(k == "P+" for _, k in script)
    n3 = len(pd.read_csv(out / "events3.csv"))
    assert n3 == sum(sum(d["events3"].values()) for d in summary["days"])
    assert all(d["aes"] > 1 for d in summary["days"])


def test_preprocess_rerun_is_byte_identical(workspace, tmp_path):
    ws, _ = workspace
    other = tmp_path / "again"
    assert run(ws, "preprocess", "--out", str(other)) == 0
    assert snapshot(other) == snapshot(ws / "out")


def test_fit_qr_matches_count_over_time(workspace):
    ws, _ = workspace
    assert run(ws, "fit", "--model", "qr") == 0
    p = load_model(ws / "out" / "model_qr.json")
    segs = load_segments(ws / "out")
    N = np.zeros((3, 16))
    T = np.zeros(16)
    for s in segs:
        st = np.minimum(s.states, 15)
        t = np.concatenate([[s.start], s.times, [s.end]])
        np.add.at(T, st, np.diff(t))
        np.add.at(N, (s.kinds, st[:-1]), 1)
    with np.errstate(invalid="ignore"):
        ref = N / T
    seen = T > 0
    np.testing.assert_allclose(p.mu[:, seen], ref[:, seen], rtol=1e-12)
    doc = json.loads((ws / "out" / "fit_qr.json").read_text())
    assert doc["n_params"] == 3 * 16 and "stability" in doc


@pytest.mark.parametrize("model", ["hawkes", "qrh1", "hawkes8", "qrh2-ls", "qrh2-mle"])
def test_fit_models(workspace, model):
    ws, _ = workspace
    assert run(ws, "fit", "--model", model) == 0
    doc = json.loads((ws / "out" / f"fit_{model}.json").read_text())
    assert doc["converged"] and set(doc["stability"]) == {"stable", "spectral_radius"}
    assert "wall_time" not in doc
    if model == "hawkes8":
        assert doc["n_params"] == 8 + 8 * 8 * 2
    if model.startswith("qrh2"):
        f = pd.read_csv(ws / "out" / f"f_table_{model}.csv")
        assert len(f) == 9 and np.allclose(f.loc[0, ["P+", "Ma"]], 1.0)


def test_fit_rerun_byte_identical(workspace):
    ws, _ = workspace
    assert run(ws, "fit", "--model", "qrh1") == 0
    first = (ws / "out" / "model_qrh1.json").read_bytes()
    assert run(ws, "fit", "--model", "qrh1") == 0
    assert (ws / "out" / "model_qrh1.json").read_bytes() == first


def test_fit_nonconvergence_exit_code(workspace, tmp_path):
    ws, _ = workspace
    cfg = json.loads((ws / "config.json").read_text())
    cfg["max_iter"] = 0
    cfg["inputs"] = [str(ws / p) for p in cfg["inputs"]]
    out = tmp_path / "o"
    shutil.copytree(ws / "out", out)
    c = tmp_path / "cfg.json"
    c.write_text(json.dumps(cfg))
    assert main(["fit", "--config", str(c), "--out", str(out), "--model", "qrh1"]) == 2
    # best iterate (here the initialization) is still written
    assert (out / "model_qrh1.json").exists()


def test_model_json_round_trip(workspace):
    ws, _ = workspace
    run(ws, "fit", "--model", "qrh1")
    path = ws / "out" / "model_qrh1.json"
    p = load_model(path)
    assert isinstance(p, Qrh1Params)
    assert json.dumps(p.to_dict(), indent=1, sort_keys=True) + "\n" == path.read_text()


def test_simulate_seed_reproducible(workspace, tmp_path):
    ws, _ = workspace
    run(ws, "fit", "--model", "qrh1")
    run(ws, "fit", "--model", "qrh2-ls")
    for m in ("model_qrh1.json", "model_qrh2-ls.json"):
        mp = str(ws / "out" / m)
        assert run(ws, "simulate", "--model", mp) == 0
        name = "sim_" + m.replace(".json", ".csv")
        a = (ws / "out" / name).read_bytes()
        assert run(ws, "simulate", "--model", mp) == 0
        assert (ws / "out" / name).read_bytes() == a
        assert run(ws, "simulate", "--model", mp, "--seed", "99") == 0
        assert (ws / "out" / name).read_bytes() != a
    inv = pd.read_csv(ws / "out" / "invariant_model_qrh1.csv")
    assert inv["probability"].sum() == pytest.approx(1.0)


def test_diagnose_and_compare(workspace):
    ws, _ = workspace
    for m in ("qr", "qrh1", "hawkes", "hawkes8", "qrh2-ls", "qrh2-mle"):
        run(ws, "fit", "--model", m)
    out = ws / "out"
    assert run(ws, "diagnose", "--model", str(out / "model_qrh1.json")) == 0
    assert run(ws, "diagnose", "--model", str(out / "model_qrh2-mle.json")) == 0
    for name in ("residuals_model_qrh1.csv", "conditional_model_qrh1.csv", "qq_model_qrh1.csv",
                 "endogeneity_model_qrh1.csv", "f_vs_imbalance_model_qrh2-mle.csv", "diagnose_model_qrh1.json"):
        assert (out / name).exists(), name
    models = [str(out / f"model_{m}.json") for m in ("qr", "qrh1", "hawkes")]
    assert run(ws, "compare", *sum((["--model", m] for m in models), [])) == 0
    rep = json.loads((out / "comparison.json").read_text())
    by = {m["name"]: m for m in rep["models"]}
    assert by["model_qrh1"]["loglik"] >= by["model_qr"]["loglik"]
    # only nested pairs are tested
    assert {(t["null"], t["alt"]) for t in rep["lr_tests"]} == {("model_qr", "model_qrh1"),
                                                                ("model_hawkes", "model_qrh1")}
    test = rep["lr_tests"][0]
    assert test["df"] == by["model_qrh1"]["n_params"] - by["model_qr"]["n_params"] == 3 * 3 * 2
    for m in rep["models"]:
        assert m["aic"] == 2 * m["n_params"] - 2 * m["loglik"]
        assert m["bic"] == m["n_params"] * np.log(rep["n_events"]) - 2 * m["loglik"]
    two = [str(out / f"model_{m}.json") for m in ("hawkes8", "qrh2-mle")]
    assert run(ws, "compare", *sum((["--model", m] for m in two), [])) == 0
    rep = json.loads((out / "comparison.json").read_text())
    (test,) = rep["lr_tests"]
    # counts follow the D + D^2 U + D S convention (400 for the 5x5, U=3 case)
    assert test["df"] == 8 * 9 and test["lr"] >= 0


def test_input_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("ts,bid_px,bid_sz,ask_px,ask_sz,trade_sz,trade_side\n0.1,100,5,101,7,0,none\n0.2,101,5,100,7,0,none\n")
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"inputs": ["bad.csv"]}))
    assert main(["preprocess", "--config", str(c)]) == 1
    err = capsys.readouterr().err
    assert "bad.csv" in err and "line 3" in err
    c.write_text(json.dumps({"inputs": ["missing.csv"]}))
    assert main(["preprocess", "--config", str(c)]) == 1
    c.write_text(json.dumps({"inputs": [], "bogus": 1}))
    assert main(["preprocess", "--config", str(c)]) == 1
    c.write_text(json.dumps({"inputs": []}))
    assert main(["fit", "--config", str(c), "--model", "qrh1"]) == 1
    assert main(["diagnose", "--config", str(c), "--model", str(tmp_path / "nope.json")]) == 1
