import json
import math

import numpy as np
import pytest

from pacsets.cli import main
from pacsets.io import read_records, record_to_example, SchemaError


def run(argv, capsys=None):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr() if capsys else None
    return code, out


def write_jsonl(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return path


def cat_record(i, probs, label):
    with np.errstate(divide="ignore"):
        lp = np.log(np.asarray(probs, dtype=float)).tolist()
    return {"id": str(i), "kind": "categorical", "payload": lp, "true_label": label}


def test_alpha_examples(capsys):
    code, out = run(["alpha", "--n", 2, "--epsilon", 0.5, "--delta", 0.3, "--bound", "direct"], capsys)
    assert code == 0 and json.loads(out.out)["k_star"] == 0
    code, out = run(["alpha", "--n", 10, "--epsilon", 0.01, "--delta", 1e-5, "--bound", "direct"], capsys)
    assert code == 2 and json.loads(out.out)["min_n_direct"] == 1146
    code, out = run(["alpha", "--n", 20000, "--epsilon", 0.01, "--delta", 1e-5, "--bound", "vc"], capsys)
    assert code == 2 and json.loads(out.out)["feasible"] is False


@pytest.mark.parametrize("argv", [
    ["alpha", "--n", "abc", "--epsilon", "0.1", "--delta", "0.1"],
    ["alpha", "--n", "5", "--epsilon", "0.1", "--delta", "0.1", "--bound", "pac"],
    ["alpha", "--epsilon", "0.1", "--delta", "0.1"],
    ["alpha", "--n", "5", "--epsilon", "1.5", "--delta", "0.1"],
    ["frobnicate"],
    [],
])
def test_malformed_flags_exit_1(argv, capsys):
    code, _ = run(argv, capsys)
    assert code == 1


def test_fit_hand_trace(tmp_path, capsys):
    val = write_jsonl(tmp_path / "val.jsonl", [
        cat_record("a", [0.9, 0.1], 0),
        cat_record("b", [0.2, 0.8], 1),
        cat_record("c", [0.7, 0.3], 0),
        cat_record("d", [0.95, 0.05], 1),
    ])
    art = tmp_path / "art.json"
    code, _ = run(["fit", "--validation", val, "--epsilon", 0.5, "--delta", 0.5, "--no-calibrate", "-o", art], capsys)
    assert code == 0
    d = json.loads(art.read_text())
    assert d["k_star"] == 1 and d["tau"] is None
    assert d["T_hat"] == pytest.approx(-math.log(0.7), abs=1e-15)


def test_predict_and_eval_examples(tmp_path, capsys):
    art = tmp_path / "art.json"
    art.write_text(json.dumps({"tau": None, "T_hat": -math.log(0.25), "n": 10, "epsilon": 0.1, "delta": 0.1,
                               "bound": "direct", "k_star": 0, "effective_k": 0}))
    inp = write_jsonl(tmp_path / "x.jsonl", [cat_record("q", [0.5, 0.3, 0.2], 1), cat_record("r", [0.5, 0.3, 0.2], 0)])
    code, out = run(["predict", "--artifact", art, "--input", inp], capsys)
    assert code == 0
    lines = [json.loads(l) for l in out.out.splitlines()]
    assert lines[0]["set"]["labels"] == [0, 1] and lines[0]["covered"] is True
    code, out = run(["eval", "--artifact", art, "--input", inp], capsys)
    res = json.loads(out.out)
    assert code == 0 and res["error"] == 0.0 and res["valid"] is True and res["size_stats"]["median"] == 2.0


def test_schema_violation_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps(cat_record("a", [0.5, 0.5], 0)) + "\n"
                   + json.dumps({"id": "b", "kind": "gaussian", "payload": {"mean": [0, 0], "cov": [1, 2, 3, 1], "dim": 2}}) + "\n")
    code, out = run(["fit", "--validation", bad, "--epsilon", 0.5, "--delta", 0.5, "--no-calibrate"], capsys)
    assert code == 3 and ":2:" in out.err
    bad.write_text("{not json\n")
    code, out = run(["calibrate", "--input", bad], capsys)
    assert code == 3 and ":1:" in out.err


@pytest.mark.parametrize("rec", [
    {"id": "a", "kind": "categorical", "payload": [0.0, 0.0]},
    {"id": "a", "kind": "categorical", "payload": [-0.69314718, -0.69314718], "true_label": 2},
    {"id": "a", "kind": "gaussian", "payload": {"mean": [0, 0], "cov": [1, 0, 0], "dim": 2}},
    {"id": "a", "kind": "gaussian", "payload": {"mean": [0], "cov": [1], "dim": 1}, "true_label": [1, 2]},
    {"id": "a", "kind": "trajectory", "payload": {"x0": [0], "steps": []}},
    {"id": "a", "kind": "trajectory", "payload": {"x0": [0], "steps": [{"mean": [0, 1], "cov": [1]}]}},
    {"id": "a", "kind": "sphere", "payload": []},
    {"kind": "categorical", "payload": [0.0, -1e9]},
])
def test_schema_rejections(rec):
    with pytest.raises(SchemaError):
        record_to_example(rec)


def test_infeasible_fit_writes_artifact(tmp_path, capsys):
    val = write_jsonl(tmp_path / "v.jsonl", [cat_record(i, [0.5, 0.5], 0) for i in range(10)])
    art = tmp_path / "a.json"
    code, out = run(["fit", "--validation", val, "--epsilon", 0.01, "--delta", 1e-5, "--no-calibrate", "-o", art], capsys)
    assert code == 2
    d = json.loads(art.read_text())
    assert d["feasible"] is False and d["min_n_direct"] == 1146 and d["T_hat"] is None
    code, _ = run(["predict", "--artifact", art, "--input", val], capsys)
    assert code == 1


def _simulate(tmp_path, world, extra=()):
    paths = {}
    for split, seed in (("cal", 1), ("val", 2), ("test", 3)):
        p = tmp_path / f"{world}_{split}.jsonl"
        code, _ = run(["simulate", "--world", world, "--n", 300, "--seed", seed, "--prefix", split, "-o", p, *extra])
        assert code == 0
        paths[split] = p
    return paths


@pytest.mark.parametrize("world,extra", [
    ("categorical", []),
    ("gaussian", ["--dim", 1]),
    ("gaussian", ["--dim", 3, "--scale", 2.0]),
    ("trajectory", ["--horizon", 4, "--dim", 2, "--mc-samples", 1000]),
])
def test_round_trip_predict_eval(tmp_path, capsys, world, extra):
    p = _simulate(tmp_path, world, extra)
    art, sets = tmp_path / "art.json", tmp_path / "sets.jsonl"
    assert run(["fit", "--calibration", p["cal"], "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1,
                "-o", art], capsys)[0] == 0
    assert run(["predict", "--artifact", art, "--input", p["test"], "--box", "-o", sets], capsys)[0] == 0
    _, a = run(["eval", "--artifact", art, "--input", p["test"]], capsys)
    _, b = run(["eval", "--artifact", art, "--sets", sets], capsys)
    assert a.out == b.out
    # sizes survive the JSON round trip bit-exactly
    for line in sets.read_text().splitlines():
        rec = json.loads(line)
        assert json.loads(json.dumps(rec["size"])) == rec["size"]


def test_simulated_trajectory_records_replay_rollout(tmp_path):
    p = _simulate(tmp_path, "trajectory", ["--horizon", 5, "--dim", 2, "--mc-samples", 1000])
    ex = read_records(p["test"])[0]
    rec = json.loads(p["test"].read_text().splitlines()[0])
    steps = rec["payload"]["steps"]
    acc = np.cumsum([np.reshape(s["cov"], (2, 2)) for s in steps], axis=0)
    assert np.allclose(ex.forecast.step_covs, acc)
    assert np.allclose(ex.forecast.step_covs[2], 3 * np.eye(2))


def test_calibrate_then_fit_with_tau_file(tmp_path, capsys):
    p = _simulate(tmp_path, "trajectory", ["--horizon", 3, "--dim", 2, "--mc-samples", 1000])
    tau = tmp_path / "tau.json"
    assert run(["calibrate", "--input", p["cal"], "--per-step-tau", "-o", tau], capsys)[0] == 0
    assert len(json.loads(tau.read_text())["tau"]) == 3
    a1, a2 = tmp_path / "a1.json", tmp_path / "a2.json"
    run(["fit", "--tau-file", tau, "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1, "-o", a1], capsys)
    run(["fit", "--calibration", p["cal"], "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1, "-o", a2], capsys)
    assert a1.read_text() == a2.read_text()
    assert run(["calibrate", "--input", p["cal"], "--tau-mode", "per-step-dim", "-o", tau], capsys)[0] == 0
    assert np.shape(json.loads(tau.read_text())["tau"]) == (3, 2)


def test_overlapping_ids_rejected(tmp_path, capsys):
    p = _simulate(tmp_path, "categorical")
    code, out = run(["fit", "--calibration", p["val"], "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1], capsys)
    assert code == 1 and "share ids" in out.err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('epsilon = 0.5\n[alpha]\nn = 2\ndelta = 0.3\n')
    code, out = run(["alpha", "--config", cfg], capsys)
    assert code == 0 and json.loads(out.out)["k_star"] == 0
    code, out = run(["alpha", "--config", cfg, "--n", 10, "--epsilon", 0.01, "--delta", 1e-5], capsys)
    assert code == 2
    cfg.write_text("bogus = 1\n")
    assert run(["alpha", "--config", cfg], capsys)[0] == 1


def test_baseline_and_report(tmp_path, capsys):
    p = _simulate(tmp_path, "trajectory", ["--horizon", 4, "--dim", 2, "--mc-samples", 1000])
    code, out = run(["baseline", "--input", p["test"], "--epsilon", 0.1, "--sets-output", tmp_path / "b.jsonl"], capsys)
    assert code == 0 and json.loads(out.out)["n"] == 300
    art = tmp_path / "art.json"
    run(["fit", "--calibration", p["cal"], "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1, "-o", art], capsys)
    code, out = run(["report", "--artifact", art, "--input", p["test"]], capsys)
    lines = out.out.splitlines()
    assert lines[0] == "id,kind,step,size,covered" and len(lines) == 1 + 300 * 4


def test_verify_pac_and_sweep_commands(tmp_path, capsys):
    code, out = run(["verify-pac", "--world", "exp", "--n", 200, "--epsilon", 0.1, "--delta", 0.1,
                     "--trials", 100, "--records", tmp_path / "r.csv"], capsys)
    s = json.loads(out.out)
    assert code == 0 and s["trials"] == 100 and "seed_derivation" in s
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 101
    code, out = run(["verify-pac", "--world", "exp", "--n", 10, "--epsilon", 0.01, "--delta", 1e-5, "--trials", 100], capsys)
    assert code == 2
    code, out = run(["sweep", "--world", "gaussian", "--n", 300, "--epsilons", "0.05,0.1", "--deltas", "0.1"], capsys)
    assert code == 0 and len(out.out.splitlines()) == 3


def test_split_eval(tmp_path, capsys):
    p = _simulate(tmp_path, "categorical")
    art = tmp_path / "art.json"
    run(["fit", "--calibration", p["cal"], "--validation", p["val"], "--epsilon", 0.1, "--delta", 0.1, "-o", art], capsys)
    code, out = run(["eval", "--artifact", art, "--input", p["test"], "--split"], capsys)
    assert code == 0 and set(json.loads(out.out)["split"]) == {"correct", "incorrect"}
