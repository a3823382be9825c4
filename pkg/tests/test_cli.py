import hashlib
import json
import time

import pytest

from tdciv.cli import main

TOY = {"reps": 2, "data": {"n_samples": 256, "horizon": 5},
       "model": {"epochs": 2, "hidden": 16, "fc_hidden": 16}}


def _config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(cfg, out, jobs=None):
    extra = ["--jobs", str(jobs)] if jobs else []
    for cmd in ("generate", "train", "estimate", "evaluate"):
        assert main([cmd, "--config", cfg, "--out", str(out)] + extra) == 0, cmd


def test_generate_writes_replicates_and_manifest(tmp_path):
    cfg = _config(tmp_path, {"reps": 30, "data": {"n_samples": 20, "horizon": 4}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert len(manifest["replicates"]) == 30
    assert len({r["seed"] for r in manifest["replicates"]}) == 30
    assert len(list((tmp_path / "a" / "data").glob("rep_*.csv"))) == 30
    assert manifest["config_hash"] == json.loads((tmp_path / "a" / "config.json").read_text())["config_hash"]


def test_generate_is_reproducible_and_seed_sensitive(tmp_path):
    cfg = _config(tmp_path, {"reps": 3, "data": {"n_samples": 30, "horizon": 4}})
    for name, seed in (("a", "5"), ("b", "5"), ("c", "6")):
        assert main(["generate", "--config", cfg, "--seed", seed, "--out", str(tmp_path / name)]) == 0
    a, b, c = (_hashes(tmp_path / n / "data") for n in "abc")
    assert a == b and a != c


def test_config_echo_is_fully_resolved(tmp_path):
    cfg = _config(tmp_path, {"reps": 1, "data": {"n_samples": 10, "horizon": 3}})
    main(["generate", "--config", cfg, "--out", str(tmp_path / "o")])
    echo = json.loads((tmp_path / "o" / "config.json").read_text())["config"]
    assert echo["model"]["hidden"] == 128 and echo["model"]["epochs"] == 100
    assert echo["model"]["batch_size"] == 128 and echo["model"]["keep_prob"] == 0.8
    assert echo["data"]["p_order"] == 1 and echo["reps"] == 1


def test_invalid_order_names_both_values(tmp_path, capsys):
    cfg = _config(tmp_path, {"data": {"p_order": 10, "horizon": 10}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "p_order (10)" in err and "horizon (10)" in err


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"data": {"bogus": 1}}, {"model": {"hidden_units": 3}},
                                 {"methods": ["magic"]}, {"reps": 0}])
def test_bad_config_is_usage_error(tmp_path, doc):
    assert main(["generate", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_train_before_generate_is_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path / "empty")]) == 2


def test_estimate_without_checkpoint(tmp_path):
    cfg = _config(tmp_path, {"reps": 1, "data": {"n_samples": 64, "horizon": 4}})
    out = str(tmp_path / "o")
    main(["generate", "--config", cfg, "--out", out])
    assert main(["estimate", "--config", cfg, "--out", out]) == 2


def test_civ_check_history_set(capsys):
    assert main(["civ-check", "--paper-dag", "4", "--t", "3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["valid"] and doc["witness_path"] is None


def test_civ_check_without_current_z(capsys):
    assert main(["civ-check", "--paper-dag", "4", "--t", "3", "--drop", "Z[3]"]) == 1
    doc = json.loads(capsys.readouterr().out)
    assert doc["failed"] == "exclusion"
    assert doc["witness_path"][0] == "S[3]" and doc["witness_path"][-1] == "Y[4]"


def test_civ_check_explicit_nodes(tmp_path, capsys):
    dag = tmp_path / "g.dag"
    dag.write_text("S[1] -> W[1]\nW[1] -> Y[2]\nU[1] -> W[1]\nU[1] -> Y[2]\n")
    assert main(["civ-check", "--dag", str(dag), "--s", "S[1]", "--w", "W[1]", "--y", "Y[2]", "--cond", ""]) == 0
    assert main(["civ-check", "--dag", str(dag), "--s", "U[1]", "--w", "W[1]", "--y", "Y[2]", "--cond", ""]) == 1


def test_civ_check_parse_error_has_line(tmp_path, capsys):
    dag = tmp_path / "bad.dag"
    dag.write_text("S[1] -> W[1]\nW[1] => Y[2]\n")
    assert main(["civ-check", "--dag", str(dag), "--t", "1"]) == 2
    assert "line 2" in capsys.readouterr().err


def test_civ_check_unknown_node(capsys):
    assert main(["civ-check", "--paper-dag", "3", "--t", "2", "--cond", "Q[1]"]) == 2


def test_civ_check_requires_target():
    assert main(["civ-check", "--paper-dag", "3"]) == 2


def test_toy_pipeline(tmp_path):
    cfg = _config(tmp_path, TOY)
    start = time.time()
    _pipeline(cfg, tmp_path / "o")
    assert time.time() - start < 300
    rows = (tmp_path / "o" / "reports" / "aggregate.csv").read_text().splitlines()[1:]
    methods = [r.split(",")[1] for r in rows]
    assert sorted(set(methods)) == ["naive", "oracle", "tdciv"]
    for m in set(methods):
        assert methods.count(m) == 5 - 1
    summary = json.loads((tmp_path / "o" / "reports" / "summary.json").read_text())
    assert set(summary["methods"]) == {"naive", "oracle", "tdciv"}


def test_pipeline_is_byte_identical_across_runs_and_jobs(tmp_path):
    cfg = _config(tmp_path, TOY)
    _pipeline(cfg, tmp_path / "a")
    _pipeline(cfg, tmp_path / "b")
    _pipeline(cfg, tmp_path / "c", jobs=2)
    a, b, c = (_hashes(tmp_path / n) for n in "abc")
    assert a == b
    assert any(k.startswith("models/") for k in a)
    # the echoed config records the worker count; every product is unchanged
    a.pop("config.json")
    c.pop("config.json")
    assert a == c


def test_weak_instrument_failures_are_counted(tmp_path):
    # a constant-instrument panel: every oracle step is weak
    cfg = _config(tmp_path, {"reps": 2, "data": {"n_samples": 200, "horizon": 3}, "methods": ["naive", "oracle"]})
    out = tmp_path / "o"
    main(["generate", "--config", cfg, "--out", str(out)])
    for f in sorted((out / "data").glob("rep_*.csv")):
        lines = f.read_text().splitlines()
        col = lines[0].split(",").index("s_true")
        fixed = [lines[0]] + [",".join(v if i != col else "1.0" for i, v in enumerate(row.split(",")))
                              for row in lines[1:]]
        f.write_text("\n".join(fixed) + "\n")
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert summary["methods"]["oracle"]["failures"] == 2
    assert summary["methods"]["naive"]["replicates"] == 2


def test_oracle_estimate_on_defaults(tmp_path):
    cfg = _config(tmp_path, {"reps": 1, "data": {"n_samples": 8000}, "methods": ["oracle"]})
    out = tmp_path / "o"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    assert main(["estimate", "--oracle", "--config", cfg, "--out", str(out)]) == 0
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert summary["methods"]["oracle"]["mean_abs_error"] <= 0.05
