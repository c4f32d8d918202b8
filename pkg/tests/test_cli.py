import json

import pytest

from smartgen.cli import run


def call(capsys, *argv):
    code = run(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth-gen -> build-vocab -> tokenize -> train -> rollout -> eval on a small corpus."""
    root = tmp_path_factory.mktemp("cli")
    steps = [
        ["synth-gen", "--count", 4, "--kind", "straight,intersection", "--n-agents", "2,3", "--horizon", 31,
         "--seed", 1, "--out-dir", root / "data"],
        ["build-vocab", "--scenarios", root / "data" / "scenarios", "--size", 64, "--road-size", 64,
         "--class", "vehicle", "--epsilon", 0.2, "--out", root / "vocab"],
        ["tokenize", "--in", root / "data" / "scenarios", "--vocab", root / "vocab" / "vocab.json",
         "--out", root / "tok"],
    ]
    for argv in steps:
        assert run(list(map(str, argv))) == 0, argv
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"model": "smart-1m-tiny", "lr": 1e-3, "batch_size": 2, "max_steps": 4,
                               "eval_every": 2}))
    assert run(list(map(str, ["train", "--config", cfg, "--data-dir", root / "data" / "scenarios",
                              "--vocab", root / "vocab" / "vocab.json", "--out", root / "train"]))) == 0
    assert run(list(map(str, ["rollout", "--ckpt", root / "train" / "model.ckpt", "--scenario",
                              root / "data" / "scenarios", "--n", 2, "--top-k", 3, "--out", root / "roll"]))) == 0
    assert run(list(map(str, ["eval", "--gt", root / "data" / "scenarios", "--rollouts", root / "roll" / "rollouts",
                              "--out", root / "eval"]))) == 0
    return root


def test_pipeline_outputs(pipeline):
    r = pipeline
    assert len(list((r / "data" / "scenarios").glob("*.json"))) == 4
    assert len(list((r / "tok" / "tokens").glob("*.json"))) == 4
    assert (r / "train" / "model.ckpt").read_bytes()[:4] == b"SMRT"
    assert (r / "train" / "curve.csv").read_text().startswith("step,")
    rep = json.loads((r / "eval" / "report.json").read_text())
    assert rep["artifact"] == "report" and rep["n_scenarios"] == 4 and 0 <= rep["mean"]["meta"] <= 1
    assert (r / "eval" / "report.csv").exists()
    vocab = json.loads((r / "vocab" / "vocab.json").read_text())
    assert vocab["schema"] == 1
    for d in ("data", "vocab", "tok", "train", "roll", "eval"):
        m = json.loads((r / d / "manifest.json").read_text())
        assert m["schema"] == 1 and m["tool"] == "smartgen" and "config" in m and "version" in m
    m = json.loads((r / "roll" / "manifest.json").read_text())
    assert m["config"]["n_rollouts"] == 2 and "step_ms_mean" in m["timing"]
    assert all(len(h) == 64 for h in m["inputs"].values())


def test_rerun_is_byte_identical(pipeline, tmp_path):
    r = pipeline
    argv = ["rollout", "--ckpt", r / "train" / "model.ckpt", "--scenario", r / "data" / "scenarios", "--n", 2,
            "--top-k", 3, "--out", tmp_path]
    assert run(list(map(str, argv))) == 0
    for f in (r / "roll" / "rollouts").glob("*.json"):
        assert (tmp_path / "rollouts" / f.name).read_bytes() == f.read_bytes()


def test_single_scenario_file(pipeline, tmp_path):
    f = sorted((pipeline / "data" / "scenarios").glob("*.json"))[0]
    argv = ["rollout", "--ckpt", pipeline / "train" / "model.ckpt", "--scenario", f, "--n", 1, "--out", tmp_path]
    assert run(list(map(str, argv))) == 0
    assert len(list((tmp_path / "rollouts").glob("*.json"))) == 1


def test_usage_errors(capsys):
    code, _, err = call(capsys, "train", "--bogus-flag")
    assert code == 2 and "ERROR usage" in err
    code, _, err = call(capsys)
    assert code == 2


def test_missing_vocab_names_path(capsys, pipeline):
    missing = pipeline / "nowhere" / "vocab.json"
    code, _, err = call(capsys, "train", "--data-dir", pipeline / "data" / "scenarios", "--vocab", missing)
    assert code == 3 and str(missing) in err and err.count("\n") == 1


def test_invalid_config_field_path(capsys, pipeline, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": -1}))
    code, _, err = call(capsys, "train", "--config", cfg, "--data-dir", pipeline / "data" / "scenarios",
                        "--vocab", pipeline / "vocab" / "vocab.json", "--out", tmp_path)
    assert code == 3 and "train.lr" in err
    cfg.write_text(json.dumps({"nope": 1}))
    code, _, err = call(capsys, "scaling-fit", "--config", cfg)
    assert code == 3 and "nope" in err


def test_scaling_fit(capsys, tmp_path):
    import math

    pts = tmp_path / "points.csv"
    pts.write_text("x,loss\n" + "\n".join(f"{x},{math.exp(-0.157 * math.log(x) + 1.52)}" for x in (1e5, 1e6, 1e7)))
    code, out, _ = call(capsys, "scaling-fit", "--in", pts, "--out", tmp_path / "fit")
    assert code == 0 and "beta -0.157000" in out
    fit = json.loads((tmp_path / "fit" / "fit.json").read_text())
    assert abs(fit["beta"] + 0.157) < 1e-9 and (tmp_path / "fit" / "fit_line.csv").exists()


def test_threads_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SMART_THREADS", "0")
    pts = tmp_path / "p.csv"
    pts.write_text("x,loss\n1,2\n10,1\n")
    code, _, err = call(capsys, "scaling-fit", "--in", pts, "--out", tmp_path)
    assert code == 3 and "SMART_THREADS" in err
    monkeypatch.setenv("SMART_THREADS", "1")
    assert call(capsys, "scaling-fit", "--in", pts, "--out", tmp_path)[0] == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["threads"] == 1


@pytest.mark.slow
def test_selftest_passes(capsys):
    code, out, _ = call(capsys, "selftest")
    assert code == 0
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert lines and all(l.startswith("PASS") for l in lines)
