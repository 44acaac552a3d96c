import json

import numpy as np
import pytest

from bxpqd.bexplain import load_ensemble
from bxpqd.cli import DEFAULTS, build_parser, main, resolve


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert _run("gen", "--per-class", 10, "--seed", 1, "--out", d / "d.pqds") == 0
    assert _run("train", "--data", d / "d.pqds", "--epochs", 1, "--seed", 2, "--ckpt", d / "m.ckpt") == 0
    assert _run("laplace", "--ckpt", d / "m.ckpt", "--data", d / "d.pqds", "--grid", "1e3,1e5",
                "--tune-samples", 2, "--out", d / "p.pqla") == 0
    return d


def _manifest(d):
    return [json.loads(x) for x in (d / "manifest.jsonl").read_text().splitlines()]


def test_pipeline_manifest(run_dir):
    entries = _manifest(run_dir)
    assert [e["command"] for e in entries[:3]] == ["gen", "train", "laplace"]
    lap = entries[2]
    assert lap["details"]["chosen_prior_precision"] in (1e3, 1e5)
    assert "tuning" not in lap["config"]
    assert set(lap["inputs"]) == {"m.ckpt", "d.pqds"}


def test_explain_modes_and_verify(run_dir, capsys):
    d = run_dir
    common = ["--ckpt", d / "m.ckpt", "--data", d / "d.pqds", "--window", 64, "--stride", 64]
    assert _run("explain", *common, "--out", d / "map.csv") == 0
    assert (d / "map.csv").read_text().splitlines()[0] == "index,value"
    assert _run("explain", *common, "--la", d / "p.pqla", "--S", 6, "--out", d / "e.pqex", "--json", d / "e.json",
                "--svg", d / "e.svg") == 0
    summary = json.loads((d / "e.json").read_text())
    assert set(summary["percentiles"]) == {"5", "25", "50", "75", "95"} and len(summary["map"]) == 640
    assert (d / "e.svg").read_text().startswith("<svg")
    assert load_ensemble(d / "e.pqex").S == 6
    assert _run("cluster", "--ensemble", d / "e.pqex", "--k", 2, "--out", d / "c.json") == 0
    assert json.loads((d / "c.json").read_text())["k"] == 2
    assert _run("verify", "--manifest", d / "manifest.jsonl") == 0
    assert "hashes verified" in capsys.readouterr().out


def test_eval_writes_csv_and_json(run_dir):
    d = run_dir
    assert _run("eval", "--ckpt", d / "m.ckpt", "--la", d / "p.pqla", "--data", d / "d.pqds", "--limit", 1,
                "--S", 3, "--alphas", "50", "--window", 64, "--stride", 64, "--out", d / "r.csv") == 0
    rows = [ln for ln in (d / "r.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 1 + 16 * 2 + 2
    assert json.loads((d / "r.json").read_text())["variants"] == ["map", "p50"]


def test_same_seed_gives_identical_bytes(tmp_path):
    for name in ("a", "b"):
        assert _run("gen", "--per-class", 2, "--seed", 42, "--splits", "1,0,0", "--out", tmp_path / f"{name}.pqds") == 0
    assert (tmp_path / "a.pqds").read_bytes() == (tmp_path / "b.pqds").read_bytes()


def test_precedence_flags_over_config_over_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "gen": {"per_class": 7}, "epsilon": 0.01}))
    parser = build_parser()
    s = resolve(parser.parse_args(["gen", "--config", str(cfg), "--seed", "9", "--out", "x"]), parser)
    assert s["seed"] == 9 and s["per_class"] == 7 and s["epsilon"] == 0.01
    assert s["snr_min"] == DEFAULTS["gen"]["snr_min"]


def test_manifest_line_replays(run_dir, tmp_path):
    gen = _manifest(run_dir)[0]
    gen["config"]["out"] = str(tmp_path / "again.pqds")
    line = tmp_path / "line.json"
    line.write_text(json.dumps(gen))
    assert _run("gen", "--config", line) == 0
    assert (tmp_path / "again.pqds").read_bytes() == (run_dir / "d.pqds").read_bytes()
    assert _run("train", "--config", line) == 1


def test_error_diagnostics(tmp_path, capsys):
    assert _run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 1
    assert "code=missing_file" in capsys.readouterr().err
    assert _run("gen") == 2
    assert "code=usage" in capsys.readouterr().err
    assert _run("gen", "--bogus") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert _run("gen", "--config", bad, "--out", tmp_path / "x") == 1
    assert "code=config" in capsys.readouterr().err


def test_cluster_rejects_large_k(run_dir, capsys):
    d = run_dir
    assert _run("explain", "--ckpt", d / "m.ckpt", "--la", d / "p.pqla", "--data", d / "d.pqds", "--window", 64,
                "--stride", 64, "--S", 3, "--out", d / "small.pqex") == 0
    assert _run("cluster", "--ensemble", d / "small.pqex", "--k", 4, "--out", d / "c4.json") == 1
    assert "code=config" in capsys.readouterr().err


def test_tampered_output_fails_verify(run_dir, tmp_path, capsys):
    d = tmp_path
    assert _run("gen", "--per-class", 1, "--splits", "1,0,0", "--out", d / "t.pqds") == 0
    with open(d / "t.pqds", "ab") as fh:
        fh.write(b"\0")
    assert _run("verify", "--manifest", d / "manifest.jsonl") == 1
    assert "code=hash_mismatch" in capsys.readouterr().err


def test_degenerate_posterior_explains_as_map(run_dir, tmp_path):
    d = run_dir
    assert _run("laplace", "--ckpt", d / "m.ckpt", "--data", d / "d.pqds", "--prior-precision", "1e30",
                "--out", tmp_path / "z.pqla") == 0
    assert _run("explain", "--ckpt", d / "m.ckpt", "--la", tmp_path / "z.pqla", "--data", d / "d.pqds",
                "--window", 64, "--stride", 64, "--S", 3, "--out", tmp_path / "z.pqex",
                "--json", tmp_path / "z.json") == 0
    summary = json.loads((tmp_path / "z.json").read_text())
    np.testing.assert_allclose(summary["percentiles"]["50"], summary["map"], atol=1e-6)
