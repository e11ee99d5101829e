import json

import pytest

from mlcollapse.cli import main
from mlcollapse.config import DEFAULT_THRESHOLDS, load_config, parse_config
from mlcollapse.errors import ConfigError
from mlcollapse.label_space import LabelDistribution

SMALL = {
    "scenario": {"kind": "balanced", "K": 4, "n1": 6, "n2": 2},
    "ufm": {"replicas": 2, "restarts": 3, "seed": 7},
    "c1_grid": [0.5, 1, 2],
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc, indent=2))
    return str(p)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_spectrum_block_degenerate(tmp_path, capsys):
    table = LabelDistribution(4, {(2, (0, 1)): 5, (2, (2, 3)): 5}).to_json_dict()
    cfg = write(tmp_path, {"scenario": {"kind": "custom", "table": table}})
    code, out, _ = run(["spectrum", "--config", cfg, "--out", str(tmp_path / "o"), "--format", "both"], capsys)
    assert code == 0 and "degenerate (iii)" in out
    doc = json.loads((tmp_path / "o" / "spectrum.json").read_text())
    assert doc["spectra"]["2"]["kappa"] == 0.0
    assert (tmp_path / "o" / "spectrum.csv").read_text().startswith("run_id,metric,value\n")


def test_spectrum_balanced_large_scenario(tmp_path, capsys):
    cfg = write(tmp_path, {"scenario": {"kind": "balanced", "K": 10, "n1": 3100, "n2": 200}})
    code, out, _ = run(["spectrum", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "o" / "spectrum.json").read_text())
    assert doc["spectra"]["1"]["kappa"] == pytest.approx(0.1, abs=1e-12)
    assert doc["N"] == 40000


def test_run_is_byte_deterministic(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(["run", "--config", cfg, "--out", str(tmp_path / name), "--format", "both"], capsys)
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"checkpoint.json", "bounds.json", "diagnostics.json", "metrics.csv", "bound_stages.csv"}
    assert b"\r" not in outs[0]["metrics.csv"]


def test_seed_flag_changes_run(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    run(["run", "--config", cfg, "--out", str(tmp_path / "a")], capsys)
    run(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8", "--restarts", "2"], capsys)
    a = json.loads((tmp_path / "a" / "checkpoint.json").read_text())
    b = json.loads((tmp_path / "b" / "checkpoint.json").read_text())
    assert b["config"]["ufm"]["seed"] == 8 and b["convergence"]["restarts"] == 2
    assert a["state"]["W"] != b["state"]["W"]


def test_checkpoint_contents_and_diagnose(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    run(["run", "--config", cfg, "--out", str(tmp_path / "r")], capsys)
    ck = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
    assert ck["format"] == "mlcollapse-checkpoint/1"
    assert len(ck["state"]["W"]) == 4 and all(len(row) == 4 for row in ck["state"]["W"])
    assert "2/0,1" in ck["state"]["features"] and len(ck["state"]["features"]["2/0,1"]) == 2
    assert ck["convergence"]["converged"] and ck["config"]["ufm"]["seed"] == 7
    assert LabelDistribution.from_json_dict(ck["distribution"]).N == 4 * 6 + 6 * 2
    code, _, _ = run(["diagnose", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--out", str(tmp_path / "d")], capsys)
    assert code == 0
    assert (tmp_path / "d" / "diagnostics.json").read_bytes() == (tmp_path / "r" / "diagnostics.json").read_bytes()
    code, _, _ = run(["bounds", "--config", cfg, "--checkpoint", str(tmp_path / "r" / "checkpoint.json"), "--out", str(tmp_path / "b")], capsys)
    assert code == 0
    b = json.loads((tmp_path / "b" / "bounds.json").read_text())
    assert len(b["grid"]) == 9 and b["all_hold"]
    assert set(b["tuned"]["c1"]) == {"1", "2"}


def test_nonconvergence_exit_code_still_writes(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["ufm"]["max_iters"] = 2
    code, _, _ = run(["run", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert json.loads((tmp_path / "o" / "checkpoint.json").read_text())["convergence"]["converged"] is False
    assert (tmp_path / "o" / "diagnostics.json").exists()


def test_threshold_failure_exit_code(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    doc["thresholds"] = {"centering": 1e-30}
    code, out, _ = run(["run", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "centering: FAIL" in out


def test_degenerate_bounds_exit_code(tmp_path, capsys):
    table = LabelDistribution(4, {(2, (0, 1)): 5, (2, (2, 3)): 5}).to_json_dict()
    cfg = write(tmp_path, {"scenario": {"kind": "custom", "table": table}, "ufm": {"restarts": 1}})
    code, _, err = run(["bounds", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "non-degeneracy" in err


def test_output_dir_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OUTPUT_DIR", str(tmp_path / "env"))
    cfg = write(tmp_path, {"scenario": {"kind": "balanced", "K": 3, "n1": 2}, "output": {"dir": str(tmp_path / "cfg")}})
    assert run(["spectrum", "--config", cfg], capsys)[0] == 0
    assert (tmp_path / "env" / "spectrum.json").exists() and not (tmp_path / "cfg").exists()


@pytest.mark.parametrize(
    "text,match",
    [
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2},\n "ufm": {"seed": 1,}}', "line 2"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2}, "extra": 1}', "config.extra"),
        ('{\n"scenario": {"kind": "balanced", "K": 4, "n1": 2},\n"ufm": {"lambda_w": 0}\n}', r"ufm\.lambda_w.*\(line 3\)"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2}, "c1": {"1": 1.0, "2": 2.0}}', r"config\.c1"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2}, "c1": -1}', r"config\.c1"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2, "n2": 1}, "c1_grid": {"1": [1.0]}}', r"config\.c1_grid"),
        ('{"scenario": {"kind": "balanced", "K": 4}}', "n1"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2}, "output": {"format": "xml"}}', "output.format"),
        ('{"scenario": {"kind": "balanced", "K": 4, "n1": 2}, "thresholds": {"nc9": 1}}', "thresholds.nc9"),
        ('{"ufm": {}}', "scenario"),
    ],
)
def test_config_errors(tmp_path, capsys, text, match):
    cfg = write(tmp_path, text)
    with pytest.raises(ConfigError, match=match):
        load_config(cfg)
    code, _, err = run(["spectrum", "--config", cfg], capsys)
    assert code == 1 and "config error" in err


def test_missing_config_file(capsys):
    code, _, err = run(["spectrum", "--config", "/nonexistent/x.json"], capsys)
    assert code == 1


def test_config_defaults_and_overrides(tmp_path):
    cfg = parse_config({"scenario": {"kind": "balanced", "K": 4, "n1": 2}})
    assert cfg.thresholds == DEFAULT_THRESHOLDS and cfg.ufm.restarts == 10
    assert cfg.grid_for(1) == (0.25, 0.5, 1.0, 2.0, 4.0)
    o = cfg.with_overrides(seed=3, restarts=None, out_dir=str(tmp_path), fmt="csv")
    assert o.ufm.seed == 3 and o.ufm.restarts == 10 and o.fmt == "csv"
    echo = o.echo()
    assert parse_config(echo).ufm == o.ufm


def test_verify_usage_and_faults(tmp_path, capsys):
    code, _, err = run(["verify", "--trials", "0"], capsys)
    assert code == 1 and "trials" in err
    code, out, err = run(["verify", "--trials", "50", "--inject-fault", "affine_sign"], capsys)
    assert code == 3 and "affine_bound" in err and "affine_tightness" in err
    code, out, _ = run(["verify", "--trials", "50", "--seed", "4", "--out", str(tmp_path / "v"), "--format", "both"], capsys)
    assert code == 0 and "shift_invariance: 50/50 passed" in out
    doc = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert doc["ok"] and {p["name"] for p in doc["properties"]} >= {
        "shift_invariance", "affine_bound", "spectral_lower_bound", "trace_inequality", "interface_inequality",
        "pal_gradient", "ufm_gradient", "scaling_identity",
    }
    code, _, _ = run(["verify", "--trials", "20", "--inject-fault", "grad_sign"], capsys)
    assert code == 3


def test_unknown_command(capsys):
    assert run(["frobnicate"], capsys)[0] == 1
