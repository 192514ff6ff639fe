import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from shflow import cli
from shflow.errors import ConfigError

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

SMALL = {
    "model": {"kind": "gaussian", "c": 10.0},
    "data": {"synthetic": {"N": 60, "d": 2, "seed": 0}},
    "coreset": {"M": 6, "seed": 0},
    "reference": {"mean": 0.0, "diag_cov": 1.0},
    "train": {"n_iters": 20, "S": 20, "eval_every": 10, "n_blocks": 2,
              "leapfrogs_per_block": 3, "eval_n_mc": 10, "initial_step_size": 0.05},
    "eval": {"metrics": ["kl", "mean_error", "cov_error", "energy", "ksd"], "n_samples": 50},
}


def write_cfg(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return str(p)


class TestConfig:
    @pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
    def test_shipped_configs_parse(self, name):
        cfg = cli.load_config(os.path.join(CONFIGS, name))
        assert cfg.model.kind in cli.MODEL_KINDS

    def test_unknown_key(self):
        raw = json.loads(json.dumps(SMALL))
        raw["train"]["learnig_rate"] = 0.1
        with pytest.raises(ConfigError, match="learnig_rate"):
            cli.parse_config(raw)

    def test_both_data_sources(self):
        raw = json.loads(json.dumps(SMALL))
        raw["data"]["csv"] = "x.csv"
        with pytest.raises(ConfigError):
            cli.parse_config(raw)

    def test_round_trip_through_dict(self):
        cfg = cli.parse_config(SMALL)
        assert cli.parse_config(cli._config_for_parse(cfg.to_dict())) == cfg


def test_gen_data_and_reference(tmp_path):
    out, ref = tmp_path / "d.csv", tmp_path / "r.json"
    assert cli.main(["gen-data", "--kind", "logreg", "--N", "300", "--d", "2", "--out", str(out),
                     "--reference-out", str(ref), "--reference-samples", "5000"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1] == "x0,x1,y" and len(lines) == 302
    r = json.loads(ref.read_text())
    assert len(r["mean"]) == 3 and r["provenance"]["method"] == "laplace+importance"


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        cli.main(["gen-data", "--N", "20", "--d", "3", "--seed", "4", "--out", str(tmp_path / name)])
    assert (tmp_path / "a").read_text() == (tmp_path / "b").read_text()


def test_train_sample_eval(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    run = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(run)]) == 0
    ckpt = run / "checkpoint.json"
    assert ckpt.exists() and (run / "trace.csv").exists()
    samples = tmp_path / "s.csv"
    assert cli.main(["sample", "--checkpoint", str(ckpt), "--n", "30", "--out", str(samples)]) == 0
    rows = samples.read_text().splitlines()
    assert rows[1] == "theta0,theta1,log_density" and len(rows) == 32
    rep = tmp_path / "e.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--n", "50", "--trace-n-mc", "10",
                     "--out", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert set(report["metrics"]) == set(SMALL["eval"]["metrics"])
    assert report["elbo"]["mean"] <= report["log_evidence"] + 5 * report["elbo"]["stderr"]
    kinds = [r["kind"] for r in report["elbo_trace"]]
    assert kinds.count("refresh") == 2


@pytest.mark.parametrize("method", ["uniform", "tempered"])
def test_train_baseline_methods(tmp_path, method):
    raw = json.loads(json.dumps(SMALL)) | {"method": method}
    cfg = write_cfg(tmp_path, raw)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    payload = json.loads((tmp_path / "r" / "checkpoint.json").read_text())
    w = np.exp(payload["params"]["log_weights"])
    assert np.allclose(w, 10.0)


def test_replicates(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r"),
                     "--replicates", "2"]) == 0
    printed = capsys.readouterr().out.split()
    assert len(printed) == 2 and all(os.path.exists(p) for p in printed)


def test_csv_data_source(tmp_path):
    data = tmp_path / "d.csv"
    cli.main(["gen-data", "--kind", "linreg", "--N", "100", "--d", "2", "--out", str(data)])
    raw = json.loads(json.dumps(SMALL))
    raw["model"] = {"kind": "linreg"}
    raw["data"] = {"csv": str(data), "response": "y"}
    raw["eval"]["metrics"] = ["ksd"]
    cfg = write_cfg(tmp_path, raw)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, {"model": {"kind": "probit"}, "data": {}})
        assert cli.main(["train", "--config", cfg]) == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert cli.main(["sample", "--checkpoint", str(tmp_path / "none.json"),
                         "--out", str(tmp_path / "s.csv")]) == cli.EXIT_CONFIG

    def test_numerical_failure(self, tmp_path):
        raw = json.loads(json.dumps(SMALL))
        raw["train"].update(initial_step_size=50.0, max_consecutive_divergent=2,
                            leapfrogs_per_block=20)
        raw["reference"]["diag_cov"] = 100.0
        cfg = write_cfg(tmp_path, raw)
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == cli.EXIT_NUMERICAL

    def test_theory_pass_and_fail(self, tmp_path):
        assert cli.main(["theory", "refresh-identity", "--out", str(tmp_path / "a.json")]) == 0
        assert cli.main(["theory", "lower-bound", "--mu", "1", "--sigma", "1",
                         "--out", str(tmp_path / "b.json")]) == 0
        assert cli.main(["theory", "lower-bound", "--out", str(tmp_path / "c.json")]) == \
            cli.EXIT_CHECK_FAILED
        rec = json.loads((tmp_path / "c.json").read_text())
        assert rec["status"] == "fail" and rec["unit_beta_margin"] > 0

    def test_unknown_eval_metric(self, tmp_path):
        cfg = write_cfg(tmp_path, SMALL)
        cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"),
                         "--metrics", "mmd"]) == cli.EXIT_CONFIG


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "shflow", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.strip()
