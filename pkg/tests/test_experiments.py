import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from sparse_bvm import cli
from sparse_bvm.design import read_design_csv, sparse_row_envelope
from sparse_bvm.diagnostics import AUDIT_ROW_NAMES
from sparse_bvm.experiments import (ConfigError, bundled_config, canonical_json, config_hash, dump_config,
                                    generate_dataset, load_config, make_design, read_metrics_csv,
                                    read_response_csv, validate_config)

EXAMPLE = str(bundled_config("example_gaussian"))


def base_config(**over):
    cfg = {"family": {"kind": "logistic"}, "design": {"n": 50, "G": 4},
           "truth": {"support": [1], "magnitude": 1.0}, "seed": 3}
    cfg.update(over)
    return cfg


def run(capsys, *args):
    code = cli.main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_itemized_errors(self):
        bad = base_config(alpha=1.5, level=2.0, mode="fast", extra=1)
        bad["family"] = {"kind": "cauchy"}
        with pytest.raises(ConfigError) as info:
            validate_config(bad)
        probs = info.value.problems
        assert len(probs) == 5
        assert any("alpha" in p for p in probs) and any("unknown key 'extra'" in p for p in probs)

    def test_truth_requires_one_specification(self):
        cfg = base_config(truth={"support": [0], "magnitude": 1.0, "beta_min_multiple": 3})
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_negbin_needs_size(self):
        with pytest.raises(ConfigError):
            validate_config(base_config(family={"kind": "negbin_log"}))

    def test_seed_range(self):
        with pytest.raises(ConfigError):
            validate_config(base_config(seed=2**64))
        assert validate_config(base_config(seed=2**64 - 1))["seed"] == 2**64 - 1

    def test_roundtrip_canonical(self):
        cfg = load_config(EXAMPLE)
        again = validate_config(yaml.safe_load(dump_config(cfg)))
        assert canonical_json(again) == canonical_json(cfg)
        assert config_hash(again) == config_hash(cfg)

    def test_missing_or_malformed_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("family: [unclosed")
        with pytest.raises(ConfigError):
            load_config(bad)


class TestGeneration:
    def test_orthonormal_square(self):
        d = make_design({"n": 12, "group_sizes": [2, 1] * 4, "generator": "orthonormal"},
                        np.random.default_rng(0))
        assert np.allclose(d.x.T @ d.x / 12, np.eye(12), atol=1e-12)

    def test_iid_normalized_columns_and_envelope(self):
        d = make_design({"n": 40, "group_sizes": [1] * 6, "generator": "iid_gaussian_normalized"},
                        np.random.default_rng(1))
        assert np.allclose(np.linalg.norm(d.x, axis=0), math.sqrt(40), rtol=1e-13)
        assert sparse_row_envelope(d, 1) == np.max(np.abs(d.x))

    def test_duplicated_pair(self):
        d = make_design({"n": 30, "group_sizes": [2, 2, 1], "generator": "duplicated_pair"},
                        np.random.default_rng(2))
        assert np.array_equal(d.x[:, :2], d.x[:, 2:4])

    def test_fixed_seed_identical_hash(self):
        cfg = validate_config(base_config())
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert a.digest() == b.digest()
        assert generate_dataset(cfg, seed=4).digest() != a.digest()
        assert a.provenance["config_hash"] == config_hash(cfg)

    def test_beta_min_calibration_sets_block_norms(self):
        cfg = validate_config(base_config(truth={"support": [0, 2], "beta_min_multiple": 4.0}))
        ds = generate_dataset(cfg)
        norms = np.abs(ds.truth.values)
        assert np.allclose(norms, norms[0]) and ds.truth.values[0] > 0 > ds.truth.values[1]


class TestCli:
    def test_every_subcommand(self, tmp_path, capsys):
        for cmd in ("generate", "fit", "diagnose", "coverage", "audit"):
            code, out, err = run(capsys, cmd, "--config", EXAMPLE, "--out", str(tmp_path / cmd))
            assert code == 0, err
            assert json.loads(out)["command"] == cmd

    def test_generate_roundtrip(self, tmp_path, capsys):
        assert run(capsys, "generate", "--config", EXAMPLE, "--out", str(tmp_path))[0] == 0
        ds = generate_dataset(load_config(EXAMPLE))
        design = read_design_csv(tmp_path / "design.csv")
        y, tau = read_response_csv(tmp_path / "response.csv")
        assert np.array_equal(design.x, ds.design.x) and np.array_equal(y, ds.y) and np.array_equal(tau, ds.tau)
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["digest"] == ds.digest() and truth["config_hash"] == config_hash(load_config(EXAMPLE))

    def test_from_file_generator(self, tmp_path, capsys):
        run(capsys, "generate", "--config", EXAMPLE, "--out", str(tmp_path))
        cfg = load_config(EXAMPLE)
        cfg["design"].update(generator="from_file", path=str(tmp_path / "design.csv"))
        ds = generate_dataset(validate_config(cfg))
        assert np.array_equal(ds.design.x, generate_dataset(load_config(EXAMPLE)).design.x)

    def test_exact_and_laplace_agree_on_gaussian(self, tmp_path, capsys):
        for mode in ("exact", "laplace"):
            assert run(capsys, "fit", "--config", EXAMPLE, "--mode", mode, "--out", str(tmp_path / mode))[0] == 0
        w = {}
        for mode in ("exact", "laplace"):
            post = json.loads((tmp_path / mode / "posterior.json").read_text())["posterior"]
            w[mode] = np.exp([e["log_weight"] for e in post["entries"]])
        assert np.allclose(w["exact"], w["laplace"], atol=1e-8, rtol=0)

    def test_audit_rows_present(self, tmp_path, capsys):
        assert run(capsys, "audit", "--config", EXAMPLE, "--out", str(tmp_path))[0] == 0
        report = json.loads((tmp_path / "report.json").read_text())["report"]
        assert set(AUDIT_ROW_NAMES) <= {r["name"] for r in report["rows"]}

    def test_coverage_row(self, tmp_path, capsys):
        assert run(capsys, "coverage", "--config", EXAMPLE, "--level", "0.95", "--out", str(tmp_path))[0] == 0
        rows = {m: (v, se) for _, m, v, se in read_metrics_csv(tmp_path / "metrics.csv")}
        assert 0 <= rows["coverage"][0] <= 1 and rows["coverage"][1] > 0

    def test_metrics_are_bit_faithful(self, tmp_path, capsys):
        assert run(capsys, "fit", "--config", EXAMPLE, "--out", str(tmp_path))[0] == 0
        post = json.loads((tmp_path / "posterior.json").read_text())["posterior"]
        rec = {m: v for _, m, v, _ in read_metrics_csv(tmp_path / "metrics.csv")}
        s0 = [e for e in post["entries"] if e["groups"] == [0, 2]][0]
        assert rec["posterior_recovery"] == math.exp(s0["log_weight"])
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("# config_hash=")

    def test_force_and_determinism(self, tmp_path, capsys):
        args = ("fit", "--config", EXAMPLE, "--out", str(tmp_path))
        assert run(capsys, *args)[0] == 0
        first = (tmp_path / "posterior.json").read_bytes()
        code, _, err = run(capsys, *args)
        assert code == 2 and json.loads(err)["type"] == "OutputExistsError"
        assert run(capsys, *args, "--force")[0] == 0
        assert (tmp_path / "posterior.json").read_bytes() == first

    def test_overrides_change_hash(self, tmp_path, capsys):
        run(capsys, "fit", "--config", EXAMPLE, "--out", str(tmp_path / "a"))
        run(capsys, "fit", "--config", EXAMPLE, "--seed", "7", "--alpha", "0.9", "--out", str(tmp_path / "b"))
        a = json.loads((tmp_path / "a" / "posterior.json").read_text())
        b = json.loads((tmp_path / "b" / "posterior.json").read_text())
        assert b["seed"] == 7 and b["config"]["alpha"] == 0.9 and a["config_hash"] != b["config_hash"]

    def test_config_error_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, "fit", "--config", str(tmp_path / "missing.yaml"))
        assert code == 1 and json.loads(err)["error"] == "config"
        code, _, err = run(capsys, "fit", "--config", EXAMPLE, "--alpha", "0", "--out", str(tmp_path))
        assert code == 1 and any("alpha" in p for p in json.loads(err)["problems"])

    def test_renyi_needs_fractional_alpha(self, tmp_path, capsys):
        cfg = load_config(EXAMPLE)
        cfg.update(alpha=1.0, diagnostics=["renyi"])
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        code, _, err = run(capsys, "diagnose", "--config", str(path), "--out", str(tmp_path / "o"))
        assert code == 1 and "alpha < 1" in json.loads(err)["message"]

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "sparse_bvm.cli", "audit", "--config", EXAMPLE,
                              "--out", str(tmp_path)], capture_output=True, text=True)
        assert res.returncode == 0 and json.loads(res.stdout)["rows"] >= len(AUDIT_ROW_NAMES)
