import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from sptransduct.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from sptransduct.estimators import ConfigError
from sptransduct.experiments import (ResultTable, Scenario, compare_report, config_from_mapping, load_config,
                                     run_experiment)

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.toml"


def _tiny(**over):
    d = {"scenario": "SyntheticNoShift", "n_grid": [40], "replicates": 2, "seed": 3,
         "synthetic": {"p": 6, "sparsity": 2, "test_points": 3},
         "estimators": [{"name": "Lasso", "method": "lasso"}, {"name": "OLS", "method": "ols"}]}
    d.update(over)
    return d


def _write_toml(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestConfig:
    def test_every_shipped_config_validates(self):
        for path in sorted((ROOT / "configs").glob("*.toml")):
            cfg = load_config(path)
            assert cfg.estimators

    def test_mode_fills_presets(self):
        cfg = config_from_mapping(_tiny(hyper_mode="CV"))
        assert cfg.estimators[0].params["lam"] == "cv"
        cfg = config_from_mapping(_tiny())
        assert cfg.estimators[0].params["lam"] == "theory"

    @pytest.mark.parametrize("over", [
        {"n_grid": []}, {"scenario": "Mars"}, {"hyper_mode": "Vibes"}, {"estimators": []},
        {"replicates": 0}, {"seed": -4}, {"metric": "mae"},
        {"estimators": [{"name": "a", "method": "ols"}, {"name": "a", "method": "zero"}]},
        {"shift": {"kind": "mean_shift_toward_beta"}},
        {"synthetic": {"p": 6, "sparsity": 9}},
        {"scenario": "SyntheticShiftLasso", "shift": {"kind": "sideways"}},
    ])
    def test_invalid(self, over):
        with pytest.raises(ConfigError):
            config_from_mapping(_tiny(**over))

    def test_real_data_needs_data_section(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"scenario": "RealData", "estimators": [{"name": "o", "method": "ols"}]})

    def test_hash_tracks_content(self):
        assert config_from_mapping(_tiny()).config_hash() == config_from_mapping(_tiny()).config_hash()
        assert config_from_mapping(_tiny()).config_hash() != config_from_mapping(_tiny(seed=4)).config_hash()


class TestRun:
    def test_deterministic_up_to_timestamp(self, tmp_path):
        cfg = config_from_mapping(_tiny())
        a = run_experiment(cfg, out_dir=tmp_path / "a", timestamp="t0")
        b = run_experiment(cfg, out_dir=tmp_path / "b", timestamp="t0")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
        assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
        assert a.table.rows[0]["metric_name"] == "rmsre"
        assert not a.failed and b.table.metadata["seed"] == 3

    def test_rmsre_is_mean_root_risk(self):
        cfg = config_from_mapping(_tiny(replicates=3))
        out = run_experiment(cfg, timestamp="t")
        per = out.risks[("Lasso", 40)]
        row = next(r for r in out.table.rows if r["estimator"] == "Lasso")
        assert row["value"] == pytest.approx(np.sqrt(per).mean())
        assert row["se"] == pytest.approx(np.sqrt(per).std(ddof=1) / np.sqrt(3))

    def test_csv_json_round_trip(self):
        out = run_experiment(config_from_mapping(_tiny()), timestamp="t")
        t = out.table
        back = ResultTable.from_csv(t.to_csv())
        assert back.rows == t.rows
        again = ResultTable.from_json(t.to_json())
        assert again.rows == t.rows and again.metadata == t.metadata
        assert set(t.metadata) >= {"config_hash", "seed", "timestamp", "version"}

    def test_from_csv_rejects_missing_columns(self):
        with pytest.raises(ConfigError):
            ResultTable.from_csv("estimator,n\nA,1\n")


class TestReport:
    def _table(self, rows):
        return ResultTable([{"scenario": "RealData", "estimator": e, "n": 4898, "metric_name": "rmse",
                             "value": v, "se": s} for e, v, s in rows])

    def test_identical_rows_ratio_one(self):
        _, recs = compare_report(self._table([("A", 2.0, 0.1), ("B", 2.0, 0.1)]), "A")
        assert [r["ratio"] for r in recs] == [1.0, 1.0]
        assert recs[0]["ratio_se"] == 0.0
        assert recs[1]["ratio_se"] == pytest.approx(np.hypot(0.05, 0.05))

    def test_real_data_arithmetic(self):
        _, recs = compare_report(self._table([("OLS", 0.9936, 0.01), ("OM-Q-Ridge", 0.7696, 0.01)]), "OLS")
        assert recs[1]["ratio"] == pytest.approx(0.775, abs=5e-4)

    def test_unknown_baseline(self):
        with pytest.raises(ConfigError):
            compare_report(self._table([("A", 1.0, 0.1)]), "Z")


class TestRealData:
    def test_tiny_csv(self, tmp_path):
        r = np.random.default_rng(0)
        n = 120
        X = r.normal(size=(n, 4))
        frame = pd.DataFrame(X, columns=list("abcd"))
        frame["group"] = (np.arange(n) % 4 == 0).astype(int)
        frame["y"] = X @ np.array([1.0, -1.0, 0.5, 0.0]) + 0.1 * r.normal(size=n)
        path = tmp_path / "d.csv"
        frame.to_csv(path, index=False)
        cfg = config_from_mapping({
            "scenario": "RealData", "hyper_mode": "CV", "seed": 1,
            "data": {"path": str(path), "target": "y", "split": {"column": "group", "op": "==", "value": 0}},
            "estimators": [{"name": "OLS", "method": "ols"}, {"name": "Zero", "method": "zero"},
                           {"name": "OM", "method": "om", "moment": "Q", "pilot": {"method": "ridge"},
                            "g": ["ridge", "zero"], "k_folds": 10}]})
        out = run_experiment(cfg, timestamp="t")
        rows = {r["estimator"]: r for r in out.table.rows}
        assert rows["OLS"]["n"] == 90
        assert rows["OLS"]["value"] < 0.2 < rows["Zero"]["value"]
        assert rows["OM"]["value"] < 0.2
        assert cfg.scenario is Scenario.REAL_DATA


class TestCli:
    def test_validate(self, capsys):
        assert main(["validate", str(SMOKE)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["ok"] is True

    def test_smoke_run_and_report(self, tmp_path, capsys):
        assert main(["run", str(SMOKE), "--out", str(tmp_path), "--seed", "11"]) == EXIT_OK
        meta = json.loads((tmp_path / "results.json").read_text())["metadata"]
        assert meta["seed"] == 11
        capsys.readouterr()
        assert main(["report", str(tmp_path / "results.csv"), "--baseline", "Lasso", "--json"]) == EXIT_OK
        recs = json.loads(capsys.readouterr().out)
        assert {r["estimator"] for r in recs} >= {"Lasso", "OM-F-Lasso"}
        assert all(r["ratio"] == 1.0 for r in recs if r["estimator"] == "Lasso")

    def test_config_errors_exit_2(self, tmp_path, capsys):
        bad = _write_toml(tmp_path / "bad.toml", 'scenario = "SyntheticNoShift"\nn_grid = []\n'
                          '[synthetic]\np = 5\nsparsity = 1\n[[estimators]]\nname = "a"\nmethod = "ols"\n')
        assert main(["validate", str(bad)]) == EXIT_CONFIG
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "config" and "n_grid" in err["message"]
        assert main(["run", str(bad)]) == EXIT_CONFIG
        assert main(["run", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
        assert main(["run", str(SMOKE), "--jobs", "0"]) == EXIT_CONFIG
        assert main(["frobnicate"]) == EXIT_CONFIG
        garbled = _write_toml(tmp_path / "g.toml", "scenario = [unclosed\n")
        assert main(["validate", str(garbled)]) == EXIT_CONFIG

    def test_report_errors_exit_2(self, tmp_path):
        assert main(["report", str(tmp_path / "none.csv"), "--baseline", "A"]) == EXIT_CONFIG

    def test_failure_threshold_exit_3(self, tmp_path, capsys):
        # k_folds larger than n makes every OM replicate fail at fit time
        cfg = _write_toml(tmp_path / "f.toml", 'scenario = "SyntheticNoShift"\nn_grid = [20]\nreplicates = 2\n'
                          '[synthetic]\np = 4\nsparsity = 1\ntest_points = 2\n'
                          '[[estimators]]\nname = "OM"\nmethod = "om"\nk_folds = 50\ng = "zero"\n')
        assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
        err = capsys.readouterr().err
        assert '"runtime"' in err
        assert (tmp_path / "o" / "results.csv").exists()
