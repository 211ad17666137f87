import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from martingale_pe import cli
from martingale_pe import experiments as ex

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_ex1(out, episodes=20, reps=3):
    d = yaml.safe_load((CONFIGS / "ex1.yaml").read_text())
    d.update(repetitions=reps, episodes=episodes, record_every=5, output_dir=str(out))
    return d


def test_list_experiments_covers_every_id():
    items = ex.list_experiments()
    assert [i["id"] for i in items] == list(ex.EXPERIMENT_IDS)
    assert all(i["description"] and i["reproduces"] for i in items)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_validate(name):
    cfg = ex.ExperimentConfig.load(CONFIGS / name)
    cfg.validate()


def test_config_errors(tmp_path):
    d = small_ex1(tmp_path)
    with pytest.raises(ex.ExperimentError, match="unknown experiment"):
        ex.ExperimentConfig.from_dict({**d, "experiment_id": "ex9"})
    with pytest.raises(ex.ExperimentError, match="unique"):
        ex.ExperimentConfig.from_dict({**d, "runs": [d["runs"][0], d["runs"][0]]})
    bad = dict(d, runs=[{"label": "x", "solver": {"algorithm": "ctd", "test": "constant"}, "schedule": {"alpha0": 0.1}}],
               family={"family": "quad_triple"})
    with pytest.raises(Exception):
        ex.ExperimentConfig.from_dict(bad).validate()


def test_unknown_keys_go_to_options(tmp_path):
    cfg = ex.ExperimentConfig.from_dict({**small_ex1(tmp_path), "eval_episodes": 5})
    assert cfg.options["eval_episodes"] == 5


def test_small_run_is_reproducible(tmp_path):
    r1 = ex.run_experiment(small_ex1(tmp_path / "a"))
    r2 = ex.run_experiment(small_ex1(tmp_path / "b"))
    for name in ("iterates.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [r.label for r in r1.rows] == [r.label for r in r2.rows]
    assert (tmp_path / "a" / "summary.txt").exists()
    header = (tmp_path / "a" / "iterates.csv").read_text().splitlines()[0]
    assert header == "algorithm,episode,repetition,theta0"


def test_report_rows_compare_against_fixtures(tmp_path):
    rep = ex.run_experiment(small_ex1(tmp_path, episodes=10))
    row = rep.row("rg_offline")
    assert row.fixture == "ex1_mstde" and row.target == pytest.approx((-1.5,), abs=1e-6)
    assert row.passed is False  # ten episodes are far too few
    with pytest.raises(KeyError):
        rep.row("nope")
    assert "FAIL" in rep.to_text()


def test_expected_divergence_row(tmp_path):
    d = yaml.safe_load((CONFIGS / "ex5.yaml").read_text())
    d.update(repetitions=4, episodes=5000, record_every=500, output_dir=str(tmp_path))
    d["runs"] = [r for r in d["runs"] if r.get("expect") == "diverged"]
    rep = ex.run_experiment(d)
    assert rep.rows[0].passed and rep.rows[0].n_diverged == 4


def test_cli_exit_codes(tmp_path, capsys):
    cfg = CONFIGS / "ex1.yaml"
    args = ["run", str(cfg), "--output-dir", str(tmp_path), "--set", "repetitions=2", "--set", "episodes=5",
            "--set", "record_every=5"]
    assert cli.main(args) == 1
    assert cli.main(args + ["--report-only"]) == 0
    assert "FAIL" in capsys.readouterr().out
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert cli.main(["run", str(cfg), "--set", "runs.0.solver.algorithm=nonsense"]) == 2
    assert cli.main(["run", str(cfg), "--set", "noequals"]) == 2


def test_cli_set_overrides_nested_entries(tmp_path):
    cfg = CONFIGS / "ex1.yaml"
    args = ["run", str(cfg), "--output-dir", str(tmp_path), "--report-only", "--set", "repetitions=2",
            "--set", "episodes=4", "--set", "record_every=2", "--set", "runs.0.schedule.alpha0=0.02"]
    assert cli.main(args) == 0
    rows = (tmp_path / "iterates.csv").read_text().splitlines()
    assert len(rows) == 1 + 7 * 3 * 2


def test_cli_list_and_fixtures(tmp_path, capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    assert all(e in out for e in ex.EXPERIMENT_IDS)
    assert cli.main(["fixtures", "--path", str(tmp_path / "fx.json")]) == 0
    data = json.loads((tmp_path / "fx.json").read_text())
    for k, v in data["oracles"].items():
        assert v["provenance"] in ("closed_form", "numeric_bruteforce")
        if v["provenance"] == "numeric_bruteforce":
            assert v["record"]


def test_fixture_value_lookup():
    fx = ex.load_fixtures()
    assert ex.fixture_value(fx, "ex1_mstde") == pytest.approx([-1.5], abs=1e-6)
    assert ex.fixture_value(fx, "published:ex4_ctd0") == pytest.approx([-1.83923])
    with pytest.raises(ex.ExperimentError):
        ex.fixture_value(fx, "nope")


def test_rate_subsampling_keeps_coarse_increments(tmp_path):
    from martingale_pe import diffusion_env as de
    b = de.sample_batch(de.brownian(), de.TimeGrid(0, 1, 100), 4, 0)
    c = ex._subsample(b, 10)
    assert c.grid.K == 10
    np.testing.assert_array_equal(c.states, b.states[:, ::10])
