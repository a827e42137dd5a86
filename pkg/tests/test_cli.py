import csv
import json

import numpy as np
import pytest

from bpsm import __version__
from bpsm.cli import (
    DROP_KEEP_COLUMNS,
    EXIT_INPUT,
    EXIT_OK,
    EXIT_RUNTIME,
    MATCH_FREQUENCY_COLUMNS,
    PS_POSTERIOR_COLUMNS,
    InputError,
    main,
    read_dataset,
)
from bpsm.simulation import REPLICATION_COLUMNS, REPORT_COLUMNS, SimConfig, simulate_dataset

SIM = {"n": 200, "J": 4, "K": 30, "burn_in": 200, "thin": 2, "seed": 5}
ANALYZE = {"K": 200, "burn_in": 500, "B": 100, "seed": 3}


def dump(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def header(path):
    with open(path) as fh:
        return tuple(next(csv.reader(fh)))


def write_data(path, beta=0.0, seed=1, n=300):
    data, _ = simulate_dataset(SimConfig(n=n, beta=beta, theta0=2.0), np.random.default_rng(seed))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "z", "y", "x1", "x2"])
        for i in range(data.n):
            w.writerow([f"u{i}", int(data.Z[i]), int(data.Y[i]), int(data.X[i, 1]), int(data.X[i, 2])])
    return str(path)


@pytest.fixture(scope="module")
def sim_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = dump(d / "c.json", SIM)
    assert main(["simulate", cfg, "--out", str(d / "a")]) == EXIT_OK
    assert main(["simulate", cfg, "--out", str(d / "b"), "--workers", "2"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def analyze_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("an")
    data = write_data(d / "data.csv")
    cfg = dump(d / "c.json", ANALYZE)
    assert main(["analyze", data, cfg, "--out", str(d / "a")]) == EXIT_OK
    assert main(["analyze", data, cfg, "--out", str(d / "b")]) == EXIT_OK
    return d


class TestSimulate:
    def test_files_and_columns(self, sim_run):
        assert header(sim_run / "a" / "report.csv") == REPORT_COLUMNS
        assert header(sim_run / "a" / "per_replication.csv") == REPLICATION_COLUMNS
        rep = json.loads((sim_run / "a" / "report.json").read_text())
        assert [tuple(r) for r in rep["rows"]] == [REPORT_COLUMNS] * 2
        assert rep["config"]["seed"] == 5

    @pytest.mark.parametrize("name", ["report.csv", "report.json", "per_replication.csv"])
    def test_byte_identical_across_workers(self, sim_run, name):
        assert (sim_run / "a" / name).read_bytes() == (sim_run / "b" / name).read_bytes()

    def test_seed_flag_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UN_SEED", "11")
        cfg = dump(tmp_path / "c.json", {**SIM, "J": 2})
        main(["simulate", cfg, "--out", str(tmp_path / "env"), "--format", "json"])
        main(["simulate", cfg, "--out", str(tmp_path / "flag"), "--seed", "12", "--format", "json"])
        seed = lambda d: json.loads((tmp_path / d / "report.json").read_text())["config"]["seed"]
        assert (seed("env"), seed("flag")) == (11, 12)
        assert not (tmp_path / "env" / "report.csv").exists()

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = dump(tmp_path / "c.json", {"caliper_sd": -1, "nn": 3})
        assert main(["simulate", cfg, "--out", str(tmp_path)]) == EXIT_INPUT
        err = capsys.readouterr().err
        assert "caliper_sd" in err and "did you mean 'n'" in err

    def test_statistical_failure_exit(self, tmp_path):
        cfg = dump(tmp_path / "c.json", {**SIM, "J": 2, "gamma_true": [-60, 0, 0]})
        assert main(["simulate", cfg, "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_bad_workers(self, tmp_path):
        cfg = dump(tmp_path / "c.json", SIM)
        assert main(["simulate", cfg, "--workers", "0"]) == EXIT_INPUT


class TestAnalyze:
    OUTPUTS = ["att.json", "per_draw.json", "ps_posterior.csv", "match_frequency.csv", "drop_keep.csv"]

    @pytest.mark.parametrize("name", OUTPUTS)
    def test_byte_identical_rerun(self, analyze_run, name):
        assert (analyze_run / "a" / name).read_bytes() == (analyze_run / "b" / name).read_bytes()

    def test_schemas(self, analyze_run):
        a = analyze_run / "a"
        assert header(a / "ps_posterior.csv") == PS_POSTERIOR_COLUMNS
        assert header(a / "match_frequency.csv") == MATCH_FREQUENCY_COLUMNS
        assert header(a / "drop_keep.csv") == DROP_KEEP_COLUMNS
        att = json.loads((a / "att.json").read_text())
        assert [r["method"] for r in att] == ["PSM", "BPSM"]
        assert all(r["se"] >= 0 for r in att)
        assert att[1]["ci_lo"] <= att[1]["att"] <= att[1]["ci_hi"]

    def test_per_draw_recomputes_posterior(self, analyze_run):
        a = analyze_run / "a"
        draws = json.loads((a / "per_draw.json").read_text())["bpsm"]
        sample = np.array([d["att"] for d in draws])
        bpsm = json.loads((a / "att.json").read_text())[1]
        assert len(sample) == ANALYZE["K"]
        assert float(np.mean(sample)) == bpsm["att"]
        assert float(np.std(sample, ddof=1)) == bpsm["se"]
        assert list(np.percentile(sample, [2.5, 97.5])) == [bpsm["ci_lo"], bpsm["ci_hi"]]
        assert all(d["att"] == d["p1"] - d["p0"] for d in draws)

    def test_null_effect_interval_covers_zero(self, analyze_run):
        att = json.loads((analyze_run / "a" / "att.json").read_text())
        for r in att:
            assert r["ci_lo"] <= 0.0 <= r["ci_hi"]

    def test_kept_flags(self, analyze_run):
        with open(analyze_run / "a" / "drop_keep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 300
        assert all(r["kept"] == "1" for r in rows if r["z"] == "1")
        assert {r["kept"] for r in rows} == {"0", "1"}

    def test_no_controls(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        data.write_text("id,z,y,x1\na,1,1,0.5\nb,1,0,1.5\n")
        assert main(["analyze", str(data), dump(tmp_path / "c.json", ANALYZE), "--out", str(tmp_path)]) == EXIT_INPUT
        assert "column 'z'" in capsys.readouterr().err

    def test_separation_exit(self, tmp_path):
        data = tmp_path / "d.csv"
        data.write_text("id,z,y,x1\na,1,1,5\nb,1,0,6\nc,0,0,1\nd,0,1,2\ne,0,1,0\n")
        assert main(["analyze", str(data), dump(tmp_path / "c.json", ANALYZE), "--out", str(tmp_path)]) == EXIT_RUNTIME


class TestReadDataset:
    @pytest.mark.parametrize("text, fragment", [
        ("", "empty"),
        ("id,y,z,x1\n", "id,z,y"),
        ("id,z,y,x2\n", "'x2'"),
        ("id,z,y,x1\na,2,0,1\nb,0,0,1\n", "row 1, column 'z'"),
        ("id,z,y,x1\na,1,0,1\nb,0,0,nan\n", "row 2, column 'x1'"),
        ("id,z,y,x1\na,1,0,1\nb,0,0\n", "row 2 has 3 fields"),
        ("id,z,y,x1\na,1,0,1\na,0,0,2\n", "duplicate"),
        ("id,z,y,x1\na,0,0,1\nb,0,0,2\n", "no treated"),
    ])
    def test_schema_errors(self, tmp_path, text, fragment):
        p = tmp_path / "d.csv"
        p.write_text(text)
        with pytest.raises(InputError, match=fragment):
            read_dataset(p)

    def test_outcome_type(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,z,y,x1\na,1,0.5,1\nb,0,1,2\n")
        assert read_dataset(p).outcome_type == "continuous"
        with pytest.raises(InputError, match="row 1, column 'y'"):
            read_dataset(p, "binary")

    def test_intercept_added(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,z,y,x1,x2\na,1,1,3,4\nb,0,0,5,6\n")
        d = read_dataset(p)
        assert d.X.tolist() == [[1, 3, 4], [1, 5, 6]]
        assert d.outcome_type == "binary"


def test_validate_config(tmp_path, capsys):
    assert main(["validate-config", dump(tmp_path / "ok.json", {"n": 300})]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "OK"
    assert main(["validate-config", dump(tmp_path / "b.json", {"K": 1}), "--for", "analyze"]) == EXIT_INPUT


def test_version(capsys):
    assert main(["version"]) == EXIT_OK
    assert __version__ in capsys.readouterr().out
