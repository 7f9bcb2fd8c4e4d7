import json
import math
import os

import numpy as np
import pytest

from pathrev.cli import CHECK_NAMES, main, validate_config
from pathrev.core import ConfigError, load_ensemble


def _write_cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def _ou_cfg(**over):
    cfg = {"model": {"type": "ou", "init_mean": [1.0], "init_cov": [[0.5]]},
           "grid": {"T": 1.0, "n_steps": 100},
           "n_paths": 4000,
           "seed": 11,
           "density": "exact",
           "checks": ["ibp", "continuity", "carre"]}
    cfg.update(over)
    return cfg


def _cycle_cfg(**over):
    cfg = {"model": {"type": "cycle", "n": 4, "rate_cw": 2.0, "rate_ccw": 1.0},
           "grid": {"T": 1.0, "n_steps": 200},
           "seed": 7,
           "checks": ["reversal", "ibp"]}
    cfg.update(over)
    return cfg


def _read_lines(path):
    with open(path) as f:
        return f.read().splitlines()


class TestConfigValidation:
    def test_defaults_filled(self):
        cfg = validate_config(_cycle_cfg())
        assert cfg["n_paths"] == 1000
        assert cfg["density"] == "exact"
        assert cfg["out_dir"] == "out"
        assert cfg["grid"]["T"] == 1.0

    def test_checks_default_by_type(self):
        raw = _ou_cfg()
        del raw["checks"]
        cfg = validate_config(raw)
        assert cfg["checks"] == ["reversal", "ibp", "continuity", "carre",
                                 "nelson", "dissipation"]

    def test_rejections(self):
        bad = [
            _ou_cfg(grid={"T": 1.0, "n_steps": 0}),
            _ou_cfg(bogus=1),
            _ou_cfg(grid={"T": 1.0, "n_steps": 100, "dt": 0.01}),
            _ou_cfg(checks=["spectral"]),
            _cycle_cfg(checks=["dissipation"]),
            _ou_cfg(density="histogram"),
            _ou_cfg(seed=-1),
            _ou_cfg(seed=True),
            _ou_cfg(n_paths=2.5),
            _ou_cfg(grid={"T": -1.0, "n_steps": 100}),
            _ou_cfg(model={"type": "heat"}),
            _ou_cfg(out_dir=""),
            [1, 2, 3],
        ]
        for obj in bad:
            with pytest.raises(ConfigError):
                validate_config(obj)
        raw = _ou_cfg()
        del raw["seed"]
        with pytest.raises(ConfigError, match="seed"):
            validate_config(raw)
        raw = _ou_cfg()
        del raw["n_paths"]
        with pytest.raises(ConfigError, match="n_paths"):
            validate_config(raw)

    def test_main_maps_config_errors_to_exit_2(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _ou_cfg(density="histogram"))
        assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert "config error:" in capsys.readouterr().err

    def test_main_bad_json(self, tmp_path, capsys):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert main(["run", "--config", str(p)]) == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_main_missing_file(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_main_negative_seed_override(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["run", "--config", path, "--seed", "-3"]) == 2
        assert "seed" in capsys.readouterr().err


@pytest.fixture(scope="module")
def cycle_run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cycle")
    path = _write_cfg(tmp, _cycle_cfg())
    out = tmp / "artifacts"
    rc = main(["run", "--config", path, "--out", str(out)])
    return rc, out


@pytest.fixture(scope="module")
def ou_run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ou")
    path = _write_cfg(tmp, _ou_cfg())
    out = tmp / "artifacts"
    rc = main(["run", "--config", path, "--out", str(out)])
    return rc, out


class TestCycleRun:
    def test_exit_code_and_files(self, cycle_run_dir):
        rc, out = cycle_run_dir
        assert rc == 0
        for name in ("manifest.json", "marginals.csv", "reversed_intensities.csv",
                     "entropy_report.json", "verify_report.json"):
            assert (out / name).is_file(), name

    def test_marginals_start_uniform(self, cycle_run_dir):
        _, out = cycle_run_dir
        lines = _read_lines(out / "marginals.csv")
        assert lines[0] == "t,p0,p1,p2,p3"
        assert lines[1] == "0.0,0.25,0.25,0.25,0.25"

    def test_reversed_table_is_the_swap(self, cycle_run_dir):
        # uniform law is invariant, so the reversed intensities transpose
        # the forward ones at every tabulated time
        _, out = cycle_run_dir
        lines = _read_lines(out / "reversed_intensities.csv")
        assert lines[0] == "from_state,to_state,t,j_fwd,j_bwd"
        assert "0,1,0.0,2.0,1.0" in lines
        assert "1,0,0.0,1.0,2.0" in lines
        assert "0,1,1.0,2.0,1.0" in lines
        assert len(lines) == 1 + 8 * 5

    def test_entropy_report(self, cycle_run_dir):
        _, out = cycle_run_dir
        obj = json.loads((out / "entropy_report.json").read_text())
        assert obj["relative_entropy"] == pytest.approx(-1.0, abs=1e-9)
        assert obj["initial_term"] == pytest.approx(-math.log(4.0), abs=1e-12)
        assert obj["flux_term"] == pytest.approx(obj["relative_entropy"]
                                                - obj["initial_term"], abs=1e-15)

    def test_verify_report(self, cycle_run_dir):
        _, out = cycle_run_dir
        obj = json.loads((out / "verify_report.json").read_text())
        assert obj["passed"] is True
        assert set(obj["checks"]) == {"reversal", "ibp"}
        assert obj["checks"]["ibp"]["max_abs_residual"] <= 1e-12


class TestOuRun:
    def test_exit_code_and_files(self, ou_run_dir):
        rc, out = ou_run_dir
        assert rc == 0
        for name in ("manifest.json", "ensemble.bin", "reversed_probe.csv",
                     "density_probe.csv", "reversed_model.json",
                     "entropy_report.json", "verify_report.json"):
            assert (out / name).is_file(), name

    def test_stored_ensemble_roundtrips(self, ou_run_dir):
        _, out = ou_run_dir
        e = load_ensemble(str(out / "ensemble.bin"))
        assert e.n_paths == 4000 and e.dim == 1
        assert e.grid.n_steps == 100 and e.grid.T == 1.0
        assert e.seed == 11

    def test_reversed_model_is_affine(self, ou_run_dir):
        # exact Gaussian density makes b* affine; at reversed time 0 the
        # marginal is N(e^{-1}, 1/2), so A = -1 and c = 2/e
        _, out = ou_run_dir
        obj = json.loads((out / "reversed_model.json").read_text())
        assert obj["kind"] == "reversed_drift_affine"
        assert obj["times"][0] == 0.0 and obj["times"][-1] == 1.0
        assert obj["a"] == [[1.0]]
        assert obj["c"][0][0] == pytest.approx(2.0 / math.e, abs=1e-12)
        assert obj["A"][0][0][0] == pytest.approx(-1.0, abs=1e-12)

    def test_density_probe_layout(self, ou_run_dir):
        _, out = ou_run_dir
        lines = _read_lines(out / "density_probe.csv")
        assert lines[0] == "t,x,pdf,score"
        assert len(lines) == 1 + 11 * 5
        t0, x0, pdf0, sc0 = (float(v) for v in lines[1].split(","))
        assert t0 == 0.0
        # first probe sits 2 sd + 0.5 left of the initial mean
        assert x0 == pytest.approx(1.0 - 2.0 * math.sqrt(0.5) - 0.5, abs=1e-12)
        assert pdf0 > 0.0 and np.isfinite(sc0)

    def test_verify_report_passes(self, ou_run_dir):
        _, out = ou_run_dir
        obj = json.loads((out / "verify_report.json").read_text())
        assert obj["passed"] is True
        assert set(obj["checks"]) == {"ibp", "continuity", "carre"}
        assert obj["checks"]["continuity"]["sup_residual"] <= 1e-6

    def test_entropy_report_written(self, ou_run_dir):
        _, out = ou_run_dir
        obj = json.loads((out / "entropy_report.json").read_text())
        assert len(obj) == 20
        assert all(isinstance(v, (int, float)) for v in obj.values())


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        # empty check list keeps this fast; byte identity is what matters here
        path = _write_cfg(tmp_path, _ou_cfg(n_paths=500, checks=[]))
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        assert main(["run", "--config", path, "--out", str(out1)]) == 0
        assert main(["run", "--config", path, "--out", str(out2)]) == 0
        names1 = sorted(os.listdir(out1))
        assert names1 == sorted(os.listdir(out2))
        for name in names1:
            b1 = (out1 / name).read_bytes()
            b2 = (out2 / name).read_bytes()
            assert b1 == b2, name

    def test_seed_override_changes_paths(self, tmp_path):
        path = _write_cfg(tmp_path, _ou_cfg(n_paths=200, checks=["ibp"]))
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        main(["simulate", "--config", path, "--out", str(out1)])
        main(["simulate", "--config", path, "--out", str(out2), "--seed", "12"])
        assert (out1 / "ensemble.bin").read_bytes() != (out2 / "ensemble.bin").read_bytes()


class TestSimulateCommand:
    def test_diffusion_csv(self, tmp_path):
        path = _write_cfg(tmp_path, _ou_cfg(n_paths=200,
                                            grid={"T": 1.0, "n_steps": 50}))
        out = tmp_path / "sim"
        rc = main(["simulate", "--config", path, "--out", str(out),
                   "--format", "csv"])
        assert rc == 0
        lines = _read_lines(out / "ensemble.csv")
        assert lines[0] == "path_id,t,x1"
        assert len(lines) == 1 + 200 * 51

    def test_walk_events(self, tmp_path):
        path = _write_cfg(tmp_path, _cycle_cfg(n_paths=50))
        out = tmp_path / "sim"
        assert main(["simulate", "--config", path, "--out", str(out)]) == 0
        lines = _read_lines(out / "events.csv")
        assert lines[0] == "path_id,t,from_state,to_state"
        assert len(lines) > 1
        for line in lines[1:]:
            pid, t, u, v = line.split(",")
            assert 0 <= int(u) < 4 and 0 <= int(v) < 4
            assert 0.0 < float(t) < 1.0


class TestReverseCommand:
    def test_brownian_probe_values(self, tmp_path):
        cfg = {"model": {"type": "bm", "init_mean": [0.0], "init_cov": [[1.0]]},
               "grid": {"T": 1.0, "n_steps": 100}, "n_paths": 50, "seed": 3,
               "density": "exact"}
        path = _write_cfg(tmp_path, cfg)
        out = tmp_path / "rev"
        assert main(["reverse", "--config", path, "--out", str(out)]) == 0
        lines = _read_lines(out / "reversed_probe.csv")
        assert lines[0] == "t,x,b_star"
        # reversed clock: s = 0 sees the terminal law N(0, 2), s = 1 the
        # initial law N(0, 1)
        assert "0.0,1.0,-0.5" in lines
        assert "1.0,1.0,-1.0" in lines
        obj = json.loads((out / "reversed_model.json").read_text())
        assert obj["kind"] == "reversed_drift_affine"
        assert obj["c"][0] == [0.0]
        assert obj["A"][0] == [[-0.5]]

    def test_kde_from_stored_ensemble(self, tmp_path):
        cfg = _ou_cfg(n_paths=2000)
        path = _write_cfg(tmp_path, cfg)
        sim = tmp_path / "sim"
        assert main(["simulate", "--config", path, "--out", str(sim)]) == 0
        stored = str(sim / "ensemble.bin")
        path2 = _write_cfg(tmp_path, _ou_cfg(n_paths=2000,
                                             density="kde:" + stored),
                           name="cfg2.json")
        out = tmp_path / "rev"
        assert main(["reverse", "--config", path2, "--out", str(out)]) == 0
        obj = json.loads((out / "reversed_model.json").read_text())
        assert obj["kind"] == "reversed_drift_probe"
        assert len(obj["x"]) == 11
        assert len(obj["b_star"]) == 5

    def test_kde_path_missing(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _ou_cfg(density="kde:/nonexistent.bin"))
        assert main(["reverse", "--config", path, "--out",
                     str(tmp_path / "o")]) == 2
        assert "cannot read ensemble" in capsys.readouterr().err

    def test_kde_grid_mismatch(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _ou_cfg(n_paths=200))
        sim = tmp_path / "sim"
        assert main(["simulate", "--config", path, "--out", str(sim)]) == 0
        stored = str(sim / "ensemble.bin")
        other = _ou_cfg(n_paths=200, grid={"T": 2.0, "n_steps": 100},
                        density="kde:" + stored)
        path2 = _write_cfg(tmp_path, other, name="cfg2.json")
        assert main(["reverse", "--config", path2, "--out",
                     str(tmp_path / "o")]) == 2
        assert "does not match" in capsys.readouterr().err


class TestEntropyCommand:
    def test_ou_report_and_fisher_table(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _ou_cfg(n_paths=2000))
        out = tmp_path / "ent"
        assert main(["entropy", "--config", path, "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        stored = json.loads((out / "entropy_report.json").read_text())
        assert printed == stored
        lines = _read_lines(out / "fisher.csv")
        assert lines[0] == "t,free_energy,fisher"
        # one row per grid node
        assert len(lines) == 1 + 101

    def test_brownian_has_no_reference(self, tmp_path, capsys):
        cfg = {"model": {"type": "bm", "init_mean": [0.0], "init_cov": [[1.0]]},
               "grid": {"T": 1.0, "n_steps": 50}, "n_paths": 100, "seed": 1}
        path = _write_cfg(tmp_path, cfg)
        assert main(["entropy", "--config", path, "--out",
                     str(tmp_path / "o")]) == 2
        assert "reference" in capsys.readouterr().err


class TestVerifyCommand:
    def test_positional_check_failure_exits_1(self, tmp_path, capsys):
        # the bundled cycle is biased, so counting-measure detailed balance
        # must fail
        path = _write_cfg(tmp_path, _cycle_cfg())
        out = tmp_path / "ver"
        rc = main(["verify", "--config", path, "--out", str(out),
                   "detailed-balance"])
        assert rc == 1
        obj = json.loads((out / "verify_report.json").read_text())
        assert obj["passed"] is False
        assert obj["checks"]["detailed-balance"]["residual"] == 1.0
        assert "check detailed-balance: FAIL" in capsys.readouterr().out

    def test_config_checks_pass(self, tmp_path):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["verify", "--config", path, "--out",
                     str(tmp_path / "ver")]) == 0

    def test_unknown_positional_check(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["verify", "--config", path, "--out",
                     str(tmp_path / "ver"), "spectral"]) == 2
        assert "unknown check name" in capsys.readouterr().err


class TestRwCommand:
    def test_reverse_csv_stdout(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["rw", "--config", path, "reverse"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "from_state,to_state,t,j_fwd,j_bwd"
        assert len(lines) == 1 + 8 * 5

    def test_reverse_json_and_artifact(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        out = tmp_path / "rw"
        assert main(["rw", "--config", path, "--out", str(out),
                     "reverse", "--format", "json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 8 * 5
        swap = {r["t"] == 0.0 and (r["from_state"], r["to_state"]) == (0, 1)
                for r in rows}
        assert True in swap
        assert (out / "reversed_intensities.csv").is_file()
        assert (out / "manifest.json").is_file()

    def test_entropy_action(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["rw", "--config", path, "entropy"]) == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["relative_entropy"] == pytest.approx(-1.0, abs=1e-9)

    def test_ibp_action(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        assert main(["rw", "--config", path, "ibp"]) == 0
        obj = json.loads(capsys.readouterr().out)
        assert obj["passed"] is True

    def test_needs_walk_model(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _ou_cfg())
        assert main(["rw", "--config", path, "reverse"]) == 2
        assert "random-walk model" in capsys.readouterr().err


class TestParser:
    def test_help_lists_checks(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for name in CHECK_NAMES:
            assert name in text

    def test_missing_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_rw_action(self, tmp_path, capsys):
        path = _write_cfg(tmp_path, _cycle_cfg())
        with pytest.raises(SystemExit):
            main(["rw", "--config", path, "spin"])
