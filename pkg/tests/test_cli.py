import json
import subprocess
import sys

import numpy as np
import pytest

from bisque.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from bisque.models import FurSealData, SpatialConfig, simulate_furseal
from bisque.models.furseal import log_marginal_u1, n_given_u1
from bisque.pipeline import ConfigError, load_config, thread_count
from bisque.sparse_quad import NESTED, read_grid_csv, univariate_rule


def write_config(path, record):
    path.write_text(json.dumps(record))
    return path


@pytest.fixture
def toy_config(tmp_path):
    values = np.random.default_rng(0).normal(1.0, 2.0, 5).tolist()
    return write_config(tmp_path / "toy.json", {"model": "conjugate-toy", "data": {"values": values}, "output_dir": "out"})


class TestGrid:
    def test_single_node(self, tmp_path, capsys):
        out = tmp_path / "g.csv"
        assert main(["grid", "--dim", "2", "--level", "2", "--out", str(out)]) == EXIT_OK
        assert len(out.read_text().strip().splitlines()) == 2
        assert "nodes: 1" in capsys.readouterr().out

    def test_one_dimensional_size(self, tmp_path):
        out = tmp_path / "g.csv"
        assert main(["grid", "--dim", "1", "--level", "3", "--out", str(out)]) == EXIT_OK
        grid = read_grid_csv(out)
        assert grid.size == univariate_rule(NESTED, 3).nodes.size

    def test_stdout(self, capsys):
        assert main(["grid", "--dim", "2", "--level", "4", "--family", "classical"]) == EXIT_OK
        captured = capsys.readouterr()
        assert captured.out.startswith("dim,level,node_1,node_2,weight\n")
        assert "nodes:" in captured.err

    @pytest.mark.parametrize("argv", [["--dim", "1", "--level", "0"], ["--dim", "0", "--level", "1"], ["--dim", "2", "--level", "x"], ["--dim", "2"]])
    def test_bad_flags(self, argv, capsys):
        code = None
        try:
            code = main(["grid", *argv])
        except SystemExit as exc:
            code = exc.code
        assert code == EXIT_USAGE
        assert capsys.readouterr().err


class TestInfer:
    def test_conjugate_converges(self, toy_config):
        assert main(["infer", str(toy_config)]) == EXIT_OK
        report = json.loads((toy_config.parent / "out" / "report.json").read_text())
        assert report["converged"] is True
        quantities = report["parameters"]["mu"]["quantities"]
        assert set(quantities) == {"density", "mean", "variance"}
        assert (toy_config.parent / "out" / "mu_density.csv").is_file()

    def test_rerun_byte_identical(self, toy_config, tmp_path):
        main(["infer", str(toy_config), "--out", str(tmp_path / "a")])
        main(["infer", str(toy_config), "--out", str(tmp_path / "b"), "--threads", "3"])
        for name in ("mu_density.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seventeen_digit_output(self, toy_config):
        main(["infer", str(toy_config)])
        row = (toy_config.parent / "out" / "mu_density.csv").read_text().splitlines()[100]
        x, f = row.split(",")
        assert float(x) == float(format(float(x), ".17g"))
        assert len(f.replace(".", "").replace("-", "").split("e")[0].lstrip("0")) >= 15

    def test_missing_data_file(self, tmp_path):
        cfg = write_config(tmp_path / "fs.json", {"model": "furseal", "data": {"path": "nope.csv"}, "output_dir": "out"})
        assert main(["infer", str(cfg)]) == EXIT_USAGE
        assert not (tmp_path / "out").exists()

    def test_missing_config(self, tmp_path):
        assert main(["infer", str(tmp_path / "absent.json")]) == EXIT_USAGE

    @pytest.mark.parametrize(
        "record",
        [
            {"model": "gamma", "data": {}},
            {"model": "conjugate-toy", "data": {"values": [1.0]}, "quadrature": {"tol": 0}},
            {"model": "conjugate-toy", "data": {"values": [1.0]}, "quadrature": {"family": "simpson"}},
            {"model": "conjugate-toy", "data": {"values": [1.0]}, "colour": "red"},
            {"model": "conjugate-toy", "data": {"values": [1.0]}, "quantities": [{"parameter": "sigma"}]},
        ],
        ids=["model", "tol", "family", "unknown-key", "parameter"],
    )
    def test_invalid_configs(self, tmp_path, record):
        assert main(["infer", str(write_config(tmp_path / "c.json", record))]) == EXIT_USAGE

    def test_q_start_below_dimension(self, tmp_path):
        record = {"model": "furseal", "data": {"fixture": {}}, "quantities": [{"parameter": "N", "kinds": ["mean"]}],
                  "quadrature": {"q_start": 3}, "output_dir": "out"}
        assert main(["infer", str(write_config(tmp_path / "c.json", record))]) == EXIT_USAGE

    def test_not_converged_exit_status(self, tmp_path):
        values = np.random.default_rng(0).normal(1.0, 2.0, 5).tolist()
        record = {"model": "conjugate-toy", "data": {"values": values}, "quadrature": {"q_max": 2, "tol": 1e-12}, "output_dir": "out"}
        assert main(["infer", str(write_config(tmp_path / "c.json", record))]) == EXIT_NUMERICAL
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["converged"] is False

    def test_furseal_mean(self, tmp_path):
        record = {"model": "furseal", "data": {"fixture": {"seed": 20240601}},
                  "quantities": [{"parameter": "N", "kinds": ["mean"]}], "output_dir": "out"}
        assert main(["infer", str(write_config(tmp_path / "c.json", record))]) == EXIT_OK
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        # exact posterior mean by summation over N on a dense U1 grid
        data = simulate_furseal().data
        u = np.linspace(-6, 6, 601)
        logw = np.array([log_marginal_u1(data, v) for v in u])
        w = np.exp(logw - logw.max())
        exact = sum(wi * np.dot(*n_given_u1(data, v)) for wi, v in zip(w, u)) / w.sum()
        assert report["parameters"]["N"]["quantities"]["mean"]["value"] == pytest.approx(exact, rel=1e-3)


class TestSimulate:
    def test_spatial_defaults(self, tmp_path):
        assert main(["simulate", "spatial", "--out", str(tmp_path), "--seed", "4"]) == EXIT_OK
        cfg = SpatialConfig.from_csv(tmp_path / "spatial_observations_seed4.csv", tmp_path / "spatial_predictions_seed4.csv")
        assert cfg.n_obs == 300 and cfg.n_pred == 400
        meta = json.loads((tmp_path / "spatial_seed4.json").read_text())
        assert meta["params"] == [1.0, 0.3, 0.5] and meta["priors"] == [2.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_same_seed_identical_files(self, tmp_path):
        for sub in ("a", "b"):
            main(["simulate", "spatial", "--n", "30", "--m", "9", "--seed", "2", "--out", str(tmp_path / sub)])
            main(["simulate", "furseal", "--seed", "2", "--out", str(tmp_path / sub)])
        for name in ("spatial_observations_seed2.csv", "spatial_predictions_seed2.csv", "furseal_seed2.csv", "furseal_seed2.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_furseal_csv(self, tmp_path):
        main(["simulate", "furseal", "--seed", "20240601", "--out", str(tmp_path)])
        data = FurSealData.from_csv(tmp_path / "furseal_seed20240601.csv")
        assert data.I == 7

    @pytest.mark.parametrize("argv", [["spatial", "--n", "0"], ["spatial", "--m", "10"], ["spatial", "--rho", "-1"], ["furseal", "--n", "0"]])
    def test_invalid_parameters(self, tmp_path, argv):
        assert main(["simulate", *argv, "--out", str(tmp_path)]) == EXIT_USAGE


class TestOracle:
    def test_disabled(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"model": "furseal", "data": {"fixture": {}}, "oracle": {"enabled": False}})
        assert main(["oracle", str(cfg)]) == EXIT_USAGE
        assert "oracle" in capsys.readouterr().err

    def test_missing_block(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"model": "furseal", "data": {"fixture": {}}})
        assert main(["oracle", str(cfg)]) == EXIT_USAGE

    def test_conjugate_has_no_chain(self, toy_config, tmp_path):
        record = json.loads(toy_config.read_text())
        record["oracle"] = {"enabled": True}
        assert main(["oracle", str(write_config(tmp_path / "c.json", record))]) == EXIT_USAGE


class TestThreads:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("BISQUE_THREADS", "3")
        assert thread_count(5) == 5
        assert thread_count(None) == 3

    def test_invalid(self, monkeypatch):
        monkeypatch.setenv("BISQUE_THREADS", "many")
        with pytest.raises(ConfigError):
            thread_count(None)
        with pytest.raises(ConfigError):
            thread_count(0)


def test_relative_paths_resolve_against_config(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "counts.csv").write_text("visit,captured,newly_captured\n1,3,3\n2,2,1\n")
    cfg = load_config(write_config(tmp_path / "sub" / "c.json", {"model": "furseal", "data": {"path": "counts.csv"}}))
    assert cfg.path("counts.csv") == tmp_path / "sub" / "counts.csv"


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bisque.cli", "grid", "--dim", "3", "--level", "3", "--out", str(tmp_path / "g.csv")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and "nodes: 1" in proc.stdout
