import csv
import json

import numpy as np
import pytest

from sfpca.cli import main, read_matrix, resolve, UsageError
from sfpca.core import DataMatrix, SFPCAConfig, fit
from sfpca.simlab import SimScenario, gen_data
from sfpca.structmat import chain_diff_matrix, load_structure_matrix, save_structure_matrix


def read_factors(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        out.setdefault((int(r["rank"]), r["side"]), []).append(float(r["value"]))
    return {k: np.array(v) for k, v in out.items()}


@pytest.fixture
def data_file(tmp_path):
    X = np.random.default_rng(0).normal(size=(25, 30))
    path = tmp_path / "X.csv"
    np.savetxt(path, X, delimiter=",", fmt="%.17g")
    return path


class TestFit:
    def test_matches_library_bit_exactly(self, data_file, tmp_path):
        out = tmp_path / "run"
        assert main(["fit", "--input", str(data_file), "--out", str(out), "--rank", "2"]) == 0
        X = DataMatrix(np.loadtxt(data_file, delimiter=",")).center().values
        ref = fit(X, 2, SFPCAConfig.from_params(25, 30))
        got = read_factors(out / "factors.csv")
        for k, f in enumerate(ref.factors, start=1):
            np.testing.assert_array_equal(got[(k, "u")], f.u)
            np.testing.assert_array_equal(got[(k, "v")], f.v)

    def test_regularized_with_omega_file(self, data_file, tmp_path):
        om = tmp_path / "om.csv"
        save_structure_matrix(chain_diff_matrix(30), om, fmt="coo")
        out = tmp_path / "run"
        rc = main(["fit", "--input", str(data_file), "--out", str(out), "--lambda-v", "0.3",
                   "--alpha-v", "2", "--omega-v", str(om), "--no-center"])
        assert rc == 0
        X = np.loadtxt(data_file, delimiter=",")
        cfg = SFPCAConfig.from_params(25, 30, lambda_v=0.3, alpha_v=2.0,
                                      omega_v=load_structure_matrix(om))
        ref = fit(X, 1, cfg)
        np.testing.assert_array_equal(read_factors(out / "factors.csv")[(1, "v")],
                                      ref.factors[0].v)
        man = json.loads((out / "manifest.json").read_text())
        assert man["inputs"]["omega_v"]["sha256"]
        assert man["settings"]["center"] is False

    def test_outputs_present(self, data_file, tmp_path):
        out = tmp_path / "run"
        main(["fit", "--input", str(data_file), "--out", str(out)])
        assert {p.name for p in out.iterdir()} == {"factors.csv", "d.csv", "traces.json",
                                                   "manifest.json"}
        traces = json.loads((out / "traces.json").read_text())
        assert len(traces) == 1 and traces[0] == sorted(traces[0])

    def test_manifest_replay_is_byte_identical(self, data_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["fit", "--input", str(data_file), "--out", str(a), "--lambda-u", "0.2"])
        assert main(["fit", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        for name in ("factors.csv", "d.csv", "traces.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_input(self, tmp_path):
        assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2

    def test_bad_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("1,2\n3\n")
        assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_header_flag(self, data_file, tmp_path):
        with_header = tmp_path / "h.csv"
        with_header.write_text("a" + ",b" * 29 + "\n" + data_file.read_text())
        np.testing.assert_array_equal(read_matrix(with_header, header=True),
                                      read_matrix(data_file))

    def test_rank_too_large(self, data_file, tmp_path):
        assert main(["fit", "--input", str(data_file), "--out", str(tmp_path / "o"),
                     "--rank", "26"]) == 2

    def test_grid_rejected_for_fit(self, data_file, tmp_path):
        assert main(["fit", "--input", str(data_file), "--out", str(tmp_path / "o"),
                     "--lambda-v", "0.1", "0.2"]) == 2

    def test_nonconvergence_exit_code(self, data_file, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("lambda_v = 0.5\nalpha_v = 5.0\nmax_outer = 1\n")
        out = tmp_path / "o"
        assert main(["fit", "--input", str(data_file), "--out", str(out),
                     "--config", str(cfg)]) == 3
        man = json.loads((out / "manifest.json").read_text())
        assert man["converged"] == [False]
        assert (out / "factors.csv").exists()


class TestConfigPrecedence:
    def test_flags_over_file_over_defaults(self, data_file, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('lambda_u = 0.4\npenalty = "scad"\nseed = 9\n')
        rc = resolve(["fit", "--config", str(cfg), "--input", str(data_file),
                      "--out", str(tmp_path), "--lambda-u", "0.1"])
        assert rc.lambda_u == [0.1]
        assert rc.penalty == "scad"
        assert rc.seed == 9
        assert rc.rank == 1

    def test_unknown_key(self, data_file, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("lamda_u = 0.4\n")
        with pytest.raises(UsageError):
            resolve(["fit", "--config", str(cfg), "--input", str(data_file),
                     "--out", str(tmp_path)])

    def test_parse_error_exit(self, tmp_path):
        assert main(["fit", "--rank", "two", "--out", str(tmp_path)]) == 2


class TestSelect:
    def test_one_point_grids_equal_fit(self, data_file, tmp_path):
        a, b = tmp_path / "fit", tmp_path / "sel"
        args = ["--input", str(data_file), "--lambda-u", "0.3", "--lambda-v", "0.2",
                "--alpha-u", "0", "--alpha-v", "3"]
        assert main(["fit", "--out", str(a), *args]) == 0
        assert main(["select", "--out", str(b), *args]) == 0
        assert (a / "factors.csv").read_bytes() == (b / "factors.csv").read_bytes()
        assert (b / "bic_table.csv").exists()

    def test_default_grids_record_stabilized(self, tmp_path):
        X, _ = gen_data(SimScenario.rank1("sine-60", n=40, d=20.0, seed=1))
        path = tmp_path / "X.csv"
        np.savetxt(path, X, delimiter=",", fmt="%.17g")
        assert main(["select", "--input", str(path), "--out", str(tmp_path / "o")]) == 0
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert isinstance(man["stabilized"], bool)
        assert set(man["chosen"][0]) >= {"lambda_u", "alpha_u", "lambda_v", "alpha_v"}

    def test_empty_grid_in_config(self, data_file, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("lambda_v = []\n")
        assert main(["select", "--input", str(data_file), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)]) == 2


class TestSimulate:
    def test_reproducible(self, tmp_path):
        main(["simulate", "--out", str(tmp_path / "a"), "--seed", "5"])
        main(["simulate", "--out", str(tmp_path / "b"), "--seed", "5"])
        assert (tmp_path / "a" / "X.csv").read_bytes() == (tmp_path / "b" / "X.csv").read_bytes()

    def test_matches_library(self, tmp_path):
        main(["simulate", "--out", str(tmp_path), "--seed", "2"])
        X, truth = gen_data(SimScenario.rank3(seed=2))
        np.testing.assert_array_equal(read_matrix(tmp_path / "X.csv"), X)
        np.testing.assert_array_equal(read_matrix(tmp_path / "truth_V.csv"), truth.V)

    def test_scales_in_manifest(self, tmp_path):
        main(["simulate", "--out", str(tmp_path), "--n", "100"])
        man = json.loads((tmp_path / "manifest.json").read_text())
        np.testing.assert_allclose(man["scenario"]["scales"], [25.0, 20.0, 100 / 6])

    def test_unknown_signal(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--scenario", "rank1",
                     "--signal", "square-4"]) == 2

    def test_simulate_then_fit_reproducible(self, tmp_path):
        main(["simulate", "--out", str(tmp_path / "sim"), "--seed", "11"])
        for name in ("f1", "f2"):
            main(["fit", "--input", str(tmp_path / "sim" / "X.csv"), "--out",
                  str(tmp_path / name), "--rank", "3", "--lambda-v", "0.5", "--alpha-v", "1"])
        assert ((tmp_path / "f1" / "factors.csv").read_bytes()
                == (tmp_path / "f2" / "factors.csv").read_bytes())


class TestRoc:
    def test_single_replicate_smoke(self, tmp_path, capsys):
        rc = main(["roc", "--out", str(tmp_path), "--n", "50", "--replicates", "1",
                   "--n-lambda", "11"])
        assert rc == 0
        with open(tmp_path / "roc.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 11
        assert list(rows[0]) == ["alpha", "lambda", "replicate", "tp", "fp"]
        with open(tmp_path / "auc.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2
        assert "AUC" in capsys.readouterr().out
