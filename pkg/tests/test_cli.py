import json
import subprocess
import sys

import numpy as np
import pytest

from nashnet import cli


def run(args, out):
    return cli.main(args + ["--out-dir", str(out)])


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


HALVING = {"schema_version": 1, "seed": 0, "x0": [8.0], "layers": [{"W": [[0.5]], "activation": "identity"}],
           "schedule": 1.0}


class TestExitCodes:
    def test_iterate_success(self, tmp_path):
        assert run(["iterate", "fixture:halving"], tmp_path) == cli.EXIT_OK
        rep = json.loads((tmp_path / "report.json").read_text())
        assert abs(rep["x_star"][0]) <= 1e-8 and rep["nash"]["is_equilibrium"]

    def test_not_converged(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dict(HALVING, max_iter=3))
        assert run(["iterate", cfg], tmp_path / "out") == cli.EXIT_VERIFY

    def test_unknown_field_is_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", dict(HALVING, typo=1))
        assert run(["iterate", cfg], tmp_path / "out") == cli.EXIT_CONFIG
        assert "typo" in capsys.readouterr().err

    def test_wrong_schema_version(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dict(HALVING, schema_version=2))
        assert run(["iterate", cfg], tmp_path / "out") == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert run(["iterate", str(tmp_path / "none.json")], tmp_path / "out") == cli.EXIT_CONFIG

    def test_unknown_fixture(self, tmp_path, capsys):
        assert run(["iterate", "fixture:nope"], tmp_path) == cli.EXIT_CONFIG
        assert "halving" in capsys.readouterr().err

    def test_expansive_contraction_is_config_error(self, tmp_path):
        doc = dict(HALVING, mode="contraction", layers=[{"W": [[1.2]], "activation": "tanh"}])
        assert run(["iterate", write_config(tmp_path / "c.json", doc)], tmp_path / "out") == cli.EXIT_CONFIG

    def test_unknown_kind(self, tmp_path, capsys):
        assert run(["check-averaged", "--kind", "nope"], tmp_path) == cli.EXIT_CONFIG
        assert "sigmoid" in capsys.readouterr().err

    def test_check_fails_below_constant(self, tmp_path):
        assert run(["check-averaged", "--kind", "tanh", "--gamma", "0.3"], tmp_path) == cli.EXIT_VERIFY

    def test_large_decoder_not_certified(self, tmp_path, capsys):
        assert run(["llm-fixpoint", "fixture:llm_large"], tmp_path) == cli.EXIT_VERIFY
        assert "WARNING" in capsys.readouterr().err

    def test_small_decoder(self, tmp_path):
        assert run(["llm-fixpoint", "fixture:llm_small"], tmp_path) == cli.EXIT_OK
        assert json.loads((tmp_path / "report.json").read_text())["certified"]

    def test_dependent_family(self, tmp_path):
        doc = {"schema_version": 1, "seed": 0, "family": [[[1.0], [2.0]], [[2.0], [4.0]]]}
        assert run(["gram-schmidt", write_config(tmp_path / "c.json", doc)], tmp_path / "out") == cli.EXIT_VERIFY


class TestOutputs:
    def test_manifest(self, tmp_path):
        run(["iterate", "fixture:halving", "--seed", "3"], tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["seed"] == 3 and m["exit_code"] == 0 and m["command"] == "iterate"
        assert set(m["outputs"]) == {"report.json", "trace.json"} and len(m["config_hash"]) == 64
        assert {"started_at", "finished_at", "artifact_version", "tolerances"} <= set(m)

    def test_seed_changes_hash(self, tmp_path):
        hashes = []
        for s in ("1", "2"):
            run(["iterate", "fixture:halving", "--seed", s], tmp_path / s)
            hashes.append(json.loads((tmp_path / s / "manifest.json").read_text())["config_hash"])
        assert hashes[0] != hashes[1]

    def test_csv_trace(self, tmp_path):
        run(["iterate", "fixture:halving", "--format", "csv"], tmp_path)
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0].startswith("t,residual") and len(lines) > 2

    def test_catalog_csv(self, tmp_path):
        assert run(["catalog", "--format", "csv"], tmp_path) == 0
        assert len((tmp_path / "catalog.csv").read_text().splitlines()) == 48

    def test_check_all_writes_every_row(self, tmp_path):
        run(["check-averaged", "--all", "--samples", "200"], tmp_path)
        assert len(list((tmp_path / "reports").glob("*.json"))) == 47
        assert len(json.loads((tmp_path / "summary.json").read_text())) == 47

    def test_train_fixture(self, tmp_path):
        assert run(["train", "fixture:teacher_student", "--format", "csv"], tmp_path) == 0
        assert (tmp_path / "history.csv").read_text().startswith("epoch,residual_layer1")
        theta = json.loads((tmp_path / "theta.json").read_text())
        assert all({"W", "b"} == set(p) for p in theta)

    def test_federated_log(self, tmp_path):
        assert run(["federated", "fixture:federated_single"], tmp_path) == 0
        lines = (tmp_path / "rounds.jsonl").read_text().splitlines()
        assert all(isinstance(json.loads(l), dict) for l in lines)

    def test_family_files(self, tmp_path):
        rng = np.random.default_rng(0)
        for k in range(2):
            np.savetxt(tmp_path / f"m{k}.csv", rng.standard_normal((50, 1)) + k, delimiter=",")
        doc = {"schema_version": 1, "seed": 0, "family_files": ["m0.csv", "m1.csv"], "predictor": {"x": 0, "y": 1}}
        assert run(["gram-schmidt", write_config(tmp_path / "c.json", doc)], tmp_path / "out") == 0
        rep = json.loads((tmp_path / "out" / "report.json").read_text())
        assert rep["passed"] and "slope" in rep["predictor"]

    def test_global_flags_before_subcommand(self, tmp_path):
        assert cli.main(["--out-dir", str(tmp_path), "--seed", "5", "iterate", "fixture:halving"]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5


def test_console_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nashnet", "iterate", "fixture:halving", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "residual_tol" in proc.stdout


def test_rng_streams_are_independent():
    a = cli.rng_for(0, "init").standard_normal(3)
    b = cli.rng_for(0, "llm_x0").standard_normal(3)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, cli.rng_for(0, "init").standard_normal(3))


@pytest.mark.parametrize("name", cli.FIXTURES)
def test_fixtures_validate(name):
    schema = {"halving": "iterate", "relu_tanh": "iterate", "teacher_student": "train", "federated_single": "federated",
              "federated_two_shard": "federated", "gs_two_vectors": "gram_schmidt", "llm_small": "llm_fixpoint",
              "llm_large": "llm_fixpoint"}[name]
    assert cli.load_config(f"fixture:{name}", schema)["schema_version"] == 1
