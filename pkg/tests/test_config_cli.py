import json
import subprocess
import sys

import numpy as np
import pytest

from qsalab.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from qsalab.config import DEFAULTS, ConfigError, ExperimentConfig
from qsalab.mdp import six_state_example, value_iteration


def write_config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


class TestConfig:
    def test_empty_document_gives_defaults(self):
        assert ExperimentConfig.from_dict({}).to_dict() == DEFAULTS

    @pytest.mark.parametrize("doc", [{}, {"mdp": {"discount": 0.9}, "n_runs": 3},
                                     {"mdp": {"random": {"n_states": 4, "n_actions": 2, "seed": 3}},
                                      "basis": {"kind": "random", "d": 3},
                                      "estimator": {"kind": "zap", "burn_in": 50}}])
    def test_round_trip(self, doc):
        cfg = ExperimentConfig.from_dict(doc)
        again = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
        assert again.to_dict() == cfg.to_dict()
        assert again.dumps() == cfg.dumps()

    @pytest.mark.parametrize("doc,field", [
        ({"mdp": {"discount": 1.0}}, "mdp.discount"),
        ({"mdp": {"builtin": "nine_state"}}, "mdp.builtin"),
        ({"policy": {"kind": "softmax"}}, "policy.kind"),
        ({"policy": {"epsilon": 2.0}}, "policy.epsilon"),
        ({"estimator": {"kind": "sarsa"}}, "estimator.kind"),
        ({"schedule": {"alpha": {"rho": 0.3}}}, "schedule.alpha"),
        ({"schedule": {"alpha": {"rho": 0.85}, "beta": {"rho": 1.0}}, "estimator": {"kind": "zap"}}, "schedule"),
        ({"n_steps": -1}, "n_steps"),
        ({"policy": {"temperature": 1}}, "policy.temperature"),
        ({"basis": {"kind": "random"}, "estimator": {"kind": "matrix_gain"}}, "estimator.kind"),
    ])
    def test_errors_name_field(self, doc, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            ExperimentConfig.from_dict(doc)

    def test_override(self):
        cfg = ExperimentConfig.from_dict({}).override(seed=4, n_runs=None)
        assert cfg.raw["seed"] == 4 and cfg.raw["n_runs"] == 1

    def test_builders(self):
        cfg = ExperimentConfig.from_dict({"estimator": {"kind": "zap"}})
        mdp = cfg.build_mdp()
        assert mdp.discount == 0.8
        assert cfg.build_basis(mdp).shape[0] == mdp.n_pairs
        assert cfg.schedules().beta.rho == 0.85


class TestSolve:
    def test_six_state(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["solve", "--out", str(out)]) == EXIT_OK
        doc = json.loads((out / "q_star.json").read_text())
        assert doc["bellman_residual"] <= 1e-10
        mdp = six_state_example(0.8)
        q = np.array([[np.inf if v == "inf" else v for v in row] for row in doc["q_star"]])
        np.testing.assert_allclose(q[mdp.mask], value_iteration(mdp)[mdp.mask], rtol=0, atol=0)
        theta = json.loads((out / "theta_star.json").read_text())["theta_star"]
        np.testing.assert_allclose(theta, value_iteration(mdp)[mdp.mask], atol=1e-8)

    def test_bad_discount(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"mdp": {"discount": 1.5}})
        assert main(["solve", "--config", cfg]) == EXIT_CONFIG
        assert "mdp.discount" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_pbe_equals_q_star(self, tmp_path, capsys):
        assert main(["pbe", "--out", str(tmp_path)]) == EXIT_OK
        doc = json.loads((tmp_path / "pbe.json").read_text())
        mdp = six_state_example(0.8)
        np.testing.assert_allclose(doc["theta_star"], value_iteration(mdp)[mdp.mask], atol=1e-8)
        assert doc["converged"] and doc["hurwitz"]


class TestRun:
    def run(self, tmp_path, doc, name):
        out = tmp_path / name
        code = main(["run", "--config", write_config(tmp_path, doc, name + ".json"), "--out", str(out)])
        return code, out

    def test_two_seeds_distinct_and_reproducible(self, tmp_path, capsys):
        doc = {"n_steps": 3000, "n_runs": 2, "seed": 7}
        code, out = self.run(tmp_path, doc, "a")
        assert code == EXIT_OK
        r7 = json.loads((out / "records" / "run_7.json").read_text())
        r8 = json.loads((out / "records" / "run_8.json").read_text())
        assert r7["snapshots"][-1]["theta"] != r8["snapshots"][-1]["theta"]
        code, out2 = self.run(tmp_path, doc, "b")
        assert (out / "runs.csv").read_bytes() == (out2 / "runs.csv").read_bytes()
        assert (out / "records" / "run_8.json").read_bytes() == (out2 / "records" / "run_8.json").read_bytes()

    def test_single_seed_matches_ensemble_member(self, tmp_path, capsys):
        self.run(tmp_path, {"n_steps": 2000, "n_runs": 2, "seed": 7}, "ens")
        self.run(tmp_path, {"n_steps": 2000, "n_runs": 1, "seed": 8}, "one")
        assert ((tmp_path / "ens" / "records" / "run_8.json").read_text()
                == (tmp_path / "one" / "records" / "run_8.json").read_text())

    def test_zap_record_has_condition_trace(self, tmp_path, capsys):
        code, out = self.run(tmp_path, {"n_steps": 5000, "estimator": {"kind": "zap"}}, "zap")
        assert code == EXIT_OK
        snaps = json.loads((out / "records" / "run_0.json").read_text())["snapshots"]
        conds = [s["cond"] for s in snaps if s["n"] > 200]
        assert conds and all(c is not None and c >= 1 for c in conds)

    def test_flags_override_config(self, tmp_path, capsys):
        out = tmp_path / "f"
        assert main(["run", "--steps", "100", "--runs", "1", "--seed", "3", "--out", str(out)]) == EXIT_OK
        cfg = json.loads((out / "config.json").read_text())
        assert (cfg["n_steps"], cfg["seed"]) == (100, 3)
        assert (out / "records" / "run_3.json").exists()

    def test_divergence_exit_code(self, tmp_path, capsys):
        doc = {"n_steps": 2000, "estimator": {"kind": "plain", "variant": "relative", "delta": 1e300}}
        code, out = self.run(tmp_path, doc, "div")
        assert code == EXIT_NUMERICAL
        rec = json.loads((out / "records" / "run_0.json").read_text())
        assert rec["status"] == "nan" and rec["events"]["nan_step"] >= 1

    def test_report(self, tmp_path, capsys):
        base = {"n_steps": 5000, "n_runs": 3, "mdp": {"discount": 0.9}}
        self.run(tmp_path, base, "std")
        self.run(tmp_path, {**base, "estimator": {"variant": "relative"}}, "rel")
        rep = tmp_path / "rep"
        assert main(["report", str(tmp_path / "std"), str(tmp_path / "rel"), "--out", str(rep)]) == EXIT_OK
        for f in ("histogram.svg", "histogram.json", "bellman_bands.svg", "span.svg", "summary.json", "summary.tsv"):
            assert (rep / f).stat().st_size > 0
        rows = json.loads((rep / "summary.json").read_text())
        assert [r["n_runs"] for r in rows] == [3, 3]
        assert "relative" in (rep / "span.svg").read_text()

    def test_report_without_records(self, tmp_path, capsys):
        assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


class TestVerify:
    def test_minorization(self, capsys):
        assert main(["verify", "minorization"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out

    def test_zapzero_spectrum(self, capsys):
        assert main(["verify", "zapzero-spectrum", "--instances", "5"]) == EXIT_OK

    def test_negativity_expected_failure(self, capsys):
        assert main(["verify", "negativity", "--epsilon-factor", "1.5", "--instances", "2"]) == EXIT_OK
        out = capsys.readouterr().out.lower()
        assert "expected" in out and "nonpositive" in out


class TestMeanflowCommand:
    def test_dump(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"mdp": {"random": {"n_states": 3, "n_actions": 2, "seed": 1}},
                                      "policy": {"kind": "tamed_gibbs", "epsilon": 0.05},
                                      "basis": {"kind": "random", "d": 2}, "estimator": {"kind": "plain"}})
        assert main(["meanflow", "--config", cfg, "--theta", "0.5,-1"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        A, b, th = np.array(doc["A"]), np.array(doc["b"]), np.array(doc["theta"])
        np.testing.assert_allclose(doc["f"], A @ th - b, atol=1e-12)
        assert np.array(doc["eigenvalues"]).shape == (2, 2)

    def test_wrong_theta_length(self, capsys):
        assert main(["meanflow", "--theta", "1,2"]) == EXIT_CONFIG


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "qsalab.cli", "solve", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "q_star.json").exists()
