import json

import numpy as np
import pytest

from jrn_iss import dynamics as dyn
from jrn_iss.errors import ConfigurationError, InputError
from jrn_iss.evalcli import metrics
from jrn_iss.evalcli.cli import EXIT_INVALID, EXIT_NOT_CERTIFIED, EXIT_NUMERICAL, EXIT_OK, main
from jrn_iss.evalcli.experiment import RunConfig, run_experiment
from jrn_iss.jrn import JrnParameters, save_model
from jrn_iss.verifier import export_smtlib

from oracles import contraction_query, planted_query

SMALL = """\
version = 1
[model]
name = "mass_spring"
[data]
T = 40
num_sequences = 20
seed = 7
[train]
max_epochs = 6
hidden = 8
seeds = [0]
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


# -- metrics -------------------------------------------------------------------


def test_error_curve_and_rmse_hand_values():
    x = np.zeros((2, 3, 2))
    xh = np.zeros_like(x)
    xh[0, 0] = [1.0, 1.0]
    xh[1, 2] = [2.0, 0.0]
    np.testing.assert_allclose(metrics.error_curve(x, xh), [0.5, 0.0, 1.0])
    assert metrics.error_at_t(x, xh, 3) == 1.0
    assert metrics.rmse(x, xh) == pytest.approx(np.sqrt(6.0 / 12.0))


@pytest.mark.parametrize("seed", range(5))
def test_squared_rmse_is_mean_error_curve(seed):
    rng = np.random.default_rng(seed)
    x, xh = rng.normal(size=(2, 4, 7, 3))
    assert metrics.rmse(x, xh) ** 2 == pytest.approx(metrics.error_curve(x, xh).mean(),
                                                     rel=1e-13)


def test_perfect_estimates_have_zero_error():
    x = np.random.default_rng(0).normal(size=(3, 5, 2))
    assert metrics.rmse(x, x) == 0.0
    assert not metrics.error_curve(x, x).any()


@pytest.mark.parametrize("shapes", [((2, 3, 2), (2, 3, 1)), ((3, 2), (3, 2)), ((0, 3, 2), (0, 3, 2))])
def test_metric_shape_errors(shapes):
    with pytest.raises(InputError):
        metrics.rmse(np.zeros(shapes[0]), np.zeros(shapes[1]))


@pytest.mark.parametrize("t", [0, 4])
def test_error_at_t_range(t):
    with pytest.raises(InputError):
        metrics.error_at_t(np.zeros((1, 3, 1)), np.zeros((1, 3, 1)), t)


# -- run configuration -----------------------------------------------------------


@pytest.mark.parametrize("name, T, N, lr, patience", [
    ("mass_spring", 300, 100, 0.01, 10),
    ("down_pendulum", 300, 200, 0.01, 25),
    ("reversed_vdp", 200, 200, 0.001, 25),
])
def test_presets_carry_table_hyperparameters(name, T, N, lr, patience):
    cfg = RunConfig.preset(name)
    assert (cfg.data["T"], cfg.data["num_sequences"]) == (T, N)
    assert cfg.train["learning_rate"] == lr
    assert cfg.train["patience"] == patience
    assert cfg.train["batch_size"] == 40 and cfg.train["hidden"] == 50
    assert cfg.certify["lower"] == 0.01 and cfg.certify["upper"] == 100.0


def test_preset_filters():
    assert RunConfig.preset("mass_spring").filters["kinds"] == ["kf"]
    assert RunConfig.preset("down_pendulum").filters["kinds"] == ["ekf", "ukf"]


@pytest.mark.parametrize("d", [
    {"version": 2, "model": {"name": "mass_spring"}},
    {"model": {"name": "mass_spring"}},
    {"version": 1, "model": {"name": "mass_spring"}, "plots": {}},
    {"version": 1, "model": {"name": "mass_spring"}, "train": {"momentum": 0.9}},
    {"version": 1, "model": {"name": "mass_spring"}, "train": {"hidden": "fifty"}},
    {"version": 1, "model": {"name": "mass_spring"}, "train": {"hidden": True}},
    {"version": 1, "model": {"name": "mass_spring"}, "data": {"num_sequences": 15}},
    {"version": 1, "model": {"name": "down_pendulum"}, "filters": {"kinds": ["kf"]}},
    {"version": 1, "model": {"name": "mass_spring"}, "filters": {"ekf_mode": "sometimes"}},
    {"version": 1, "model": {"name": "mass_spring"}, "certify": {"exclusion": 3.0}},
    {"version": 1, "model": {"name": "mass_spring"}, "certify": {"Q_scale": 0.0}},
    {"version": 1, "model": {}},
    {"version": 1, "model": {"name": "cartpole"}},
])
def test_config_rejections(d):
    with pytest.raises((ConfigurationError, KeyError)):
        RunConfig.from_dict(d)


def test_integer_literals_accepted_for_floats():
    cfg = RunConfig.from_dict({"version": 1, "model": {"name": "mass_spring"},
                               "train": {"learning_rate": 1}})
    assert cfg.train["learning_rate"] == 1.0 and isinstance(cfg.train["learning_rate"], float)


def test_config_hash_ignores_output_directory(small_config):
    cfg = RunConfig.load(small_config)
    assert cfg.with_overrides(out="a").config_hash() == cfg.with_overrides(out="b").config_hash()
    assert cfg.with_overrides(seed=5).config_hash() != cfg.config_hash()


def test_seed_override_applies_to_training_and_certification(small_config):
    cfg = RunConfig.load(small_config).with_overrides(seed=9)
    assert cfg.train["seeds"] == [9] and cfg.certify["seed"] == 9


def test_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("version = = 1")
    with pytest.raises(ConfigurationError):
        RunConfig.load(path)
    with pytest.raises(ConfigurationError):
        RunConfig.load(tmp_path / "missing.toml")


# -- experiment ------------------------------------------------------------------


def test_experiment_report_and_hash_chain(small_config, tmp_path):
    cfg = RunConfig.load(small_config).with_overrides(out=str(tmp_path / "run"))
    cfg.train["seeds"] = [0, 1, 2]
    report = run_experiment(cfg)
    run = tmp_path / "run"
    assert report["dataset_hash"] == dyn.dataset_hash(run / "data")
    model = json.loads((run / "model.json").read_text())
    assert model["dataset_hash"] == report["dataset_hash"]
    by_seed = report["jrn_rmse_by_seed"]
    assert report["jrn_rmse_median"] == pytest.approx(np.median(list(by_seed.values())))
    assert report["rmse"]["jrn"] == report["jrn_rmse_median"]
    assert set(report["rmse"]) == {"jrn", "kf"}
    curves = np.loadtxt(run / "error_curves.csv", delimiter=",", skiprows=1)
    assert curves.shape == (40, 3)
    assert np.sqrt(curves[:, 1].mean()) == pytest.approx(report["rmse"]["jrn"], rel=1e-12)
    assert "seconds" not in (run / "report.json").read_text()
    assert "test_seconds" in json.loads((run / "timings.json").read_text())


# -- command line ----------------------------------------------------------------


def cli(*args):
    return main([str(a) for a in args])


def test_gen_train_certify_exit_ok(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli("gen", "--config", small_config, "--out", out) == EXIT_OK
    assert cli("train", "--config", small_config, "--out", out) == EXIT_OK
    assert cli("certify", "--config", small_config, "--out", out) == EXIT_OK
    assert "status: certified" in capsys.readouterr().out
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["model_hash"] == cert["certificate"]["model_hash"]
    assert cert["certificate"]["extra"]["residual"] < 1e-10


@pytest.mark.parametrize("text", ["version = 2\n[model]\nname = 'mass_spring'\n",
                                  "version = 1\n[model]\nname = 'cartpole'\n",
                                  "version = 1\n[model]\nname = 'mass_spring'\n[data]\nT = 0\n"])
def test_invalid_config_exit_code(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    assert cli("gen", "--config", path, "--out", tmp_path / "r") == EXIT_INVALID


def test_missing_model_file_exit_code(small_config, tmp_path):
    assert cli("certify", "--config", small_config, "--out", tmp_path / "r",
               "--model-file", tmp_path / "nope.json") == EXIT_INVALID


def test_divergent_training_exit_code(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(SMALL.replace("hidden = 8", "hidden = 8\nlearning_rate = 1e9\n"
                                  "activation = \"identity\""))
    assert cli("train", "--config", path, "--out", tmp_path / "r") == EXIT_NUMERICAL


def test_unstable_estimator_exit_code(small_config, tmp_path, capsys):
    model = tmp_path / "unstable.json"
    save_model(JrnParameters(np.zeros((2, 1)), 1.5 * np.eye(2), np.eye(2), "identity"), model)
    code = cli("certify", "--config", small_config, "--out", tmp_path / "r", "--model-file", model)
    assert code == EXIT_NOT_CERTIFIED
    assert "instability" in capsys.readouterr().out


@pytest.mark.parametrize("query, code", [(lambda: contraction_query(0), EXIT_OK),
                                         (lambda: planted_query(0)[0], EXIT_NOT_CERTIFIED)])
def test_verify_query_command(tmp_path, capsys, query, code):
    path = tmp_path / "q.smt2"
    path.write_text(export_smtlib(query()))
    assert cli("verify-query", path) == code
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == ("unsat" if code == EXIT_OK else "counterexample")


def test_reruns_are_byte_identical(small_config, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("gen", "train", "certify"):
            assert cli(cmd, "--config", small_config, "--out", out) == EXIT_OK
        runs.append(out)
    for rel in ("data/meta.json", "data/train.csv", "data/val.csv", "data/test.csv",
                "model.json", "loss.csv", "certificate.json"):
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel
