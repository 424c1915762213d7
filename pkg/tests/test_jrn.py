import json
import math

import numpy as np
import pytest

from jrn_iss import dynamics as dyn
from jrn_iss import jrn
from jrn_iss.errors import InputError, ModelFormatError, TrainingError

from oracles import central_difference_gradients, random_jrn_problem, relative_errors


@pytest.fixture(scope="module")
def small_dataset():
    return dyn.generate_dataset(dyn.builtin_model("mass_spring"), 20, 30, master_seed=4)


def scalar_params(activation="identity"):
    return jrn.JrnParameters([[2.0]], [[1.0]], [[0.5]], activation)


# -- forward pass --------------------------------------------------------------


def test_zero_weights_give_zero_estimates():
    p = jrn.JrnParameters(np.zeros((4, 1)), np.zeros((4, 2)), np.zeros((2, 4)))
    X, _ = jrn.jrn_forward(p, np.random.default_rng(0).normal(size=(7, 1)))
    assert not X.any()


def test_hand_computed_scalar_recursion():
    X, A = jrn.jrn_forward(scalar_params(), [[1.0], [0.0]])
    np.testing.assert_array_equal(A[:, 0], [2.0, 1.0])
    np.testing.assert_array_equal(X[:, 0], [1.0, 0.5])


def test_tanh_output_bounded_under_huge_inputs():
    rng = np.random.default_rng(1)
    p = jrn.init_params(2, 1, 12, "tanh", rng)
    X, _ = jrn.jrn_forward(p, 1e6 * rng.normal(size=(20, 1)))
    bound = np.linalg.norm(p.W_xa, 2) * math.sqrt(p.hidden)
    assert np.all(np.linalg.norm(X, axis=1) <= bound)


def test_identity_network_is_a_linear_recursion():
    rng = np.random.default_rng(2)
    p = jrn.init_params(2, 1, 6, "identity", rng)
    y = rng.normal(size=(15, 1))
    X, _ = jrn.jrn_forward(p, y)
    x = np.zeros(2)
    for t in range(15):
        x = p.W_xa @ p.W_ay @ y[t] + p.W_xa @ p.W_ax @ x
        np.testing.assert_allclose(X[t], x, rtol=1e-12, atol=1e-14)


def test_forward_is_pure():
    rng = np.random.default_rng(3)
    p = jrn.init_params(2, 1, 5, "tanh", rng)
    y = rng.normal(size=(9, 1))
    first, _ = jrn.jrn_forward(p, y)
    jrn.jrn_forward(p, rng.normal(size=(4, 1)))
    again, _ = jrn.jrn_forward(p, y)
    np.testing.assert_array_equal(first, again)


def test_batched_forward_matches_single_sequences():
    rng = np.random.default_rng(4)
    p = jrn.init_params(2, 1, 5, "tanh", rng)
    y = rng.normal(size=(3, 8, 1))
    Xb, _ = jrn.jrn_forward(p, y)
    for b in range(3):
        np.testing.assert_allclose(Xb[b], jrn.jrn_forward(p, y[b])[0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("y, x0", [(np.zeros((5, 2)), None), (np.zeros((5, 1)), np.zeros(3)),
                                   (np.zeros(5), None)])
def test_forward_dimension_errors(y, x0):
    p = jrn.init_params(2, 1, 4, "tanh", np.random.default_rng(0))
    with pytest.raises(InputError):
        jrn.jrn_forward(p, y, x0)


# -- loss ----------------------------------------------------------------------


@pytest.mark.parametrize("x, xh, expected", [
    (np.ones((1, 1, 2)), np.ones((1, 1, 2)), 0.0),
    (np.zeros((1, 1, 2)), np.ones((1, 1, 2)), 1.0),
    (np.zeros((1, 2, 1)), np.array([[[3.0], [4.0]]]), 12.5),
])
def test_mse_loss(x, xh, expected):
    assert jrn.mse_loss(x, xh) == pytest.approx(expected)


def test_mse_loss_misaligned():
    with pytest.raises(InputError):
        jrn.mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


# -- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("activation", jrn.ACTIVATIONS)
@pytest.mark.parametrize("seed", range(5))
def test_bptt_matches_central_differences(activation, seed):
    params, y, x, x0 = random_jrn_problem(np.random.default_rng(seed), activation)
    _, analytic = jrn.jrn_backward(params, y, x, x0)
    numeric = central_difference_gradients(params, y, x, x0)
    for a, b in zip(analytic, numeric):
        assert relative_errors(a, b).max() < 1e-4


@pytest.mark.parametrize("activation", jrn.ACTIVATIONS)
def test_single_step_output_gradient_closed_form(activation):
    params, y, x, x0 = random_jrn_problem(np.random.default_rng(9), activation, T=1, batch=1)
    X, A = jrn.jrn_forward(params, y[0], x0[0])
    _, (_, _, dW_xa) = jrn.jrn_backward(params, y[0], x[0], x0[0])
    expected = (2.0 / params.n) * np.outer(X[0] - x[0, 0], A[0])
    np.testing.assert_allclose(dW_xa, expected, rtol=1e-12)


def test_gradients_vanish_at_perfect_fit():
    rng = np.random.default_rng(5)
    p = jrn.init_params(2, 1, 6, "tanh", rng)
    y = rng.normal(size=(2, 10, 1))
    X, _ = jrn.jrn_forward(p, y)
    loss, grads = jrn.jrn_backward(p, y, X)
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_cached_forward_gives_same_gradients():
    params, y, x, x0 = random_jrn_problem(np.random.default_rng(6), "tanh")
    cache = jrn.jrn_forward(params, y, x0)
    a = jrn.jrn_backward(params, y, x, x0)[1]
    b = jrn.jrn_backward(params, y, x, x0, cache=cache)[1]
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


# -- initialization and optimizer --------------------------------------------------


def test_initialization_families():
    p = jrn.init_params(2, 1, 50, "tanh", dyn.make_rng(0))
    bound = math.sqrt(6.0 / 51)
    assert np.all(np.abs(p.W_ay) <= bound)
    np.testing.assert_allclose(p.W_ax.T @ p.W_ax, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(p.W_xa @ p.W_xa.T, np.eye(2), atol=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    w = [np.array([1.0, -2.0])]
    jrn.Adam(w, lr=0.1).step(w, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(w[0], [0.9, -1.9], atol=1e-8)


def test_global_norm_clipping():
    g = jrn.clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    np.testing.assert_allclose([g[0][0], g[1][0]], [0.6, 0.8])


# -- training ------------------------------------------------------------------


def test_training_reduces_loss(small_dataset):
    cfg = jrn.TrainConfig(learning_rate=0.01, max_epochs=15, patience=100, hidden=10,
                          activation="identity", seed=0)
    _, report = jrn.train_jrn(small_dataset, cfg)
    assert report.train_loss[-1] < report.initial_train_loss
    assert report.best_val_loss < report.initial_val_loss


def test_training_is_deterministic(small_dataset, tmp_path):
    cfg = jrn.TrainConfig(max_epochs=5, hidden=8, activation="tanh", seed=3)
    runs = [jrn.train_jrn(small_dataset, cfg) for _ in range(2)]
    for k, (_, rep) in enumerate(runs):
        rep.write_log(tmp_path / f"loss{k}.csv")
    assert (tmp_path / "loss0.csv").read_bytes() == (tmp_path / "loss1.csv").read_bytes()
    for a, b in zip(runs[0][0].as_list(), runs[1][0].as_list()):
        np.testing.assert_array_equal(a, b)


def test_best_epoch_is_minimum_validation_loss(small_dataset):
    cfg = jrn.TrainConfig(max_epochs=12, patience=math.inf, hidden=8, seed=1)
    params, rep = jrn.train_jrn(small_dataset, cfg)
    assert len(rep.val_loss) == 12
    assert rep.best_val_loss == min(rep.val_loss)
    assert jrn.evaluate_loss(params, small_dataset.val) == pytest.approx(rep.best_val_loss,
                                                                        rel=1e-12)


def test_early_stopping_respects_patience(small_dataset):
    cfg = jrn.TrainConfig(learning_rate=0.05, max_epochs=400, patience=2, hidden=6, seed=0)
    _, rep = jrn.train_jrn(small_dataset, cfg)
    assert len(rep.val_loss) - rep.best_epoch == 2 or len(rep.val_loss) == 400


def test_divergence_raises_training_error(small_dataset):
    cfg = jrn.TrainConfig(learning_rate=1e9, max_epochs=20, hidden=6, activation="identity")
    with pytest.raises(TrainingError) as info:
        jrn.train_jrn(small_dataset, cfg)
    assert info.value.epoch >= 1


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(patience=0), dict(batch_size=0),
                                dict(activation="relu")])
def test_train_config_validation(kw):
    with pytest.raises(InputError):
        jrn.TrainConfig(**kw)


# -- persistence ---------------------------------------------------------------


def test_model_round_trip_is_bit_exact(tmp_path):
    p = jrn.init_params(2, 1, 7, "tanh", dyn.make_rng(5))
    digest = jrn.save_model(p, tmp_path / "a.json", dataset_hash="abc")
    q = jrn.load_model(tmp_path / "a.json")
    for a, b in zip(p.as_list(), q.as_list()):
        np.testing.assert_array_equal(a, b)
    assert jrn.save_model(q, tmp_path / "b.json", dataset_hash="abc") == digest
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_model_with_wrong_shape_header(tmp_path):
    p = jrn.init_params(2, 1, 3, "tanh", dyn.make_rng(0))
    jrn.save_model(p, tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["W_ax"]["shape"] = [3, 1]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ModelFormatError, match="W_ax"):
        jrn.load_model(tmp_path / "m.json")


@pytest.mark.parametrize("text", ["not json", '{"format_version": 7}', '{"format_version": 1}'])
def test_corrupt_model_files(tmp_path, text):
    (tmp_path / "m.json").write_text(text)
    with pytest.raises(ModelFormatError):
        jrn.load_model(tmp_path / "m.json")
