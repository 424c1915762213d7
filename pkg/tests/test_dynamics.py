import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jrn_iss import dynamics as dyn
from jrn_iss.errors import (ConfigurationError, DivergenceError, InputError, ModelFormatError,
                            UnknownModelError)

MODELS = ("mass_spring", "down_pendulum", "reversed_vdp")


def taylor_expm(M, terms=30):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def taylor_error_bound(A_c, dt):
    """Remainder bound of the 4th-order Taylor polynomial of expm(A_c dt)."""
    a = np.linalg.norm(A_c, 2) * dt
    return a ** 5 / 120 * math.exp(a)


# -- discretization -------------------------------------------------------------


def test_zoh_of_zero_matrix_is_identity():
    np.testing.assert_array_equal(dyn.discretize_linear_zoh(np.zeros((2, 2)), 0.1), np.eye(2))


def test_zoh_scalar_decay():
    assert dyn.discretize_linear_zoh([[-1.0]], 0.1)[0, 0] == pytest.approx(0.90483742, abs=1e-8)


@pytest.mark.parametrize("dt", [0.01, 0.05, 0.1])
def test_zoh_mass_spring_matches_taylor_series(dt):
    A_c = dyn.mass_spring_matrix(m=10.0, b=6.0, k=800.0)
    np.testing.assert_allclose(A_c, [[0.0, 1.0], [-80.0, -0.6]])
    # The series converges slowly for large |A_c dt|, so square down first.
    s = 8
    expected = np.linalg.matrix_power(taylor_expm(A_c * dt / 2 ** s), 2 ** s)
    np.testing.assert_allclose(dyn.discretize_linear_zoh(A_c, dt), expected, atol=1e-10)


@pytest.mark.parametrize("A_c, dt", [
    (np.zeros((2, 3)), 0.1),
    (np.array([[np.nan]]), 0.1),
    (np.eye(2), 0.0),
    (np.eye(2), -1.0),
])
def test_zoh_rejects_bad_input(A_c, dt):
    with pytest.raises(InputError):
        dyn.discretize_linear_zoh(A_c, dt)


def test_mass_spring_discrete_matrix_is_schur_stable():
    A, _ = dyn.builtin_model("mass_spring").linear
    assert np.max(np.abs(np.linalg.eigvals(A))) < 1.0


# -- RK4 -----------------------------------------------------------------------


def test_rk4_zero_field_is_identity():
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(dyn.rk4_step(lambda z: 0.0 * z, x, 0.1), x)


@pytest.mark.parametrize("h", [0.1, 0.05, 0.3])
def test_rk4_linear_decay_equals_fourth_order_taylor(h):
    got = dyn.rk4_step(lambda z: -z, np.array([1.0]), h)[0]
    assert got == pytest.approx(1 - h + h ** 2 / 2 - h ** 3 / 6 + h ** 4 / 24, abs=1e-14)
    if h == 0.1:
        assert got == pytest.approx(0.90483750, abs=1e-9)


def test_rk4_harmonic_oscillator_energy_drift():
    x = np.array([1.0, 0.0])
    for _ in range(1000):
        x = dyn.rk4_step(lambda z: np.array([z[1], -z[0]]), x, 0.01)
    assert abs(x @ x - 1.0) < 1e-6
    np.testing.assert_allclose(x, [math.cos(10.0), -math.sin(10.0)], atol=1e-8)


def test_rk4_rejects_nonpositive_step():
    with pytest.raises(InputError):
        dyn.rk4_step(lambda z: z, np.ones(1), 0.0)


@pytest.mark.parametrize("name", ["down_pendulum", "reversed_vdp"])
def test_rk4_jacobian_matches_finite_differences(name):
    model = dyn.builtin_model(name)
    rng = np.random.default_rng(7)
    for x in rng.uniform(-2, 2, (100, 2)):
        fd = dyn.finite_difference_jacobian(model.f, x)
        np.testing.assert_allclose(model.jacobian_f(x), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", MODELS)
def test_measurement_jacobian_matches_finite_differences(name):
    model = dyn.builtin_model(name)
    for x in np.random.default_rng(3).uniform(-2, 2, (100, 2)):
        np.testing.assert_allclose(model.jacobian_h(x),
                                   dyn.finite_difference_jacobian(model.h, x), atol=1e-8)


# -- built-in models -----------------------------------------------------------


def test_table_parameters():
    assert dyn.builtin_model("mass_spring").params == {"m": 10.0, "b": 6.0, "k": 800.0}
    p = dyn.builtin_model("down_pendulum").params
    assert (p["m"], p["b"], p["l"]) == (2.0, 0.9, 1.0)


@pytest.mark.parametrize("name", MODELS)
def test_origin_is_an_equilibrium(name):
    model = dyn.builtin_model(name)
    np.testing.assert_array_equal(model.f(np.zeros(2)), 0.0)
    np.testing.assert_array_equal(model.h(np.zeros(2)), 0.0)


@pytest.mark.parametrize("name", MODELS)
def test_default_covariances(name):
    model = dyn.builtin_model(name)
    for cov in (model.Q_w, model.R_v, model.P0):
        np.testing.assert_array_equal(cov, 0.01 * np.eye(cov.shape[0]))


def test_unknown_model():
    with pytest.raises(UnknownModelError):
        dyn.builtin_model("cartpole")


@pytest.mark.parametrize("label", ["Q_w", "R_v", "P0"])
def test_covariance_validation(label):
    model = dyn.builtin_model("down_pendulum")
    bad = -np.eye(1 if label == "R_v" else 2)
    with pytest.raises(ConfigurationError):
        model.with_noise(**{label: bad})


@pytest.mark.parametrize("name", ["down_pendulum", "reversed_vdp"])
def test_noise_free_decay_to_origin(name):
    model = dyn.builtin_model(name)
    T = int(math.ceil(20.0 / model.dt))
    rng = np.random.default_rng(11)
    for _ in range(20):
        d = rng.standard_normal(2)
        x0 = rng.uniform(0.05, 1.2) * d / np.linalg.norm(d)
        traj = dyn.simulate_noise_free(model, x0, T)
        assert np.linalg.norm(traj[-1]) < 0.05 * np.linalg.norm(x0)


def test_pendulum_jacobian_at_origin_matches_small_angle_zoh():
    model = dyn.builtin_model("down_pendulum")
    p = model.params
    A_c = np.array([[0.0, 1.0], [-p["g"] / p["l"], -p["b"] / (p["m"] * p["l"] ** 2)]])
    zoh = dyn.discretize_linear_zoh(A_c, model.dt)
    # RK4 is a 4th-order truncation of the matrix exponential.
    err = np.max(np.abs(model.jacobian_f(np.zeros(2)) - zoh))
    assert err < taylor_error_bound(A_c, model.dt)


# -- simulation ----------------------------------------------------------------


def test_zero_noise_zero_mean_stays_at_origin():
    model = dyn.builtin_model("down_pendulum", noise=0.0)
    tr = dyn.simulate_trajectory(model, 50, seed=4, zero_mean=True)
    assert not tr.states.any()
    assert not tr.measurements.any()


@pytest.mark.parametrize("name", MODELS)
def test_same_seed_same_trajectory(name):
    model = dyn.builtin_model(name)
    a = dyn.simulate_trajectory(model, 40, seed=99)
    b = dyn.simulate_trajectory(model, 40, seed=99)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.measurements, b.measurements)


def test_gaussian_sampler_variance():
    rng = dyn.make_rng(2024)
    w = dyn.sample_gaussian(rng, 0.01 * np.eye(2), 100_000)
    np.testing.assert_allclose(w.var(axis=0), 0.01, rtol=0.05)


def test_psd_sqrt_handles_singular_covariance():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = dyn.psd_sqrt(cov)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-12)


def test_simulation_shapes_and_alignment():
    model = dyn.builtin_model("mass_spring")
    tr = dyn.simulate_trajectory(model, 25, seed=1)
    assert tr.states.shape == (26, 2)
    assert tr.measurements.shape == (25, 1)
    assert tr.T == 25


def test_divergence_is_reported():
    model = dyn.linear_model("unstable", [[2.0]], [[1.0]], [[0.0]], [[0.0]], [[0.0]])
    with pytest.raises(DivergenceError):
        dyn.simulate_trajectory(model, 100, seed=0)


# -- datasets ------------------------------------------------------------------


@pytest.mark.parametrize("count, sizes", [(100, (80, 10, 10)), (200, (160, 20, 20)), (10, (8, 1, 1))])
def test_split_sizes(count, sizes):
    ds = dyn.generate_dataset(dyn.builtin_model("mass_spring"), count, 3, master_seed=0)
    assert (len(ds.train), len(ds.val), len(ds.test)) == sizes


@pytest.mark.parametrize("count", [0, 15, -10])
def test_split_size_must_be_multiple_of_ten(count):
    with pytest.raises(ConfigurationError):
        dyn.generate_dataset(dyn.builtin_model("mass_spring"), count, 3, master_seed=0)


def test_master_seeds_give_disjoint_trajectories():
    model = dyn.builtin_model("down_pendulum")
    a = dyn.generate_dataset(model, 20, 10, master_seed=1)
    b = dyn.generate_dataset(model, 20, 10, master_seed=2)
    sa = {tr.states.tobytes() for part in a.splits().values() for tr in part}
    sb = {tr.states.tobytes() for part in b.splits().values() for tr in part}
    assert len(sa) == 20
    assert not sa & sb


def test_dataset_round_trip_is_exact(tmp_path):
    model = dyn.builtin_model("reversed_vdp")
    ds = dyn.generate_dataset(model, 10, 12, master_seed=5)
    dyn.save_dataset(ds, tmp_path / "a")
    back = dyn.load_dataset(tmp_path / "a")
    assert back.model.dt == model.dt
    for x, y in zip(ds.test + ds.train, back.test + back.train):
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.measurements, y.measurements)
        np.testing.assert_array_equal(x.x0_mean, y.x0_mean)
    dyn.save_dataset(back, tmp_path / "b")
    assert dyn.dataset_hash(tmp_path / "a") == dyn.dataset_hash(tmp_path / "b")


def test_regeneration_is_bit_identical(tmp_path):
    model = dyn.builtin_model("down_pendulum")
    for d in ("a", "b"):
        dyn.save_dataset(dyn.generate_dataset(model, 10, 8, master_seed=3), tmp_path / d)
    assert dyn.dataset_hash(tmp_path / "a") == dyn.dataset_hash(tmp_path / "b")


def test_load_rejects_wrong_model(tmp_path):
    ds = dyn.generate_dataset(dyn.builtin_model("mass_spring"), 10, 4, master_seed=0)
    dyn.save_dataset(ds, tmp_path)
    with pytest.raises(ConfigurationError):
        dyn.load_dataset(tmp_path, dyn.builtin_model("down_pendulum"))


def test_load_rejects_bad_version(tmp_path):
    ds = dyn.generate_dataset(dyn.builtin_model("mass_spring"), 10, 4, master_seed=0)
    dyn.save_dataset(ds, tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ModelFormatError):
        dyn.load_dataset(tmp_path)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_float_format_round_trips(x):
    assert float(dyn.fmt_float(x)) == x
