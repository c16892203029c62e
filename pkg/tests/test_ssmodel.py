import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grayboxid.exceptions import (
    ConfigError,
    IdentifiabilityWarning,
    StabilityWarning,
    StructureError,
)
from grayboxid.ssmodel import (
    ParametrizedStructure,
    StateSpace,
    add_noise,
    evaluate,
    get_fixture,
    load_structure,
    simulate,
    spectral_radius,
    structure_to_dict,
)

from conftest import random_structure

THETA1 = np.array([-0.394, -0.893, 0.325, 0.383])
THETA2 = np.array([-0.537, 0.567, -0.363, 0.156])


def test_example1_entries(fx):
    A = evaluate(fx["example1"], THETA1).A
    assert A[0, 0] == pytest.approx(0.394)
    assert A[1, 0] == pytest.approx(-0.394)
    assert A[0, 1] == pytest.approx(0.325)
    assert A[0, 2] == 0.0 and A[2, 0] == 0.0
    ss = evaluate(fx["example1"], THETA1)
    np.testing.assert_array_equal(ss.B, [[0], [0], [1]])
    np.testing.assert_array_equal(ss.C, [[0, 0, 1]])


def test_example1_full_matrix(fx):
    t1, t2, t3, t4 = THETA1
    expected = np.array([
        [-t1, t3, 0],
        [t1, -t2 - t3, t4],
        [0, t2, -t4],
    ])
    np.testing.assert_allclose(evaluate(fx["example1"], THETA1).A, expected, atol=1e-15)


def test_example2_layout(fx):
    ss = evaluate(fx["example2"], THETA2)
    np.testing.assert_array_equal(ss.A[:2], [[0, -1, 0.15], [0.2, 0, 0]])
    np.testing.assert_allclose(ss.A[2], THETA2[:3])
    np.testing.assert_allclose(ss.B.ravel(), [0, 0, THETA2[3]])
    np.testing.assert_array_equal(ss.C, [[0, 1, 0]])


def test_unidentifiable_variant(fx):
    s = fx["unidentifiable"]
    ss = evaluate(s, THETA1)
    np.testing.assert_array_equal(ss.C, [[1, 0, 0]])
    t1, t2, t3, t4 = THETA1
    assert ss.A[2, 1] == pytest.approx(t3)


def test_fixture_true_values(fx):
    np.testing.assert_array_equal(fx["example1"].theta_true, THETA1)
    np.testing.assert_array_equal(fx["example2"].theta_true, THETA2)
    for s in fx.values():
        assert spectral_radius(s.evaluate(s.theta_true).A) < 1


def test_fixture_minimal(fx):
    # controllability and observability ranks
    for s in fx.values():
        ss = s.evaluate(s.theta_true)
        ctrb = np.hstack([np.linalg.matrix_power(ss.A, k) @ ss.B for k in range(3)])
        obsv = np.vstack([ss.C @ np.linalg.matrix_power(ss.A, k) for k in range(3)])
        assert np.linalg.matrix_rank(ctrb) == 3
        assert np.linalg.matrix_rank(obsv) == 3


def test_get_fixture_unknown():
    with pytest.raises(ConfigError, match="unknown fixture"):
        get_fixture("nope")


def test_evaluate_zero_returns_constant_terms(rng):
    s = random_structure(rng)
    ss = evaluate(s, np.zeros(s.q))
    np.testing.assert_array_equal(ss.A, s.A_coeffs[0])
    np.testing.assert_array_equal(ss.B, s.B_coeffs[0])
    np.testing.assert_array_equal(ss.C, s.C_coeffs[0])


def test_evaluate_identity_coefficient():
    s = ParametrizedStructure([np.zeros((2, 2)), np.eye(2)], [np.ones((2, 1))] * 2,
                              [np.ones((2, 2))] * 2)
    np.testing.assert_array_equal(evaluate(s, [2.0]).A, 2 * np.eye(2))


def test_evaluate_wrong_length(fx):
    with pytest.raises(StructureError):
        evaluate(fx["example1"], [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
def test_evaluate_is_affine(alpha, seed):
    rng = np.random.default_rng(seed)
    s = random_structure(rng, n=3, q=3)
    t1, t2 = rng.standard_normal(3), rng.standard_normal(3)
    mix = evaluate(s, alpha * t1 + (1 - alpha) * t2)
    a, b = evaluate(s, t1), evaluate(s, t2)
    for X, Y, Z in ((mix.A, a.A, b.A), (mix.B, a.B, b.B), (mix.C, a.C, b.C)):
        np.testing.assert_allclose(X, alpha * Y + (1 - alpha) * Z, atol=1e-10)


def test_structure_shape_checks(rng):
    with pytest.raises(StructureError):
        ParametrizedStructure([np.eye(2), np.eye(3)], [np.ones((2, 1))] * 2, [np.ones((1, 2))] * 2)
    with pytest.raises(StructureError):
        ParametrizedStructure([np.eye(2)] * 2, [np.ones((2, 1))] * 3, [np.ones((1, 2))] * 2)
    with pytest.raises(StructureError):
        ParametrizedStructure([np.eye(2)], [np.ones((2, 1))], [np.ones((1, 2))])


def test_identifiability_warning():
    n, q = 2, 4  # q >= n(p+m) = 4
    with pytest.warns(IdentifiabilityWarning):
        ParametrizedStructure([np.eye(n)] * (q + 1), [np.ones((n, 1))] * (q + 1),
                              [np.ones((1, n))] * (q + 1))


def test_structures_are_immutable(fx):
    s = fx["example1"]
    with pytest.raises(ValueError):
        s.A_coeffs[1][0, 0] = 5.0


def test_simulate_zero_input():
    ss = StateSpace(0.5 * np.eye(2), np.ones((2, 1)), np.ones((1, 2)))
    sim = simulate(ss, np.zeros((1, 20)))
    np.testing.assert_array_equal(sim.Y_clean, 0)
    assert sim.snr_db is None
    np.testing.assert_array_equal(sim.Y, sim.Y_clean)


def test_simulate_unit_delay(rng):
    U = rng.standard_normal((2, 15))
    sim = simulate(StateSpace(np.zeros((2, 2)), np.eye(2), np.eye(2)), U)
    np.testing.assert_array_equal(sim.Y[:, 0], 0)
    np.testing.assert_allclose(sim.Y[:, 1:], U[:, :-1])


def test_simulate_impulse_gives_markov_parameters(fx):
    s = fx["example1"]
    ss = s.evaluate(s.theta_true)
    U = np.zeros((1, 30))
    U[0, 0] = 1.0
    y = simulate(ss, U).Y[0]
    assert y[0] == 0.0
    for k in range(1, 30):
        oracle = (ss.C @ np.linalg.matrix_power(ss.A, k - 1) @ ss.B).item()
        assert y[k] == pytest.approx(oracle, abs=1e-14)


def test_simulate_superposition(fx, rng):
    ss = fx["example2"].evaluate(THETA2)
    u1, u2 = rng.standard_normal((1, 50)), rng.standard_normal((1, 50))
    y12 = simulate(ss, u1 + u2).Y
    np.testing.assert_allclose(y12, simulate(ss, u1).Y + simulate(ss, u2).Y, atol=1e-12)


def test_simulate_initial_state():
    ss = StateSpace([[0.5]], [[0.0]], [[1.0]])
    y = simulate(ss, np.zeros((1, 5)), x0=[2.0]).Y[0]
    np.testing.assert_allclose(y, 2.0 * 0.5 ** np.arange(5))


def test_simulate_checks():
    ss = StateSpace([[0.5]], [[1.0]], [[1.0]])
    with pytest.raises(StructureError):
        simulate(ss, np.zeros((1, 0)))
    with pytest.raises(StructureError):
        simulate(ss, np.zeros((2, 5)))
    with pytest.warns(StabilityWarning):
        simulate(StateSpace([[1.5]], [[1.0]], [[1.0]]), np.ones((1, 3)))


def test_statespace_transform_preserves_markov(rng, fx):
    ss = fx["example1"].evaluate(THETA1)
    T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    np.testing.assert_allclose(ss.transform(T).markov_parameters(8), ss.markov_parameters(8),
                               atol=1e-12)


def test_add_noise_snr_matches(fx, rng):
    ss = fx["example1"].evaluate(THETA1)
    sim = simulate(ss, rng.standard_normal((1, 100_000)))
    noisy = add_noise(sim, 20.0, 3)
    noise = noisy.Y - noisy.Y_clean
    snr = 10 * np.log10(np.var(sim.Y_clean) / np.var(noise))
    assert abs(snr - 20.0) < 0.5
    np.testing.assert_array_equal(noisy.Y_clean, sim.Y_clean)
    assert noisy.snr_db == 20.0


def test_add_noise_multichannel_per_channel_snr(rng):
    ss = StateSpace(0.3 * np.eye(2), np.eye(2), np.diag([1.0, 10.0]))
    sim = simulate(ss, rng.standard_normal((2, 50_000)))
    noise = add_noise(sim, 10.0, 1).Y - sim.Y_clean
    snr = 10 * np.log10(np.var(sim.Y_clean, axis=1) / np.var(noise, axis=1))
    np.testing.assert_allclose(snr, 10.0, atol=0.5)


def test_add_noise_none_and_determinism(fx, rng):
    sim = simulate(fx["example1"].evaluate(THETA1), rng.standard_normal((1, 200)))
    for clean in (None, np.inf):
        out = add_noise(sim, clean, 0)
        np.testing.assert_array_equal(out.Y, out.Y_clean)
        assert out.snr_db is None
    np.testing.assert_array_equal(add_noise(sim, 30, 11).Y, add_noise(sim, 30, 11).Y)
    assert not np.array_equal(add_noise(sim, 30, 11).Y, add_noise(sim, 30, 12).Y)


def test_add_noise_zero_variance():
    ss = StateSpace([[0.5]], [[1.0]], [[1.0]])
    sim = simulate(ss, np.zeros((1, 10)))
    with pytest.raises(ValueError, match="SNR"):
        add_noise(sim, 10.0, 0)


def test_load_structure_round_trip(tmp_path, fx):
    import yaml

    for s in fx.values():
        path = tmp_path / f"{s.name}.yaml"
        path.write_text(yaml.safe_dump(structure_to_dict(s)))
        back = load_structure(path)
        for a, b in zip(back.A_coeffs + back.B_coeffs + back.C_coeffs,
                        s.A_coeffs + s.B_coeffs + s.C_coeffs):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.theta_true, s.theta_true)


def test_load_structure_sources(fx):
    assert load_structure("example2").name == "example2"
    assert load_structure({"fixture": "example1"}).name == "example1"


def test_load_structure_reports_line(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nA: [[[1]]\nB: [[1]]\n")
    with pytest.raises(ConfigError, match="line"):
        load_structure(bad)
    wrong = tmp_path / "wrong.yaml"
    wrong.write_text("name: x\nn: 2\nA: [[[0.5]], [[1.0]]]\nB: [[[1]], [[0]]]\nC: [[[1]], [[0]]]\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_structure(wrong)


def test_load_structure_missing(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_structure(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError, match="missing key"):
        load_structure({"A": [[[1]]]})
