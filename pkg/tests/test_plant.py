import json
import logging
import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpvmpc import plant
from lpvmpc.bounds import DEFAULT_BOUNDS

A_TEXT = [["0.7286", "7.1252", "-0.0019"], ["0.0002", "0.9859", "8.9878e-6"], ["-0.6105", "33.94287", "0.9076"]]
B_TEXT = [["1.2639", "-1.0899", "1.0084e-5"], ["-0.0007", "0.0014", "-1.01397e-5"], ["2.9360", "-8.2453", "-0.0106"]]


def _decimal_step(x, u):
    return [sum(Decimal(a) * Decimal(str(v)) for a, v in zip(ra, x)) +
            sum(Decimal(b) * Decimal(str(v)) for b, v in zip(rb, u)) for ra, rb in zip(A_TEXT, B_TEXT)]


def test_arx_unit_vectors_pick_columns():
    m = plant.REFERENCE_ARX
    for j in range(3):
        e = np.eye(3)[j]
        assert np.array_equal(plant.arx_step(m, e, np.zeros(3))[0], m.A[:, j])
        assert np.array_equal(plant.arx_step(m, np.zeros(3), e)[0], m.B[:, j])
    assert plant.arx_step(m, [1, 0, 0], [0, 1, 0])[0].tolist() == [0.7286 - 1.0899, 0.0002 + 0.0014, -0.6105 - 8.2453]


def test_arx_hand_computed_vector():
    x, u = [100.0, 1.5, 200.0], [40.0, 5.0, 80.0]
    hand = [Decimal("128.27510672"), Decimal("1.478836384"), Decimal("246.749805")]
    assert _decimal_step(x, u) == hand
    x_next, y = plant.arx_step(plant.REFERENCE_ARX, x, u)
    for got, want in zip(x_next, hand):
        assert f"{got:.9f}" == f"{want:.9f}"
    assert y.tolist() == [100.0, 200.0]


@given(st.lists(st.integers(-500, 500), min_size=6, max_size=6))
def test_arx_matches_exact_decimal_arithmetic(v):
    x, u = v[:3], v[3:]
    got = plant.arx_step(plant.REFERENCE_ARX, x, u)[0]
    for g, d in zip(got, _decimal_step(x, u)):
        assert abs(Decimal(g) - d) <= Decimal("1e-12") * (1 + abs(d))


def test_arx_is_stable():
    assert plant.REFERENCE_ARX.spectral_radius() == pytest.approx(0.9929225173034869, rel=1e-12)


def test_steady_state_hand_values():
    s = plant.steady_state([45.0, 3.0, 70.0], 1500.0)
    assert s.t_out == pytest.approx(205.0, rel=1e-14)
    assert s.p_man == pytest.approx(1.35, rel=1e-14)
    assert s.nox == pytest.approx(2.6 * 45.0**1.3 / math.sqrt(1.35), rel=1e-14)


@pytest.mark.parametrize("u, speed", [([45, 3, 70], 1500), ([20, -2, 100], 1200), ([80, 11, 85], 1600)])
def test_steady_state_is_a_fixed_point(u, speed):
    s = plant.steady_state(u, speed)
    nxt = plant.surrogate_step(s, u, speed)
    np.testing.assert_allclose(nxt.x, s.x, rtol=1e-13)


def test_static_map_monotonicity():
    fq = np.linspace(10, 80, 8)
    assert np.all(np.diff(plant.torque_map(fq, 3.0, 85.0, 1500.0)) > 0)
    assert np.all(np.diff(plant.nox_map(fq, 3.0, 1.5, 1500.0)) > 0)
    soi = np.linspace(-2, 11, 8)
    assert np.all(np.diff(plant.nox_map(40.0, soi, 1.5, 1500.0)) < 0)
    vgt = np.linspace(70, 100, 8)
    assert np.all(np.diff(plant.boost_command(40.0, vgt, 1500.0)) > 0)
    assert np.all(np.diff(plant.nox_map(40.0, 3.0, np.linspace(1.1, 2.0, 5), 1500.0)) < 0)


def test_out_of_range_input_is_clamped_with_a_warning(caplog):
    s = plant.steady_state([40, 3, 85], 1500)
    with caplog.at_level(logging.WARNING, logger="lpvmpc.plant"):
        a = plant.surrogate_step(s, [90, 3, 85])
    b = plant.surrogate_step(s, [80, 3, 85])
    assert a == b
    assert "clamped" in caplog.text


def test_non_finite_input_is_an_error():
    s = plant.steady_state([40, 3, 85], 1500)
    with pytest.raises(FloatingPointError):
        plant.surrogate_step(s, [math.nan, 3, 85])


def test_open_loop_run_is_deterministic_and_aligned():
    u = plant.random_step_inputs(300, np.random.default_rng(5))
    a, b = plant.simulate_plant(u, 1500.0), plant.simulate_plant(u, 1500.0)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.inputs, u)
    # row k holds the state before input k is applied
    s1 = plant.surrogate_step(plant.steady_state(u[0], 1500.0), u[0], 1500.0)
    np.testing.assert_array_equal(a.states[1], s1.x)
    assert np.all(u >= DEFAULT_BOUNDS.u_min) and np.all(u <= DEFAULT_BOUNDS.u_max)


def test_feedforward_schedule():
    assert plant.feedforward_soi(1500.0) == -0.5
    assert plant.feedforward_soi(1200.0) == -2.0
    u = plant.feedforward_baseline(200.0, 1500.0)
    assert u[2] == 85.0
    s = plant.steady_state(u, 1500.0)
    assert s.t_out == pytest.approx(0.98 * 200.0, rel=1e-12)


def test_feedforward_rejects_unreachable_torque():
    with pytest.raises(plant.UnreachableTorque):
        plant.feedforward_baseline(1000.0, 1500.0)


def test_surrogate_constants_reject_unknown_keys(tmp_path):
    d = plant.DEFAULT_PARAMS.to_dict() | {"bogus": 1.0}
    (tmp_path / "p.json").write_text(json.dumps(d))
    with pytest.raises(ValueError, match="bogus"):
        plant.SurrogateParams.load(tmp_path / "p.json")
