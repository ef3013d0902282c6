import numpy as np
import pytest
from conftest import H
from numpy.testing import assert_allclose, assert_array_equal

from addsysid.closed_loop import (
    DiscreteController,
    closed_loop_system,
    control_sensitivity,
    diagonal_controller,
    lead_lag,
    noiseless_input,
    simulate_closed_loop,
)
from addsysid.errors import NumericError, ValidationError
from addsysid.lti import AdditiveModel, Subsystem, simulate_additive, static_gain, zoh_equivalent_dtf


def static(k):
    return static_gain(np.atleast_2d(k))


@pytest.fixture(scope="module")
def loop_data(bench, ctrl):
    rng = np.random.default_rng(21)
    r = rng.standard_normal((4000, 3))
    v = 0.01 * rng.standard_normal((4000, 3))
    u, y = simulate_closed_loop(bench, ctrl, r, v, H)
    return r, v, u, y


def test_controller_json_round_trip(ctrl):
    back = DiscreteController.from_dict(ctrl.to_dict())
    for name in "ABCD":
        assert_array_equal(getattr(back.ss, name), getattr(ctrl.ss, name))
    assert back.h == ctrl.h


def test_controller_rejects_zero_transfer():
    with pytest.raises(ValidationError) as e:
        DiscreteController.static(np.zeros((1, 1)), 0.1)
    assert e.value.code == "ZERO_CONTROLLER"


def test_controller_bad_json():
    with pytest.raises(ValidationError) as e:
        DiscreteController.from_dict({"A": [], "B": []})
    assert e.value.code == "SCHEMA"


def test_sensitivity_zero_plant_is_controller():
    plant = AdditiveModel((Subsystem(np.array([0.5]), np.zeros((1, 1, 1))),), check=False)
    A, B, C, D = lead_lag(2.0, 1.0, 10.0, 0.1)
    ctrl = DiscreteController.from_matrices(A, B, C, D, 0.1)
    x = np.random.default_rng(0).standard_normal((200, 1))
    S = control_sensitivity(plant, ctrl, 0.1)
    assert_allclose(S.simulate(x), ctrl.ss.simulate(x), atol=1e-12)


def test_sensitivity_static_unit_loop():
    S = control_sensitivity(static(1.0), DiscreteController.static([[1.0]], 0.1), 0.1)
    assert_allclose(S.D, [[0.5]])
    assert_allclose(S.evalfr(3.0), [[0.5]])


def test_algebraic_loop():
    with pytest.raises(NumericError) as e:
        closed_loop_system(static(1.0), DiscreteController.static([[-1.0]], 0.1), 0.1)
    assert e.value.code == "ALGEBRAIC_LOOP"


def test_unstable_loop():
    plant = AdditiveModel((Subsystem(np.array([1.0]), np.ones((1, 1, 1))),))
    ctrl = DiscreteController.static([[-5.0]], 0.1)
    with pytest.raises(NumericError) as e:
        closed_loop_system(plant, ctrl, 0.1)
    assert e.value.code == "CL_UNSTABLE"


def test_step_mismatch(bench, ctrl):
    with pytest.raises(ValidationError) as e:
        control_sensitivity(bench, ctrl, 2 * H)
    assert e.value.code == "DIM_MISMATCH"


def test_default_controller_stabilizes(bench, ctrl):
    loop = closed_loop_system(bench, ctrl, H)
    assert np.abs(np.linalg.eigvals(loop.A)).max() < 1 - 1e-6


def test_sensitivity_frequency_response(bench, ctrl):
    G = zoh_equivalent_dtf(bench, H)
    S = control_sensitivity(bench, ctrl, H)
    for w in (0.5, 3.0, 20.0):
        Cz, Gz = ctrl.ss.evalfr(w), G.evalfr(w)
        ref = Cz @ np.linalg.inv(np.eye(3) + Gz @ Cz)
        assert_allclose(S.evalfr(w), ref, rtol=1e-9, atol=1e-12)


def test_noiseless_input_zero_reference(bench, ctrl):
    assert_array_equal(noiseless_input(bench, ctrl, np.zeros((50, 3)), H), 0)


def test_noiseless_input_reproduces_logged_u(bench, ctrl):
    r = np.random.default_rng(3).standard_normal((3000, 3))
    u, _ = simulate_closed_loop(bench, ctrl, r, np.zeros_like(r), H)
    assert_allclose(noiseless_input(bench, ctrl, r, H), u, atol=1e-8)


def test_noiseless_input_other_controller(bench):
    A, B, C, D = lead_lag(5.0, 1.0, 8.0, H)
    ctrl = diagonal_controller([(A, B, C, D)] * 3, H)
    r = np.random.default_rng(4).standard_normal((2000, 3))
    u, _ = simulate_closed_loop(bench, ctrl, r, np.zeros_like(r), H)
    assert_allclose(noiseless_input(bench, ctrl, r, H), u, atol=1e-8)


def test_noiseless_input_decorrelated_from_noise(bench, ctrl):
    rng = np.random.default_rng(5)
    N = 100000
    r = rng.standard_normal((N, 3))
    v = 0.05 * rng.standard_normal((N, 3))
    z = noiseless_input(bench, ctrl, r, H)
    for i in range(3):
        for j in range(3):
            assert abs(np.corrcoef(z[:, i], v[:, j])[0, 1]) < 0.02


def test_noiseless_input_channel_check(bench, ctrl):
    with pytest.raises(ValidationError):
        noiseless_input(bench, ctrl, np.zeros((10, 2)), H)


def test_simulate_zero_signals(bench, ctrl):
    u, y = simulate_closed_loop(bench, ctrl, np.zeros((30, 3)), np.zeros((30, 3)), H)
    assert_array_equal(u, 0)
    assert_array_equal(y, 0)


def test_simulate_output_consistent_with_open_loop(bench, ctrl):
    r = np.random.default_rng(6).standard_normal((2000, 3))
    u, y = simulate_closed_loop(bench, ctrl, r, np.zeros_like(r), H)
    assert_allclose(y, simulate_additive(bench, u, H), atol=1e-9)


def test_loop_equation_residual(bench, ctrl, loop_data):
    r, v, u, y = loop_data
    e = ctrl.ss.simulate(r - y)
    assert np.abs(u - e).max() < 1e-10


def test_empirical_sensitivity_dft(bench, ctrl):
    rng = np.random.default_rng(7)
    N, P = 4096, 16
    per = np.zeros((N, 3))
    per[:, 0] = rng.standard_normal(N)
    r = np.tile(per, (P + 1, 1))  # periodic, first period discarded as transient
    v = 0.01 * rng.standard_normal(r.shape)
    _, y = simulate_closed_loop(bench, ctrl, r, v, H)
    G = zoh_equivalent_dtf(bench, H)
    R = np.fft.rfft(per[:, 0])
    Y = np.mean([np.fft.rfft(y[k * N:(k + 1) * N, 0]) for k in range(1, P + 1)], axis=0)
    for b in (5, 20, 60, 120):
        w = 2 * np.pi * b / (N * H)
        Cz, Gz = ctrl.ss.evalfr(w), G.evalfr(w)
        T = Gz @ Cz @ np.linalg.inv(np.eye(3) + Gz @ Cz)
        assert abs(Y[b] / R[b] / T[0, 0] - 1) < 0.05


def test_permutation_invariance(bench, ctrl):
    a = control_sensitivity(bench, ctrl, H)
    b = control_sensitivity(bench.permuted([2, 0, 1]), ctrl, H)
    for w in (0.3, 2.0, 11.0):
        assert_allclose(a.evalfr(w), b.evalfr(w), rtol=1e-10, atol=1e-14)
    r = np.random.default_rng(8).standard_normal((500, 3))
    assert_allclose(noiseless_input(bench, ctrl, r, H),
                    noiseless_input(bench.permuted([1, 2, 0]), ctrl, r, H), atol=1e-10)
