import numpy as np
import pytest

from data_models import Estimate, PlantState, StateSpaceModel
from errors import CovarianceError, DimensionError, PlantDivergenceError
from sim_core import RngStream
from cps_agents.control_agents.control_tools import controller_tick, lqr_gain
from cps_agents.plant_agents.plant_tools import noise_factor, plant_step, sample_gaussian, simulate_open_loop


def noiseless(A, B, C):
    n, p = len(A), len(C)
    return StateSpaceModel(A=A, B=B, C=C, W=np.zeros((n, n)), V=np.zeros((p, p)))


def test_step_follows_the_difference_equation():
    model = noiseless([[1.0, 0.1], [0.0, 1.0]], [[0.005], [0.1]], [[1.0, 0.0]])
    state = PlantState(np.array([1.0, -2.0]), k=4)

    following, y = plant_step(model, state, [3.0], RngStream(0, 'plant'))

    np.testing.assert_allclose(following.x, [1.0 - 0.2 + 0.015, -2.0 + 0.3])
    np.testing.assert_allclose(y, [following.x[0]])
    assert following.k == 5


def test_noiseless_step_is_linear_in_state_and_input():
    rng = np.random.default_rng(8)
    stream = RngStream(0, 'plant')
    for _ in range(50):
        n, m, p = (int(v) for v in rng.integers(1, 5, size=3))
        model = noiseless(rng.normal(size=(n, n)), rng.normal(size=(n, m)), rng.normal(size=(p, n)))
        x1, x2 = rng.normal(size=(2, n))
        u1, u2 = rng.normal(size=(2, m))
        a, b = rng.normal(size=2)

        s1, y1 = plant_step(model, PlantState(x1), u1, stream)
        s2, y2 = plant_step(model, PlantState(x2), u2, stream)
        mixed, y = plant_step(model, PlantState(a * x1 + b * x2), a * u1 + b * u2, stream)

        np.testing.assert_allclose(mixed.x, a * s1.x + b * s2.x, atol=1e-12)
        np.testing.assert_allclose(y, a * y1 + b * y2, atol=1e-12)


@pytest.mark.parametrize('A, B, R', [
    ([[1.2]], [[1.0]], [[1.0]]),
    ([[1.0, 0.1], [0.0, 1.0]], [[0.005], [0.1]], [[0.01]]),
])
def test_noiseless_feedback_drives_the_state_to_zero(A, B, R):
    n = len(A)
    model = noiseless(A, B, np.eye(n))
    L = lqr_gain(A, B, np.eye(n), R)
    state = PlantState(np.ones(n))
    stream = RngStream(0, 'plant')
    for _ in range(200):
        u = controller_tick(Estimate(xhat=state.x, P=np.eye(n)), L)
        state, _ = plant_step(model, state, u, stream)
    assert state.k == 200
    assert np.linalg.norm(state.x) < 1e-6


def test_open_loop_with_noise_is_reproducible(scalar_model):
    inputs = [[0.5]] * 20
    first = simulate_open_loop(scalar_model, [0.0], inputs, RngStream(5, 'plant'))
    second = simulate_open_loop(scalar_model, [0.0], inputs, RngStream(5, 'plant'))
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])
    assert first[0].shape == (20, 1)


def test_input_of_wrong_length_is_rejected(scalar_model):
    with pytest.raises(DimensionError):
        plant_step(scalar_model, PlantState(np.zeros(1)), [1.0, 2.0], RngStream(0, 'plant'))


def test_divergence_reports_the_step():
    model = noiseless([[2.0]], [[1.0]], [[1.0]])
    state = PlantState(np.array([10.0]), k=7)
    with pytest.raises(PlantDivergenceError) as info:
        plant_step(model, state, [0.0], RngStream(0, 'plant'), bound=15.0)
    assert info.value.step == 8
    assert info.value.norm == pytest.approx(20.0)


def test_noise_factor_handles_semidefinite_covariance():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = noise_factor(cov)
    np.testing.assert_allclose(factor @ factor.T, cov, atol=1e-12)


def test_indefinite_covariance_is_rejected():
    with pytest.raises(CovarianceError):
        noise_factor(np.array([[1.0, 0.0], [0.0, -0.5]]))
    with pytest.raises(CovarianceError):
        noise_factor(np.array([[1.0, 0.3], [0.0, 1.0]]))


def test_zero_covariance_draws_nothing():
    stream = RngStream(9, 'plant')
    np.testing.assert_array_equal(sample_gaussian(np.zeros((2, 2)), stream), np.zeros(2))
    untouched = RngStream(9, 'plant')
    assert stream.random() == untouched.random()


def test_sample_covariance_matches_target():
    cov = np.array([[0.04, 0.01], [0.01, 0.09]])
    stream = RngStream(1, 'plant')
    draws = np.array([sample_gaussian(cov, stream) for _ in range(20_000)])
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.006)


def test_model_validation_checks_shapes_and_noise():
    with pytest.raises(DimensionError):
        StateSpaceModel(A=[[1.0, 0.0], [0.0, 1.0]], B=[[1.0]], C=[[1.0, 0.0]], W=np.eye(2), V=[[1.0]]).validate()
    with pytest.raises(CovarianceError):
        StateSpaceModel(A=[[0.9]], B=[[1.0]], C=[[1.0]], W=[[0.01]], V=[[0.0]]).validate()
    with pytest.raises(CovarianceError):
        StateSpaceModel(A=[[0.9]], B=[[1.0]], C=[[1.0]], W=[[-0.01]], V=[[0.01]]).validate()


def test_model_round_trips_through_dict(scalar_model):
    again = StateSpaceModel.from_dict(scalar_model.to_dict())
    np.testing.assert_array_equal(again.A, scalar_model.A)
    assert (again.n, again.m, again.p) == (1, 1, 1)
