from typing import Optional, Tuple

import numpy as np

from data_models import PlantState, StateSpaceModel
from errors import CovarianceError, DimensionError, PlantDivergenceError
from sim_core import RngStream


def noise_factor(cov: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """
    Square-root factor F with F F^T = cov

    Cholesky when cov is positive definite, otherwise an eigen-decomposition
    that tolerates semidefinite matrices. Indefinite input is rejected.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise DimensionError(f'covariance must be square, got shape {cov.shape}')
    if not np.allclose(cov, cov.T, atol=tol):
        raise CovarianceError('covariance is not symmetric')
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    values, vectors = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(values))))
    if float(np.min(values)) < -tol * scale:
        raise CovarianceError(f'covariance is not positive semidefinite (min eigenvalue {np.min(values):.3g})')
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def sample_gaussian(cov: np.ndarray, rng: RngStream) -> np.ndarray:
    """Zero-mean Gaussian draw; a zero covariance returns zeros without drawing"""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.any(cov):
        return np.zeros(cov.shape[0])
    factor = noise_factor(cov)
    return factor @ rng.standard_normal(cov.shape[0])


def plant_step(model: StateSpaceModel, state: PlantState, u, rng: RngStream,
               bound: Optional[float] = None) -> Tuple[PlantState, np.ndarray]:
    """
    Advance the plant one period

    Computes x+ = A x + B u + w and samples y = C x+ + v.

    Args:
        model: Plant model
        state: Current state
        u: Input held over the period (length m)
        rng: Plant noise stream
        bound: Optional divergence bound on the state norm

    Returns:
        (next state, measurement)
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise DimensionError(f'input has shape {u.shape}, expected ({model.m},)')

    x_next = model.A @ state.x + model.B @ u + sample_gaussian(model.W, rng)
    norm = float(np.linalg.norm(x_next))
    if not np.all(np.isfinite(x_next)) or (bound is not None and norm > bound):
        raise PlantDivergenceError(state.k + 1, norm)

    y = model.C @ x_next + sample_gaussian(model.V, rng)
    return PlantState(x=x_next, k=state.k + 1), y


def simulate_open_loop(model: StateSpaceModel, x0, inputs, rng: RngStream):
    """Run plant_step over an input sequence; returns (states, outputs) arrays"""
    state = PlantState(np.atleast_1d(np.asarray(x0, dtype=float)), 0)
    states, outputs = [], []
    for u in inputs:
        state, y = plant_step(model, state, u, rng)
        states.append(state.x)
        outputs.append(y)
    return np.asarray(states), np.asarray(outputs)
