"""
Feedback control math
LQR gain, Kalman filter, additive watermark, windowed chi-square detector and supervisor
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from data_models import AlertKind, AlertSignal, Estimate, PlantState, StateSpaceModel
from errors import ConfigurationError, CovarianceError, DimensionError, UnstabilizableError
from sim_core import RngStream
from cps_agents.plant_agents.plant_tools import plant_step, sample_gaussian


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def riccati_fixed_point(A, B, Q, R, max_iterations: int = 100_000, tol: float = 1e-13) -> np.ndarray:
    """
    Iterate P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until it stops moving

    Raises UnstabilizableError when the recursion does not settle.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise DimensionError(f'LQR dimensions disagree: A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}')
    if np.min(np.linalg.eigvalsh(_symmetrize(Q))) < -1e-12:
        raise CovarianceError('controller.Q must be positive semidefinite')
    if np.min(np.linalg.eigvalsh(_symmetrize(R))) <= 0:
        raise CovarianceError('controller.R must be positive definite')

    P = Q.copy()
    with np.errstate(over='ignore', invalid='ignore'):
        for _ in range(max_iterations):
            BtP = B.T @ P
            gain = np.linalg.solve(R + BtP @ B, BtP @ A)
            P_next = _symmetrize(Q + A.T @ P @ A - A.T @ P @ B @ gain)
            if not np.all(np.isfinite(P_next)):
                break
            if np.max(np.abs(P_next - P)) <= tol * max(1.0, float(np.max(np.abs(P_next)))):
                return P_next
            P = P_next
    raise UnstabilizableError(f'Riccati recursion did not converge for (A={A.tolist()}, B={B.tolist()})')


def lqr_gain(A, B, Q, R, max_iterations: int = 100_000) -> np.ndarray:
    """
    Steady-state LQR gain L = (R + B'PB)^-1 B'PA

    Args:
        A, B: Plant matrices
        Q, R: State and input weights

    Returns:
        m x n gain with spectral radius of (A - B L) below one
    """
    P = riccati_fixed_point(A, B, Q, R, max_iterations=max_iterations)
    A, B, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, R))
    L = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    radius = float(np.max(np.abs(np.linalg.eigvals(A - B @ L))))
    if radius >= 1.0:
        raise UnstabilizableError(f'closed loop A - B L has spectral radius {radius:.4f}')
    return L


class KalmanUpdate(NamedTuple):
    estimate: Estimate
    residual: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray


def kalman_predict(model: StateSpaceModel, est: Estimate, u_prev) -> Estimate:
    """Time update only, used when no measurement arrived"""
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    x_pred = model.A @ est.xhat + model.B @ u_prev
    P_pred = _symmetrize(model.A @ est.P @ model.A.T + model.W)
    return Estimate(xhat=x_pred, P=P_pred, k=est.k + 1)


def _cholesky(S: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Factor the innovation covariance, rejecting it when it is not safely positive definite"""
    try:
        factor = cho_factor(S, lower=True)
    except (LinAlgError, ValueError) as exc:
        raise CovarianceError('innovation covariance is singular (V must be positive definite)') from exc
    pivots = np.diag(factor[0])
    if np.min(pivots) ** 2 <= 1e-12 * np.max(np.diag(S)):
        raise CovarianceError('innovation covariance is ill-conditioned (V must be positive definite)')
    return factor


def kalman_step(model: StateSpaceModel, est: Estimate, u_prev, y) -> KalmanUpdate:
    """
    One predict/update cycle

    The residual is r = y - C (A xhat + B u_prev). The posterior covariance
    uses the Joseph form and is re-symmetrized.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.p,):
        raise DimensionError(f'measurement has shape {y.shape}, expected ({model.p},)')
    predicted = kalman_predict(model, est, u_prev)
    x_pred, P_pred = predicted.xhat, predicted.P

    S = _symmetrize(model.C @ P_pred @ model.C.T + model.V)
    factor = _cholesky(S)

    residual = y - model.C @ x_pred
    gain = cho_solve(factor, model.C @ P_pred).T
    x_post = x_pred + gain @ residual
    I_KC = np.eye(model.n) - gain @ model.C
    P_post = _symmetrize(I_KC @ P_pred @ I_KC.T + gain @ model.V @ gain.T)
    return KalmanUpdate(Estimate(xhat=x_post, P=P_post, k=predicted.k), residual, S, gain)


def watermark_input(u_star, Qw, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """u = u* + delta with delta ~ N(0, Qw); Qw = 0 returns u* untouched"""
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    Qw = np.atleast_2d(np.asarray(Qw, dtype=float))
    if not np.any(Qw):
        return u_star.copy(), np.zeros_like(u_star)
    delta = sample_gaussian(Qw, rng)
    return u_star + delta, delta


def chi2_threshold(dof: int, percentile: float = 0.95) -> float:
    """Quantile of the chi-square distribution"""
    return float(chi2.ppf(percentile, dof))


def normalized_innovation(residual, S) -> float:
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        return float(residual @ np.linalg.solve(S, residual))
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(f'singular innovation covariance in detector window: {exc}') from exc


def chi2_detect(residuals: Sequence[np.ndarray], S_sequence: Sequence[np.ndarray],
                window: int, tau: float) -> Tuple[bool, Optional[float]]:
    """
    Windowed statistic g = sum of r' S^-1 r over the last `window` steps

    Returns:
        (alarm, g); during warm-up (fewer than `window` residuals) (False, None)
    """
    if window < 1 or tau <= 0:
        raise ConfigurationError(f'detector needs window >= 1 and tau > 0, got {window}, {tau}')
    if len(residuals) != len(S_sequence):
        raise DimensionError('residual and covariance windows differ in length')
    if len(residuals) < window:
        return False, None
    g = sum(normalized_innovation(r, S)
            for r, S in zip(list(residuals)[-window:], list(S_sequence)[-window:]))
    return g > tau, g


@dataclass(frozen=True)
class SupervisorState:
    """Whether an alert is raised, and how many consecutive steps disagree with it"""
    raised: bool = False
    run: int = 0


def supervisor_tick(state: SupervisorState, alarm: bool, hysteresis: int, step: int,
                    statistic: Optional[float], flow_hint: str) -> Tuple[SupervisorState, Optional[AlertSignal]]:
    """
    Edge-triggered alerting with hysteresis

    An alert is raised once the alarm has been on for `hysteresis`
    consecutive steps while no alert is raised, and cleared symmetrically.
    """
    if alarm == state.raised:
        return SupervisorState(state.raised, 0), None
    run = state.run + 1
    if run < hysteresis:
        return SupervisorState(state.raised, run), None
    kind = AlertKind.PHYSICAL_ANOMALY if alarm else AlertKind.CLEARED
    return SupervisorState(alarm, 0), AlertSignal(kind=kind, statistic=statistic, step=step, flow_hint=flow_hint)


def controller_tick(est: Estimate, L: np.ndarray, reference=None) -> np.ndarray:
    """u* = -L (xhat - reference)"""
    error = est.xhat if reference is None else est.xhat - np.asarray(reference, dtype=float)
    return -(np.atleast_2d(L) @ error)


@dataclass
class NominalLoopTrace:
    x: np.ndarray
    u: np.ndarray
    residuals: List[np.ndarray]
    S: List[np.ndarray]


def run_nominal_loop(model: StateSpaceModel, L: np.ndarray, Qw, steps: int,
                     plant_rng: RngStream, watermark_rng: RngStream, x0=None,
                     P0=None) -> NominalLoopTrace:
    """
    Network-free closed loop: plant, Kalman filter, LQR and watermark

    Used to calibrate the detector against the nominal model.
    """

    x = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    state = PlantState(x=x, k=0)
    est = Estimate(xhat=np.zeros(model.n), P=np.eye(model.n) if P0 is None else np.asarray(P0, float), k=0)
    u = np.zeros(model.m)
    xs, us, residuals, covs = [], [], [], []
    for _ in range(steps):
        state, y = plant_step(model, state, u, plant_rng)
        update = kalman_step(model, est, u, y)
        est = update.estimate
        residuals.append(update.residual)
        covs.append(update.innovation_cov)
        u, _ = watermark_input(controller_tick(est, L), Qw, watermark_rng)
        xs.append(state.x)
        us.append(u)
    return NominalLoopTrace(np.asarray(xs), np.asarray(us), residuals, covs)
