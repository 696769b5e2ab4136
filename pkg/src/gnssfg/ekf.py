"""Extended and iterated extended Kalman filters over the same factor models.

The measurement update consumes factors (whitened residual ``r(x)`` with
Jacobian ``J = dr/dx`` and unit noise), so any factor attached to a single
state can serve as a measurement: pseudoranges, carrier phases, or a prior
factor acting as a linear direct observation.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import SingularInnovation
from .graph import copy_value, epoch_key, retract, tangent_dim, to_vector
from .models import (
    CarrierPhaseFactor,
    MotionKind,
    PseudorangeFactor,
)
from .solver import step_converged


@dataclass
class FilterState:
    mean: object
    covariance: np.ndarray
    iterations: int = field(default=0, compare=False)

    def __post_init__(self):
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        n = tangent_dim(self.mean)
        if self.covariance.shape != (n, n):
            raise ValueError(f"covariance must be {n}x{n}")


def _symmetrize(P):
    return 0.5 * (P + P.T)


def ekf_predict(state, model):
    """Propagate mean and covariance through the motion model."""
    n = tangent_dim(state.mean)
    base = model.process_noise.shape[0]
    Q = np.zeros((n, n))
    Q[:base, :base] = model.process_noise * model.dt
    if n > base:
        Q[base:, base:] = np.eye(n - base) * model.ambiguity_noise * model.dt
    if model.kind is MotionKind.RANDOM_WALK:
        return FilterState(copy_value(state.mean), _symmetrize(state.covariance + Q))
    F = np.eye(n)
    F[:base, :base] = model.transition(base)
    mean = F @ to_vector(state.mean)
    return FilterState(mean, _symmetrize(F @ state.covariance @ F.T + Q))


def augment_ambiguities(state, sats_and_values, variance=1e6):
    """Add untracked carrier ambiguities to a filter state with a diffuse variance."""
    mean, P = state.mean, state.covariance
    for sat, value in sats_and_values:
        if mean.ambiguity_index(sat) is not None:
            continue
        mean = mean.with_ambiguity(sat, value)
        n = P.shape[0]
        P2 = np.zeros((n + 1, n + 1))
        P2[:n, :n] = P
        P2[n, n] = variance
        P = P2
    return FilterState(mean, P)


def ekf_update_factors(state, factors, iterations=1, step_tol=1e-10):
    """Measurement update from single-state factors.

    ``iterations=1`` is the standard EKF (one linearization at the prior
    mean).  More iterations relinearize at each new iterate (IEKF) until the
    iterate moves less than ``step_tol``, the same test the solvers use.  The
    covariance uses the Joseph form with the last linearization.
    """
    if not factors:
        raise ValueError("need at least one measurement")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    keys = {f.variables[0] for f in factors}
    if len(keys) != 1 or any(len(f.variables) != 1 for f in factors):
        raise ValueError("filter updates take factors on exactly one shared state")
    key = keys.pop()
    x0 = state.mean
    x0_vec = to_vector(x0)
    P = state.covariance
    n = P.shape[0]
    x = copy_value(x0)
    used = 0
    for _ in range(iterations):
        used += 1
        rows = [f.whitened({key: x}) for f in factors]
        r = np.concatenate([ri for ri, _ in rows])
        J = np.vstack([Ji[0] for _, Ji in rows])
        S = J @ P @ J.T + np.eye(r.size)
        try:
            cf = scipy.linalg.cho_factor(S)
        except scipy.linalg.LinAlgError:
            raise SingularInnovation("innovation covariance is not positive definite") from None
        # H = -J for the whitened measurement model, so K = -P J^T S^-1
        K = -scipy.linalg.cho_solve(cf, J @ P).T
        innovation = r + J @ (x0_vec - to_vector(x))
        x_new = retract(x0, K @ innovation)
        moved = to_vector(x_new) - to_vector(x)
        x = x_new
        if step_converged(moved, step_tol):
            break
    rows = [f.whitened({key: x}) for f in factors]
    J = np.vstack([Ji[0] for _, Ji in rows])
    S = J @ P @ J.T + np.eye(J.shape[0])
    try:
        cf = scipy.linalg.cho_factor(S)
    except scipy.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance is not positive definite") from None
    K = -scipy.linalg.cho_solve(cf, J @ P).T
    A = np.eye(n) + K @ J
    P_new = A @ P @ A.T + K @ K.T
    return FilterState(x, _symmetrize(P_new), used)


def ekf_update(state, observations, iterations=1, pseudorange_sigma=1.0, phase_sigma=None,
               epoch=0, step_tol=1e-10):
    """Update an EpochState filter with satellite observations.

    Carrier phases are used when ``phase_sigma`` is given; new satellites get
    a diffuse ambiguity initialized from code-minus-carrier.
    """
    if not observations:
        raise ValueError("need at least one observation")
    key = epoch_key(epoch)
    if phase_sigma is not None:
        state = augment_ambiguities(state, [
            (o.sat_id, o.carrier_phase_range - o.pseudorange)
            for o in observations if o.carrier_phase_range is not None])
    factors = [PseudorangeFactor(key, o, pseudorange_sigma) for o in observations]
    if phase_sigma is not None:
        factors += [CarrierPhaseFactor(key, o, phase_sigma) for o in observations
                    if o.carrier_phase_range is not None]
    return ekf_update_factors(state, factors, iterations, step_tol)


def is_spd(P, sym_tol=1e-12):
    if not np.allclose(P, P.T, rtol=0, atol=sym_tol * max(1.0, np.abs(P).max())):
        return False
    return bool(np.linalg.eigvalsh(P).min() > 0)


__all__ = [
    "FilterState",
    "ekf_predict",
    "ekf_update",
    "ekf_update_factors",
    "augment_ambiguities",
    "is_spd",
]
