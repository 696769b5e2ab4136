"""Gauss-Newton and Levenberg-Marquardt over the block-sparse whitened system.

Both solvers run in one of two modes:

* frozen weights (``weights`` given): minimize ``sum_f w_f ||r_f||^2``;
* kernel mode (default): weights are recomputed from each factor's robust
  kernel at every linearization (IRLS) and the objective is
  :func:`gnssfg.graph.total_cost`.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import _accel
from .errors import SingularSystem
from .graph import _kernel_terms, copy_estimate, linearize, retract
from .options import SolverOptions

log = logging.getLogger(__name__)


@dataclass
class SolveReport:
    estimate: dict
    iterations: int
    final_cost: float
    converged: bool
    cost_trace: list = field(default_factory=list)
    weights: Optional[dict] = None


def normal_equations(system, row_weights=None):
    """Band storage of ``J^T W J`` plus the gradient ``J^T W r``."""
    J = system.jacobian()
    r = system.residual_vector()
    if row_weights is not None:
        WJ = sp.diags(row_weights) @ J
        g = J.T @ (row_weights * r)
    else:
        WJ = J
        g = J.T @ r
    H = (J.T @ WJ).tocoo()
    lower = H.row >= H.col
    rows, cols, vals = H.row[lower], H.col[lower], H.data[lower]
    bw = int((rows - cols).max()) if rows.size else 0
    ab = np.zeros((bw + 1, system.n_cols))
    ab[rows - cols, cols] = vals
    return ab, np.asarray(g).ravel()


def _column_owner(system, col):
    for key, sl in system.column_index.items():
        if sl.start <= col < sl.stop:
            return key
    return None


def _solve_flat(system, damping=0.0, row_weights=None):
    if system.n_cols == 0:
        return np.zeros(0)
    ab, g = normal_equations(system, row_weights)
    if damping:
        ab[0] += damping
    lb, failed = _accel.band_cholesky(ab)
    if failed >= 0:
        raise SingularSystem(
            f"normal matrix not positive definite at column {failed} "
            f"(variable {_column_owner(system, failed)})")
    return _accel.band_solve(lb, -g)


def _row_weights(system, weights):
    if weights is None:
        return None
    for fid, w in weights.items():
        if not w > 0:
            raise ValueError(f"weight for factor {fid} must be > 0, got {w}")
    return system.row_weights(weights)


def solve_normal_equations(system, damping=0.0, weights=None):
    """Minimize ``||sqrt(W)(J d + r)||^2 + damping ||d||^2``; returns ``{key: d}``."""
    if damping < 0:
        raise ValueError("damping must be >= 0")
    if not system.residuals:
        raise ValueError("empty system")
    delta = _solve_flat(system, damping, _row_weights(system, weights))
    return {key: delta[sl] for key, sl in system.column_index.items()}


def _evaluate(graph, estimate, weights, kernels):
    system = linearize(graph, estimate)
    if weights is not None:
        cost = sum(weights.get(fid, 1.0) * float(r @ r) for fid, r in system.residuals.items())
        return system, float(cost), weights
    terms = _kernel_terms(graph, system, kernels)
    cost = sum(t[1] for t in terms.values())
    return system, float(cost), {fid: t[2] for fid, t in terms.items()}


def _apply(estimate, system, delta):
    return {k: retract(v, delta[system.column_index[k]]) for k, v in estimate.items()}


def step_converged(delta, tol):
    return float(np.linalg.norm(delta)) < tol


def _cost_converged(old, new, opts):
    change = abs(old - new)
    return change < opts.abs_cost_tol or change <= opts.rel_cost_tol * max(abs(old), abs(new))


def gauss_newton(graph, init, opts=None, weights=None, kernels=None):
    """Undamped Gauss-Newton, relinearizing every iteration.

    The step for the next iteration is computed right after each update, so a
    vanishing next step ends the run without spending another iteration; a
    linear problem therefore reports a single iteration.
    """
    opts = opts or SolverOptions()
    estimate = copy_estimate(init)
    system, cost, w = _evaluate(graph, estimate, weights, kernels)
    trace = [cost]

    def step(system, w, it):
        try:
            return _solve_flat(system, 0.0, system.row_weights(w))
        except SingularSystem as exc:
            raise SingularSystem(f"Gauss-Newton iteration {it}: {exc}") from None

    delta = step(system, w, 1)
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        if step_converged(delta, opts.step_tol):
            converged = True
            break
        estimate = _apply(estimate, system, delta)
        system, new_cost, w = _evaluate(graph, estimate, weights, kernels)
        trace.append(new_cost)
        done = _cost_converged(cost, new_cost, opts)
        cost = new_cost
        delta = step(system, w, it + 1)
        if done or step_converged(delta, opts.step_tol):
            converged = True
            break
    log.debug("gauss_newton: %d iterations, cost %.6g, converged=%s", it, cost, converged)
    return SolveReport(estimate, it, cost, converged, trace, dict(w))


def levenberg_marquardt(graph, init, opts=None, weights=None, kernels=None):
    """Levenberg-Marquardt with identity damping; a step is kept only if it lowers the cost."""
    opts = opts or SolverOptions()
    estimate = copy_estimate(init)
    system, cost, w = _evaluate(graph, estimate, weights, kernels)
    trace = [cost]
    lam = opts.lm_initial_lambda
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        try:
            delta = _solve_flat(system, lam, system.row_weights(w))
        except SingularSystem:
            lam *= opts.lm_lambda_factor
            if lam > opts.lm_max_lambda:
                break
            continue
        if step_converged(delta, opts.step_tol):
            converged = True
            break
        candidate = _apply(estimate, system, delta)
        new_system, new_cost, new_w = _evaluate(graph, candidate, weights, kernels)
        if new_cost < cost:
            done = _cost_converged(cost, new_cost, opts)
            estimate, system, cost, w = candidate, new_system, new_cost, new_w
            trace.append(cost)
            lam = max(lam / opts.lm_lambda_factor, 1e-15)
            if done:
                converged = True
                break
        else:
            if _cost_converged(cost, new_cost, opts):
                converged = True
                break
            lam *= opts.lm_lambda_factor
            if lam > opts.lm_max_lambda:
                break
    log.debug("levenberg_marquardt: %d iterations, cost %.6g, converged=%s", it, cost, converged)
    return SolveReport(estimate, it, cost, converged, trace, dict(w))
