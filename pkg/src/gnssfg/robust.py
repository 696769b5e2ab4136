"""Robust estimation on factor graphs: IRLS, switch constraints, DCS,
max-mixtures and graduated non-convexity."""
import logging

import numpy as np

from .errors import KernelMisuse, SingularSystem
from .graph import FactorKind, VariableKind, _kernel_terms, linearize, retract, switch_key, total_cost
from .kernels import (  # noqa: F401  re-exported
    DCS,
    GNC,
    L2,
    Cauchy,
    GncSchedule,
    Huber,
    MaxMixture,
    RobustKernel,
    SwitchLinked,
    dcs_scale,
    geman_mcclure_cost,
    gnc_weight,
    huber_rho,
    kernel_weight,
    maxmix_evaluate,
)
from .options import SolverOptions
from .models import RangeFactor, SwitchPriorFactor, SwitchTransitionFactor
from .solver import SolveReport, _solve_flat, levenberg_marquardt, step_converged

log = logging.getLogger(__name__)

_WEIGHTED = (L2, Huber, Cauchy, DCS, MaxMixture, GNC, SwitchLinked)


def irls_solve(graph, init, kernels=None, opts=None):
    """Iteratively reweighted least squares on the robust total cost.

    ``kernels`` optionally overrides the kernel of individual factors
    (``{factor_id: kernel}``).  Each iteration recomputes the weights at the
    current residuals and takes a damped weighted least-squares step, kept
    only if the robust cost drops.

    Near the optimum the cost stops resolving steps (it is flat to one ulp),
    so the damped phase is followed by undamped reweighted steps, which are
    fixed-point iterations of the weighted normal equations and need no cost
    comparison.  They are kept unless they raise the cost beyond roundoff.
    With only quadratic kernels the weights are constant and the damped phase
    is the whole solve.
    """
    kernels = dict(kernels or {})
    quadratic = True
    for f in graph.factors:
        k = kernels.get(f.id, f.kernel)
        if not isinstance(k, _WEIGHTED):
            raise KernelMisuse(f"kernel {k!r} on factor {f.id} has no IRLS weight")
        quadratic &= k is None or isinstance(k, L2)
    damped = levenberg_marquardt(graph, init, opts, kernels=kernels or None)
    if quadratic:
        # constant weights: IRLS is plain LM
        return damped
    try:
        estimate, iterations, converged = _reweighted_steps(graph, damped.estimate, kernels or None,
                                                            opts or SolverOptions())
    except SingularSystem:
        return damped
    cost, weights = _robust_cost(graph, estimate, kernels or None)
    slack = 64 * np.spacing(max(abs(damped.final_cost), 1.0))
    if not cost <= damped.final_cost + slack:
        return damped
    trace = list(damped.cost_trace)
    if cost < trace[-1]:
        trace.append(cost)
    return SolveReport(estimate, damped.iterations + iterations, cost,
                       damped.converged or converged, trace, weights)


def _robust_cost(graph, estimate, kernels):
    terms = _kernel_terms(graph, linearize(graph, estimate), kernels)
    return float(sum(t[1] for t in terms.values())), {fid: t[2] for fid, t in terms.items()}


def _reweighted_steps(graph, estimate, kernels, opts):
    """Undamped reweighted least-squares steps until the step test passes.

    Only the step size is checked: close to the fixed point the cost can come
    back bit-identical after a real step, so cost-change tests stop too early.
    """
    for it in range(1, opts.max_iterations + 1):
        system = linearize(graph, estimate)
        w = {fid: t[2] for fid, t in _kernel_terms(graph, system, kernels).items()}
        delta = _solve_flat(system, 0.0, system.row_weights(w))
        if step_converged(delta, opts.step_tol):
            return estimate, it - 1, True
        estimate = {k: retract(v, delta[system.column_index[k]]) for k, v in estimate.items()}
    return estimate, opts.max_iterations, False


def augment_with_switches(graph, target_factor_ids=None, switch_prior_mean=1.0,
                          switch_prior_sigma=0.1, transition_sigma=None):
    """Return a copy of ``graph`` with switch variables on the target measurement factors.

    Each target's residual becomes ``clamp(s, 0, 1) * r``; every switch gets a
    prior factor, and with ``transition_sigma`` switches of the same satellite
    at consecutive epochs are tied together.  ``target_factor_ids=None``
    selects every pseudorange and carrier-phase factor.
    """
    out = graph.copy()
    if target_factor_ids is None:
        target_factor_ids = [f.id for f in graph.factors if isinstance(f, RangeFactor)
                             and f.switch_key is None]
    targets = [graph.factor(fid) for fid in target_factor_ids]
    for f in targets:
        if f.kind not in (FactorKind.PSEUDORANGE, FactorKind.CARRIER_PHASE):
            raise KernelMisuse(f"factor {f.id} ({f.kind.value}) is not a measurement factor")
    replaced = {}
    for f in targets:
        epoch = f.variables[0].epoch
        tag = f.sat_id if f.kind is FactorKind.PSEUDORANGE else f"{f.sat_id}/phase"
        skey = switch_key(epoch, tag)
        out.add_variable(skey, float(switch_prior_mean))
        replaced[f.id] = f.with_switch(skey)
    out.factors = [replaced.get(f.id, f) for f in out.factors]
    out._by_id.update(replaced)
    for f in replaced.values():
        out.add_factor(SwitchPriorFactor(f.switch_key, switch_prior_mean, switch_prior_sigma))
    if transition_sigma is not None:
        keys = {(k.epoch, k.tag): k for k in (f.switch_key for f in replaced.values())}
        for (epoch, tag), k in sorted(keys.items()):
            prev = keys.get((epoch - 1, tag))
            if prev is not None:
                out.add_factor(SwitchTransitionFactor(prev, k, transition_sigma))
    return out


def switch_values(estimate):
    """``{switch_key: value}`` for all switch variables in ``estimate``."""
    return {k: float(v) for k, v in estimate.items() if k.kind is VariableKind.SWITCH}


def gnc_solve(graph, init, kernel=None, schedule=None, inner=None):
    """Graduated non-convexity with a Geman-McClure base loss.

    Every factor whose kernel is :class:`GNC` (or every measurement factor if
    ``kernel`` is given) takes part; the rest keep weight 1.  Starting from the
    least-squares solution, ``mu`` is lowered from a value that makes the
    surrogate convex over the observed residuals to ``mu_final``, alternating a
    weighted least-squares solve with a closed-form weight update.
    Returns ``(report, weights)``.
    """
    if kernel is not None:
        if not isinstance(kernel, GNC):
            raise KernelMisuse("gnc_solve needs a GNC kernel")
        robust_ids = {f.id for f in graph.factors if isinstance(f, RangeFactor)}
        kernels = {fid: kernel for fid in robust_ids}
    else:
        kernels = {f.id: f.kernel for f in graph.factors if isinstance(f.kernel, GNC)}
        robust_ids = set(kernels)
        if not kernels:
            raise KernelMisuse("no factor carries a GNC kernel")
    ref = next(iter(kernels.values()))
    c = ref.c
    schedule = schedule or ref.schedule
    inner = inner or schedule.inner_solver

    weights = {f.id: 1.0 for f in graph.factors}
    report = levenberg_marquardt(graph, init, inner, weights=weights)
    estimate = report.estimate
    iterations = report.iterations
    chi2 = linearize(graph, estimate).chi2()
    if schedule.mu_initial is not None:
        mu = schedule.mu_initial
    else:
        max_sq = max((chi2[fid] for fid in robust_ids), default=0.0)
        mu = max(2.0 * max_sq / (c * c), schedule.mu_final)

    def reweight(chi2, mu):
        return {fid: (gnc_weight(chi2[fid], mu, c) if fid in robust_ids else 1.0)
                for fid in chi2}

    final_rounds = 0
    while True:
        new_weights = reweight(chi2, mu)
        # weights below ~1e-300 would break the positivity check of the solver
        new_weights = {k: max(v, 1e-300) for k, v in new_weights.items()}
        at_final = mu <= schedule.mu_final
        settled = at_final and max(abs(new_weights[k] - weights[k]) for k in weights) < 1e-9
        weights = new_weights
        report = levenberg_marquardt(graph, estimate, inner, weights=weights)
        estimate = report.estimate
        iterations += report.iterations
        chi2 = linearize(graph, estimate).chi2()
        if at_final:
            final_rounds += 1
            if settled or final_rounds >= schedule.max_final_iterations:
                break
        mu = max(mu / schedule.mu_update_factor, schedule.mu_final)
    weights = reweight(chi2, schedule.mu_final)
    final = total_cost(graph, estimate, kernels)
    log.debug("gnc_solve: %d inner iterations, cost %.6g", iterations, final)
    out = SolveReport(estimate, iterations, final, report.converged,
                      report.cost_trace, weights)
    return out, weights
