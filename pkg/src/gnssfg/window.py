"""Fixed-lag smoothing with marginalization in square-root information form."""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import EpochOrderError, SingularSystem, UnknownVariable
from .graph import (
    Factor,
    FactorGraph,
    FactorKind,
    _kernel_terms,
    copy_value,
    linearize,
    tangent_dim,
    to_vector,
)
from .solver import gauss_newton, levenberg_marquardt


@dataclass(frozen=True)
class WindowConfig:
    lag: int = 5

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be >= 1")


@dataclass
class MarginalPrior:
    """Linearized summary ``||R (x - x0) + d||^2 + constant`` on the boundary keys."""

    keys: list = field(default_factory=list)
    sqrt_information: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    linearization_point: dict = field(default_factory=dict)
    rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constant: float = 0.0

    @property
    def empty(self):
        return not self.keys

    def information(self):
        return self.sqrt_information.T @ self.sqrt_information


class MarginalPriorFactor(Factor):
    kind = FactorKind.MARGINAL

    def __init__(self, prior, id=-1):
        self.prior = prior
        self._dims = [tangent_dim(prior.linearization_point[k]) for k in prior.keys]
        self._x0 = [to_vector(prior.linearization_point[k]) for k in prior.keys]
        n = prior.sqrt_information.shape[0] + (1 if prior.constant > 0 else 0)
        super().__init__(prior.keys, np.zeros(n), np.eye(n), None, id)

    def whitened(self, values):
        R = self.prior.sqrt_information
        delta = np.concatenate([to_vector(values[k])[:d] - x0
                                for k, d, x0 in zip(self.variables, self._dims, self._x0)])
        r = R @ delta + self.prior.rhs
        extra = self.dim - R.shape[0]
        jacs, off = [], 0
        for k, d in zip(self.variables, self._dims):
            J = np.zeros((self.dim, tangent_dim(values[k])))
            J[:R.shape[0], :d] = R[:, off:off + d]
            jacs.append(J)
            off += d
        if extra:
            r = np.append(r, np.sqrt(self.prior.constant))
        return r, jacs


def marginalize(graph, estimate, drop_keys, weights=None):
    """Eliminate ``drop_keys`` and summarize their factors as a prior on the boundary.

    Factors touching a dropped variable are linearized at ``estimate``
    (robust kernels enter as IRLS weights unless ``weights`` is given),
    stacked with the dropped columns first and reduced by Householder QR.
    The rows below the dropped block form the marginal prior.
    Returns ``(reduced_graph, MarginalPrior)``.
    """
    drop = list(dict.fromkeys(drop_keys))
    for k in drop:
        if k not in graph.variables:
            raise UnknownVariable(str(k))
    dropset = set(drop)
    consumed = [f for f in graph.factors if dropset.intersection(f.variables)]
    reduced = graph.copy()
    reduced.remove_factors([f.id for f in consumed])
    for k in drop:
        del reduced.variables[k]
    if not consumed:
        return reduced, MarginalPrior()

    sub = FactorGraph()
    involved = {k for f in consumed for k in f.variables}
    sub.variables = {k: estimate[k] for k in involved}
    for f in consumed:
        sub.factors.append(f)
        sub._by_id[f.id] = f
    system = linearize(sub, estimate)
    if weights is None:
        w = {fid: t[2] for fid, t in _kernel_terms(sub, system).items()}
    else:
        w = {fid: weights.get(fid, 1.0) for fid in system.residuals}
    sw = np.sqrt(system.row_weights(w))
    A_full = (system.jacobian().toarray()) * sw[:, None]
    r = system.residual_vector() * sw

    dropped = sub.ordered_keys([k for k in involved if k in dropset])
    boundary = sub.ordered_keys([k for k in involved if k not in dropset])
    cols = lambda keys: np.concatenate(  # noqa: E731
        [np.arange(system.column_index[k].start, system.column_index[k].stop) for k in keys]
    ) if keys else np.zeros(0, dtype=int)
    nd = sum(tangent_dim(estimate[k]) for k in dropped)
    A = np.hstack([A_full[:, cols(dropped)], A_full[:, cols(boundary)]])
    Q, R = scipy.linalg.qr(A, mode="economic")
    d = Q.T @ r
    diag = np.abs(np.diag(R[:nd, :nd]))
    if diag.size and (diag.size < nd or diag.min() <= 1e-12 * max(diag.max(), 1.0)):
        raise SingularSystem("dropped variables are not fully determined by their factors")
    R22 = R[nd:, nd:]
    d2 = d[nd:]
    constant = max(float(r @ r - d @ d), 0.0)
    prior = MarginalPrior(
        keys=boundary,
        sqrt_information=R22,
        linearization_point={k: copy_value(estimate[k]) for k in boundary},
        rhs=d2,
        constant=constant,
    )
    if boundary and R22.shape[0]:
        reduced.add_factor(MarginalPriorFactor(prior))
    return reduced, prior


class FixedLagSmoother:
    """Sliding window over epochs with marginalization of the oldest one.

    ``solve`` is a callable ``(graph, init) -> SolveReport``; the strings
    ``"lm"`` and ``"gn"`` select the built-in solvers.  Smoothed estimates of
    epochs that have left the window are kept in :attr:`history`.
    """

    def __init__(self, config, solve="lm", opts=None):
        self.config = config
        if solve == "lm":
            solve = lambda g, x: levenberg_marquardt(g, x, opts)  # noqa: E731
        elif solve == "gn":
            solve = lambda g, x: gauss_newton(g, x, opts)  # noqa: E731
        self._solve = solve
        self.graph = FactorGraph()
        self.estimate = {}
        self.epochs = []
        self.history = {}
        self.priors = []
        self.reports = []

    def slide(self, epoch, variables, factors):
        """Add one epoch's variables and factors, optimize, and marginalize if needed."""
        if self.epochs and epoch <= self.epochs[-1]:
            raise EpochOrderError(f"epoch {epoch} arrived after {self.epochs[-1]}")
        for key, value in variables.items():
            self.graph.add_variable(key, value)
        for f in factors:
            self.graph.add_factor(f)
        # graph values track the latest estimate; add_factor may have grown states
        self.estimate = self.graph.initial_estimate()
        self.epochs.append(epoch)
        report = self._solve(self.graph, self.estimate)
        self.estimate = report.estimate
        for k, v in self.estimate.items():
            self.graph.variables[k] = copy_value(v)
        self.reports.append(report)
        if len(self.epochs) > self.config.lag:
            self._drop_oldest()
        return report

    def _drop_oldest(self):
        oldest = self.epochs.pop(0)
        drop = [k for k in self.graph.variables if k.epoch == oldest]
        for k in drop:
            self.history[k] = copy_value(self.estimate[k])
        self.graph, prior = marginalize(self.graph, self.estimate, drop)
        self.priors.append(prior)
        for k in drop:
            self.estimate.pop(k, None)

    def latest(self, kind=None):
        """Estimates of the most recent epoch's variables."""
        last = self.epochs[-1]
        return {k: v for k, v in self.estimate.items() if k.epoch == last
                and (kind is None or k.kind is kind)}

    def smoothed(self):
        """History plus the current window: one estimate per variable seen so far."""
        out = dict(self.history)
        out.update(self.estimate)
        return out


def slide(smoother, epoch, variables, factors):
    """Functional spelling of :meth:`FixedLagSmoother.slide`."""
    return smoother.slide(epoch, variables, factors)
