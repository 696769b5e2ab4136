"""Variables, factors, the bipartite graph, and linearization."""
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import (
    ArityError,
    BadNoiseModel,
    DanglingEdge,
    DuplicateFactor,
    DuplicateVariable,
    IncompleteEstimate,
    UnknownVariable,
)
from .kernels import L2, RobustKernel


class VariableKind(enum.Enum):
    EPOCH = "EpochState"
    SWITCH = "SwitchVar"
    VECTOR = "Vector"


@dataclass(frozen=True)
class VariableKey:
    kind: VariableKind
    epoch: int
    tag: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.kind, VariableKind):
            object.__setattr__(self, "kind", VariableKind(self.kind))
        if int(self.epoch) != self.epoch or self.epoch < 0:
            raise ValueError(f"epoch must be a non-negative integer, got {self.epoch!r}")
        if self.kind is VariableKind.SWITCH and self.tag is None:
            raise ValueError("switch variables need a satellite tag")

    def sort_key(self):
        # epoch-major, switches after their epoch's state
        return (self.epoch, self.kind is VariableKind.SWITCH, self.tag or "")

    def __str__(self):
        tag = f":{self.tag}" if self.tag is not None else ""
        return f"{self.kind.value}[{self.epoch}{tag}]"


def epoch_key(epoch):
    return VariableKey(VariableKind.EPOCH, epoch)


def switch_key(epoch, sat_id):
    return VariableKey(VariableKind.SWITCH, epoch, None if sat_id is None else str(sat_id))


def vector_key(epoch, tag=None):
    return VariableKey(VariableKind.VECTOR, epoch, tag)


@dataclass
class EpochState:
    """Receiver state at one epoch; all quantities in meters, local ENU frame.

    Tangent layout: ``[e, n, u, clock_bias, zenith_tropo, ambiguities...]`` with
    ambiguities in insertion order.
    """

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clock_bias: float = 0.0
    zenith_tropo: float = 0.0
    ambiguities: dict = field(default_factory=dict)

    BASE_DIM: ClassVar[int] = 5

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(3)
        self.clock_bias = float(self.clock_bias)
        self.zenith_tropo = float(self.zenith_tropo)
        self.ambiguities = {str(k): float(v) for k, v in self.ambiguities.items()}
        if not (np.all(np.isfinite(self.position)) and np.isfinite(self.clock_bias)
                and np.isfinite(self.zenith_tropo)
                and all(np.isfinite(v) for v in self.ambiguities.values())):
            raise ValueError("EpochState fields must be finite")

    @property
    def dim(self):
        return self.BASE_DIM + len(self.ambiguities)

    def ambiguity_index(self, sat_id):
        """Tangent index of ``sat_id``'s ambiguity, or None if not tracked."""
        for i, s in enumerate(self.ambiguities):
            if s == sat_id:
                return self.BASE_DIM + i
        return None

    def to_vector(self):
        v = np.empty(self.dim)
        v[:3] = self.position
        v[3] = self.clock_bias
        v[4] = self.zenith_tropo
        v[5:] = list(self.ambiguities.values())
        return v

    @classmethod
    def from_vector(cls, vec, sats=()):
        vec = np.asarray(vec, dtype=float)
        sats = list(sats)
        if vec.shape != (cls.BASE_DIM + len(sats),):
            raise ValueError("vector length does not match ambiguity list")
        return cls(vec[:3], vec[3], vec[4], dict(zip(sats, vec[5:])))

    def retract(self, delta):
        return EpochState.from_vector(self.to_vector() + delta, self.ambiguities.keys())

    def with_ambiguity(self, sat_id, value):
        amb = dict(self.ambiguities)
        amb[str(sat_id)] = value
        return EpochState(self.position.copy(), self.clock_bias, self.zenith_tropo, amb)

    def copy(self):
        return EpochState(self.position.copy(), self.clock_bias, self.zenith_tropo,
                          dict(self.ambiguities))


# -- generic value helpers; values are EpochState, float (switches) or 1-D arrays

def tangent_dim(value):
    if isinstance(value, EpochState):
        return value.dim
    return int(np.size(value))


def to_vector(value):
    if isinstance(value, EpochState):
        return value.to_vector()
    return np.atleast_1d(np.asarray(value, dtype=float)).copy()


def retract(value, delta):
    if isinstance(value, EpochState):
        return value.retract(delta)
    if np.ndim(value) == 0:
        return float(value + delta[0])
    return np.asarray(value, dtype=float) + delta


def component_indices(value, template):
    """Indices into ``value``'s tangent covered by ``template``'s components."""
    if isinstance(value, EpochState):
        if not isinstance(template, EpochState):
            raise TypeError("EpochState value needs an EpochState template")
        idx = list(range(EpochState.BASE_DIM))
        for sat in template.ambiguities:
            j = value.ambiguity_index(sat)
            if j is None:
                raise UnknownVariable(f"state has no ambiguity for satellite {sat}")
            idx.append(j)
        return np.array(idx)
    n = tangent_dim(template)
    if n > tangent_dim(value):
        raise ValueError("template has more components than the value")
    return np.arange(n)


def copy_value(value):
    if isinstance(value, EpochState):
        return value.copy()
    if np.ndim(value) == 0:
        return float(value)
    return np.array(value, dtype=float)


def copy_estimate(estimate):
    return {k: copy_value(v) for k, v in estimate.items()}


class FactorKind(enum.Enum):
    PRIOR = "Prior"
    BETWEEN = "Between"
    PSEUDORANGE = "Pseudorange"
    CARRIER_PHASE = "CarrierPhase"
    SWITCH_PRIOR = "SwitchPrior"
    SWITCH_TRANSITION = "SwitchTransition"
    MARGINAL = "MarginalPrior"
    GENERIC = "Generic"


ARITY = {
    FactorKind.PRIOR: (1,),
    FactorKind.BETWEEN: (2,),
    FactorKind.PSEUDORANGE: (1, 2),
    FactorKind.CARRIER_PHASE: (1, 2),
    FactorKind.SWITCH_PRIOR: (1,),
    FactorKind.SWITCH_TRANSITION: (2,),
}


def sqrt_information(noise):
    """Upper-triangular ``W`` with ``W.T @ W == inv(noise)``."""
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    if noise.shape[0] != noise.shape[1] or not np.all(np.isfinite(noise)):
        raise BadNoiseModel("noise covariance must be a finite square matrix")
    if not np.allclose(noise, noise.T, rtol=1e-10, atol=1e-14 * np.abs(noise).max(initial=0)):
        raise BadNoiseModel("noise covariance is not symmetric")
    try:
        c = scipy.linalg.cho_factor(noise, lower=True)
        info = scipy.linalg.cho_solve(c, np.eye(noise.shape[0]))
        lower = np.linalg.cholesky(0.5 * (info + info.T))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise BadNoiseModel(f"noise covariance is not positive definite: {exc}") from None
    return lower.T


class Factor:
    """A probabilistic constraint over an ordered tuple of variables.

    Subclasses implement :meth:`whitened`, which returns the whitened residual
    ``r`` and one Jacobian block ``dr/dx`` per connected variable, so that the
    factor's least-squares cost is ``||r||^2``.
    """

    kind = FactorKind.GENERIC

    def __init__(self, variables, measurement, noise, kernel=None, id=-1):
        self.variables = tuple(variables)
        self.measurement = np.atleast_1d(np.asarray(measurement, dtype=float))
        self.noise = np.atleast_2d(np.asarray(noise, dtype=float))
        self.kernel = kernel if kernel is not None else L2()
        if not isinstance(self.kernel, RobustKernel):
            raise TypeError("kernel must be a RobustKernel")
        self.id = id
        self._check_arity()
        self.sqrt_information  # validates the noise model eagerly

    def _check_arity(self):
        allowed = ARITY.get(self.kind)
        if allowed is not None and len(self.variables) not in allowed:
            raise ArityError(
                f"{self.kind.value} factor takes {allowed} variables, got {len(self.variables)}")
        if not self.variables:
            raise ArityError("a factor needs at least one variable")

    @cached_property
    def sqrt_information(self):
        return sqrt_information(self.noise)

    @property
    def dim(self):
        return self.noise.shape[0]

    def whitened(self, values):
        raise NotImplementedError

    def on_add(self, graph):
        """Hook run by :meth:`FactorGraph.add_factor` after validation."""

    @classmethod
    def whitened_batch(cls, factors, values):
        return [f.whitened(values) for f in factors]

    def __repr__(self):
        keys = ", ".join(str(k) for k in self.variables)
        return f"{type(self).__name__}(id={self.id}, [{keys}], kernel={self.kernel.name})"


class FactorGraph:
    """Bipartite container: variables on one side, factors on the other.

    Edges exist only between a factor and the variables it lists, so
    variable-variable or factor-factor edges cannot be expressed.
    """

    def __init__(self):
        self.variables = {}
        self.factors = []
        self._by_id = {}
        self._next_id = 0

    def __len__(self):
        return len(self.factors)

    def add_variable(self, key, initial):
        if key in self.variables:
            raise DuplicateVariable(str(key))
        self.variables[key] = copy_value(initial)
        return self

    def add_factor(self, factor):
        """Validate and append ``factor``; returns its id (assigned if ``-1``)."""
        missing = [k for k in factor.variables if k not in self.variables]
        if missing:
            raise DanglingEdge(f"{factor!r} references absent {', '.join(map(str, missing))}")
        factor._check_arity()
        factor.sqrt_information
        if factor.id is None or factor.id < 0:
            factor.id = self._next_id
        elif factor.id in self._by_id:
            raise DuplicateFactor(f"factor id {factor.id} already used")
        self._next_id = max(self._next_id, factor.id + 1)
        self.factors.append(factor)
        self._by_id[factor.id] = factor
        factor.on_add(self)
        return factor.id

    def factor(self, fid):
        return self._by_id[fid]

    def remove_factors(self, fids):
        fids = set(fids)
        self.factors = [f for f in self.factors if f.id not in fids]
        for fid in fids:
            self._by_id.pop(fid, None)

    def remove_variable(self, key):
        if any(key in f.variables for f in self.factors):
            raise ValueError(f"{key} still has factors attached")
        del self.variables[key]

    def edges(self):
        for f in self.factors:
            for k in f.variables:
                yield f.id, k

    def neighbors(self, key):
        return [f.id for f in self.factors if key in f.variables]

    def ordered_keys(self, keys=None):
        return sorted(self.variables if keys is None else keys, key=VariableKey.sort_key)

    def copy(self):
        g = FactorGraph()
        g.variables = copy_estimate(self.variables)
        g.factors = list(self.factors)
        g._by_id = dict(self._by_id)
        g._next_id = self._next_id
        return g

    def initial_estimate(self):
        return copy_estimate(self.variables)


@dataclass
class LinearizedSystem:
    """Whitened, block-sparse least-squares system at one linearization point.

    ``blocks`` holds ``(factor_id, key, J)`` with ``J = dr/dx_key``; the total
    cost is ``sum(||r||^2)`` over ``residuals``.
    """

    blocks: list
    residuals: dict
    column_index: dict

    @cached_property
    def factor_ids(self):
        return list(self.residuals)

    @cached_property
    def row_offsets(self):
        off, out = 0, {}
        for fid, r in self.residuals.items():
            out[fid] = off
            off += r.size
        return out

    @property
    def n_rows(self):
        return sum(r.size for r in self.residuals.values())

    @property
    def n_cols(self):
        return max((s.stop for s in self.column_index.values()), default=0)

    def chi2(self):
        return {fid: float(r @ r) for fid, r in self.residuals.items()}

    def residual_vector(self):
        if not self.residuals:
            return np.zeros(0)
        return np.concatenate(list(self.residuals.values()))

    def row_weights(self, weights=None):
        if weights is None:
            return np.ones(self.n_rows)
        return np.concatenate([np.full(r.size, float(weights.get(fid, 1.0)))
                               for fid, r in self.residuals.items()])

    def jacobian(self):
        rows, cols, vals = [], [], []
        offs = self.row_offsets
        for fid, key, J in self.blocks:
            m, n = J.shape
            sl = self.column_index[key]
            rows.append(np.repeat(np.arange(offs[fid], offs[fid] + m), n))
            cols.append(np.tile(np.arange(sl.start, sl.start + n), m))
            vals.append(J.ravel())
        if not rows:
            return sp.csr_matrix((self.n_rows, self.n_cols))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_rows, self.n_cols))


def column_layout(graph, estimate):
    index, off = {}, 0
    for key in graph.ordered_keys():
        d = tangent_dim(estimate[key])
        index[key] = slice(off, off + d)
        off += d
    return index


def linearize(graph, estimate):
    """Whitened residuals and Jacobian blocks of every factor at ``estimate``.

    Robust kernels are not applied here.
    """
    missing = [k for k in graph.variables if k not in estimate]
    if missing:
        raise IncompleteEstimate(f"estimate lacks {', '.join(map(str, missing[:5]))}")
    groups = defaultdict(list)
    for f in graph.factors:
        groups[type(f)].append(f)
    evaluated = {}
    for cls, fs in groups.items():
        for f, out in zip(fs, cls.whitened_batch(fs, estimate)):
            evaluated[f.id] = out
    residuals, blocks = {}, []
    for fid in sorted(evaluated):
        r, jacs = evaluated[fid]
        f = graph.factor(fid)
        residuals[fid] = r
        for key, J in zip(f.variables, jacs):
            blocks.append((fid, key, J))
    return LinearizedSystem(blocks, residuals, column_layout(graph, estimate))


def factor_costs(graph, estimate, kernels=None):
    """Per-factor ``(chi2, kernel cost, IRLS weight)`` at ``estimate``."""
    system = linearize(graph, estimate)
    return _kernel_terms(graph, system, kernels), system


def _kernel_terms(graph, system, kernels=None):
    out = {}
    for fid, r in system.residuals.items():
        kernel = (kernels or {}).get(fid) or graph.factor(fid).kernel
        chi2 = float(r @ r)
        out[fid] = (chi2, kernel.cost(chi2, r.size), kernel.weight(chi2, r.size))
    return out


def total_cost(graph, estimate, kernels=None):
    """Sum of kernel costs of whitened squared residuals (plain ``sum ||r||^2`` for L2)."""
    terms, _ = factor_costs(graph, estimate, kernels)
    return float(sum(t[1] for t in terms.values()))
