"""GNSS measurement and motion factors.

Observation model (meters)::

    pseudorange   = |p_sat - p_rx| + clock_bias + m(el) * zenith_tropo + noise
    carrier range = |p_sat - p_rx| + clock_bias + m(el) * zenith_tropo + B_sat + noise

with the mapping function ``m(el) = 1 / sin(max(el, 5 deg))``.  Ionosphere,
satellite clock and relativistic terms are not modelled.
"""
import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _accel
from .errors import BadNoiseModel, DegenerateGeometry, EpochGapError, MissingObservable
from .graph import (
    EpochState,
    Factor,
    FactorKind,
    VariableKind,
    component_indices,
    tangent_dim,
    to_vector,
)
from .kernels import SwitchLinked

MIN_MAPPING_ELEVATION = math.radians(5.0)


def mapping_function(elevation):
    return 1.0 / math.sin(max(elevation, MIN_MAPPING_ELEVATION))


@dataclass(frozen=True)
class SatelliteObservation:
    sat_id: str
    sat_position: np.ndarray
    pseudorange: float
    carrier_phase_range: Optional[float] = None
    elevation: float = math.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "sat_id", str(self.sat_id))
        object.__setattr__(self, "sat_position",
                           np.array(self.sat_position, dtype=float).reshape(3))
        if not 0.0 < self.elevation <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {self.elevation} outside (0, pi/2]")
        if not self.pseudorange > 0:
            raise ValueError("pseudorange must be positive")


def pseudorange_predict(state, obs):
    los = obs.sat_position - state.position
    rho = float(np.sqrt(los @ los))
    if rho == 0.0:
        raise DegenerateGeometry(f"receiver coincides with satellite {obs.sat_id}")
    return rho + state.clock_bias + mapping_function(obs.elevation) * state.zenith_tropo


def switch_psi(s):
    """Residual scale for switch value ``s`` and its derivative (clamped linear)."""
    if s < 0.0:
        return 0.0, 0.0
    if s > 1.0:
        return 1.0, 0.0
    return float(s), 1.0


class RangeFactor(Factor):
    """Shared machinery of pseudorange and carrier-phase factors."""

    uses_ambiguity = False

    def __init__(self, state_key, obs, sigma, kernel=None, switch_key=None, id=-1):
        if not sigma > 0:
            raise ValueError("sigma must be > 0")
        if state_key.kind is not VariableKind.EPOCH:
            raise TypeError("range factors attach to EpochState variables")
        self.obs = obs
        self.sigma = float(sigma)
        self.mapping = mapping_function(obs.elevation)
        self.switch_key = switch_key
        variables = (state_key,) if switch_key is None else (state_key, switch_key)
        if switch_key is not None and kernel is None:
            kernel = SwitchLinked(switch_key)
        super().__init__(variables, [self._measured(obs)], [[self.sigma ** 2]], kernel, id)

    @staticmethod
    def _measured(obs):
        return obs.pseudorange

    @property
    def sat_id(self):
        return self.obs.sat_id

    def with_switch(self, switch_key):
        return type(self)(self.variables[0], self.obs, self.sigma,
                          SwitchLinked(switch_key), switch_key, self.id)

    def without_switch(self, kernel=None):
        return type(self)(self.variables[0], self.obs, self.sigma, kernel, None, self.id)

    def _ambiguity(self, state):
        if not self.uses_ambiguity:
            return 0.0, None
        j = state.ambiguity_index(self.sat_id)
        if j is None:
            raise MissingObservable(f"state lacks an ambiguity for {self.sat_id}")
        return state.ambiguities[self.sat_id], j

    def whitened(self, values):
        # plain numpy reference path; linearize() uses whitened_batch
        state = values[self.variables[0]]
        amb, j = self._ambiguity(state)
        s = values[self.switch_key] if self.switch_key is not None else 1.0
        psi, dpsi = switch_psi(float(s))
        los = self.obs.sat_position - state.position
        gap, rho = _accel.range_gap(self.measurement[0], self.obs.sat_position, state.position)
        if rho == 0.0:
            raise DegenerateGeometry(f"receiver coincides with satellite {self.sat_id}")
        e = (gap - state.clock_bias - self.mapping * state.zenith_tropo - amb) / self.sigma
        J = np.zeros((1, state.dim))
        J[0, :3] = psi * los / (rho * self.sigma)
        J[0, 3] = -psi / self.sigma
        J[0, 4] = -psi * self.mapping / self.sigma
        if j is not None:
            J[0, j] = -psi / self.sigma
        jacs = [J]
        if self.switch_key is not None:
            jacs.append(np.array([[dpsi * e]]))
        return np.array([psi * e]), jacs

    @classmethod
    def whitened_batch(cls, factors, values):
        n = len(factors)
        rx = np.empty((n, 3))
        sat = np.empty((n, 3))
        offset = np.empty(n)
        meas = np.empty(n)
        inv_sigma = np.empty(n)
        psi = np.ones(n)
        dpsi = np.zeros(n)
        states, amb_cols = [], []
        for i, f in enumerate(factors):
            st = values[f.variables[0]]
            amb, j = f._ambiguity(st)
            states.append(st)
            amb_cols.append(j)
            rx[i] = st.position
            sat[i] = f.obs.sat_position
            offset[i] = st.clock_bias + f.mapping * st.zenith_tropo + amb
            meas[i] = f.measurement[0]
            inv_sigma[i] = 1.0 / f.sigma
            if f.switch_key is not None:
                psi[i], dpsi[i] = switch_psi(float(values[f.switch_key]))
        res, jpos, jscale, jsw, bad = _accel.range_rows(
            rx, sat, offset, meas, inv_sigma, psi, dpsi)
        if bad >= 0:
            raise DegenerateGeometry(f"receiver coincides with satellite {factors[bad].sat_id}")
        out = []
        for i, f in enumerate(factors):
            J = np.zeros((1, states[i].dim))
            J[0, :3] = jpos[i]
            J[0, 3] = jscale[i]
            J[0, 4] = jscale[i] * f.mapping
            if amb_cols[i] is not None:
                J[0, amb_cols[i]] = jscale[i]
            jacs = [J]
            if f.switch_key is not None:
                jacs.append(np.array([[jsw[i]]]))
            out.append((res[i:i + 1].copy(), jacs))
        return out


class PseudorangeFactor(RangeFactor):
    kind = FactorKind.PSEUDORANGE


class CarrierPhaseFactor(RangeFactor):
    kind = FactorKind.CARRIER_PHASE
    uses_ambiguity = True

    @staticmethod
    def _measured(obs):
        if obs.carrier_phase_range is None:
            raise MissingObservable(f"no carrier-phase measurement for {obs.sat_id}")
        return obs.carrier_phase_range

    def on_add(self, graph):
        # ambiguities are created on the first carrier-phase factor of a satellite
        key = self.variables[0]
        state = graph.variables[key]
        if state.ambiguity_index(self.sat_id) is None:
            init = self.obs.carrier_phase_range - self.obs.pseudorange
            graph.variables[key] = state.with_ambiguity(self.sat_id, init)


class PriorFactor(Factor):
    """``r = W (mean - x)`` over the components present in ``mean``."""

    kind = FactorKind.PRIOR

    def __init__(self, key, mean, covariance, kernel=None, id=-1):
        self.mean = mean
        super().__init__((key,), to_vector(mean), covariance, kernel, id)
        if self.dim != self.measurement.size:
            raise BadNoiseModel(
                f"covariance is {self.dim}x{self.dim} but the mean has {self.measurement.size} components")

    def whitened(self, values):
        x = values[self.variables[0]]
        idx = component_indices(x, self.mean)
        W = self.sqrt_information
        r = W @ (self.measurement - to_vector(x)[idx])
        J = np.zeros((self.dim, tangent_dim(x)))
        J[:, idx] = -W
        return r, [J]


class SwitchPriorFactor(PriorFactor):
    kind = FactorKind.SWITCH_PRIOR

    def __init__(self, key, mean, sigma, id=-1):
        if key.kind is not VariableKind.SWITCH:
            raise TypeError("switch prior needs a switch variable")
        super().__init__(key, np.array([float(mean)]), [[float(sigma) ** 2]], None, id)


class MotionKind(enum.Enum):
    RANDOM_WALK = "random_walk"
    CONSTANT_VELOCITY = "constant_velocity"


@dataclass(frozen=True)
class MotionModel:
    """Between-epoch process model.

    ``process_noise`` is a per-second covariance over the state tangent
    (position, clock, tropo for EpochState); the factor noise is
    ``process_noise * dt``.  Ambiguities shared by both epochs are held
    constant with variance ``ambiguity_noise * dt``.

    ``CONSTANT_VELOCITY`` applies to vector variables laid out as
    ``[position(k), velocity(k)]``.
    """

    kind: MotionKind
    process_noise: np.ndarray
    dt: float = 1.0
    ambiguity_noise: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", MotionKind(self.kind))
        object.__setattr__(self, "process_noise", np.atleast_2d(np.asarray(self.process_noise, dtype=float)))
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.ambiguity_noise > 0:
            raise ValueError("ambiguity_noise must be > 0")

    def transition(self, n):
        if self.kind is MotionKind.RANDOM_WALK:
            return np.eye(n)
        if n % 2:
            raise ValueError("constant-velocity state needs [position, velocity] halves")
        k = n // 2
        F = np.eye(n)
        F[:k, k:] = self.dt * np.eye(k)
        return F


class BetweenFactor(Factor):
    """``r = W (x_next - F x_prev)``."""

    kind = FactorKind.BETWEEN

    def __init__(self, key_prev, key_next, model, shared_sats=(), kernel=None, id=-1):
        if key_next.epoch != key_prev.epoch + 1:
            raise EpochGapError(f"between factor needs consecutive epochs, got "
                                f"{key_prev.epoch} -> {key_next.epoch}")
        self.model = model
        self.shared_sats = tuple(str(s) for s in shared_sats)
        base = model.process_noise.shape[0]
        if key_prev.kind is VariableKind.EPOCH:
            if model.kind is not MotionKind.RANDOM_WALK:
                raise ValueError("EpochState supports only the random-walk motion model")
            if base != EpochState.BASE_DIM:
                raise ValueError("EpochState process noise must be 5x5")
            self.template = EpochState(ambiguities={s: 0.0 for s in self.shared_sats})
        else:
            if self.shared_sats:
                raise ValueError("shared ambiguities only apply to EpochState")
            self.template = np.zeros(base)
        n = base + len(self.shared_sats)
        noise = np.zeros((n, n))
        noise[:base, :base] = model.process_noise * model.dt
        noise[base:, base:] = np.eye(len(self.shared_sats)) * model.ambiguity_noise * model.dt
        self.F = model.transition(base)
        if self.shared_sats:
            F = np.eye(n)
            F[:base, :base] = self.F
            self.F = F
        super().__init__((key_prev, key_next), np.zeros(n), noise, kernel, id)

    def whitened(self, values):
        xp = values[self.variables[0]]
        xn = values[self.variables[1]]
        ip = component_indices(xp, self.template)
        inn = component_indices(xn, self.template)
        W = self.sqrt_information
        r = W @ (to_vector(xn)[inn] - self.F @ to_vector(xp)[ip])
        Jp = np.zeros((self.dim, tangent_dim(xp)))
        Jn = np.zeros((self.dim, tangent_dim(xn)))
        Jp[:, ip] = -W @ self.F
        Jn[:, inn] = W
        return r, [Jp, Jn]


class SwitchTransitionFactor(Factor):
    """Couples one satellite's switches at consecutive epochs: ``r = (s_next - s_prev) / sigma``."""

    kind = FactorKind.SWITCH_TRANSITION

    def __init__(self, key_prev, key_next, sigma, id=-1):
        if key_prev.kind is not VariableKind.SWITCH or key_next.kind is not VariableKind.SWITCH:
            raise TypeError("switch transition links two switch variables")
        if key_next.epoch != key_prev.epoch + 1:
            raise EpochGapError("switch transition needs consecutive epochs")
        self.sigma = float(sigma)
        super().__init__((key_prev, key_next), [0.0], [[self.sigma ** 2]], None, id)

    def whitened(self, values):
        sp_ = float(values[self.variables[0]])
        sn = float(values[self.variables[1]])
        inv = 1.0 / self.sigma
        return np.array([(sn - sp_) * inv]), [np.array([[-inv]]), np.array([[inv]])]


# -- constructors ------------------------------------------------------------

def pseudorange_factor(state_key, obs, sigma, kernel=None):
    return PseudorangeFactor(state_key, obs, sigma, kernel)


def carrier_phase_factor(state_key, obs, sigma, kernel=None):
    return CarrierPhaseFactor(state_key, obs, sigma, kernel)


def between_factor(key_prev, key_next, model, shared_sats=()):
    return BetweenFactor(key_prev, key_next, model, shared_sats)


def prior_factor(key, mean, covariance, kernel=None):
    return PriorFactor(key, mean, covariance, kernel)


def random_walk_model(position_sigma, clock_sigma, tropo_sigma, dt=1.0, ambiguity_sigma=1e-4):
    """Random-walk model from per-sqrt-second sigmas (position sigma per axis)."""
    q = np.diag([position_sigma ** 2] * 3 + [clock_sigma ** 2, tropo_sigma ** 2])
    return MotionModel(MotionKind.RANDOM_WALK, q, dt, ambiguity_sigma ** 2)
