"""Synthetic GNSS scenarios: static constellation, receiver trajectory,
clock and troposphere random walks, measurement noise and multipath outliers.

Everything is expressed in the local east-north-up frame of a geodetic
origin; the Earth-centred frame is only used to put satellites on their
orbital shell.
"""
import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, GeometryError
from .graph import EpochState, FactorGraph, epoch_key
from .kernels import RobustKernel
from .models import (
    BetweenFactor,
    CarrierPhaseFactor,
    PriorFactor,
    PseudorangeFactor,
    SatelliteObservation,
    pseudorange_predict,
    random_walk_model,
)
from .robust import augment_with_switches

EARTH_RADIUS = 6_371_000.0
SHELL_ALTITUDE = 20_200_000.0
WGS84_A = 6_378_137.0
WGS84_E2 = 6.69437999014e-3
MAX_PLACEMENT_ATTEMPTS = 100
MAX_GDOP = 10.0
CLIP_SIGMAS = 6.0


def geodetic_to_ecef(lat_deg, lon_deg, height):
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * math.sin(lat) ** 2)
    return np.array([
        (n + height) * math.cos(lat) * math.cos(lon),
        (n + height) * math.cos(lat) * math.sin(lon),
        (n * (1.0 - WGS84_E2) + height) * math.sin(lat),
    ])


def enu_basis(lat_deg, lon_deg):
    """Rows are the east, north and up unit vectors in ECEF."""
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    sl, cl, so, co = math.sin(lat), math.cos(lat), math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def gdop(unit_los):
    """GDOP for receiver-to-satellite unit vectors (position + clock)."""
    G = np.hstack([-np.asarray(unit_los), np.ones((len(unit_los), 1))])
    N = G.T @ G
    if np.linalg.cond(N) > 1e12:
        return math.inf
    return float(math.sqrt(np.trace(np.linalg.inv(N))))


class TrajectoryKind(enum.Enum):
    STATIC = "static"
    CONSTANT_VELOCITY = "constant_velocity"
    WAYPOINTS = "waypoints"


@dataclass(frozen=True)
class Trajectory:
    """Receiver motion in the local east-north-up frame of the origin.

    ``velocity`` is in m/s; ``waypoints`` are ENU offsets in meters visited
    at evenly spaced times over the scenario.
    """

    kind: TrajectoryKind = TrajectoryKind.STATIC
    velocity: tuple = (0.0, 0.0, 0.0)
    waypoints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", TrajectoryKind(self.kind))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "waypoints", tuple(tuple(float(c) for c in w) for w in self.waypoints))
        if len(self.velocity) != 3:
            raise ConfigError("trajectory.velocity needs 3 components")
        if self.kind is TrajectoryKind.WAYPOINTS and len(self.waypoints) < 2:
            raise ConfigError("waypoint trajectory needs at least 2 waypoints")
        if any(len(w) != 3 for w in self.waypoints):
            raise ConfigError("waypoints need 3 components")

    def offsets(self, n_epochs, dt):
        t = np.arange(n_epochs) * dt
        if self.kind is TrajectoryKind.STATIC:
            return np.zeros((n_epochs, 3))
        if self.kind is TrajectoryKind.CONSTANT_VELOCITY:
            return t[:, None] * np.asarray(self.velocity)[None, :]
        wp = np.asarray(self.waypoints)
        knots = np.linspace(0.0, t[-1] if n_epochs > 1 else 0.0, len(wp))
        return np.column_stack([np.interp(t, knots, wp[:, i]) for i in range(3)])

    def max_step(self, n_epochs, dt):
        off = self.offsets(n_epochs, dt)
        if n_epochs < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(off, axis=0), axis=1).max())


@dataclass(frozen=True)
class OutlierModel:
    probability: float = 0.0
    bias_range: tuple = (20.0, 60.0)
    elevation_dependent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bias_range", tuple(float(b) for b in self.bias_range))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("outlier.probability must lie in [0, 1]")
        lo, hi = self.bias_range
        if not (lo > 0 and lo <= hi):
            raise ConfigError("outlier.bias_range needs 0 < min <= max")

    def probability_at(self, elevation):
        if not self.elevation_dependent:
            return self.probability
        el = math.degrees(elevation)
        ramp = max(0.0, (30.0 - el) / 30.0)
        return min(1.0, self.probability * (1.0 + ramp))


@dataclass(frozen=True)
class ScenarioConfig:
    n_epochs: int = 30
    dt: float = 1.0
    n_satellites: int = 8
    trajectory: Trajectory = field(default_factory=Trajectory)
    pseudorange_sigma: float = 1.0
    phase_sigma: float = 0.0
    clock_walk_sigma: float = 0.1
    tropo_walk_sigma: float = 0.001
    outlier: OutlierModel = field(default_factory=OutlierModel)
    rng_seed: int = 0
    with_phase: bool = False
    origin_lat_lon_height: tuple = (47.0, 8.0, 400.0)
    elevation_range_deg: tuple = (10.0, 85.0)
    initial_clock: float = 100.0
    initial_tropo: float = 2.3

    def __post_init__(self):
        if isinstance(self.trajectory, dict):
            object.__setattr__(self, "trajectory", Trajectory(**self.trajectory))
        if isinstance(self.outlier, dict):
            object.__setattr__(self, "outlier", OutlierModel(**self.outlier))
        for name in ("origin_lat_lon_height", "elevation_range_deg"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_epochs < 1:
            raise ConfigError("n_epochs must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.n_satellites < 4:
            raise ConfigError("n_satellites must be >= 4 for position and clock")
        for name in ("pseudorange_sigma", "phase_sigma", "clock_walk_sigma", "tropo_walk_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        lo, hi = self.elevation_range_deg
        if not 0 < lo <= hi <= 90:
            raise ConfigError("elevation_range_deg needs 0 < min <= max <= 90")

    def to_dict(self):
        d = asdict(self)
        d["trajectory"]["kind"] = self.trajectory.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "trajectory" in d and isinstance(d["trajectory"], dict):
            d["trajectory"] = Trajectory(**d["trajectory"])
        if "outlier" in d and isinstance(d["outlier"], dict):
            d["outlier"] = OutlierModel(**d["outlier"])
        return cls(**d)


@dataclass
class Scenario:
    truth: list
    observations: list
    outlier_labels: list
    config: ScenarioConfig

    @property
    def n_epochs(self):
        return len(self.truth)


def _place_satellites(config, rng, origin, enu):
    lo, hi = (math.radians(v) for v in config.elevation_range_deg)
    n = config.n_satellites
    shell = EARTH_RADIUS + SHELL_ALTITUDE
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        # stratified azimuths keep the constellation spread around the sky
        az = 2.0 * math.pi * (np.arange(n) + rng.uniform(0.0, 1.0, n)) / n
        el = rng.uniform(lo, hi, n)
        los_enu = np.column_stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
        if gdop(los_enu) >= MAX_GDOP:
            continue
        los = los_enu @ enu
        b = los @ origin
        c = origin @ origin - shell * shell
        t = -b + np.sqrt(b * b - c)
        # back to the local frame of the origin
        return (t[:, None] * los) @ enu.T
    raise GeometryError(f"no constellation with GDOP < {MAX_GDOP} after "
                        f"{MAX_PLACEMENT_ATTEMPTS} attempts")


def _elevation(sat, rx):
    los = sat - rx
    s = float(los[2]) / float(np.linalg.norm(los))
    return math.asin(min(1.0, max(-1.0, s)))


def generate(config):
    """Deterministic scenario for ``config.rng_seed``."""
    rng = np.random.default_rng(config.rng_seed)
    lat, lon, h = config.origin_lat_lon_height
    origin = geodetic_to_ecef(lat, lon, h)
    enu = enu_basis(lat, lon)
    sats = _place_satellites(config, rng, origin, enu)
    sat_ids = [f"G{i + 1:02d}" for i in range(config.n_satellites)]
    n, dt = config.n_epochs, config.dt
    positions = config.trajectory.offsets(n, dt)
    clock = config.initial_clock + np.concatenate(
        [[0.0], np.cumsum(rng.normal(0.0, config.clock_walk_sigma * math.sqrt(dt), n - 1))])
    tropo = config.initial_tropo + np.concatenate(
        [[0.0], np.cumsum(rng.normal(0.0, config.tropo_walk_sigma * math.sqrt(dt), n - 1))])
    ambiguities = rng.uniform(-20.0, 20.0, config.n_satellites)

    def clipped(sigma, size):
        return np.clip(rng.normal(0.0, 1.0, size), -CLIP_SIGMAS, CLIP_SIGMAS) * sigma

    truth, observations, labels = [], [], []
    for k in range(n):
        state = EpochState(positions[k], float(clock[k]), float(tropo[k]))
        code_noise = clipped(config.pseudorange_sigma, config.n_satellites)
        phase_noise = clipped(config.phase_sigma, config.n_satellites)
        u_outlier = rng.uniform(0.0, 1.0, config.n_satellites)
        biases = rng.uniform(*config.outlier.bias_range, config.n_satellites)
        obs_k, lab_k = [], []
        for i, sid in enumerate(sat_ids):
            el = _elevation(sats[i], positions[k])
            if el <= 0:
                raise GeometryError(f"satellite {sid} set below the horizon at epoch {k}")
            clean = SatelliteObservation(sid, sats[i], 1.0, None, el)
            model = pseudorange_predict(state, clean)
            is_out = bool(u_outlier[i] < config.outlier.probability_at(el))
            pr = model + code_noise[i] + (biases[i] if is_out else 0.0)
            phase = model + ambiguities[i] + phase_noise[i] if config.with_phase else None
            obs_k.append(SatelliteObservation(sid, sats[i], float(pr), phase, el))
            lab_k.append(is_out)
        truth.append(state)
        observations.append(obs_k)
        labels.append(lab_k)
    return Scenario(truth, observations, labels, config)


# -- graph construction -------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    """How a scenario becomes a factor graph.

    Sigmas left as ``None`` are taken from the scenario, floored so that
    noise-free scenarios still give a well-posed problem.
    """

    kernel: Optional[RobustKernel] = None
    switches: bool = False
    switch_prior_mean: float = 1.0
    switch_prior_sigma: float = 0.1
    pseudorange_sigma: Optional[float] = None
    phase_sigma: Optional[float] = None
    use_carrier_phase: bool = False
    position_walk_sigma: Optional[float] = None
    clock_walk_sigma: Optional[float] = None
    tropo_walk_sigma: Optional[float] = None
    prior_position_sigma: float = 100.0
    prior_clock_sigma: float = 1000.0
    prior_tropo_sigma: float = 1.0
    init_position_sigma: float = 30.0
    init_clock_sigma: float = 30.0
    init_tropo_sigma: float = 0.1
    init_seed: Optional[int] = None


SIGMA_FLOOR = {"pseudorange": 1e-4, "phase": 1e-4, "clock": 1e-3, "tropo": 1e-4, "position": 1e-2}


def estimator_sigmas(scenario, est):
    cfg = scenario.config
    pick = lambda own, scen, name: own if own is not None else max(scen, SIGMA_FLOOR[name])  # noqa: E731
    step = cfg.trajectory.max_step(cfg.n_epochs, cfg.dt) / math.sqrt(cfg.dt)
    return {
        "pseudorange": pick(est.pseudorange_sigma, cfg.pseudorange_sigma, "pseudorange"),
        "phase": pick(est.phase_sigma, cfg.phase_sigma, "phase"),
        "clock": pick(est.clock_walk_sigma, cfg.clock_walk_sigma, "clock"),
        "tropo": pick(est.tropo_walk_sigma, cfg.tropo_walk_sigma, "tropo"),
        "position": pick(est.position_walk_sigma, step, "position"),
    }


def initial_states(scenario, est):
    """Truth perturbed by the configured initialization noise, one state per epoch."""
    seed = scenario.config.rng_seed if est.init_seed is None else est.init_seed
    rng = np.random.default_rng([seed, 1])
    out = []
    for s in scenario.truth:
        out.append(EpochState(
            s.position + rng.normal(0.0, est.init_position_sigma, 3),
            s.clock_bias + rng.normal(0.0, est.init_clock_sigma),
            s.zenith_tropo + rng.normal(0.0, est.init_tropo_sigma),
        ))
    return out


def epoch_factors(scenario, est, k, sigmas=None, model=None, init=None):
    """Factors that arrive with epoch ``k`` (prior or between factor, then measurements)."""
    sigmas = sigmas or estimator_sigmas(scenario, est)
    key = epoch_key(k)
    factors = []
    if k == 0:
        mean = init if init is not None else initial_states(scenario, est)[0]
        cov = np.diag([est.prior_position_sigma ** 2] * 3
                      + [est.prior_clock_sigma ** 2, est.prior_tropo_sigma ** 2])
        factors.append(PriorFactor(key, EpochState(mean.position, mean.clock_bias, mean.zenith_tropo), cov))
    else:
        model = model or random_walk_model(sigmas["position"], sigmas["clock"], sigmas["tropo"],
                                           scenario.config.dt)
        shared = ()
        if est.use_carrier_phase:
            prev = {o.sat_id for o in scenario.observations[k - 1] if o.carrier_phase_range is not None}
            shared = tuple(o.sat_id for o in scenario.observations[k]
                           if o.carrier_phase_range is not None and o.sat_id in prev)
        factors.append(BetweenFactor(epoch_key(k - 1), key, model, shared))
    kernel = est.kernel
    for o in scenario.observations[k]:
        factors.append(PseudorangeFactor(key, o, sigmas["pseudorange"], kernel))
        if est.use_carrier_phase and o.carrier_phase_range is not None:
            factors.append(CarrierPhaseFactor(key, o, sigmas["phase"], kernel))
    return factors


def to_graph(scenario, est=None):
    """Factor graph of the whole scenario plus its initial estimate."""
    est = est or EstimatorConfig()
    if not scenario.truth:
        raise ValueError("empty scenario")
    sigmas = estimator_sigmas(scenario, est)
    inits = initial_states(scenario, est)
    graph = FactorGraph()
    for k in range(scenario.n_epochs):
        graph.add_variable(epoch_key(k), inits[k])
        for f in epoch_factors(scenario, est, k, sigmas, init=inits[0]):
            graph.add_factor(f)
    if est.switches:
        graph = augment_with_switches(graph, None, est.switch_prior_mean, est.switch_prior_sigma)
    return graph, graph.initial_estimate()


# -- serialization ------------------------------------------------------------

OBS_FIELDS = ["epoch", "sat_id", "sat_x", "sat_y", "sat_z", "pseudorange",
              "phase_or_blank", "elevation", "outlier_flag"]
TRUTH_FIELDS = ["epoch", "x", "y", "z", "clock", "tropo"]


def _f(x):
    return format(float(x), ".17g")


def write_scenario(scenario, directory):
    """Write ``observations.csv``, ``truth.csv`` and ``scenario.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_FIELDS)
        for k, (obs_k, lab_k) in enumerate(zip(scenario.observations, scenario.outlier_labels)):
            for o, lab in zip(obs_k, lab_k):
                phase = "" if o.carrier_phase_range is None else _f(o.carrier_phase_range)
                w.writerow([k, o.sat_id, *(_f(c) for c in o.sat_position), _f(o.pseudorange),
                            phase, _f(o.elevation), int(lab)])
    with open(d / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_FIELDS)
        for k, s in enumerate(scenario.truth):
            w.writerow([k, *(_f(c) for c in s.position), _f(s.clock_bias), _f(s.zenith_tropo)])
    with open(d / "scenario.json", "w") as fh:
        json.dump(scenario.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return d


def read_scenario(directory):
    d = Path(directory)
    for name in ("observations.csv", "truth.csv", "scenario.json"):
        if not (d / name).is_file():
            raise ConfigError(f"scenario directory {d} lacks {name}")
    with open(d / "scenario.json") as fh:
        config = ScenarioConfig.from_dict(json.load(fh))
    truth = []
    with open(d / "truth.csv", newline="") as fh:
        rows = csv.DictReader(fh)
        if rows.fieldnames != TRUTH_FIELDS:
            raise ConfigError(f"truth.csv header must be {TRUTH_FIELDS}")
        for row in rows:
            if int(row["epoch"]) != len(truth):
                raise ConfigError(f"truth.csv epochs out of order at {row['epoch']}")
            truth.append(EpochState([float(row[c]) for c in "xyz"],
                                    float(row["clock"]), float(row["tropo"])))
    observations = [[] for _ in truth]
    labels = [[] for _ in truth]
    with open(d / "observations.csv", newline="") as fh:
        rows = csv.DictReader(fh)
        if rows.fieldnames != OBS_FIELDS:
            raise ConfigError(f"observations.csv header must be {OBS_FIELDS}")
        for line, row in enumerate(rows, start=2):
            k = int(row["epoch"])
            if not 0 <= k < len(truth):
                raise ConfigError(f"observations.csv line {line}: epoch {k} has no truth")
            phase = row["phase_or_blank"]
            observations[k].append(SatelliteObservation(
                row["sat_id"],
                [float(row["sat_x"]), float(row["sat_y"]), float(row["sat_z"])],
                float(row["pseudorange"]),
                float(phase) if phase != "" else None,
                float(row["elevation"]),
            ))
            labels[k].append(bool(int(row["outlier_flag"])))
    return Scenario(truth, observations, labels, config)
