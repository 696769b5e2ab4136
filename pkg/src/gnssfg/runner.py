"""Run configurations, metrics and the run/compare drivers behind the CLI."""
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .ekf import FilterState, augment_ambiguities, ekf_predict, ekf_update_factors
from .errors import ConfigError
from .graph import FactorKind, VariableKind, epoch_key
from .kernels import DCS, GNC, L2, Cauchy, GncSchedule, Huber, MaxMixture
from .models import BetweenFactor, PriorFactor, RangeFactor, switch_psi
from .options import SolverOptions
from .robust import gnc_solve, switch_values
from .sim import (
    EstimatorConfig,
    OutlierModel,
    ScenarioConfig,
    Trajectory,
    generate,
    read_scenario,
    to_graph,
)
from .solver import gauss_newton, levenberg_marquardt
from .window import FixedLagSmoother, WindowConfig

log = logging.getLogger(__name__)

ESTIMATORS = ("batch", "fixed_lag", "ekf", "iekf")
REJECT_BELOW = 0.5

# kernel type -> (constructor, allowed parameters)
KERNELS = {
    "l2": (lambda p: L2(), ()),
    "huber": (lambda p: Huber(**p), ("delta",)),
    "cauchy": (lambda p: Cauchy(**p), ("c",)),
    "dcs": (lambda p: DCS(**p), ("phi",)),
    "maxmix": (lambda p: MaxMixture(tuple(tuple(c) for c in p["components"]))
               if "components" in p else MaxMixture(), ("components",)),
    "gnc": (lambda p: GNC(p.get("c", 5.0), GncSchedule(
        mu_update_factor=p.get("mu_update_factor", 1.4), mu_final=p.get("mu_final", 1.0))),
        ("c", "mu_update_factor", "mu_final")),
    "switch": (lambda p: None, ("prior_mean", "prior_sigma")),
}
# kernels whose cost is non-convex start from the least-squares solution
WARM_START = {"cauchy", "dcs", "maxmix", "switch", "gnc"}


@dataclass(frozen=True)
class KernelSpec:
    type: str = "l2"
    params: dict = field(default_factory=dict)

    def build(self):
        return KERNELS[self.type][0](self.params)

    @property
    def label(self):
        if not self.params:
            return self.type
        inner = ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.type}({inner})"


@dataclass(frozen=True)
class EstimatorSpec:
    type: str = "batch"
    lag: int = 5
    iterations: int = 25
    method: str = "lm"

    @property
    def label(self):
        if self.type == "fixed_lag":
            return f"fixed_lag({self.lag})"
        if self.type == "iekf":
            return f"iekf({self.iterations})"
        return self.type


@dataclass(frozen=True)
class RunConfig:
    """One estimator run on one scenario.

    Exactly one of ``scenario`` (generated on the fly) and ``scenario_path``
    (a directory written by ``generate``) is set.
    """

    scenario: Optional[ScenarioConfig] = None
    scenario_path: Optional[str] = None
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    model: dict = field(default_factory=dict)
    output_path: Optional[str] = None
    name: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if (self.scenario is None) == (self.scenario_path is None):
            raise ConfigError("exactly one of 'scenario' and 'scenario_path' must be given")

    @property
    def label(self):
        return self.name or f"{self.estimator.label}/{self.kernel.label}"

    def scenario_source(self):
        if self.scenario_path is not None:
            return ("path", str(Path(self.scenario_path).resolve()), self.seed)
        return ("config", json.dumps(self.resolved_scenario_config().to_dict(), sort_keys=True))

    def resolved_scenario_config(self):
        if self.scenario is None:
            return None
        if self.seed is None:
            return self.scenario
        return dataclasses.replace(self.scenario, rng_seed=int(self.seed))

    def load_scenario(self):
        if self.scenario_path is not None:
            return read_scenario(self.scenario_path)
        return generate(self.resolved_scenario_config())

    def estimator_config(self):
        kwargs = dict(self.model)
        if self.scenario_path is not None and self.seed is not None:
            kwargs.setdefault("init_seed", int(self.seed))
        kernel = self.kernel
        if kernel.type == "switch":
            kwargs.update(switches=True,
                          switch_prior_mean=kernel.params.get("prior_mean", 1.0),
                          switch_prior_sigma=kernel.params.get("prior_sigma", 0.1))
        elif kernel.type != "l2" and self.estimator.type in ("batch", "fixed_lag"):
            kwargs["kernel"] = kernel.build()
        return EstimatorConfig(**kwargs)


@dataclass
class MetricsReport:
    estimator: str
    kernel: str
    n_epochs: int
    per_epoch_position_error: list
    position_rmse: float
    horizontal_rmse: float
    clock_rmse: float
    final_epoch_position_error: float
    outlier_precision: Optional[float]
    outlier_recall: Optional[float]
    outliers_flagged: Optional[int]
    iterations_total: int
    wall_time: float = field(compare=False)

    def to_dict(self):
        return dataclasses.asdict(self)


# -- config parsing -----------------------------------------------------------

def _compose(text, source):
    """YAML document plus a ``path -> line`` map for diagnostics."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = {}

    def walk(n, path):
        lines[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                walk(v, path + (k.value,))
                lines[path + (k.value,)] = k.start_mark.line + 1
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                walk(v, path + (i,))

    if node is not None:
        walk(node, ())
    data = yaml.safe_load(text) if node is not None else {}
    return data if data is not None else {}, lines


class _Ctx:
    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def where(self, path):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p)
        dotted = ".".join(str(x) for x in path) or "<root>"
        return f"{self.source}:{line}: {dotted}" if line else f"{self.source}: {dotted}"

    def fail(self, path, message):
        raise ConfigError(f"{self.where(path)}: {message}")

    def mapping(self, value, path, allowed):
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        for k in value:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return value

    def build(self, path, ctor, **kwargs):
        try:
            return ctor(**kwargs)
        except ConfigError as exc:
            self.fail(path, str(exc))
        except (TypeError, ValueError) as exc:
            self.fail(path, str(exc))


SCENARIO_KEYS = set(ScenarioConfig.__dataclass_fields__)
MODEL_KEYS = set(EstimatorConfig.__dataclass_fields__) - {"kernel", "switches", "switch_prior_mean",
                                                          "switch_prior_sigma"}
SOLVER_KEYS = set(SolverOptions.__dataclass_fields__)
RUN_KEYS = {"name", "scenario", "scenario_path", "estimator", "kernel", "solver", "model", "output", "seed"}


def _parse_scenario(ctx, raw, path):
    raw = ctx.mapping(raw, path, SCENARIO_KEYS)
    raw = dict(raw)
    traj = ctx.mapping(raw.get("trajectory"), path + ("trajectory",), {"kind", "velocity", "waypoints"})
    outl = ctx.mapping(raw.get("outlier"), path + ("outlier",),
                       {"probability", "bias_range", "elevation_dependent"})
    if "trajectory" in raw:
        raw["trajectory"] = ctx.build(path + ("trajectory",), Trajectory, **traj)
    if "outlier" in raw:
        raw["outlier"] = ctx.build(path + ("outlier",), OutlierModel, **outl)
    return ctx.build(path, ScenarioConfig, **raw)


def _parse_run(ctx, raw, path, shared=None, base_dir=None):
    raw = ctx.mapping(raw, path, RUN_KEYS)
    kwargs = {}
    if "scenario" in raw:
        kwargs["scenario"] = _parse_scenario(ctx, raw["scenario"], path + ("scenario",))
    if "scenario_path" in raw:
        p = Path(str(raw["scenario_path"]))
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        kwargs["scenario_path"] = str(p)
    if shared is not None and "scenario" not in kwargs and "scenario_path" not in kwargs:
        for key in ("scenario", "scenario_path"):
            if shared.get(key) is not None:
                kwargs[key] = shared[key]
    est = ctx.mapping(raw.get("estimator"), path + ("estimator",), {"type", "lag", "iterations", "method"})
    if "type" in est and est["type"] not in ESTIMATORS:
        ctx.fail(path + ("estimator", "type"), f"must be one of {', '.join(ESTIMATORS)}")
    if "method" in est and est["method"] not in ("lm", "gn"):
        ctx.fail(path + ("estimator", "method"), "must be 'lm' or 'gn'")
    if int(est.get("lag", 1)) < 1:
        ctx.fail(path + ("estimator", "lag"), "must be >= 1")
    if int(est.get("iterations", 1)) < 1:
        ctx.fail(path + ("estimator", "iterations"), "must be >= 1")
    kwargs["estimator"] = EstimatorSpec(**est)
    kern = raw.get("kernel")
    if kern is not None:
        if isinstance(kern, str):
            kern = {"type": kern}
        if not isinstance(kern, dict):
            ctx.fail(path + ("kernel",), "expected a mapping or a kernel name")
        kern = dict(kern)
        ktype = kern.pop("type", "l2")
        if ktype not in KERNELS:
            ctx.fail(path + ("kernel", "type"), f"must be one of {', '.join(KERNELS)}")
        ctx.mapping(kern, path + ("kernel",), set(KERNELS[ktype][1]))
        spec = KernelSpec(ktype, kern)
        try:
            spec.build()
        except (TypeError, ValueError, ConfigError) as exc:
            ctx.fail(path + ("kernel",), str(exc))
        kwargs["kernel"] = spec
    solver = ctx.mapping(raw.get("solver"), path + ("solver",), SOLVER_KEYS)
    kwargs["solver"] = ctx.build(path + ("solver",), SolverOptions, **solver)
    model = ctx.mapping(raw.get("model"), path + ("model",), MODEL_KEYS)
    ctx.build(path + ("model",), EstimatorConfig, **model)
    kwargs["model"] = dict(model)
    if "output" in raw:
        kwargs["output_path"] = str(raw["output"])
    if "name" in raw:
        kwargs["name"] = str(raw["name"])
    seed = raw.get("seed", shared.get("seed") if shared else None)
    if seed is not None:
        if not isinstance(seed, int):
            ctx.fail(path + ("seed",), "must be an integer")
        kwargs["seed"] = seed
    return ctx.build(path, RunConfig, **kwargs)


def load_config_text(text, source="<config>", base_dir=None):
    """Parse a run or compare document.

    Returns ``(runs, output)``; a document with a ``runs`` list is a
    comparison, anything else a single run.
    """
    data, lines = _compose(text, source)
    ctx = _Ctx(source, lines)
    if not isinstance(data, dict):
        ctx.fail((), "expected a mapping at the top level")
    if "runs" in data:
        top = ctx.mapping(data, (), {"scenario", "scenario_path", "runs", "output", "seed"})
        shared = {"seed": top.get("seed")}
        if "scenario" in top:
            shared["scenario"] = _parse_scenario(ctx, top["scenario"], ("scenario",))
        if "scenario_path" in top:
            p = Path(str(top["scenario_path"]))
            shared["scenario_path"] = str(base_dir / p if base_dir and not p.is_absolute() else p)
        if not isinstance(top["runs"], list):
            ctx.fail(("runs",), "expected a list")
        runs = [_parse_run(ctx, r, ("runs", i), shared, base_dir) for i, r in enumerate(top["runs"])]
        return runs, top.get("output")
    run = _parse_run(ctx, data, (), None, base_dir)
    return [run], run.output_path


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return load_config_text(text, str(p), p.parent)


# -- estimation -----------------------------------------------------------------

def _epoch_groups(graph, init):
    """Variables and factors keyed by the epoch at which they become available."""
    variables, factors = {}, {}
    for k, v in init.items():
        variables.setdefault(k.epoch, {})[k] = v
    for f in graph.factors:
        factors.setdefault(max(k.epoch for k in f.variables), []).append(f)
    return variables, factors


def _solver(config, kernel_type):
    opts = config.solver
    if kernel_type == "gnc":
        return lambda g, x: gnc_solve(g, x)[0]
    if config.estimator.method == "gn":
        return lambda g, x: gauss_newton(g, x, opts)
    return lambda g, x: levenberg_marquardt(g, x, opts)


def _batch(config, scenario, est):
    graph, init = to_graph(scenario, est)
    iterations = 0
    ktype = config.kernel.type
    if ktype in WARM_START:
        l2_graph, _ = to_graph(scenario, dataclasses.replace(est, kernel=None, switches=False))
        warm = _solver(config, "l2")(l2_graph, {k: v for k, v in init.items() if k in l2_graph.variables})
        iterations += warm.iterations
        init = dict(init)
        init.update(warm.estimate)
    report = _solver(config, ktype)(graph, init)
    return report.estimate, report.weights or {}, graph, iterations + report.iterations


def _l2_first(config, solve):
    """Each window solve starts from the least-squares fit of the same window."""
    l2 = L2()

    def wrapped(g, x):
        plain = {f.id: l2 for f in g.factors if f.kernel is not None and not isinstance(f.kernel, L2)}
        iterations = 0
        if plain:
            warm = levenberg_marquardt(g, x, config.solver, kernels=plain)
            x, iterations = warm.estimate, warm.iterations
        report = solve(g, x)
        report.iterations += iterations
        return report
    return wrapped


def _fixed_lag(config, scenario, est):
    graph, init = to_graph(scenario, est)
    variables, factors = _epoch_groups(graph, init)
    # the window numbers factors itself (marginal priors take fresh ids)
    for f in graph.factors:
        f.id = -1
    solve = _solver(config, config.kernel.type)
    if config.kernel.type in WARM_START:
        solve = _l2_first(config, solve)
    smoother = FixedLagSmoother(WindowConfig(config.estimator.lag), solve)
    weights = {}
    for k in range(scenario.n_epochs):
        report = smoother.slide(k, variables.get(k, {}), factors.get(k, []))
        weights.update(report.weights or {})
    iterations = sum(r.iterations for r in smoother.reports)
    return smoother.smoothed(), weights, graph, iterations


def _filter(config, scenario, est):
    if config.kernel.type != "l2":
        log.warning("kernel %r is ignored by the %s estimator", config.kernel.type, config.estimator.type)
    est = dataclasses.replace(est, kernel=None, switches=False)
    graph, init = to_graph(scenario, est)
    variables, factors = _epoch_groups(graph, init)
    n_iter = 1 if config.estimator.type == "ekf" else config.estimator.iterations
    step_tol = config.solver.step_tol
    estimate = {}
    state = None
    iterations = 0
    for k in range(scenario.n_epochs):
        key = epoch_key(k)
        meas = [f for f in factors.get(k, []) if isinstance(f, RangeFactor)]
        for f in factors.get(k, []):
            if isinstance(f, PriorFactor):
                info = f.sqrt_information.T @ f.sqrt_information
                state = FilterState(f.mean.copy(), np.linalg.inv(info))
            elif isinstance(f, BetweenFactor):
                state = ekf_predict(state, f.model)
        amb = variables[k][key].ambiguities
        state = augment_ambiguities(state, list(amb.items()))
        state = ekf_update_factors(state, meas, n_iter, step_tol)
        iterations += state.iterations
        estimate[key] = state.mean.copy()
    return estimate, {}, graph, iterations


def _detections(config, graph, estimate, weights):
    """Per range factor ``(epoch, sat_id, rejected)`` or None if the run gives no weights."""
    ktype = config.kernel.type
    if config.estimator.type in ("ekf", "iekf") or ktype == "l2":
        return None
    out = []
    for f in graph.factors:
        if not isinstance(f, RangeFactor) or f.kind is not FactorKind.PSEUDORANGE:
            continue
        if f.switch_key is not None:
            w = switch_psi(float(estimate[f.switch_key]))[0] if f.switch_key in estimate else 1.0
        else:
            w = weights.get(f.id, 1.0)
        out.append((f.variables[0].epoch, f.sat_id, w < REJECT_BELOW))
    return out


def _precision_recall(scenario, detections):
    if detections is None:
        return None, None, None
    labels = {(k, o.sat_id): lab for k, (obs, labs) in
              enumerate(zip(scenario.observations, scenario.outlier_labels))
              for o, lab in zip(obs, labs)}
    tp = sum(1 for k, s, rej in detections if rej and labels[(k, s)])
    fp = sum(1 for k, s, rej in detections if rej and not labels[(k, s)])
    fn = sum(1 for k, s, rej in detections if not rej and labels[(k, s)])
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall, tp + fp


def evaluate(scenario, estimate):
    """Position, horizontal (east/north) and clock errors per epoch."""
    pos, hor, clk = [], [], []
    for k, truth in enumerate(scenario.truth):
        s = estimate[epoch_key(k)]
        d = s.position - truth.position
        pos.append(float(np.linalg.norm(d)))
        hor.append(float(d[0] ** 2 + d[1] ** 2))
        clk.append(float(s.clock_bias - truth.clock_bias))
    rms = lambda v: float(math.sqrt(np.mean(np.square(v))))  # noqa: E731
    return {
        "per_epoch_position_error": pos,
        "position_rmse": rms(pos),
        "horizontal_rmse": float(math.sqrt(np.mean(hor))),
        "clock_rmse": rms(clk),
        "final_epoch_position_error": pos[-1],
    }


def estimate_scenario(config, scenario):
    """Run the configured estimator; returns ``(estimate, weights, graph, iterations)``."""
    est = config.estimator_config()
    kind = config.estimator.type
    if kind == "batch":
        return _batch(config, scenario, est)
    if kind == "fixed_lag":
        return _fixed_lag(config, scenario, est)
    return _filter(config, scenario, est)


def run(config, scenario=None, write=True):
    """Run one configuration and return its :class:`MetricsReport`.

    With ``write`` and an ``output_path`` the report goes to
    ``metrics.json`` and the per-epoch estimates to ``estimates.csv``.
    """
    scenario = scenario if scenario is not None else config.load_scenario()
    t0 = time.perf_counter()
    estimate, weights, graph, iterations = estimate_scenario(config, scenario)
    wall = time.perf_counter() - t0
    errors = evaluate(scenario, estimate)
    precision, recall, flagged = _precision_recall(
        scenario, _detections(config, graph, estimate, weights))
    report = MetricsReport(
        estimator=config.estimator.label,
        kernel=config.kernel.label if config.estimator.type in ("batch", "fixed_lag") else "l2",
        n_epochs=scenario.n_epochs,
        outlier_precision=precision,
        outlier_recall=recall,
        outliers_flagged=flagged,
        iterations_total=int(iterations),
        wall_time=wall,
        **errors,
    )
    if write and config.output_path:
        write_run(config.output_path, report, scenario, estimate, switch_values(estimate))
    return report


def _f(x):
    return format(float(x), ".17g")


def write_run(directory, report, scenario, estimate, switches=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(d / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "x", "y", "z", "clock", "tropo", "position_error"])
        for k in range(scenario.n_epochs):
            s = estimate[epoch_key(k)]
            w.writerow([k, *(_f(c) for c in s.position), _f(s.clock_bias), _f(s.zenith_tropo),
                        _f(report.per_epoch_position_error[k])])
    if switches:
        with open(d / "switches.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "tag", "value"])
            for key in sorted(switches, key=lambda k: k.sort_key):
                w.writerow([key.epoch, key.tag, _f(switches[key])])
    return d


COMPARE_FIELDS = ["name", "estimator", "kernel", "position_rmse", "horizontal_rmse", "clock_rmse",
                  "final_epoch_position_error", "outlier_precision", "outlier_recall",
                  "iterations_total", "wall_time"]


def compare(configs):
    """Run every configuration on one shared scenario; returns table rows (dicts)."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two run configurations")
    sources = {c.scenario_source() for c in configs}
    if len(sources) != 1:
        raise ConfigError("compared runs reference different scenarios")
    scenario = configs[0].load_scenario()
    rows = []
    for c in configs:
        rep = run(c, scenario, write=False)
        row = {"name": c.label}
        row.update({k: getattr(rep, k) for k in COMPARE_FIELDS[1:]})
        rows.append(row)
    return rows


def format_table(rows):
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return format(v, ".17g")
        return str(v)
    lines = [",".join(COMPARE_FIELDS)]
    lines += [",".join(cell(r[k]) for k in COMPARE_FIELDS) for r in rows]
    return "\n".join(lines) + "\n"


def switch_fraction_below(estimate, threshold=REJECT_BELOW):
    vals = [v for k, v in estimate.items() if k.kind is VariableKind.SWITCH]
    if not vals:
        return 0.0
    return sum(v < threshold for v in vals) / len(vals)
