"""Robust kernels.

A kernel maps the whitened squared residual ``chi2 = ||r||^2`` of one factor to
its contribution to the total cost and to the scalar IRLS weight
``d cost / d chi2``.  With that convention the plain least-squares kernel
contributes ``chi2`` with weight 1, and a kernel built from a loss ``rho`` on
the residual norm contributes ``2 * rho(sqrt(chi2))``.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import KernelMisuse
from .options import SolverOptions


def huber_rho(z, delta):
    """Huber loss: quadratic inside ``|z| <= delta``, linear outside."""
    if not delta > 0:
        raise ValueError("delta must be > 0")
    a = np.abs(z)
    out = np.where(a <= delta, 0.5 * a * a, delta * a - 0.5 * delta * delta)
    return out if np.ndim(out) else float(out)


_BELOW_ONE = float(np.nextafter(1.0, 0.0))


def dcs_scale(residual_sq, phi):
    """Dynamic covariance scaling factor ``min(1, 2 phi / (phi + chi2))``."""
    if not phi > 0:
        raise ValueError("phi must be > 0")
    chi2 = np.asarray(residual_sq, dtype=float)
    # just above phi the ratio rounds to 1.0; keep s < 1 there so s == 1 iff chi2 <= phi
    scaled = np.minimum(2.0 * phi / (phi + chi2), _BELOW_ONE)
    out = np.where(chi2 <= phi, 1.0, scaled)
    return out if np.ndim(out) else float(out)


def gnc_weight(residual_sq, mu, c):
    """Closed-form optimal weight of the Geman-McClure dual problem at control ``mu``."""
    if not mu > 0 or not c > 0:
        raise ValueError("mu and c must be > 0")
    mc2 = mu * c * c
    out = (mc2 / (np.asarray(residual_sq, dtype=float) + mc2)) ** 2
    return out if np.ndim(out) else float(out)


def geman_mcclure_cost(residual_sq, mu, c):
    mc2 = mu * c * c
    chi2 = np.asarray(residual_sq, dtype=float)
    out = mc2 * chi2 / (mc2 + chi2)
    return out if np.ndim(out) else float(out)


def _component_costs(chi2, dim, components):
    w = np.array([c[0] for c in components], dtype=float)
    v = np.array([c[1] for c in components], dtype=float)
    normalizer = dim * np.log(v) - 2.0 * np.log(w)
    return (normalizer - normalizer.min()) + chi2 / v


def maxmix_evaluate(whitened_r, components):
    """Pick the mixture component of highest weighted density.

    ``components`` is a sequence of ``(weight, variance_scale)`` pairs; the
    variance scale multiplies the factor's own (already whitened) covariance.
    Returns ``(index, cost)`` where cost is ``-2 log`` of the selected weighted
    density, with the shared constant removed and shifted so it is never
    negative.
    """
    if len(components) == 0:
        raise KernelMisuse("max-mixture needs at least one component")
    r = np.atleast_1d(np.asarray(whitened_r, dtype=float))
    costs = _component_costs(float(r @ r), r.size, components)
    k = int(np.argmin(costs))
    return k, float(costs[k])


class RobustKernel:
    """Base class.  Subclasses implement :meth:`cost` and :meth:`weight`."""

    name = "kernel"

    def cost(self, chi2, dim=1):
        raise NotImplementedError

    def weight(self, chi2, dim=1):
        raise NotImplementedError


@dataclass(frozen=True)
class L2(RobustKernel):
    name = "l2"

    def cost(self, chi2, dim=1):
        return float(chi2)

    def weight(self, chi2, dim=1):
        return 1.0


@dataclass(frozen=True)
class Huber(RobustKernel):
    delta: float = 1.345
    name = "huber"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be > 0")

    def cost(self, chi2, dim=1):
        return 2.0 * huber_rho(np.sqrt(chi2), self.delta)

    def weight(self, chi2, dim=1):
        z = np.sqrt(chi2)
        return 1.0 if z <= self.delta else self.delta / z


@dataclass(frozen=True)
class Cauchy(RobustKernel):
    c: float = 2.3849
    name = "cauchy"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Cauchy c must be > 0")

    def cost(self, chi2, dim=1):
        c2 = self.c * self.c
        return float(c2 * np.log1p(chi2 / c2))

    def weight(self, chi2, dim=1):
        return 1.0 / (1.0 + chi2 / (self.c * self.c))


@dataclass(frozen=True)
class SwitchLinked(RobustKernel):
    """Marks a factor whose residual is scaled by a switch variable.

    The down-weighting lives in the factor itself, so as far as the solver is
    concerned the kernel is plain least squares.
    """

    switch_key: object = None
    name = "switch"

    def cost(self, chi2, dim=1):
        return float(chi2)

    def weight(self, chi2, dim=1):
        return 1.0


@dataclass(frozen=True)
class DCS(RobustKernel):
    phi: float = 9.0
    name = "dcs"

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("DCS phi must be > 0")

    def cost(self, chi2, dim=1):
        # integral of the s^2 weight, so IRLS with s^2 is a descent method on it
        if chi2 <= self.phi:
            return float(chi2)
        return float(self.phi * (3.0 * chi2 - self.phi) / (self.phi + chi2))

    def weight(self, chi2, dim=1):
        return dcs_scale(chi2, self.phi) ** 2


@dataclass(frozen=True)
class MaxMixture(RobustKernel):
    components: tuple = ((0.9, 1.0), (0.1, 1.0e4))
    name = "maxmix"

    def __post_init__(self):
        comps = tuple((float(w), float(v)) for w, v in self.components)
        if not comps:
            raise KernelMisuse("max-mixture needs at least one component")
        if any(w <= 0 or v <= 0 for w, v in comps):
            raise ValueError("max-mixture weights and variances must be > 0")
        object.__setattr__(self, "components", comps)

    def select(self, chi2, dim=1):
        costs = _component_costs(chi2, dim, self.components)
        return int(np.argmin(costs))

    def cost(self, chi2, dim=1):
        return float(np.min(_component_costs(chi2, dim, self.components)))

    def weight(self, chi2, dim=1):
        return 1.0 / self.components[self.select(chi2, dim)][1]


@dataclass(frozen=True)
class GncSchedule:
    """Annealing schedule for the GNC control parameter.

    ``mu_initial=None`` picks ``2 * max(chi2) / c^2`` from the residuals of the
    first least-squares solve.
    """

    mu_initial: Optional[float] = None
    mu_update_factor: float = 1.4
    mu_final: float = 1.0
    inner_solver: SolverOptions = field(default_factory=SolverOptions)
    max_final_iterations: int = 10

    def __post_init__(self):
        if not self.mu_update_factor > 1:
            raise ValueError("mu_update_factor must be > 1")
        if not self.mu_final > 0:
            raise ValueError("mu_final must be > 0")
        if self.mu_initial is not None and self.mu_initial < self.mu_final:
            raise ValueError("mu_initial must not be below mu_final")


@dataclass(frozen=True)
class GNC(RobustKernel):
    """Geman-McClure loss solved by graduated non-convexity.

    Outside :func:`gnc_solve` it behaves as Geman-McClure at ``mu_final``.
    """

    c: float = 5.0
    schedule: GncSchedule = field(default_factory=GncSchedule)
    name = "gnc"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("GNC c must be > 0")

    def cost(self, chi2, dim=1):
        return geman_mcclure_cost(chi2, self.schedule.mu_final, self.c)

    def weight(self, chi2, dim=1):
        return gnc_weight(chi2, self.schedule.mu_final, self.c)


def kernel_weight(kernel, z):
    """IRLS weight ``rho'(z) / z`` for whitened residual norm ``z``."""
    if isinstance(kernel, SwitchLinked):
        raise KernelMisuse("switch-linked factors are down-weighted by their switch variable")
    if not np.isfinite(z):
        raise ValueError("residual must be finite")
    return float(kernel.weight(float(z) ** 2))
