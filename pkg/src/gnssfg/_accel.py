"""Hot numeric kernels.

Every kernel has two implementations: an explicit-loop version compiled with
``numba.njit`` and a vectorized pure-numpy version.  The public names at the
bottom of this module point at one or the other.  Set ``GNSSFG_DISABLE_NUMBA=1``
before import (or run without numba installed) to force the numpy path.

Band matrices use LAPACK lower storage: ``ab[d, j] == A[j + d, j]``.
"""
import math
import os
from functools import lru_cache

import numpy as np

_DISABLED = os.environ.get("GNSSFG_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True
    _njit = numba.njit(cache=True, nogil=True)
except ImportError:
    HAVE_NUMBA = False

    def _njit(fn):
        return fn


# relative pivot threshold below which a column is treated as rank deficient
PIVOT_RTOL = 1e-12


# ---------------------------------------------------------------------------
# band Cholesky
# ---------------------------------------------------------------------------

def _band_cholesky_loops(ab, rtol):
    bw = ab.shape[0] - 1
    n = ab.shape[1]
    lb = ab.copy()
    for j in range(n):
        s = lb[0, j]
        for k in range(max(0, j - bw), j):
            v = lb[j - k, k]
            s -= v * v
        if not (s > rtol * abs(ab[0, j])) or not (s > 0.0):
            return lb, j
        d = math.sqrt(s)
        lb[0, j] = d
        for i in range(j + 1, min(n, j + bw + 1)):
            t = lb[i - j, j]
            for k in range(max(0, i - bw), j):
                t -= lb[i - k, k] * lb[j - k, k]
            lb[i - j, j] = t / d
    return lb, -1


def _band_solve_loops(lb, rhs):
    bw = lb.shape[0] - 1
    n = lb.shape[1]
    y = rhs.copy()
    for i in range(n):
        t = y[i]
        for k in range(max(0, i - bw), i):
            t -= lb[i - k, k] * y[k]
        y[i] = t / lb[0, i]
    for i in range(n - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, min(n, i + bw + 1)):
            t -= lb[k - i, i] * y[k]
        y[i] = t / lb[0, i]
    return y


@lru_cache(maxsize=64)
def _tril_pairs(m):
    p, q = np.tril_indices(m)
    return p, q, p - q


def _band_cholesky_numpy(ab, rtol):
    bw = ab.shape[0] - 1
    n = ab.shape[1]
    lb = np.array(ab, dtype=np.float64, copy=True)
    for j in range(n):
        s = lb[0, j]
        if not (s > rtol * abs(ab[0, j])) or not (s > 0.0):
            return lb, j
        d = math.sqrt(s)
        lb[0, j] = d
        m = min(bw, n - 1 - j)
        if m == 0:
            continue
        col = lb[1:m + 1, j] / d
        lb[1:m + 1, j] = col
        # right-looking update of the trailing (m x m) lower triangle
        p, q, diff = _tril_pairs(m)
        lb[diff, j + 1 + q] -= col[p] * col[q]
    return lb, -1


def _band_solve_numpy(lb, rhs):
    bw = lb.shape[0] - 1
    n = lb.shape[1]
    y = np.array(rhs, dtype=np.float64, copy=True)
    offsets = np.arange(1, bw + 1)
    for i in range(n):
        m = min(bw, i)
        if m:
            k = i - offsets[:m]
            y[i] -= lb[offsets[:m], k] @ y[k]
        y[i] /= lb[0, i]
    for i in range(n - 1, -1, -1):
        m = min(bw, n - 1 - i)
        if m:
            y[i] -= lb[1:m + 1, i] @ y[i + 1:i + m + 1]
        y[i] /= lb[0, i]
    return y


# ---------------------------------------------------------------------------
# compensated range residual
# ---------------------------------------------------------------------------
# Ranges are ~2e7 m, so a plain ``meas - norm(sat - rx)`` carries ~2e-9 m of
# rounding; that is enough to stall convergence tests near the optimum.  The
# helpers below are error-free transformations (Knuth two-sum, Dekker split
# product) in plain arithmetic, so the same code runs on scalars under numba
# and on arrays under numpy.

_SPLIT = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _two_prod(a, b):
    p = a * b
    t = _SPLIT * a
    ah = t - (t - a)
    al = a - ah
    t = _SPLIT * b
    bh = t - (t - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _range_gap_py(meas, sx, sy, sz, rx, ry, rz):
    """``meas - |s - r|`` to near full precision; returns ``(gap, dx, dy, dz, rho)``."""
    dx, ex = _two_sum(sx, -rx)
    dy, ey = _two_sum(sy, -ry)
    dz, ez = _two_sum(sz, -rz)
    qh, ql = _two_prod(dx, dx)
    p, pe = _two_prod(dy, dy)
    qh, e = _two_sum(qh, p)
    ql = ql + e + pe
    p, pe = _two_prod(dz, dz)
    qh, e = _two_sum(qh, p)
    ql = ql + e + pe
    ql = ql + 2.0 * (dx * ex + dy * ey + dz * ez)
    r0 = np.sqrt(qh)
    sh, sl = _two_prod(r0, r0)
    # r0 == 0 gives rho == 0, which callers report as degenerate geometry
    corr = ((qh - sh) - sl + ql) / (2.0 * r0 + (r0 == 0.0))
    return (meas - r0) - corr, dx, dy, dz, r0 + corr


def range_gap(meas, sat, rx):
    """Scalar convenience wrapper: ``meas - |sat - rx|`` and ``|sat - rx|``."""
    gap, _, _, _, rho = _range_gap_py(float(meas), float(sat[0]), float(sat[1]), float(sat[2]),
                                      float(rx[0]), float(rx[1]), float(rx[2]))
    return float(gap), float(rho)


if HAVE_NUMBA:
    _two_sum = _njit(_two_sum)
    _two_prod = _njit(_two_prod)
    _range_gap = _njit(_range_gap_py)
else:  # pragma: no cover - exercised only without numba
    _range_gap = _range_gap_py


# ---------------------------------------------------------------------------
# batched range-measurement linearization
# ---------------------------------------------------------------------------

def _range_rows_loops(rx, sat, offset, meas, inv_sigma, psi, dpsi):
    """Whitened residuals and Jacobian rows for range-type measurements.

    ``offset`` collects the additive state terms (clock, tropo slant, ambiguity).
    Returns ``(res, jpos, jscale, jswitch, bad)``: ``jscale`` is the clock and
    ambiguity partial; the tropo partial is ``jscale * mapping``.
    ``bad`` is the first zero-range index or -1.
    """
    n = meas.shape[0]
    res = np.empty(n)
    jpos = np.empty((n, 3))
    jscale = np.empty(n)
    jsw = np.empty(n)
    bad = -1
    for i in range(n):
        gap, dx, dy, dz, rho = _range_gap(meas[i], sat[i, 0], sat[i, 1], sat[i, 2],
                                          rx[i, 0], rx[i, 1], rx[i, 2])
        if rho == 0.0:
            if bad < 0:
                bad = i
            rho = 1.0
        e = (gap - offset[i]) * inv_sigma[i]
        g = psi[i] * inv_sigma[i] / rho
        res[i] = psi[i] * e
        jpos[i, 0] = g * dx
        jpos[i, 1] = g * dy
        jpos[i, 2] = g * dz
        jscale[i] = -psi[i] * inv_sigma[i]
        jsw[i] = dpsi[i] * e
    return res, jpos, jscale, jsw, bad


def _range_rows_numpy(rx, sat, offset, meas, inv_sigma, psi, dpsi):
    gap, dx, dy, dz, rho = _range_gap_py(meas, sat[:, 0], sat[:, 1], sat[:, 2], rx[:, 0], rx[:, 1], rx[:, 2])
    zero = rho == 0.0
    bad = int(np.argmax(zero)) if zero.any() else -1
    rho = np.where(zero, 1.0, rho)
    e = (gap - offset) * inv_sigma
    res = psi * e
    jpos = np.column_stack([dx, dy, dz]) * (psi * inv_sigma / rho)[:, None]
    jscale = -psi * inv_sigma
    return res, jpos, jscale, dpsi * e, bad


if HAVE_NUMBA:
    _band_cholesky_jit = _njit(_band_cholesky_loops)
    _band_solve_jit = _njit(_band_solve_loops)
    _range_rows_jit = _njit(_range_rows_loops)
else:  # pragma: no cover - exercised only without numba
    _band_cholesky_jit = _band_cholesky_loops
    _band_solve_jit = _band_solve_loops
    _range_rows_jit = _range_rows_loops


def band_cholesky(ab, rtol=PIVOT_RTOL):
    """Factor an SPD band matrix; returns ``(lb, failed_column)`` (-1 on success)."""
    ab = np.ascontiguousarray(ab, dtype=np.float64)
    if HAVE_NUMBA:
        return _band_cholesky_jit(ab, rtol)
    return _band_cholesky_numpy(ab, rtol)


def band_solve(lb, rhs):
    lb = np.ascontiguousarray(lb, dtype=np.float64)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    if HAVE_NUMBA:
        return _band_solve_jit(lb, rhs)
    return _band_solve_numpy(lb, rhs)


def range_rows(rx, sat, offset, meas, inv_sigma, psi, dpsi):
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (rx, sat, offset, meas, inv_sigma, psi, dpsi)]
    if HAVE_NUMBA:
        return _range_rows_jit(*args)
    return _range_rows_numpy(*args)


# exposed so tests and benchmarks can pit the two paths against each other
IMPLEMENTATIONS = {
    "numba": {
        "band_cholesky": _band_cholesky_jit,
        "band_solve": _band_solve_jit,
        "range_rows": _range_rows_jit,
    },
    "numpy": {
        "band_cholesky": _band_cholesky_numpy,
        "band_solve": _band_solve_numpy,
        "range_rows": _range_rows_numpy,
    },
}
