"""Radial grid, slices of the discrete state, densities, energies and constraints.

State variables on a slice are v = u / r^k and p = Pi / r^k, where
Pi = e^{gamma - Omega} u_t.  Both are even in r and therefore regular on
the axis.  The metric functions gamma and Omega are determined on each
slice from (v, p) by an outward sweep of the radial Einstein equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from .errors import DeficitAngleExceeded, NonFiniteState
from .target import TargetManifold, eval_target

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class RadialGrid:
    n_points: int
    r_max: float

    def __post_init__(self):
        if self.n_points < 33:
            raise ValueError("RadialGrid needs at least 33 points")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    @classmethod
    def from_cells(cls, n: int, r_max: float) -> "RadialGrid":
        return cls(int(n) + 1, float(r_max))

    @property
    def dr(self) -> float:
        return self.r_max / (self.n_points - 1)

    @property
    def r(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dr


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Slice:
    """One time level.  ``v`` and ``p`` are the regularized variables."""

    t: float
    r: np.ndarray
    v: np.ndarray
    p: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    alpha: float = 1.0
    k: int = 1

    def __post_init__(self):
        for name in ("r", "v", "p", "gamma", "omega"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.r.size
        if any(getattr(self, nm).size != n for nm in ("v", "p", "gamma", "omega")):
            raise ValueError("slice arrays must share the grid size")

    @property
    def dr(self) -> float:
        return float(self.r[1] - self.r[0])

    @property
    def rk(self) -> np.ndarray:
        return self.r**self.k

    @property
    def u(self) -> np.ndarray:
        return self.rk * self.v

    @property
    def pi(self) -> np.ndarray:
        """Densitized momentum Pi = e^{gamma - Omega} u_t."""
        return self.rk * self.p

    @property
    def v_r(self) -> np.ndarray:
        return radial_derivative(self.v, self.dr, parity=1)

    @property
    def u_r(self) -> np.ndarray:
        if self.k == 0:
            return self.v_r
        return self.v + self.r * self.v_r

    @property
    def u_t(self) -> np.ndarray:
        return np.exp(self.omega - self.gamma) * self.pi

    @property
    def lapse_ratio(self) -> np.ndarray:
        """a = e^{Omega - gamma}, the coordinate speed of radial light rays."""
        return np.exp(self.omega - self.gamma)

    def with_fields(self, **kw) -> "Slice":
        return replace(self, **kw)


def make_slice(grid: RadialGrid, v, pi=None, p=None, t=0.0, alpha=1.0, k=1,
               gamma=None, omega=None) -> Slice:
    """Build a slice from v and either Pi (``pi``) or the regularized ``p``.

    When Pi is given and k = 1, p = Pi / r off the axis and its axis value
    is obtained by even quadratic extrapolation.
    """
    r = grid.r
    v = np.asarray(v, dtype=float) * np.ones_like(r)
    if p is None:
        pi = np.zeros_like(r) if pi is None else np.asarray(pi, dtype=float) * np.ones_like(r)
        if k == 0:
            p = pi.copy()
        else:
            p = np.empty_like(r)
            p[1:] = pi[1:] / r[1:] ** k
            p[0] = (4.0 * p[1] - p[2]) / 3.0
    zeros = np.zeros_like(r)
    return Slice(t, r, v, np.asarray(p, dtype=float) * np.ones_like(r),
                 zeros if gamma is None else gamma, zeros if omega is None else omega,
                 float(alpha), int(k))


def radial_derivative(x, dr, parity=1):
    """Second-order d/dr on a uniform grid starting at the axis.

    ``parity`` = +1 for even functions (derivative zero on the axis), -1 for
    odd ones (ghost value -x[1]); the outer end uses a one-sided stencil.
    """
    x = np.asarray(x, dtype=float)
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dr)
    d[0] = 0.0 if parity > 0 else x[1] / dr
    d[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) / (2.0 * dr)
    return d


def radial_second_derivative(x, dr, parity=1):
    x = np.asarray(x, dtype=float)
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - 2.0 * x[1:-1] + x[:-2]) / dr**2
    d[0] = 2.0 * (x[1] - x[0]) / dr**2 if parity > 0 else 0.0
    d[-1] = (2.0 * x[-1] - 5.0 * x[-2] + 4.0 * x[-3] - x[-4]) / dr**2
    return d


# ---------------------------------------------------------------------------
# densities and energy


@dataclass(frozen=True, eq=False)
class Densities:
    e: np.ndarray
    m: np.ndarray
    e0: np.ndarray
    fpot: np.ndarray


def potential_density(r, v, target: TargetManifold, k: int):
    """fpot = k^2 f(u)^2 / r^2 with u = r^k v; axis limit k^2 v(0)^2."""
    if k == 0:
        return np.zeros_like(np.asarray(r, dtype=float))
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    u = r**k * v
    f = target.f(u)
    ratio = np.where(r > 0, f / np.where(r > 0, r, 1.0), v)
    return k * k * ratio**2


def densities_from_fields(pi, u_r, gamma, fpot) -> Densities:
    """Pointwise densities from Pi, u_r, gamma and the potential density."""
    w2 = np.exp(-2.0 * np.asarray(gamma, dtype=float))
    e0 = w2 * (pi**2 + u_r**2)
    e = 0.5 * (e0 + fpot)
    m = w2 * pi * u_r
    return Densities(e, m, e0, np.asarray(fpot, dtype=float))


def compute_densities(s: Slice, target: TargetManifold) -> Densities:
    fpot = potential_density(s.r, s.v, target, s.k)
    d = densities_from_fields(s.pi, s.u_r, s.gamma, fpot)
    bad = ~np.isfinite(d.e) | ~np.isfinite(d.m)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteState(f"non-finite density at index {i} (r={s.r[i]:.6g})", index=i)
    return d


def cumulative_trapezoid(y, dx):
    out = np.zeros_like(y, dtype=float)
    out[1:] = np.cumsum(0.5 * dx * (y[1:] + y[:-1]))
    return out


@dataclass(frozen=True, eq=False)
class EnergyLedger:
    t: float
    E_total: float
    E_ball: np.ndarray
    E_cone: Optional[float] = None


def end_corrected_cumulative_trapezoid(y, dx):
    """Cumulative trapezoid with the leading Euler-Maclaurin end correction.

    int_0^{x_i} y = T_i - dx^2/12 (y'(x_i) - y'(0)) + O(dx^4), with y'
    from second-order differences (one-sided at both ends).
    """
    T = cumulative_trapezoid(y, dx)
    dy = np.empty_like(T)
    dy[1:-1] = (y[2:] - y[:-2]) / (2.0 * dx)
    dy[0] = (-3.0 * y[0] + 4.0 * y[1] - y[2]) / (2.0 * dx)
    dy[-1] = (3.0 * y[-1] - 4.0 * y[-2] + y[-3]) / (2.0 * dx)
    return T - dx * dx / 12.0 * (dy - dy[0])


def energy(s: Slice, d: Densities, end_correction: bool = True) -> EnergyLedger:
    """E(t, r) = 2 pi int_0^r e r' e^gamma dr'.

    Composite trapezoid, by default with the dx^2 end correction so the
    ledger is fourth-order accurate (plain trapezoid with
    ``end_correction=False``).
    """
    integrand = d.e * s.r * np.exp(s.gamma)
    quad = end_corrected_cumulative_trapezoid if end_correction else cumulative_trapezoid
    E = TWO_PI * quad(integrand, s.dr)
    # the integrand is nonnegative; the end correction can dip by O(dr^4)
    # where the data vanish, and the running max removes exactly that
    E = np.maximum.accumulate(E)
    return EnergyLedger(s.t, float(E[-1]), E)


def slice_energy(s: Slice, target: TargetManifold) -> EnergyLedger:
    return energy(s, compute_densities(s, target))


# ---------------------------------------------------------------------------
# constraints


def _midpoint_values(x):
    """Cubic interpolation of an even grid function to r_{i+1/2}, i = 0..n-2."""
    n = x.size
    ext = np.concatenate(([x[1]], x, [0.0]))  # even reflection at the axis
    # extrapolate one ghost at the outer end with a cubic through the last 4 points
    ext[-1] = 4.0 * x[-1] - 6.0 * x[-2] + 4.0 * x[-3] - x[-4]
    a, b, c, d = ext[0:n - 1], ext[1:n], ext[2:n + 1], ext[3:n + 2]
    return (-a + 9.0 * b + 9.0 * c - d) / 16.0


def solve_constraints(s: Slice, target: TargetManifold) -> Slice:
    """Fill gamma and Omega on a slice by an outward RK4 sweep from the axis.

    y = e^{-2 gamma} obeys the linear equation
        y' = -alpha r S y - alpha r fpot,     S = Pi^2 + u_r^2,
    and then (Omega - gamma)' = -alpha r fpot / y.  Raises
    DeficitAngleExceeded if y reaches zero.
    """
    r = s.r
    h = s.dr
    alpha = s.alpha
    if alpha == 0.0:
        z = np.zeros_like(r)
        return s.with_fields(gamma=z, omega=z)
    S = s.pi**2 + s.u_r**2
    F = potential_density(r, s.v, target, s.k)
    # cubic interpolation can undershoot near the edge of the support
    Sm = np.maximum(_midpoint_values(S), 0.0)
    Fm = np.maximum(_midpoint_values(F), 0.0)
    r0, rm, r1 = r[:-1], r[:-1] + 0.5 * h, r[1:]
    A0, Am, A1 = -alpha * r0 * S[:-1], -alpha * rm * Sm, -alpha * r1 * S[1:]
    B0, Bm, B1 = -alpha * r0 * F[:-1], -alpha * rm * Fm, -alpha * r1 * F[1:]
    # each stage increment is a_s * y + b_s
    a1, b1 = h * A0, h * B0
    a2, b2 = h * Am * (1 + 0.5 * a1), h * (0.5 * Am * b1 + Bm)
    a3, b3 = h * Am * (1 + 0.5 * a2), h * (0.5 * Am * b2 + Bm)
    a4, b4 = h * A1 * (1 + a3), h * (A1 * b3 + B1)
    M = 1.0 + (a1 + 2 * a2 + 2 * a3 + a4) / 6.0
    N = (b1 + 2 * b2 + 2 * b3 + b4) / 6.0

    y = _linear_recurrence(M, N, 1.0)
    yi = y[:-1]
    k1 = a1 * yi + b1
    k2 = a2 * yi + b2
    k3 = a3 * yi + b3
    ys = (yi, yi + 0.5 * k1, yi + 0.5 * k2, yi + k3)
    ymin = min(float(np.min(y)), *(float(np.min(q)) for q in ys))
    if not ymin > 0.0 or not np.all(np.isfinite(y)):
        bad = np.flatnonzero(~(y > 0))
        i = int(bad[0]) if bad.size else int(np.argmin(y))
        raise DeficitAngleExceeded(
            f"e^(-gamma) vanished near r={r[i]:.6g}: alpha*E/(2 pi) reached 1",
            index=i, r=float(r[i]))
    # Omega - gamma has the nonpositive derivative -alpha r fpot / y; sweeping
    # it directly keeps a = e^{Omega - gamma} <= 1 to rounding.
    g1 = r0 * F[:-1] / ys[0]
    g2 = rm * Fm / ys[1]
    g3 = rm * Fm / ys[2]
    g4 = r1 * F[1:] / ys[3]
    lapse_log = np.zeros_like(r)
    lapse_log[1:] = -alpha * np.cumsum(h * (g1 + 2 * g2 + 2 * g3 + g4) / 6.0)
    gamma = -0.5 * np.log(y)
    omega = gamma + lapse_log
    return s.with_fields(gamma=gamma, omega=omega)


def _linear_recurrence(M, N, y0):
    """y_{i+1} = M_i y_i + N_i, vectorized through running products."""
    P = np.concatenate(([1.0], np.cumprod(M)))
    if np.all(np.isfinite(P)) and P.min() > 1e-250:
        y = P * (y0 + np.concatenate(([0.0], np.cumsum(N / P[1:]))))
        return y
    y = np.empty(M.size + 1)
    y[0] = y0
    for i in range(M.size):
        y[i + 1] = M[i] * y[i] + N[i]
    return y


def metric_identity_residual(s: Slice, ledger: EnergyLedger):
    """Residual of e^gamma (1 - alpha E(t,r) / 2pi) = 1 and the uniform bounds.

    Returns (residual array, dict of bound checks).
    """
    eg = np.exp(s.gamma)
    res = eg * (1.0 - s.alpha * ledger.E_ball / TWO_PI) - 1.0
    frac = s.alpha * ledger.E_total / TWO_PI
    upper = np.inf if frac >= 1 else 1.0 / (1.0 - frac)
    bounds = {
        "min_exp_gamma": float(eg.min()),
        "max_exp_gamma": float(eg.max()),
        "upper_bound": float(upper),
        "lower_ok": bool(eg.min() >= 1.0),
        "upper_ok": bool(eg.max() <= upper),
    }
    return res, bounds


# ---------------------------------------------------------------------------
# sup-norm chain


def linf_chain(s: Slice, target: TargetManifold):
    """Both sides of |wp(u(r))| <= (int f^2 e^gamma / r dr)^1/2 (int u_r^2 r e^-gamma dr)^1/2.

    Returns (sup_r |wp(u)|, right-hand side).
    """
    r = s.r
    u = s.u
    f = target.f(u)
    # f^2 / r near the axis: f ~ r v for k = 1, so f^2/r -> 0
    f2_over_r = np.where(r > 0, f**2 / np.where(r > 0, r, 1.0), 0.0)
    I1 = trapezoid(f2_over_r * np.exp(s.gamma), dx=s.dr)
    I2 = trapezoid(s.u_r**2 * r * np.exp(-s.gamma), dx=s.dr)
    lhs = float(np.max(np.abs(target.wp(u))))
    return lhs, float(np.sqrt(I1 * I2))


# ---------------------------------------------------------------------------
# serialization


def write_slice(path, s: Slice):
    header = (f"# t={s.t!r} alpha={s.alpha!r} k={s.k} n_points={s.r.size} "
              f"dr={s.dr!r} p_axis={float(s.p[0])!r}\n")
    cols = np.column_stack([s.r, s.v, s.pi, s.gamma, s.omega])
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("# r v pi gamma omega\n")
        np.savetxt(fh, cols, fmt="%.14e")


def read_slice(path) -> Slice:
    with open(path) as fh:
        first = fh.readline()
    meta = dict(tok.split("=", 1) for tok in first.lstrip("#").split())
    data = np.loadtxt(path, comments="#", ndmin=2)
    r, v, pi, gamma, omega = data.T
    k = int(meta["k"])
    dr = float(meta["dr"])
    r = np.arange(int(meta["n_points"])) * dr
    if k == 0:
        p = pi
    else:
        p = np.empty_like(pi)
        p[1:] = pi[1:] / r[1:] ** k
        p[0] = float(meta["p_axis"])
    return Slice(float(meta["t"]), r, v, p, gamma, omega, float(meta["alpha"]), k)


# ---------------------------------------------------------------------------
# Einstein-equation residuals on a history


def momentum_constraint_residual(history, t: float) -> np.ndarray:
    """gamma_t - alpha r u_t u_r at a stored interior time (centered in t)."""
    j = history.index_of(t, interior=True)
    s = history.slice(j)
    gamma_t = history.time_derivative(history.gamma, j)
    return gamma_t - history.alpha * s.r * s.u_t * s.u_r


def _over_r(x, x_rr0, r):
    out = np.empty_like(x)
    out[1:] = x[1:] / r[1:]
    out[0] = x_rr0
    return out


def einstein_residuals(history, t: float, target: TargetManifold) -> dict:
    """E_{mu nu} - alpha T_{mu nu} for all six components at a stored time.

    Derivatives of gamma and Omega are centered differences in r and in the
    stored time levels; the axis values of the 1/r components use the
    regular limits (gamma_r / r -> gamma_rr(0), gamma_t / r -> 0).
    """
    j = history.index_of(t, interior=True)
    s = history.slice(j)
    r, dr, al = s.r, s.dr, s.alpha
    g, w = s.gamma, s.omega
    g_r = radial_derivative(g, dr)
    w_r = radial_derivative(w, dr)
    w_rr = radial_second_derivative(w, dr)
    g_rr0 = 2.0 * (g[1] - g[0]) / dr**2
    w_rr0 = 2.0 * (w[1] - w[0]) / dr**2
    g_t = history.time_derivative(history.gamma, j)
    w_t = history.time_derivative(history.omega, j)
    g_tt = history.second_time_derivative(history.gamma, j)

    ut, ur = s.u_t, s.u_r
    fpot = potential_density(r, s.v, target, s.k)
    e2g, e2w = np.exp(2 * g), np.exp(2 * w)
    kin = np.exp(-2 * w) * ut**2
    grad = np.exp(-2 * g) * ur**2

    E_tt = np.exp(2 * (w - g)) * _over_r(g_r, g_rr0, r)
    E_tr = _over_r(g_t, 0.0, r)
    E_rr = _over_r(w_r, w_rr0, r)
    E_thth = r**2 * (np.exp(-2 * g) * (-g_r * w_r + w_r**2 + w_rr)
                     - np.exp(-2 * w) * (g_t**2 - g_t * w_t + g_tt))
    T_tt = 0.5 * e2w * (kin + grad + fpot)
    T_tr = ut * ur
    T_rr = 0.5 * e2g * (kin + grad - fpot)
    T_thth = 0.5 * r**2 * (kin - grad + fpot)
    z = np.zeros_like(r)
    return {
        "tt": E_tt - al * T_tt,
        "tr": E_tr - al * T_tr,
        "rr": E_rr - al * T_rr,
        "thth": E_thth - al * T_thth,
        "tth": z,
        "rth": z.copy(),
    }
