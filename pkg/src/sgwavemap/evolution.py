"""Initial data, the RK4 time integrator, blow-up proxy and amplitude bisection."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import (BracketInvalid, CflViolation, ConfigError, DeficitAngleExceeded,
                     NonFiniteState)
from .fields import (TWO_PI, RadialGrid, Slice, compute_densities, energy, make_slice,
                     potential_density, radial_derivative, radial_second_derivative,
                     solve_constraints)
from .history import History
from .target import TargetManifold

FAMILIES = ("gaussian_bump", "compact_bump", "custom")
V_FACTOR = 50.0  # blowup: max|v| above this multiple of its initial value
SCALE_CELLS = 4.0  # ... while 1 / max|u_r| is below this many cells
GAUSSIAN_REACH = math.sqrt(math.log(1e14))  # exp(-x^2) < 1e-14 beyond this


@dataclass(frozen=True)
class InitialDataSpec:
    """Initial profile v_0 = A [b((r - r0)/s) + b((r + r0)/s)].

    ``momentum`` is "time_symmetric" (Pi_0 = 0) or "ingoing" (Pi_0 = +u_r,
    a left-moving pulse for Pi = e^{gamma - Omega} u_t; needs v_0 to vanish
    near the axis).  If ``energy_fraction`` is set, the amplitude is solved
    for so that alpha E_0 / 2 pi equals it.  ``table`` holds (r, v) samples
    for the custom family.
    """

    family: str = "compact_bump"
    amplitude: float = 0.0
    center: float = 0.5
    width: float = 0.3
    momentum: str = "time_symmetric"
    energy_fraction: Optional[float] = None
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown initial-data family {self.family!r}")
        if self.momentum not in ("time_symmetric", "ingoing"):
            raise ConfigError(f"unknown momentum option {self.momentum!r}")
        if self.width <= 0:
            raise ConfigError("width must be positive")

    @property
    def time_symmetric(self) -> bool:
        return self.momentum == "time_symmetric"

    @property
    def support_radius(self) -> float:
        if self.family == "compact_bump":
            return self.center + self.width
        if self.family == "gaussian_bump":
            return self.center + GAUSSIAN_REACH * self.width
        return float(self.table[0][-1]) if self.table is not None else 0.0


@dataclass(frozen=True)
class EvolutionConfig:
    grid: RadialGrid
    t_end: float
    target: TargetManifold
    cfl: float = 0.5
    alpha: float = 1.0
    k: int = 1
    output_every: int = 1
    enforce_domain: bool = True

    def __post_init__(self):
        if self.k not in (0, 1):
            raise ConfigError(f"homotopy degree k={self.k} is not supported (use 0 or 1)")
        if not 0 < self.cfl <= 1:
            raise ConfigError("cfl must lie in (0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.t_end < 0:
            raise ConfigError("t_end must be nonnegative")
        if self.output_every < 1:
            raise ConfigError("output_every must be at least 1")

    def n_steps(self) -> int:
        """Number of RK4 steps, a multiple of output_every with dt <= cfl dr."""
        per = self.cfl * self.grid.dr * self.output_every
        blocks = max(1, math.ceil(self.t_end / per - 1e-9))
        return blocks * self.output_every

    def dt(self) -> float:
        return self.t_end / self.n_steps()


def bump(x, family):
    x = np.asarray(x, dtype=float)
    if family == "gaussian_bump":
        return np.exp(-x * x)
    inside = np.abs(x) < 1.0
    xs = np.where(inside, x, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - xs * xs)), 0.0)


def initial_profile(spec: InitialDataSpec, r, amplitude=None):
    A = spec.amplitude if amplitude is None else amplitude
    if spec.family == "custom":
        rt, vt = (np.asarray(c, dtype=float) for c in spec.table)
        return A * np.interp(r, rt, vt, right=0.0)
    x1 = (r - spec.center) / spec.width
    x2 = (r + spec.center) / spec.width
    return A * (bump(x1, spec.family) + bump(x2, spec.family))


def _raw_initial_slice(spec: InitialDataSpec, config: EvolutionConfig, amplitude) -> Slice:
    grid = config.grid
    r = grid.r
    v = initial_profile(spec, r, amplitude)
    if spec.time_symmetric:
        return make_slice(grid, v, p=np.zeros_like(r), alpha=config.alpha, k=config.k)
    scale = max(np.max(np.abs(v)), 1e-300)
    near_axis = r <= 4 * grid.dr
    if np.max(np.abs(v[near_axis])) > 1e-12 * scale:
        raise ConfigError("ingoing data needs a profile that vanishes near the axis")
    u = r**config.k * v
    u_r = radial_derivative(u, grid.dr, parity=1 if config.k == 0 else -1)
    return make_slice(grid, v, pi=u_r, alpha=config.alpha, k=config.k)


def make_initial_data(spec: InitialDataSpec, config: EvolutionConfig) -> Slice:
    """Fill (v, Pi), solve the constraints and check alpha E_0 / 2 pi < 1."""
    target = config.target
    amplitude = spec.amplitude
    if spec.energy_fraction is not None:
        amplitude = amplitude_for_energy_fraction(spec, config, spec.energy_fraction)
    s = solve_constraints(_raw_initial_slice(spec, config, amplitude), target)
    led = energy(s, compute_densities(s, target))
    if config.alpha * led.E_total / TWO_PI >= 1.0:
        raise DeficitAngleExceeded("initial data violate alpha E_0 / 2 pi < 1")
    return s


def energy_fraction_of(spec, config, amplitude) -> float:
    """alpha E_0 / 2 pi of the constraint-solved data (1.0 once the bound fails)."""
    try:
        s = solve_constraints(_raw_initial_slice(spec, config, amplitude), config.target)
    except DeficitAngleExceeded:
        return 1.0
    frac = config.alpha * energy(s, compute_densities(s, config.target)).E_total / TWO_PI
    return min(frac, 1.0)


def amplitude_for_energy_fraction(spec, config, fraction) -> float:
    if config.alpha <= 0:
        raise ConfigError("energy_fraction needs alpha > 0")
    if fraction == 0:
        return 0.0
    if fraction < 0:
        raise ConfigError(f"energy fraction {fraction} is negative")
    if not fraction < 1:
        raise DeficitAngleExceeded(f"energy fraction {fraction} is not below 1")
    g = lambda A: energy_fraction_of(spec, config, A) - fraction
    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e8:
            raise ConfigError("could not bracket the requested energy fraction")
    return brentq(g, 0.0, hi, xtol=1e-14, rtol=1e-13)


# ---------------------------------------------------------------------------
# right-hand side


def _volumes(r, dr, d):
    """Finite-volume denominators (r_{i+1/2}^d - r_{i-1/2}^d) / d."""
    rp = r + 0.5 * dr
    rm = np.maximum(r - 0.5 * dr, 0.0)
    return (rp**d - rm**d) / d


def scheme_energy(s: Slice) -> float:
    """Discrete energy of the flux-form scheme in the source-free case.

    2 pi [sum vol_i p_i^2 / 2 + sum r_{i+1/2}^{d-1} (v_{i+1} - v_i)^2 / (2 dr)],
    which the semi-discrete equations conserve exactly when alpha = 0 and
    the source vanishes (k = 0, or the flat target).  For k = 1 it is the
    energy of the 4+1 radial wave carried by v, not E.
    """
    r, dr = s.r, s.dr
    d = 2 + 2 * s.k
    rh = r[:-1] + 0.5 * dr
    kinetic = 0.5 * np.sum(_volumes(r, dr, d) * s.p**2)
    gradient = 0.5 * np.sum(rh ** (d - 1) * np.diff(s.v) ** 2) / dr
    return TWO_PI * float(kinetic + gradient)


def _axis_regular_terms(s: Slice, target: TargetManifold, a, e2g, fpot):
    """Lower-order terms a_r v / r + a v (1 - e^{2 gamma}) / r^2 - a e^{2 gamma} v^3 h(u) (k = 1)."""
    r, v = s.r, s.v
    ar_over_r = -s.alpha * a * e2g * fpot
    q = np.empty_like(r)
    q[1:] = -np.expm1(2.0 * s.gamma[1:]) / r[1:] ** 2
    q[0] = -s.alpha * v[0] ** 2  # -alpha e(0); e(0) = v(0)^2 on the axis
    h = target.cubic_remainder(r * v)
    return ar_over_r * v + a * v * q - a * e2g * v**3 * h


def rhs(s: Slice, target: TargetManifold):
    """Time derivatives (dv/dt, dp/dt) of the regularized variables.

    dv/dt = a p with a = e^{Omega - gamma}, and dp/dt is the flux form
    r^{1-d} D_r(r^{d-1} a v_r) (d = 2 + 2k) plus regular lower-order terms,
    which is the wave equation for u = r^k v written in v.  The outer
    boundary is frozen.
    """
    r, dr, v, p = s.r, s.dr, s.v, s.p
    d = 2 + 2 * s.k
    a = np.exp(s.omega - s.gamma)
    rh = r[:-1] + 0.5 * dr
    flux = rh ** (d - 1) * 0.5 * (a[:-1] + a[1:]) * (v[1:] - v[:-1]) / dr
    vol = _volumes(r, dr, d)
    div = np.zeros_like(r)
    div[0] = flux[0] / vol[0]
    div[1:-1] = (flux[1:] - flux[:-1]) / vol[1:-1]
    dp = div
    if s.k == 1:
        e2g = np.exp(2.0 * s.gamma)
        fpot = potential_density(r, v, target, 1)
        dp = div + _axis_regular_terms(s, target, a, e2g, fpot)
    dv = a * p
    dv[-1] = 0.0
    dp[-1] = 0.0
    bad = ~(np.isfinite(dv) & np.isfinite(dp))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteState(f"non-finite right-hand side at index {i} (r={r[i]:.6g})", index=i)
    return dv, dp


def rhs_radial5(s: Slice, target: TargetManifold, cross_sign: int = -1):
    """dp/dt assembled pointwise from the 4+1 radial Laplacian (k = 1 only).

    Uses box_5 v = box_3 v + 2 e^{2 cross_sign gamma} v_r / r, centered
    differences for v_rr, v_r / r and a_r, and no flux form.  With
    cross_sign = -1 this is the same continuum operator as :func:`rhs`.
    """
    if s.k != 1:
        raise ValueError("the 4+1 assembly applies to k = 1")
    r, dr, v = s.r, s.dr, s.v
    g, w = s.gamma, s.omega
    a = np.exp(w - g)
    e2g = np.exp(2 * g)
    v_r = radial_derivative(v, dr, parity=1)
    v_rr = radial_second_derivative(v, dr, parity=1)
    a_r = radial_derivative(a, dr, parity=1)
    w_r = radial_derivative(w, dr, parity=1)
    g_r = radial_derivative(g, dr, parity=1)
    safe = np.where(r > 0, r, 1.0)
    vr_over_r = np.where(r > 0, v_r / safe, v_rr)
    ar_over_r = np.where(r > 0, a_r / safe, radial_second_derivative(a, dr)[0])
    # spatial part of box_5 v, times e^{gamma + Omega}
    cross = 2.0 * np.exp(2 * cross_sign * g) * vr_over_r
    spatial = np.exp(g + w) * (np.exp(-2 * g) * (v_rr + vr_over_r + (w_r - g_r) * v_r) + cross)
    q = np.where(r > 0, -np.expm1(2 * g) / safe**2, -s.alpha * v[0] ** 2)
    h = target.cubic_remainder(r * v)
    # e^{gamma+Omega} [v (1 - e^{-2g})/r^2 - e^{-2g}(Omega_r - gamma_r) v / r + v^3 h]
    source = -a * v * q - ar_over_r * v + a * e2g * v**3 * h
    dp = spatial - source
    dp[-1] = 0.0
    return dp


# ---------------------------------------------------------------------------
# time stepping


def _stage(s: Slice, dv, dp, h, t, target):
    trial = Slice(t, s.r, s.v + h * dv, s.p + h * dp, s.gamma, s.omega, s.alpha, s.k)
    return solve_constraints(trial, target)


def step(s: Slice, dt: float, target: TargetManifold, cfl: float = 1.0) -> Slice:
    """One classical RK4 step with the constraints re-solved at every stage."""
    speed = float(np.max(np.exp(s.omega - s.gamma)))
    if dt * speed / s.dr > cfl * (1.0 + 1e-12):
        raise CflViolation(f"dt={dt:.6g} exceeds cfl*dr/max(a)={cfl * s.dr / speed:.6g}")
    k1v, k1p = rhs(s, target)
    s2 = _stage(s, k1v, k1p, 0.5 * dt, s.t + 0.5 * dt, target)
    k2v, k2p = rhs(s2, target)
    s3 = _stage(s, k2v, k2p, 0.5 * dt, s.t + 0.5 * dt, target)
    k3v, k3p = rhs(s3, target)
    s4 = _stage(s, k3v, k3p, dt, s.t + dt, target)
    k4v, k4p = rhs(s4, target)
    dv = (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0
    dp = (k1p + 2 * k2p + 2 * k3p + k4p) / 6.0
    return _stage(s, dv, dp, dt, s.t + dt, target)


@dataclass
class BlowupStatus:
    verdict: str  # dispersed | blowup | deficit_exceeded | inconclusive
    t_stop: float
    diagnostics: dict = field(default_factory=dict)


def check_domain(config: EvolutionConfig, spec: InitialDataSpec, s0: Slice):
    c_char = float(np.max(np.exp(s0.omega - s0.gamma)))
    need = spec.support_radius + c_char * config.t_end
    if need > config.grid.r_max + 1e-12:
        raise ConfigError(f"r_max={config.grid.r_max} is below support + c*t_end = {need:.6g}; "
                          "the frozen boundary would influence the interior")


def run(config: EvolutionConfig, spec: InitialDataSpec, raise_on_abort: bool = True,
        initial: Optional[Slice] = None):
    """Evolve to t_end, storing every ``output_every`` steps.

    Returns (History, BlowupStatus).  On a numerical abort the error is
    re-raised unless ``raise_on_abort`` is False, in which case the history
    up to the abort is returned with verdict deficit_exceeded.  The run also
    stops once the collapse criterion of detect_blowup is met; the terminal
    slice is then stored even if it falls between output times.
    """
    target = config.target
    s = make_initial_data(spec, config) if initial is None else initial
    if config.enforce_domain:
        check_domain(config, spec, s)
    nsteps = config.n_steps()
    dt = config.dt()
    slices = [s]
    aborted = None
    v_limit = V_FACTOR * float(np.max(np.abs(s.v)))
    for n in range(1, nsteps + 1):
        try:
            # overflow near a collapse is caught as NonFiniteState below
            with np.errstate(over="ignore", invalid="ignore"):
                s = step(s, dt, target, config.cfl)
        except (DeficitAngleExceeded, NonFiniteState) as exc:
            if raise_on_abort:
                raise
            aborted = exc
            if slices[-1].t < s.t:
                slices.append(s)
            break
        # time recomputed from the step index to keep the cadence exact
        s = s.with_fields(t=n * dt)
        if n % config.output_every == 0:
            slices.append(s)
        if 0 < v_limit < np.max(np.abs(s.v)) and \
                np.max(np.abs(s.u_r)) * SCALE_CELLS * s.dr > 1.0:
            if slices[-1] is not s:
                slices.append(s)
            break
    hist = History.from_slices(slices)
    status = detect_blowup(hist, target, aborted=aborted)
    return hist, status


def detect_blowup(history: History, target: TargetManifold, v_factor: float = V_FACTOR,
                  scale_cells: float = SCALE_CELLS, r_ball: float = 1.0,
                  disperse_fraction: float = 0.01, aborted=None,
                  refined: Optional[History] = None) -> BlowupStatus:
    """Classify a finished run.

    blowup: max|v| exceeds ``v_factor`` times its initial maximum while the
    gradient scale 1/max|u_r| drops below ``scale_cells`` cells (and, if a
    refined history is given, the same holds there too).  dispersed: the
    energy inside r <= r_ball at the final time is below
    ``disperse_fraction`` of E_0.
    """
    t_stop = float(history.times[-1])
    vmax = np.max(np.abs(history.v), axis=1)
    urmax = np.array([np.max(np.abs(history.slice(j).u_r)) for j in range(len(history))])
    with np.errstate(divide="ignore"):
        scale = np.where(urmax > 0, 1.0 / urmax, np.inf)
    diag = {"max_v": float(vmax.max()), "initial_max_v": float(vmax[0]),
            "min_gradient_scale": float(scale.min())}

    def _collapsed(v_hist, scale_hist, dr):
        hit = (v_hist > v_factor * v_hist[0]) & (scale_hist < scale_cells * dr)
        return bool(v_hist[0] > 0 and hit.any())

    if aborted is not None:
        diag["abort"] = str(aborted)
        if isinstance(aborted, DeficitAngleExceeded):
            return BlowupStatus("deficit_exceeded", t_stop, diag)
        # a non-finite abort counts as blowup only if the finite slices
        # stored before it already show the resolution-limited collapse
        ok = np.isfinite(vmax) & np.isfinite(scale)
        verdict = "blowup" if _collapsed(vmax[ok], scale[ok], history.dr) else "inconclusive"
        return BlowupStatus(verdict, t_stop, diag)

    blew = _collapsed(vmax, scale, history.dr)
    if blew and refined is not None:
        rv = np.max(np.abs(refined.v), axis=1)
        rur = np.array([np.max(np.abs(refined.slice(j).u_r)) for j in range(len(refined))])
        with np.errstate(divide="ignore"):
            rs = np.where(rur > 0, 1.0 / rur, np.inf)
        blew = _collapsed(rv, rs, refined.dr)
        diag["refined_consistent"] = blew
    if blew:
        return BlowupStatus("blowup", t_stop, diag)

    first, last = history.slice(0), history.slice(len(history) - 1)
    E0 = energy(first, compute_densities(first, target)).E_total
    led = energy(last, compute_densities(last, target))
    E_in = float(np.interp(r_ball, history.r, led.E_ball))
    diag.update(E0=E0, E_ball_final=E_in)
    if E_in <= disperse_fraction * E0:
        return BlowupStatus("dispersed", t_stop, diag)
    return BlowupStatus("inconclusive", t_stop, diag)


# ---------------------------------------------------------------------------
# bisection


def _probe(args):
    spec, config, amplitude = args
    s = replace(spec, amplitude=amplitude, energy_fraction=None)
    try:
        _, status = run(config, s, raise_on_abort=False)
    except DeficitAngleExceeded as exc:
        return amplitude, BlowupStatus("deficit_exceeded", 0.0, {"abort": str(exc)})
    return amplitude, status


def bisect_critical_amplitude(spec: InitialDataSpec, A_low: float, A_high: float,
                              config: EvolutionConfig, tol: float, workers: int = 1,
                              max_iter: int = 60):
    """Bisect on the run verdict between a dispersing and a collapsing amplitude.

    Returns (A_low*, A_high*, records) where records lists
    (amplitude, BlowupStatus) for every probe.
    """
    if not A_high > A_low:
        raise ValueError("need A_low < A_high")
    records = []
    if A_high - A_low <= tol:
        return A_low, A_high, records
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, 2)) as ex:
            ends = list(ex.map(_probe, [(spec, config, A_low), (spec, config, A_high)]))
    else:
        ends = [_probe((spec, config, A_low)), _probe((spec, config, A_high))]
    records.extend(ends)
    lo_v, hi_v = ends[0][1].verdict, ends[1][1].verdict
    if lo_v != "dispersed" or hi_v != "blowup":
        raise BracketInvalid(f"bracket invalid: A_low -> {lo_v}, A_high -> {hi_v}",
                             low_verdict=lo_v, high_verdict=hi_v)
    lo, hi = A_low, A_high
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        rec = _probe((spec, config, mid))
        records.append(rec)
        if rec[1].verdict == "blowup":
            hi = mid
        else:
            lo = mid
    return lo, hi, records
