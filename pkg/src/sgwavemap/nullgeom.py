"""Normalized null frame (F, G), null coordinates (xi, eta), (T, R), Jacobians and bounds.

With l~ = e^{-Omega} d_t + e^{-gamma} d_r and n~ = e^{-Omega} d_t - e^{-gamma} d_r,
the rescaled pair l = e^F l~, n = e^G n~ commutes when

    l~(G) = + r alpha e^gamma (e + m - f),    n~(F) = - r alpha e^gamma (e - m - f),

with F = G = 0 on the axis.  Along outgoing rays (dr/dt = e^{Omega - gamma})
dG/dt = e^Omega l~(G); along ingoing rays dF/dt = e^Omega n~(F).  The closed
one-forms

    d xi  = (1/2) e^{-F} (e^Omega dt + e^gamma dr),
    d eta = (1/2) e^{-G} (e^Omega dt - e^gamma dr)

are integrated from the apex O, where xi = eta = 0, and the metric reads
-e^{2Z} d xi d eta with e^{2Z} = 4 e^{F+G}.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .errors import CharacteristicExitsGrid, FrameUnavailable
from .fields import TWO_PI, compute_densities, cumulative_trapezoid, slice_energy
from .target import TargetManifold

LOG4 = np.log(4.0)


@dataclass(eq=False)
class NullFrame:
    """Frame normalizers and null coordinates on the stored grid.

    Arrays have shape (n_times, n_points) and are NaN outside the past
    cone of the apex (the region covered by the ingoing fan).  Rays are
    kept as (n_times, n_rays) arrays of radius and value, NaN where the
    ray is not defined.
    """

    times: np.ndarray
    r: np.ndarray
    t_apex: float
    calF: np.ndarray
    calG: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    mask: np.ndarray
    rays_in_r: np.ndarray
    rays_in_F: np.ndarray
    rays_out_r: np.ndarray
    rays_out_G: np.ndarray
    bound_in: np.ndarray  # alpha int r e^{gamma+Omega} (e - m) dt along each ingoing ray
    bound_out: np.ndarray  # alpha int r e^{gamma+Omega} (e + m) dt along each outgoing ray
    t_anchor: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return 0.5 * (self.xi + self.eta)

    @property
    def R(self):
        return 0.5 * (self.xi - self.eta)

    @property
    def Z(self):
        """Conformal factor fixed by metric reconstruction: e^{2Z} = 4 e^{F+G}."""
        return 0.5 * (LOG4 + self.calF + self.calG)

    def exterior_inner_radius(self, cone, lam: float) -> np.ndarray:
        """r on the curve R = lam |T| at each cone time (linear root finding along r)."""
        out = np.zeros(cone.times.size)
        for i, t in enumerate(cone.times):
            if t >= self.t_apex - 1e-12:
                continue
            j = int(np.argmin(np.abs(self.times - t)))
            g = self.R[j] - lam * np.abs(self.T[j])
            ok = np.isfinite(g)
            idx = np.flatnonzero(ok & (g > 0))
            if idx.size == 0:
                out[i] = lam * cone.r_cone[i]
                continue
            k = idx[0]
            if k == 0:
                continue
            out[i] = self.r[k - 1] + (self.r[k] - self.r[k - 1]) * (-g[k - 1]) / (g[k] - g[k - 1])
        return out


def _frame_sources(history, target: TargetManifold):
    """Per stored time: speed e^{Omega-gamma}, dG/dt, dF/dt and the two bound integrands."""
    nt, nr = history.v.shape
    speed = np.exp(history.omega - history.gamma)
    srcG = np.empty((nt, nr))
    srcF = np.empty((nt, nr))
    bndG = np.empty((nt, nr))
    bndF = np.empty((nt, nr))
    al = history.alpha
    for j, s in enumerate(history):
        d = compute_densities(s, target)
        w = al * s.r * np.exp(s.gamma + s.omega)
        srcG[j] = w * (d.e + d.m - d.fpot)
        srcF[j] = -w * (d.e - d.m - d.fpot)
        bndG[j] = w * (d.e + d.m)
        bndF[j] = w * (d.e - d.m)
    return speed, srcG, srcF, bndG, bndF


def _trace_rays(history, speed, src, bnd, start_index, start_r, direction, substeps,
                exit_error):
    """Integrate a fan of rays over the stored times.

    direction +1: outgoing rays forward in time; -1: ingoing rays backward
    in time.  Each ray starts at stored index start_index[q] at radius
    start_r[q] with value 0.  Returns (radius, value, bound) arrays of shape
    (n_times, n_rays), NaN where a ray is not defined.
    """
    nt = len(history)
    nq = start_r.size
    Rr = np.full((nt, nq), np.nan)
    Vv = np.full((nt, nq), np.nan)
    Bb = np.full((nt, nq), np.nan)
    r = np.array(start_r, dtype=float)
    val = np.zeros(nq)
    b = np.zeros(nq)
    alive = np.ones(nq, dtype=bool)
    r_max = history.r[-1]
    order = range(nt) if direction > 0 else range(nt - 1, -1, -1)

    def deriv(t, rr):
        a = history.interp(speed, t, rr)
        return a, history.interp(src, t, rr), history.interp(bnd, t, rr)

    for j in order:
        started = (start_index == j)
        r[started] = start_r[started]
        val[started] = 0.0
        b[started] = 0.0
        act = alive & ((start_index <= j) if direction > 0 else (start_index >= j))
        Rr[j, act] = r[act]
        Vv[j, act] = val[act]
        Bb[j, act] = b[act]
        jn = j + direction
        if jn < 0 or jn >= nt or not act.any():
            continue
        t0 = history.times[j]
        H = (history.times[jn] - t0) / substeps
        rr, vv, bb = r[act], val[act], b[act]
        tt = t0
        for _ in range(substeps):
            # dr/dt = +a for outgoing; for ingoing traced backward dr/dt = -a with H < 0
            a1, s1, c1 = deriv(tt, rr)
            a2, s2, c2 = deriv(tt + H / 2, rr + H / 2 * direction * a1)
            a3, s3, c3 = deriv(tt + H / 2, rr + H / 2 * direction * a2)
            a4, s4, c4 = deriv(tt + H, rr + H * direction * a3)
            rr = rr + H * direction * (a1 + 2 * a2 + 2 * a3 + a4) / 6
            vv = vv + H * (s1 + 2 * s2 + 2 * s3 + s4) / 6
            bb = bb + abs(H) * (c1 + 2 * c2 + 2 * c3 + c4) / 6
            tt += H
        r[act], val[act], b[act] = rr, vv, bb
        out = act & (r > r_max)
        if out.any():
            if exit_error:
                raise CharacteristicExitsGrid(f"characteristic leaves the grid near t={history.times[jn]:.6g}")
            alive &= ~out
    return Rr, Vv, Bb


def _resample(r_pts, v_pts, grid_r, r_limit):
    """Monotone cubic resampling of scattered ray samples (plus the axis) onto the grid."""
    ok = np.isfinite(r_pts) & (r_pts > 0)
    x = np.concatenate(([0.0], r_pts[ok]))
    y = np.concatenate(([0.0], v_pts[ok]))
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    keep = np.concatenate(([True], np.diff(x) > 1e-14))
    x, y = x[keep], y[keep]
    out = np.full(grid_r.size, np.nan)
    inside = grid_r <= min(r_limit, x[-1]) + 1e-12
    if x.size < 2:
        out[grid_r == 0] = 0.0
        return out
    try:
        interp = PchipInterpolator(x, y, extrapolate=False)
    except ValueError:
        interp = CubicSpline(x, y, extrapolate=False)
    out[inside] = interp(np.minimum(grid_r[inside], x[-1]))
    return out


def integrate_frame(history, target: TargetManifold, t_apex: Optional[float] = None,
                    fan_cells: int = 4, substeps: int = 2,
                    t_anchor: Optional[float] = None) -> NullFrame:
    """Build F and G on the past cone of (t_apex, 0) and the null coordinates.

    Ingoing rays for F are seeded at the axis every ``fan_cells`` cells of
    arc (in time) up to the apex and traced backwards; outgoing rays for G
    are seeded at the axis and, with G = 0, along the initial slice.  Ray
    samples are resampled to the grid with a monotone cubic.  xi and eta
    vanish at (t_anchor, 0), the apex by default.
    """
    if len(history) < 3:
        raise FrameUnavailable("history too short for a null frame")
    times, r = history.times, history.r
    dr = history.dr
    t_apex = float(times[-1]) if t_apex is None else float(t_apex)
    if t_apex > times[-1] + 1e-12 or t_apex <= times[0]:
        raise ValueError("t_apex must lie inside the history")
    j_apex = int(np.argmin(np.abs(times - t_apex)))
    if abs(times[j_apex] - t_apex) > 1e-9:
        raise ValueError("t_apex must be a stored time")
    t_anchor = t_apex if t_anchor is None else float(t_anchor)
    speed, srcG, srcF, bndG, bndF = _frame_sources(history, target)

    spacing = fan_cells * dr
    stride = max(1, int(round(spacing / history.dt)))
    axis_seeds = np.arange(j_apex, -1, -stride)[::-1]

    # ingoing fan for F (backwards from the axis)
    rin, Fin, Bin = _trace_rays(history, speed, srcF, bndF, axis_seeds,
                                np.zeros(axis_seeds.size), -1, substeps, exit_error=True)
    r_cone = np.nanmax(np.where(np.isfinite(rin), rin, -np.inf), axis=1)
    r_cone[j_apex] = 0.0
    r_cone[j_apex + 1:] = -1.0

    # outgoing fan for G: axis seeds, then seeds on the initial slice
    r0_max = r_cone[0] + 2 * spacing
    slice_seeds = np.arange(spacing, min(r0_max, r[-1]) + 1e-12, spacing)
    out_start = np.concatenate((axis_seeds, np.zeros(slice_seeds.size, dtype=int)))
    out_r = np.concatenate((np.zeros(axis_seeds.size), slice_seeds))
    rout, Gout, Bout = _trace_rays(history, speed, srcG, bndG, out_start, out_r, +1,
                                   substeps, exit_error=False)

    nt, nr = history.v.shape
    calF = np.full((nt, nr), np.nan)
    calG = np.full((nt, nr), np.nan)
    mask = np.zeros((nt, nr), dtype=bool)
    for j in range(nt):
        if r_cone[j] < 0:
            continue
        m = r <= r_cone[j] + 1e-12
        mask[j] = m
        calF[j] = _resample(rin[j], Fin[j], r, r_cone[j])
        calG[j] = _resample(rout[j], Gout[j], r, r_cone[j])
    calF[~mask] = np.nan
    calG[~mask] = np.nan
    mask &= np.isfinite(calF) & np.isfinite(calG)

    xi, eta = _null_coordinates_radial(history, calF, calG, t_anchor)
    xi[~mask] = np.nan
    eta[~mask] = np.nan
    return NullFrame(times.copy(), r.copy(), t_apex, calF, calG, xi, eta, mask,
                     rin, Fin, rout, Gout, Bin, Bout, t_anchor,
                     meta={"fan_cells": fan_cells, "substeps": substeps,
                           "r_cone": r_cone, "n_rays_in": int(axis_seeds.size),
                           "n_rays_out": int(out_r.size)})


def _null_coordinates_radial(history, calF, calG, t_anchor):
    """xi, eta along radial lines from the axis, where xi = eta = (t - t_anchor) / 2."""
    dr = history.dr
    base = 0.5 * (history.times - t_anchor)[:, None]
    with np.errstate(invalid="ignore"):
        gF = np.exp(history.gamma - calF)
        gG = np.exp(history.gamma - calG)
    intF = np.array([cumulative_trapezoid(np.nan_to_num(row, nan=0.0), dr) for row in gF])
    intG = np.array([cumulative_trapezoid(np.nan_to_num(row, nan=0.0), dr) for row in gG])
    return base + 0.5 * intF, base - 0.5 * intG


def path_independence_residual(frame: NullFrame, history) -> float:
    """Largest gap between xi (and eta) integrated along two grid paths.

    Path A runs radially from the axis at time t.  Path B runs along the
    axis to the first stored time, radially out to r and then up in t.
    """
    dr = history.dr
    t0 = frame.times[0]
    xi0 = frame.xi[0]
    eta0 = frame.eta[0]
    with np.errstate(invalid="ignore"):
        wF = np.exp(history.omega - frame.calF)
        wG = np.exp(history.omega - frame.calG)
    gap = 0.0
    nt = len(frame.times)
    for i in range(1, frame.r.size):
        col = frame.mask[:, i]
        # the cone shrinks in time, so the covered times form a prefix
        jmax = int(np.flatnonzero(col)[-1]) if col.any() else -1
        if jmax < 1 or not col[0]:
            continue
        ts = frame.times[: jmax + 1]
        cumF = cumulative_trapezoid(wF[: jmax + 1, i], ts[1] - ts[0])
        cumG = cumulative_trapezoid(wG[: jmax + 1, i], ts[1] - ts[0])
        xiB = xi0[i] + 0.5 * cumF
        etaB = eta0[i] + 0.5 * cumG
        gap = max(gap, float(np.max(np.abs(xiB - frame.xi[: jmax + 1, i]))),
                  float(np.max(np.abs(etaB - frame.eta[: jmax + 1, i]))))
    return gap


def _fd_t(A, j, times):
    return (A[j + 1] - A[j - 1]) / (times[j + 1] - times[j - 1])


def _fd_r(x, dr):
    out = np.full_like(x, np.nan)
    out[1:-1] = (x[2:] - x[:-2]) / (2 * dr)
    return out


def commutator_residual(frame: NullFrame, history, t: float, zeroed: bool = False):
    """Components (C_t, C_r) of [l, n] on the grid at a stored interior time.

    All derivatives are centered finite differences of the stored frame and
    metric.  ``zeroed`` replaces F and G by 0, so that the result is
    [l~, n~] = 2 e^{-(gamma+Omega)} (-Omega_r d_t + gamma_t d_r).
    """
    j = history.index_of(t, interior=True)
    times, dr = history.times, history.dr
    F = np.zeros_like(frame.calF) if zeroed else frame.calF
    G = np.zeros_like(frame.calG) if zeroed else frame.calG
    g, w = history.gamma[j], history.omega[j]
    Om_r = _fd_r(w, dr)
    ga_t = _fd_t(history.gamma, j, times)
    F_t, G_t = _fd_t(F, j, times), _fd_t(G, j, times)
    F_r, G_r = _fd_r(F[j], dr), _fd_r(G[j], dr)
    lG = np.exp(-w) * G_t + np.exp(-g) * G_r
    nF = np.exp(-w) * F_t - np.exp(-g) * F_r
    pre = np.exp(F[j] + G[j])
    C_t = pre * (-2 * np.exp(-(g + w)) * Om_r + np.exp(-w) * (lG - nF))
    C_r = pre * (2 * np.exp(-(g + w)) * ga_t - np.exp(-g) * (lG + nF))
    if not zeroed:
        bad = ~(frame.mask[j - 1] & frame.mask[j] & frame.mask[j + 1])
        bad |= ~np.concatenate(([False], frame.mask[j][:-2] & frame.mask[j][2:], [False]))
        C_t[bad] = np.nan
        C_r[bad] = np.nan
    C_t[0] = C_r[0] = np.nan
    return C_t, C_r


def commutator_max(frame: NullFrame, history, margin: int = 1) -> float:
    """Max |[l, n]| over interior stored times, skipping ``margin`` cells at the cone edge."""
    worst = 0.0
    for j in range(1, len(history) - 1):
        if not frame.mask[j + 1].any():
            break
        C_t, C_r = commutator_residual(frame, history, history.times[j])
        val = np.hypot(C_t, C_r)
        n_ok = int(frame.mask[j + 1].sum())
        val = val[: max(0, n_ok - margin)]
        if np.isfinite(val).any():
            worst = max(worst, float(np.nanmax(val)))
    return worst


@dataclass
class JacobianSample:
    t: float
    r: float
    J: np.ndarray
    J_inv: np.ndarray

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.J))


def jacobian(frame: NullFrame, history, t: float, r: float) -> JacobianSample:
    """d(t, r, theta)/d(xi, eta, theta) and its closed-form inverse at a grid point."""
    j = history.index_of(t)
    i = int(round(r / history.dr))
    F, G = frame.calF[j, i], frame.calG[j, i]
    if not (np.isfinite(F) and np.isfinite(G)):
        raise ValueError("point outside the frame domain")
    g, w = history.gamma[j, i], history.omega[j, i]
    J = np.array([[np.exp(F - w), np.exp(G - w), 0.0],
                  [np.exp(F - g), -np.exp(G - g), 0.0],
                  [0.0, 0.0, 1.0]])
    J_inv = 0.5 * np.array([[np.exp(w - F), np.exp(g - F), 0.0],
                            [np.exp(w - G), -np.exp(g - G), 0.0],
                            [0.0, 0.0, 2.0]])
    return JacobianSample(float(history.times[j]), float(history.r[i]), J, J_inv)


def jacobian_determinant(frame: NullFrame, history):
    """Closed form -2 e^{(F+G) - (gamma+Omega)} on the grid."""
    return -2.0 * np.exp(frame.calF + frame.calG - history.gamma - history.omega)


def comparability(frame: NullFrame, history) -> dict:
    """Measured sups of d_R r, d_r R, d_T t, d_t T against the bounds composed from
    the extreme values of F, G, gamma, Omega on the frame domain."""
    m = frame.mask
    F, G = frame.calF[m], frame.calG[m]
    g, w = history.gamma[m], history.omega[m]
    vals = {
        "c1": np.exp(F - g) + np.exp(G - g),
        "c2": 0.25 * (np.exp(g - F) + np.exp(g - G)),
        "c3": np.exp(F - w) + np.exp(G - w),
        "c4": 0.25 * (np.exp(w - F) + np.exp(w - G)),
    }
    Fmax, Fmin = max(F.max(), G.max()), min(F.min(), G.min())
    bounds = {
        "c1": 2 * np.exp(Fmax - g.min()),
        "c2": 0.5 * np.exp(g.max() - Fmin),
        "c3": 2 * np.exp(Fmax - w.min()),
        "c4": 0.5 * np.exp(w.max() - Fmin),
    }
    out = {}
    for k in vals:
        out[k] = float(vals[k].max())
        out[k + "_bound"] = float(bounds[k])
        out[k + "_ok"] = bool(out[k] <= out[k + "_bound"] * (1 + 1e-12))
    return out


def frame_bounds(frame: NullFrame, history, target: TargetManifold) -> dict:
    """Check |G| and |F| against the integral bounds accumulated along each ray,
    and report the global constant alpha e^{max gamma} E_0 / 2 pi."""
    with np.errstate(invalid="ignore"):
        exG = np.abs(frame.rays_out_G) - frame.bound_out
        exF = np.abs(frame.rays_in_F) - frame.bound_in
    E0 = slice_energy(history.slice(0), target).E_total
    glob = history.alpha * np.exp(np.nanmax(history.gamma)) * E0 / TWO_PI
    return {
        "G_excess": float(np.nanmax(exG)) if np.isfinite(exG).any() else 0.0,
        "F_excess": float(np.nanmax(exF)) if np.isfinite(exF).any() else 0.0,
        "G_max": float(np.nanmax(np.abs(frame.calG))),
        "F_max": float(np.nanmax(np.abs(frame.calF))),
        "G_min": float(np.nanmin(frame.calG)), "G_sup": float(np.nanmax(frame.calG)),
        "F_min": float(np.nanmin(frame.calF)), "F_sup": float(np.nanmax(frame.calF)),
        "global_bound": float(glob),
        "rays_ok": bool(np.nanmax(np.nan_to_num(exG, nan=-1.0)) <= 1e-13
                        and np.nanmax(np.nan_to_num(exF, nan=-1.0)) <= 1e-13),
    }


def metric_reconstruction(frame: NullFrame, history, n_vectors: int = 8, seed: int = 0) -> dict:
    """Rebuild the line element from finite differences of xi, eta.

    Returns the max relative error of -e^{2Z} dxi(V) deta(V) against
    -e^{2 Omega} V_t^2 + e^{2 gamma} V_r^2 on random tangent vectors, with
    e^{2Z} = 4 e^{F+G}, and the mismatch of the reconstructed Z against
    both candidate closed forms (log 4 + F + G) / 2 and log(e^{F+G} / 4).
    """
    rng = np.random.default_rng(seed)
    dr = history.dr
    times = history.times
    worst = 0.0
    z_rec_err = 0.0
    z_alt_err = 0.0
    for j in range(1, len(times) - 1):
        ok = frame.mask[j - 1] & frame.mask[j] & frame.mask[j + 1]
        ok[1:-1] &= frame.mask[j][:-2] & frame.mask[j][2:]
        ok[0] = ok[-1] = False
        if not ok.any():
            continue
        xi_t = _fd_t(frame.xi, j, times)
        eta_t = _fd_t(frame.eta, j, times)
        xi_r = _fd_r(frame.xi[j], dr)
        eta_r = _fd_r(frame.eta[j], dr)
        g, w = history.gamma[j], history.omega[j]
        z = frame.Z[j]
        for _ in range(n_vectors):
            Vt, Vr = rng.normal(size=2)
            lhs = -np.exp(2 * z) * (xi_t * Vt + xi_r * Vr) * (eta_t * Vt + eta_r * Vr)
            rhs = -np.exp(2 * w) * Vt**2 + np.exp(2 * g) * Vr**2
            scale = np.exp(2 * w) * Vt**2 + np.exp(2 * g) * Vr**2
            worst = max(worst, float(np.max(np.abs(lhs - rhs)[ok] / scale[ok])))
        z_rec = 0.5 * np.log(np.exp(2 * w) / (xi_t * eta_t))
        z_rec_err = max(z_rec_err, float(np.max(np.abs(z_rec - z)[ok])))
        z_alt = frame.calF[j] + frame.calG[j] - LOG4
        z_alt_err = max(z_alt_err, float(np.max(np.abs(z_rec - z_alt)[ok])))
    return {"line_element_error": worst, "Z_error": z_rec_err,
            "Z_printed_relation_error": z_alt_err}


def null_measure_identity(frame: NullFrame, history) -> float:
    """max |d xi(n)| + |d eta(l)| from the closed-form differentials (zero identically)."""
    m = frame.mask
    F, G = frame.calF[m], frame.calG[m]
    g, w = history.gamma[m], history.omega[m]
    # n = e^G (e^{-Omega} d_t - e^{-gamma} d_r), l = e^F (e^{-Omega} d_t + e^{-gamma} d_r)
    dxi_n = 0.5 * np.exp(-F) * np.exp(G) * (np.exp(w) * np.exp(-w) - np.exp(g) * np.exp(-g))
    deta_l = 0.5 * np.exp(-G) * np.exp(F) * (np.exp(w) * np.exp(-w) - np.exp(g) * np.exp(-g))
    return float(np.max(np.abs(dxi_n)) + np.max(np.abs(deta_l))) if F.size else 0.0


def write_frame(path, frame: NullFrame, j: int):
    """Columnar text for one stored time: r, F, G, xi, eta."""
    header = (f"t= {frame.times[j]:.15g} t_apex= {frame.t_apex:.15g} "
              f"n_points= {frame.r.size} dr= {frame.r[1] - frame.r[0]:.15g}\n"
              "r calF calG xi eta")
    data = np.column_stack([frame.r, frame.calF[j], frame.calG[j], frame.xi[j], frame.eta[j]])
    np.savetxt(path, data, fmt="%.14e", header=header)
