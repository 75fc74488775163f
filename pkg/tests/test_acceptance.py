"""Acceptance suite: one test per criterion, each printing a single verdict line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the verdict lines
show up in the terminal even when output capture is on.
"""
import numpy as np
import pytest

from sgwavemap.config import load_config
from sgwavemap.evolution import EvolutionConfig, InitialDataSpec, run
from sgwavemap.fields import (RadialGrid, compute_densities, linf_chain, metric_identity_residual,
                              momentum_constraint_residual, slice_energy)
from sgwavemap.nullgeom import LOG4, commutator_max, frame_bounds, integrate_frame
from sgwavemap.target import check_condition, flat, hyperbolic, sphere
from sgwavemap.vfm import (Multiplier, ab_diagnostics, cone_energies, cone_trace, divergence_bulk,
                           divergence_fd, exterior_energy, flux, leibniz_check, sign_quantities,
                           stokes_residual)


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return report


def _orders(values):
    v = np.asarray(values, dtype=float)
    return np.log2(v[:-1] / v[1:])


def _drift(hist, target):
    E = np.array([slice_energy(s, target).E_total for s in hist])
    return float(np.max(np.abs(E - E[0])) / E[0])


def test_criterion_01_energy_conservation(main_run, verdict):
    T = flat()
    d512, d1024 = _drift(main_run(512)[0], T), _drift(main_run(1024)[0], T)
    ok = d1024 < 1e-5 and d512 / d1024 >= 3.5
    assert verdict(1, ok, f"drift(1024)={d1024:.3e}  ratio(512/1024)={d512 / d1024:.2f}")


def test_criterion_02_metric_identity(main_run, verdict):
    T = flat()
    hist = main_run(1024)[0]
    E0 = slice_energy(hist.slice(0), T).E_total
    upper = 1.0 / (1.0 - hist.alpha * E0 / (2 * np.pi))
    res = max(float(np.max(np.abs(metric_identity_residual(s, slice_energy(s, T))[0])))
              for s in hist)
    eg = np.exp(hist.gamma)
    lower_ok = bool(eg.min() >= 1.0)
    upper_ok = bool(eg.max() <= upper)
    ok = res < 1e-6 and lower_ok and upper_ok
    assert verdict(2, ok, f"residual={res:.3e}  min e^g={eg.min():.17g}  "
                          f"max e^g - bound={eg.max() - upper:+.3e}")


def test_criterion_03_momentum_constraint(main_run, verdict):
    worst = []
    for n in (512, 1024, 2048):
        hist = main_run(n)[0]
        worst.append(max(float(np.max(np.abs(momentum_constraint_residual(hist, t))))
                         for t in hist.times[1:-1]))
    orders = _orders(worst)
    ok = bool(np.all(np.abs(orders - 2.0) <= 0.3))
    assert verdict(3, ok, f"residuals={[f'{w:.2e}' for w in worst]}  orders={np.round(orders, 3)}")


def test_criterion_04_x1_divergence_free(main_run, verdict):
    T = flat()
    X1 = Multiplier("X1")
    d = [max(float(np.nanmax(np.abs(divergence_fd(h, X1, t, T)))) for t in h.times[1:-1])
         for h in (main_run(n)[0] for n in (512, 1024, 2048))]
    orders = _orders(d)
    hist = main_run(1024)[0]
    bulk = max(float(np.max(np.abs(divergence_bulk(s, X1, T)))) for s in hist)
    ok = bool(np.all(np.abs(orders - 2.0) <= 0.3)) and bulk == 0
    assert verdict(4, ok, f"fd max={[f'{x:.2e}' for x in d]}  orders={np.round(orders, 3)}  "
                          f"closed-form bulk={bulk}")


def test_criterion_05_leibniz_identity(verdict):
    rng = np.random.default_rng(20240501)
    worst = {}
    states = []
    for _ in range(20):
        c = rng.uniform(-1, 1, size=8)

        def fields(t, r, c=c):
            u = 0.5 * c[0] * r * np.exp(-(r - 0.3 * c[1]) ** 2) * np.cos(t + c[2]) + 0.2 * c[3] * r
            g = 0.2 * (1 + c[4]) * np.exp(-r * r) * r * r * (1 + 0.2 * np.sin(c[5] * t))
            w = 0.1 * c[6] * np.tanh(r) * np.cos(t) + 0.05 * c[7] * r * r
            return u, g, w

        states.append((fields, rng.uniform(0.0, 2.0)))
    r = np.linspace(0.3, 2.0, 9)
    for name in ("X1", "X2", "X3", "X4", "kappa"):
        X = Multiplier(name)
        res = 0.0
        for fields, t in states:
            lhs, first, second = leibniz_check(fields, X, np.full_like(r, t), r, sphere(), h=1.0 / 1024)
            res = max(res, float(np.max(np.abs(lhs - first - second))))
        worst[name] = res
    ok = all(v < 1e-6 for v in worst.values())
    assert verdict(5, ok, "residuals " + " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_06_kinetic_stokes(main_run, verdict):
    T = flat()
    X3 = Multiplier("X3")
    rel = []
    for n in (512, 1024):
        hist = main_run(n)[0]
        E0 = slice_energy(hist.slice(0), T).E_total
        rep = stokes_residual(hist, cone_trace(hist, 1.0), X3, 0.0, 1.0, T)
        rel.append(abs(rep.residual) / E0)
    ok = rel[1] < 0.01 and rel[1] < rel[0]
    assert verdict(6, ok, f"|residual|/E0 (512, 1024)=({rel[0]:.2e}, {rel[1]:.2e})")


def test_criterion_07_cone_monotonicity(main_run, verdict):
    T = flat()
    hist = main_run(1024)[0]
    E0 = slice_energy(hist.slice(0), T).E_total
    cone = cone_trace(hist, 1.0)
    E = cone_energies(hist, cone, T)
    eps = float(max(np.max(np.diff(E)), 0.0))
    X1 = Multiplier("X1")
    fl = [flux(hist, cone, X1, cone.times[i], cone.times[i + 1], T)
          for i in range(len(cone.times) - 1)]
    ok = eps < 1e-4 * E0 and max(fl) <= 0
    assert verdict(7, ok, f"eps/E0={eps / E0:.2e}  max flux={max(fl):.2e}")


def test_criterion_08_non_concentration_trend(ingoing_run, verdict):
    T = flat()
    hist = ingoing_run(1024)[0]
    E0 = slice_energy(hist.slice(0), T).E_total
    cone = cone_trace(hist, 1.0)
    E = cone_energies(hist, cone, T)
    resolvable = np.flatnonzero(cone.r_cone >= hist.dr)
    last = resolvable[-1]
    ext_cone = cone_trace(hist, 1.0, lam=0.5)
    ext = np.array([exterior_energy(hist, ext_cone, t, T) for t in ext_cone.times[:-1]])
    tail = ext[-max(2, ext.size // 10):]
    ok = E[last] < 0.1 * E0 and bool(np.all(np.diff(tail) < 0))
    assert verdict(8, ok, f"E^O(tau={cone.times[last]:.4f})/E0={E[last] / E0:.2e}  "
                          f"E_ext decreasing over {tail.size} samples")


def test_criterion_09_null_frame(main_run, main_frame, verdict):
    T = flat()
    hist, frame = main_run(1024)[0], main_frame(1024)
    b = frame_bounds(frame, hist, T)
    within = bool(b["rays_ok"]) and max(b["F_max"], b["G_max"]) <= b["global_bound"]
    c = [commutator_max(main_frame(n), main_run(n)[0]) for n in (512, 1024, 2048)]
    orders = _orders(c)
    # decoupled run: spacetime is Minkowski
    ev = EvolutionConfig(RadialGrid.from_cells(256, 3.0), 1.0, T, alpha=0.0, output_every=4)
    mink = run(ev, InitialDataSpec("compact_bump", amplitude=0.5, center=0.0, width=1.5))[0]
    mf = integrate_frame(mink, T, t_anchor=0.0)
    m = mf.mask
    t = mink.times[:, None] + 0 * mink.r[None, :]
    r = mink.r[None, :] + 0 * t
    exact = (np.all(mf.calF[m] == 0) and np.all(mf.calG[m] == 0)
             and np.max(np.abs(mf.R[m] - 0.5 * r[m])) <= 1e-14
             and np.max(np.abs(mf.T[m] - 0.5 * t[m])) <= 1e-14
             and np.max(np.abs(mf.Z[m] - 0.5 * LOG4)) <= 1e-14)
    ok = within and bool(np.all(np.abs(orders - 2.0) <= 0.3)) and exact
    assert verdict(9, ok, f"F,G within bound={within}  commutator orders={np.round(orders, 3)}  "
                          f"Minkowski exact={exact}")


def test_criterion_10_sign_structure(main_run, main_frame, verdict):
    T = flat()
    hist = main_run(1024)[0]
    s_kl_min, s_kn_max = np.inf, -np.inf
    for s in hist:
        d = compute_densities(s, T)
        skl, skn = sign_quantities(d.e, d.m, d.fpot)
        s_kl_min = min(s_kl_min, float(skl.min()))
        s_kn_max = max(s_kn_max, float(skn.max()))
    ab = ab_diagnostics(hist, main_frame(1024), T)
    scale = max(float(np.nanmax(np.abs(hist.r[None, :] ** 2 * ab.e2m2))), 1.0)
    ident = ab.report["identity_error"]
    c_meas, c_bound = ab.report["L0_constant"], ab.report["L0_constant_bound"]
    ok = s_kl_min >= 0 and s_kn_max <= 0 and ident <= 1e-12 * scale and c_meas <= c_bound
    assert verdict(10, ok, f"min S_kl={s_kl_min:.2e}  max S_kn={s_kn_max:.2e}  "
                           f"A2B2 identity={ident:.1e}  L0 constant={c_meas:.4g} (bound {c_bound:.4g})")


def test_criterion_11_target_checks(verdict):
    f = check_condition(flat(), "grillakis", 10.0, 1000)
    h = check_condition(hyperbolic(), "grillakis", 10.0, 1000)
    s = check_condition(sphere(), "grillakis", np.pi, 1000)
    ok = (f.verdict == "satisfied" and h.verdict == "satisfied" and s.verdict == "violated"
          and np.pi / 2 < s.witness_u < np.pi)
    assert verdict(11, ok, f"flat={f.verdict} hyperbolic={h.verdict} sphere={s.verdict} "
                           f"(witness u={s.witness_u})")


def test_criterion_12_linf_chain(main_run, ingoing_run, config_dir, verdict):
    worst = 0.0
    n_slices = 0
    runs = [(main_run(1024)[0], flat()), (ingoing_run(1024)[0], flat())]
    cfg = load_config(str(config_dir / "sphere_collapse.ini"))
    runs.append((run(cfg.evolution_config(), cfg.initial_data())[0], cfg.target()))
    for hist, target in runs:
        for s in hist:
            lhs, rhs = linf_chain(s, target)
            n_slices += 1
            if rhs > 0:
                worst = max(worst, lhs / rhs)
            elif lhs > 0:
                worst = np.inf
    ok = worst <= 1.0
    assert verdict(12, ok, f"max lhs/rhs={worst:.4f} over {n_slices} slices of {len(runs)} runs")

