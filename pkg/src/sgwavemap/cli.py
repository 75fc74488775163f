"""Command-line entry point: evolve, diagnose, convergence, bisect, check-target.

Exit codes: 0 success, 2 validation error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import (BracketInvalid, ConfigError, DeficitAngleExceeded, SimulationError)
from .evolution import bisect_critical_amplitude, make_initial_data, run
from .fields import (compute_densities, energy, linf_chain, metric_identity_residual,
                     momentum_constraint_residual, read_slice, slice_energy, write_slice)
from .history import History
from .target import CONDITIONS, check_condition, get_target

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3


def _atomic_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# metrics


def history_metrics(hist: History, target) -> dict:
    """Summary metrics recomputable from the stored slices alone."""
    E = []
    metric_res = 0.0
    slice_bound_ok = True
    linf_ok = True
    for s in hist:
        d = compute_densities(s, target)
        led = energy(s, d)
        E.append(led.E_total)
        res, bounds = metric_identity_residual(s, led)
        metric_res = max(metric_res, float(np.max(np.abs(res))))
        slice_bound_ok &= bool(bounds["lower_ok"] and bounds["upper_ok"])
        lhs, rhs = linf_chain(s, target)
        linf_ok &= lhs <= rhs * (1 + 1e-12) + 1e-300
    E = np.array(E)
    E0 = float(E[0])
    # e^gamma <= (1 - alpha E0 / 2 pi)^{-1}: excess is max e^gamma (1 - alpha E0 / 2 pi) - 1
    e0_excess = float(np.max(np.exp(hist.gamma)) * (1.0 - hist.alpha * E0 / (2 * np.pi)) - 1.0)
    mom = 0.0
    for t in hist.times[1:-1]:
        mom = max(mom, float(np.max(np.abs(momentum_constraint_residual(hist, t)))))
    drift = float(np.max(np.abs(E - E0)) / E0) if E0 > 0 else 0.0
    return {"E0": E0, "drift": drift, "max_metric_residual": metric_res,
            "max_momentum_residual": mom, "slice_metric_bounds_ok": bool(slice_bound_ok),
            "gamma_min": float(np.min(hist.gamma)), "E0_bound_excess": e0_excess,
            "linf_chain_ok": bool(linf_ok), "n_slices": len(hist),
            "t_final": float(hist.times[-1])}


def x1_divergence_max(hist: History, target) -> float:
    from .vfm import Multiplier, divergence_fd
    X1 = Multiplier("X1")
    worst = 0.0
    for t in hist.times[1:-1]:
        worst = max(worst, float(np.nanmax(np.abs(divergence_fd(hist, X1, t, target)))))
    return worst


def load_history(run_dir) -> History:
    files = sorted(Path(run_dir, "slices").glob("slice_*.dat"))
    if not files:
        raise ConfigError(f"no slices found under {run_dir}")
    return History.from_slices([read_slice(f) for f in files])


def _run_dir(cfg: RunConfig, out) -> Path:
    base = Path(out) if out else Path(cfg.get("output", "dir") or "runs")
    return base / cfg.run_id()


# ---------------------------------------------------------------------------
# evolve


def cmd_evolve(cfg: RunConfig, out=None) -> dict:
    """Run one evolution and write slices, ledger, summary and manifest."""
    rdir = _run_dir(cfg, out)
    (rdir / "slices").mkdir(parents=True, exist_ok=True)
    config, spec = cfg.evolution_config(), cfg.initial_data()
    target = config.target
    manifest = {"run_id": cfg.run_id(), "config": cfg.canonical(),
                "paths": {"slices": "slices", "ledger": "ledger.csv", "summary": "summary.jsonl"}}
    try:
        hist, status = run(config, spec, raise_on_abort=False)
    except DeficitAngleExceeded as exc:
        manifest.update(status="deficit_exceeded", error=str(exc), metrics={})
        _atomic_json(rdir / "manifest.json", manifest)
        raise
    for old in (rdir / "slices").glob("slice_*.dat"):
        old.unlink()
    for j, s in enumerate(hist):
        write_slice(rdir / "slices" / f"slice_{j:05d}.dat", s)

    disk = load_history(rdir)
    metrics = history_metrics(disk, target)
    E0 = metrics["E0"]
    with open(rdir / "ledger.csv", "w", newline="") as fh, open(rdir / "summary.jsonl", "w") as js:
        w = csv.writer(fh)
        w.writerow(["t", "E_total", "rel_drift", "metric_residual_max", "gamma_max"])
        for s in disk:
            led = slice_energy(s, target)
            res, _ = metric_identity_residual(s, led)
            drift = (led.E_total - E0) / E0 if E0 > 0 else 0.0
            row = [s.t, led.E_total, drift, float(np.max(np.abs(res))), float(np.max(s.gamma))]
            w.writerow([f"{x:.15g}" for x in row])
            lhs, rhs = linf_chain(s, target)
            js.write(json.dumps(_jsonable({"t": s.t, "E_total": led.E_total, "rel_drift": drift,
                                           "metric_residual_max": row[3],
                                           "linf_lhs": lhs, "linf_rhs": rhs}), sort_keys=True) + "\n")
        js.write(json.dumps(_jsonable({"status": status.verdict, "t_stop": status.t_stop,
                                       **status.diagnostics}), sort_keys=True) + "\n")
    manifest.update(status=status.verdict, metrics=_jsonable(metrics),
                    verdict_diagnostics=_jsonable(status.diagnostics))
    _atomic_json(rdir / "manifest.json", manifest)
    manifest["run_dir"] = str(rdir)
    return manifest


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(run_dir, multipliers=("X1", "X3"), apex=None, lam=0.5, frame=True) -> dict:
    """Cone energies, fluxes, Stokes balances, null-frame bounds for a finished run."""
    from .errors import CharacteristicExitsGrid, ConeExitsGrid, FrameUnavailable
    from .nullgeom import (commutator_max, comparability, frame_bounds, integrate_frame,
                           metric_reconstruction, path_independence_residual)
    from .vfm import (Multiplier, ab_diagnostics, cone_energies, cone_trace, exterior_energy,
                      flux, kinetic_cone_integral, stokes_residual)

    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"unknown run: {run_dir} has no manifest.json")
    manifest = json.loads(mpath.read_text())
    cfg = RunConfig({**{s: {} for s in ("grid", "time", "matter", "target", "output")},
                     **manifest["config"]})
    target = cfg.target()
    hist = load_history(run_dir)
    t_apex = float(hist.times[-1]) if apex is None else float(apex)
    mults = [Multiplier(m) for m in multipliers]

    fr = None
    frame_report = {}
    if frame:
        try:
            fr = integrate_frame(hist, target, t_apex=t_apex)
        except (CharacteristicExitsGrid, FrameUnavailable, ValueError) as exc:
            frame_report["error"] = str(exc)
    cone = cone_trace(hist, t_apex, lam=lam, frame=fr)
    E_O = cone_energies(hist, cone, target)
    X1 = Multiplier("X1")
    rid = manifest["run_id"]
    records = []
    rows = []
    times = cone.times
    for i, t in enumerate(times):
        s_next = times[i + 1] if i + 1 < times.size else None
        fl = flux(hist, cone, X1, t, s_next, target) if s_next is not None else None
        led = slice_energy(hist.at(t), target)
        rows.append({"t": t, "E": led.E_total, "E_O": E_O[i], "flux_X1": fl,
                     "E_ext": exterior_energy(hist, cone, t, target) if s_next is not None else 0.0,
                     "kinetic": kinetic_cone_integral(hist, cone, t, target) if s_next is not None else 0.0})
        if s_next is None:
            continue
        for X in mults:
            rep = stokes_residual(hist, cone, X, t, s_next, target)
            records.append({"run_id": rid, "multiplier": X.name, "tau": t, "s": s_next,
                            "bulk": rep.bulk, "slice_tau": rep.slice_tau, "slice_s": rep.slice_s,
                            "flux": rep.flux, "residual": rep.residual})
    for X in mults:
        rep = stokes_residual(hist, cone, X, times[0], times[-1], target)
        records.append({"run_id": rid, "multiplier": X.name, "tau": times[0], "s": times[-1],
                        "bulk": rep.bulk, "slice_tau": rep.slice_tau, "slice_s": rep.slice_s,
                        "flux": rep.flux, "residual": rep.residual})
    if fr is not None:
        ab = ab_diagnostics(hist, fr, target)
        frame_report.update(bounds=frame_bounds(fr, hist, target),
                            comparability=comparability(fr, hist),
                            path_gap=path_independence_residual(fr, hist),
                            commutator_max=commutator_max(fr, hist),
                            reconstruction=metric_reconstruction(fr, hist),
                            ab=ab.report, ab_checks=ab.check())

    ddir = run_dir / "diagnose"
    ddir.mkdir(exist_ok=True)
    with open(ddir / "stokes.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    cols = ["t", "E", "E_O", "flux_X1", "E_ext", "kinetic"]
    with open(ddir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if row[c] is None else f"{row[c]:.15g}" for c in cols])
    _atomic_json(ddir / "frame.json", _jsonable(frame_report))
    (ddir / "plot.gp").write_text(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n"
        "plot 'table.csv' using 1:3 with lines, '' using 1:5 with lines, '' using 1:4 with points\n")
    return {"rows": rows, "records": records, "frame": frame_report, "dir": str(ddir)}


# ---------------------------------------------------------------------------
# convergence


def _level_metrics(args):
    cfg, n = args
    lvl = cfg.with_cells(n)
    config, spec = lvl.evolution_config(), lvl.initial_data()
    hist, _ = run(config, spec)
    m = history_metrics(hist, config.target)
    return {"n": n, "drift": m["drift"], "momentum_residual": m["max_momentum_residual"],
            "x1_divergence": x1_divergence_max(hist, config.target), "E0": m["E0"]}


def observed_orders(values, floor: float = 1e-300):
    """log2 ratios of successive errors; None where undefined (zero or non-finite)."""
    out = []
    for a, b in zip(values[:-1], values[1:]):
        if a is None or b is None or not (a > floor and b > floor):
            out.append(None)
        else:
            out.append(math.log2(a / b))
    return out


def cmd_convergence(cfg: RunConfig, levels: int = 3, workers: int = 1) -> dict:
    if levels < 2:
        raise ConfigError("need at least two levels")
    n0 = cfg.n_cells
    ns = [n0 * 2**i for i in range(levels)]
    jobs = [(cfg, n) for n in ns]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_level_metrics, jobs))
    else:
        rows = [_level_metrics(j) for j in jobs]
    orders = {key: observed_orders([r[key] for r in rows])
              for key in ("drift", "momentum_residual", "x1_divergence")}
    return {"levels": rows, "orders": orders}


# ---------------------------------------------------------------------------
# argparse


def _fmt_order(x):
    return "n/a" if x is None else f"{x:.2f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgwavemap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="INI run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override section.key=value (repeatable)")
        sp.add_argument("--out", default=None, help="output base directory")

    sp = sub.add_parser("evolve", help="run one evolution")
    common(sp)
    sp = sub.add_parser("diagnose", help="diagnostics for a finished run")
    sp.add_argument("run", help="run directory (or run id with --out)")
    sp.add_argument("--out", default=None)
    sp.add_argument("--multipliers", default="X1,X3")
    sp.add_argument("--apex", type=float, default=None)
    sp.add_argument("--lam", type=float, default=0.5)
    sp.add_argument("--no-frame", action="store_true")
    sp = sub.add_parser("convergence", help="observed orders at n, 2n, 4n")
    common(sp)
    sp.add_argument("--levels", type=int, default=3)
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("bisect", help="bracket the critical amplitude")
    common(sp)
    sp.add_argument("--low", type=float, required=True)
    sp.add_argument("--high", type=float, required=True)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("check-target", help="admissibility conditions of a target")
    common(sp, needs_config=False)
    sp.add_argument("--target", default=None, help="target name (overrides the config)")
    sp.add_argument("--coefficients", default=None, help="odd polynomial coefficients")
    sp.add_argument("--u-max", type=float, default=10.0)
    sp.add_argument("--samples", type=int, default=1000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "evolve":
            cfg = load_config(args.config, args.set)
            man = cmd_evolve(cfg, args.out)
            m = man["metrics"]
            print(f"run {man['run_id']}: status={man['status']} E0={m['E0']:.6g} "
                  f"drift={m['drift']:.3g} dir={man['run_dir']}")
        elif args.command == "diagnose":
            run_dir = Path(args.run)
            if not run_dir.exists() and args.out:
                run_dir = Path(args.out) / args.run
            res = cmd_diagnose(run_dir, [m.strip() for m in args.multipliers.split(",") if m.strip()],
                               args.apex, args.lam, frame=not args.no_frame)
            print(f"diagnostics written to {res['dir']}")
        elif args.command == "convergence":
            cfg = load_config(args.config, args.set)
            res = cmd_convergence(cfg, args.levels, args.workers)
            print("n drift momentum_residual x1_divergence")
            for row in res["levels"]:
                print(f"{row['n']} {row['drift']:.3e} {row['momentum_residual']:.3e} "
                      f"{row['x1_divergence']:.3e}")
            for key, vals in res["orders"].items():
                print(f"order {key}: " + " ".join(_fmt_order(v) for v in vals))
            if args.out:
                _atomic_json(Path(args.out) / f"convergence_{cfg.run_id()}.json", _jsonable(res))
        elif args.command == "bisect":
            cfg = load_config(args.config, args.set)
            lo, hi, recs = bisect_critical_amplitude(cfg.initial_data(), args.low, args.high,
                                                     cfg.evolution_config(), args.tol,
                                                     workers=args.workers)
            out = {"A_low": lo, "A_high": hi,
                   "probes": [{"amplitude": a, "verdict": st.verdict, "t_stop": st.t_stop}
                              for a, st in recs]}
            print(json.dumps(_jsonable(out), indent=2))
            if args.out:
                _atomic_json(Path(args.out) / f"bisect_{cfg.run_id()}.json", _jsonable(out))
        elif args.command == "check-target":
            if args.target:
                c = None
                if args.coefficients:
                    c = [float(x) for x in args.coefficients.replace(",", " ").split()]
                try:
                    target = get_target(args.target, c)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
            elif args.config:
                target = load_config(args.config, args.set).target()
            else:
                raise ConfigError("check-target needs --target or --config")
            reports = {}
            for cond in CONDITIONS:
                rep = check_condition(target, cond, args.u_max, args.samples)
                reports[cond] = {"verdict": rep.verdict, "witness_u": rep.witness_u,
                                 "witness_value": rep.witness_value, **rep.metadata}
            print(json.dumps(_jsonable({"target": target.name, "conditions": reports}), indent=2))
    except BracketInvalid as exc:
        print(f"error: {exc} (low: {exc.low_verdict}, high: {exc.high_verdict})", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
