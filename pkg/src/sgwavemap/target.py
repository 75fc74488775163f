"""Rotationally symmetric target surfaces described by their generating function f.

The target metric is d rho^2 + f(rho)^2 d phi^2.  Every target carries the
cubic remainder h(u) = (f f_u - u) / u^3 so that the wave-map source
f f_u / r^2 can be written without cancellation near the axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Optional

import numpy as np

SERIES_CUTOFF = 0.1
FFU_CUTOFF = 1e-3
CONDITIONS = ("geodesic_convexity", "grillakis", "sphere_at_infinity")


def _even_series(u, coeffs):
    """Evaluate sum_j coeffs[j] * u^(2j) by Horner's rule in u^2."""
    u2 = u * u
    out = np.zeros_like(u2) + coeffs[-1]
    for c in coeffs[-2::-1]:
        out = out * u2 + c
    return out


def _series_or_direct(series_coeffs, f, f_u):
    def h(u):
        u = np.asarray(u, dtype=float)
        small = np.abs(u) < SERIES_CUTOFF
        safe = np.where(small, 1.0, u)
        direct = (f(safe) * f_u(safe) - safe) / safe**3
        return np.where(small, _even_series(u, series_coeffs), direct)

    return h


@dataclass(frozen=True)
class TargetManifold:
    name: str
    f: Callable
    f_u: Callable
    cubic_remainder: Callable
    wp: Callable
    coefficients: Optional[tuple] = None

    def eval(self, u):
        return eval_target(self, u)

    def __reduce__(self):
        # built-in and polynomial targets are rebuilt by name so they can
        # cross process boundaries despite holding closures
        if self.name in BUILTINS or self.name == "polynomial":
            return get_target, (self.name, self.coefficients)
        return super().__reduce__()


def eval_target(target: TargetManifold, u):
    """Return (f, f_u, f*f_u, wp) at u (scalar or array)."""
    scalar = np.ndim(u) == 0
    u = np.asarray(u, dtype=float)
    f = target.f(u)
    fu = target.f_u(u)
    small = np.abs(u) < FFU_CUTOFF
    ffu = np.where(small, u + u**3 * target.cubic_remainder(u), f * fu)
    wp = target.wp(u)
    if scalar:
        return float(f), float(fu), float(ffu), float(wp)
    return f, fu, ffu, wp


# Taylor coefficients of h in powers of u^2 (16 terms is far beyond double
# precision for |u| < 0.1).
_NTERMS = 16
_SPHERE_H = [(-1) ** j * 4.0**j / factorial(2 * j + 1) for j in range(1, _NTERMS + 1)]
_HYPER_H = [4.0**j / factorial(2 * j + 1) for j in range(1, _NTERMS + 1)]


def flat() -> TargetManifold:
    return TargetManifold(
        name="flat",
        f=lambda u: np.asarray(u, dtype=float) * 1.0,
        f_u=lambda u: np.ones_like(np.asarray(u, dtype=float)),
        cubic_remainder=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
        wp=lambda u: 0.5 * np.asarray(u, dtype=float) ** 2,
    )


def sphere() -> TargetManifold:
    return TargetManifold(
        name="sphere",
        f=np.sin,
        f_u=np.cos,
        cubic_remainder=_series_or_direct(_SPHERE_H, np.sin, np.cos),
        wp=lambda u: 2.0 * np.sin(0.5 * np.asarray(u, dtype=float)) ** 2,
    )


def hyperbolic() -> TargetManifold:
    return TargetManifold(
        name="hyperbolic",
        f=np.sinh,
        f_u=np.cosh,
        cubic_remainder=_series_or_direct(_HYPER_H, np.sinh, np.cosh),
        wp=lambda u: 2.0 * np.sinh(0.5 * np.asarray(u, dtype=float)) ** 2,
    )


def odd_polynomial(coefficients) -> TargetManifold:
    """f(u) = sum_j c_j u^(2j+1) with c_0 = 1.

    The cubic remainder is obtained by exact polynomial division.
    """
    c = [float(x) for x in coefficients]
    if not c or abs(c[0] - 1.0) > 1e-12:
        raise ValueError("odd polynomial target needs leading coefficient c_0 = 1")
    full = np.zeros(2 * len(c))
    full[1::2] = c
    P = np.polynomial.Polynomial(full)
    dP = P.deriv()
    rem = P * dP - np.polynomial.Polynomial([0.0, 1.0])
    hcoef = rem.coef[3:] if len(rem.coef) > 3 else np.zeros(1)
    H = np.polynomial.Polynomial(hcoef)
    W = P.integ()

    def _wrap(poly):
        return lambda u: poly(np.asarray(u, dtype=float))

    return TargetManifold(
        name="polynomial",
        f=_wrap(P),
        f_u=_wrap(dP),
        cubic_remainder=_wrap(H),
        wp=_wrap(W),
        coefficients=tuple(c),
    )


BUILTINS = {"flat": flat, "sphere": sphere, "hyperbolic": hyperbolic}


def get_target(name: str, coefficients=None) -> TargetManifold:
    if name == "polynomial":
        if coefficients is None:
            raise ValueError("polynomial target requires coefficients")
        return odd_polynomial(coefficients)
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ValueError(f"unknown target {name!r}; expected one of "
                         f"{sorted(BUILTINS) + ['polynomial']}") from None


@dataclass
class ConditionReport:
    condition: str
    verdict: str  # satisfied | violated | inconclusive
    witness_u: Optional[float]
    witness_value: Optional[float]
    u_range: tuple
    n_samples: int
    metadata: dict = field(default_factory=dict)


def condition_expression(target: TargetManifold, condition: str, u):
    f, _, ffu, wp = eval_target(target, u)
    if condition == "geodesic_convexity":
        return ffu
    if condition == "grillakis":
        return ffu * u + f * f
    if condition == "sphere_at_infinity":
        return wp
    raise ValueError(f"unknown condition {condition!r}")


def check_condition(target: TargetManifold, condition: str, u_max: float,
                    n_samples: int = 1000, divergence_floor: float = 10.0,
                    ) -> ConditionReport:
    """Sample a target admissibility condition on (0, u_max]."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if not u_max > 0:
        raise ValueError("u_max must be positive")
    if n_samples < 16:
        raise ValueError("n_samples must be at least 16")
    u = np.linspace(u_max / n_samples, u_max, n_samples)
    vals = condition_expression(target, condition, u)
    rng = (float(u[0]), float(u_max))

    if condition != "sphere_at_infinity":
        bad = np.flatnonzero(vals <= 0.0)
        if bad.size:
            i = bad[0]
            return ConditionReport(condition, "violated", float(u[i]), float(vals[i]),
                                   rng, n_samples)
        return ConditionReport(condition, "satisfied", None, None, rng, n_samples)

    tail = vals[-max(n_samples // 10, 2):]
    increasing = bool(np.all(np.diff(tail) > 0))
    meta = {"heuristic": True, "divergence_floor": divergence_floor,
            "wp_at_u_max": float(vals[-1])}
    if increasing and vals[-1] > divergence_floor:
        return ConditionReport(condition, "satisfied", None, None, rng, n_samples, meta)
    if not increasing:
        i = int(np.argmax(vals))
        return ConditionReport(condition, "violated", float(u[i]), float(vals[i]),
                               rng, n_samples, meta)
    return ConditionReport(condition, "inconclusive", None, None, rng, n_samples, meta)
