import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgwavemap.target import (CONDITIONS, FFU_CUTOFF, check_condition, condition_expression,
                              eval_target, flat, get_target, hyperbolic, odd_polynomial, sphere)

BUILTINS = [flat, sphere, hyperbolic]


def test_eval_flat_at_two():
    assert eval_target(flat(), 2.0) == (2.0, 1.0, 2.0, 2.0)


def test_eval_sphere_at_origin():
    assert eval_target(sphere(), 0.0) == (0.0, 1.0, 0.0, 0.0)


def test_eval_sphere_at_three_matches_closed_form():
    f, fu, ffu, wp = eval_target(sphere(), 3.0)
    assert f == pytest.approx(np.sin(3.0), rel=1e-14)
    assert fu == pytest.approx(np.cos(3.0), rel=1e-14)
    assert ffu == pytest.approx(np.sin(3.0) * np.cos(3.0), rel=1e-14)
    assert wp == pytest.approx(1.0 - np.cos(3.0), rel=1e-14)


@pytest.mark.parametrize("make", BUILTINS)
def test_normalization_at_origin(make):
    T = make()
    assert abs(T.f(np.array(0.0))) <= 1e-12
    assert abs(T.f_u(np.array(0.0)) - 1.0) <= 1e-12


@pytest.mark.parametrize("make", BUILTINS)
def test_oddness_on_symmetric_samples(make):
    T = make()
    u = np.linspace(-4.0, 4.0, 1001)
    f, fu, _, wp = eval_target(T, u)
    fm, fum, _, wpm = eval_target(T, -u)
    np.testing.assert_allclose(fm, -f, rtol=0, atol=1e-13 * np.max(np.abs(f)))
    np.testing.assert_allclose(fum, fu, rtol=1e-14)
    np.testing.assert_allclose(wpm, wp, rtol=1e-14)


@pytest.mark.parametrize("make", BUILTINS)
def test_cubic_remainder_matches_direct_division(make):
    T = make()
    u = np.concatenate([np.linspace(1e-3, 3.0, 500), -np.linspace(1e-3, 3.0, 500)])
    direct = (T.f(u) * T.f_u(u) - u) / u**3
    h = T.cubic_remainder(u)
    scale = np.maximum(np.abs(direct), 1e-300)
    if np.all(direct == 0):
        assert np.all(h == 0)
    else:
        assert np.max(np.abs(h - direct) / scale) < 1e-8


@pytest.mark.parametrize("make", BUILTINS)
def test_ffu_paths_agree_at_crossover(make):
    T = make()
    u = np.array([FFU_CUTOFF * (1 - 1e-12), FFU_CUTOFF])
    _, _, ffu, _ = eval_target(T, u)
    regular = u + u**3 * T.cubic_remainder(u)
    direct = T.f(u) * T.f_u(u)
    np.testing.assert_allclose(ffu, [regular[0], direct[1]], rtol=0)
    assert abs(regular[1] - direct[1]) <= 1e-10 * abs(direct[1])


def test_ffu_small_u_has_no_cancellation():
    # f f_u - u = -2u^3/3 + ... for the sphere; the regularized path keeps it
    u = np.array([1e-6, 1e-3 / 2])
    h = sphere().cubic_remainder(u)
    np.testing.assert_allclose(h, -2.0 / 3.0 + 2.0 * u**2 / 15.0, rtol=1e-12)
    _, _, ffu, _ = eval_target(sphere(), u)
    np.testing.assert_array_equal(ffu, u + u**3 * h)


def test_grillakis_flat_satisfied():
    rep = check_condition(flat(), "grillakis", 10.0, 1000)
    assert rep.verdict == "satisfied"
    u = np.linspace(0.01, 10, 50)
    np.testing.assert_allclose(condition_expression(flat(), "grillakis", u), 2 * u**2)


def test_geodesic_convexity_hyperbolic_satisfied():
    assert check_condition(hyperbolic(), "geodesic_convexity", 10.0, 1000).verdict == "satisfied"


def test_grillakis_sphere_violated_with_witness():
    rep = check_condition(sphere(), "grillakis", np.pi, 1000)
    assert rep.verdict == "violated"
    assert np.pi / 2 < rep.witness_u < np.pi
    assert rep.witness_value < 0
    # first violation: u tan u = -1 has its root near 2.0288
    assert rep.witness_u == pytest.approx(2.0288, abs=np.pi / 1000 + 1e-4)
    at3 = condition_expression(sphere(), "grillakis", 3.0)
    assert at3 == pytest.approx(3 * np.sin(3) * np.cos(3) + np.sin(3) ** 2, rel=1e-14)
    assert at3 == pytest.approx(-0.399, abs=5e-4)


@pytest.mark.parametrize("make", BUILTINS)
def test_convexity_implies_grillakis(make):
    T = make()
    for u_max in (1.0, np.pi, 10.0):
        conv = check_condition(T, "geodesic_convexity", u_max, 2000)
        gr = check_condition(T, "grillakis", u_max, 2000)
        if conv.verdict == "satisfied":
            assert gr.verdict == "satisfied"


def test_grillakis_does_not_imply_convexity():
    # f = u - u^3 / 10: f f_u turns negative before u f f_u + f^2 does
    T = odd_polynomial([1.0, -0.1])
    u_max = 1.9
    assert check_condition(T, "grillakis", u_max, 2000).verdict == "satisfied"
    assert check_condition(T, "geodesic_convexity", u_max, 2000).verdict == "violated"


def test_sphere_at_infinity_verdicts():
    hyp = check_condition(hyperbolic(), "sphere_at_infinity", 10.0, 1000)
    assert hyp.verdict == "satisfied" and hyp.metadata["heuristic"]
    sph = check_condition(sphere(), "sphere_at_infinity", 10.0, 1000)
    assert sph.verdict == "violated"
    assert sph.witness_value <= 2.0 + 1e-12  # wp = 1 - cos u stays bounded
    assert check_condition(flat(), "sphere_at_infinity", 10.0, 1000).verdict == "satisfied"
    short = check_condition(sphere(), "sphere_at_infinity", 3.0, 1000)
    assert short.verdict == "inconclusive"


@pytest.mark.parametrize("cond", CONDITIONS[:2])
@pytest.mark.parametrize("make", BUILTINS)
def test_violation_witness_is_negative(make, cond):
    rep = check_condition(make(), cond, 10.0, 500)
    if rep.verdict == "violated":
        assert rep.witness_value <= 0
        assert condition_expression(make(), cond, rep.witness_u) == pytest.approx(rep.witness_value)


def test_check_condition_validation():
    with pytest.raises(ValueError):
        check_condition(flat(), "grillakis", 0.0, 100)
    with pytest.raises(ValueError):
        check_condition(flat(), "grillakis", 1.0, 8)
    with pytest.raises(ValueError):
        check_condition(flat(), "convexity", 1.0, 100)


def test_get_target_errors():
    with pytest.raises(ValueError):
        get_target("torus")
    with pytest.raises(ValueError):
        get_target("polynomial")
    with pytest.raises(ValueError):
        odd_polynomial([2.0, 1.0])


def test_targets_pickle_by_name():
    for T in (flat(), sphere(), hyperbolic(), odd_polynomial([1.0, 0.5])):
        T2 = pickle.loads(pickle.dumps(T))
        u = np.linspace(-2, 2, 11)
        for a, b in zip(eval_target(T, u), eval_target(T2, u)):
            np.testing.assert_array_equal(a, b)


coeff = st.floats(-0.5, 0.5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(coeff, min_size=0, max_size=3))
def test_polynomial_target_invariants(tail):
    T = odd_polynomial([1.0] + tail)
    u = np.linspace(-1.5, 1.5, 301)
    f, fu, ffu, wp = eval_target(T, u)
    np.testing.assert_allclose(eval_target(T, -u)[0], -f, atol=1e-13)
    assert abs(T.f(np.array(0.0))) == 0 and T.f_u(np.array(0.0)) == 1.0
    big = np.abs(u) >= 1e-3
    lhs = u[big] + u[big] ** 3 * T.cubic_remainder(u[big])
    np.testing.assert_allclose(lhs, f[big] * fu[big], rtol=1e-10, atol=1e-13)
    # wp' = f, checked by a centered difference
    h = 1e-5
    d = (T.wp(u + h) - T.wp(u - h)) / (2 * h)
    np.testing.assert_allclose(d, f, atol=1e-8)
