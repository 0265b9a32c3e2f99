import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, optimize, special

from sdeerr import functionals as F
from sdeerr.functionals import Atom, FunctionalRep, Jump

GRID = np.concatenate([-np.geomspace(1e-3, 1e3, 200)[::-1], [0.0], np.geomspace(1e-3, 1e3, 200)])


def normal_abs_moment_norm(p):
    return (2 ** (p / 2) * special.gamma((p + 1) / 2) / math.sqrt(math.pi)) ** (1 / p)


def all_bumps():
    return [
        F.exp_abs(), F.exp_abs(3.0), F.power(8), F.gaussian(2.0),
        F.chebyshev_bump(lambda p: 1.0, 0.5),
        F.chebyshev_bump(normal_abs_moment_norm, 0.3),
        F.euler_tail_bump("BoundedCoeffs", 0.5, 1.0, 0.0, 1.0),
        F.euler_tail_bump("BoundedCoeffs", 0.2, 2.0, -1.0, 0.5),
        F.euler_tail_bump("LipschitzCoeffs", 0.5, 1.0),
        F.envelope(F.exp_abs(), F.gaussian(3.0)),
    ]


# ------------------------------------------------------------------ bumps

@pytest.mark.parametrize("phi", all_bumps(), ids=lambda b: b.name)
def test_bump_invariants(phi):
    F.check_bump(phi)
    vals = phi(GRID)
    assert np.all((vals > 0) & (vals <= 1))


def test_check_bump_rejects_non_bumps():
    grows = F.BumpFunction(F.Construction.EXPLICIT, {}, lambda z: 0.0 * z, None, "flat")
    with pytest.raises(F.FunctionalError):
        F.check_bump(grows)
    bimodal = F.BumpFunction(F.Construction.EXPLICIT, {},
                             lambda z: -np.abs(np.abs(z) - 2.0), None, "bimodal")
    with pytest.raises(F.FunctionalError):
        F.check_bump(bimodal)


@pytest.mark.parametrize("lam", [1.5, 2.0, 10.0, 100.0])
def test_chebyshev_unit_norms_reduce_to_floor(lam):
    phi = F.chebyshev_bump(lambda p: 1.0, 0.5)
    assert phi(lam) == pytest.approx(math.exp(-lam), rel=1e-12)
    assert phi(-lam) == pytest.approx(math.exp(-lam), rel=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, -1.0])
def test_chebyshev_capped_at_one(lam):
    assert F.chebyshev_bump(lambda p: 1.0, 0.5)(lam) == 1.0


def test_chebyshev_standard_normal_against_continuous_minimization():
    theta, z = 0.5, 3.0
    phi = F.chebyshev_bump(normal_abs_moment_norm, theta, floor=F.exp_abs(50.0))
    probe = np.geomspace(1.0, 64.0, 49)
    probe_min = min((normal_abs_moment_norm(p) / z) ** (theta * p) for p in probe)
    res = optimize.minimize_scalar(
        lambda p: theta * p * (math.log(normal_abs_moment_norm(p)) - math.log(z)),
        bounds=(1.0, 64.0), method="bounded", options={"xatol": 1e-10})
    exact = math.exp(res.fun)
    assert phi(z) == pytest.approx(probe_min, rel=1e-10)
    # the finite probe grid can only over-estimate the infimum
    assert phi(z) >= exact * (1 - 1e-9)
    assert phi(z) <= exact * 1.05


def test_euler_tail_bounded_formula():
    phi = F.euler_tail_bump("BoundedCoeffs", 0.5, 1.0, 0.0, 1.0)
    assert phi(3.0) == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert phi(0.5) == 1.0 and phi(-0.9) == 1.0
    assert phi(-3.0) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_euler_tail_lipschitz_plateau_and_monotone():
    M = 1.0
    phi = F.euler_tail_bump("LipschitzCoeffs", 0.5, M)
    z0 = math.exp(3 * M)
    assert phi(z0 * 0.99) == 1.0
    z = np.geomspace(z0, 1e12, 500)
    vals = phi(z)
    assert np.all(np.diff(vals) <= 0)
    expected = z[-1] ** (-(2 * 0.5 / (3 * math.sqrt(3 * M))) * math.sqrt(math.log(z[-1])))
    assert vals[-1] == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("args", [("BoundedCoeffs", 1.0, 1.0), ("BoundedCoeffs", 0.5, -1.0),
                                  ("LipschitzCoeffs", 0.0, 1.0), ("Nope", 0.5, 1.0)])
def test_euler_tail_rejects_bad_parameters(args):
    with pytest.raises((F.FunctionalError, ValueError)):
        F.euler_tail_bump(*args)


@pytest.mark.parametrize("phi", all_bumps(), ids=lambda b: b.name)
def test_bump_json_round_trip(phi):
    back = F.bump_from_json(json.loads(json.dumps(phi.to_json())))
    np.testing.assert_allclose(back(GRID), phi(GRID), rtol=1e-14)
    assert back == phi


# ------------------------------------------------------------------ evaluation

def test_indicator_values_at_jump():
    g = F.indicator(1.0)
    assert F.evaluate(g, 0.999) == 0.0
    assert F.evaluate(g, 1.0) == 1.0


@pytest.mark.parametrize("shape, at_k, left, right", [
    ("[K,inf)", 1.0, 0.0, 1.0), ("(K,inf)", 0.0, 0.0, 1.0),
    ("(-inf,K)", 0.0, 1.0, 0.0), ("(-inf,K]", 1.0, 1.0, 0.0)])
@pytest.mark.parametrize("K", [-2.0, 0.0, 1.5])
def test_indicator_shapes(shape, at_k, left, right, K):
    g = F.indicator(K, shape)
    assert F.evaluate(g, K) == at_k
    assert F.evaluate(g, K - 1e-9) == left
    assert F.evaluate(g, K + 1e-9) == right


def test_g_rep_of_indicator_matches_direct_on_dense_grid():
    g = F.indicator(1.0)
    x = np.linspace(0.0, 2.0, 1001)
    np.testing.assert_array_equal(g(x), (x >= 1.0).astype(float))


def test_constant_rep():
    g = FunctionalRep(7.0)
    assert F.evaluate(g, -3.0) == 7.0 == F.evaluate(g, 1e9)


def test_polynomial_reconstruction():
    g = F.from_polynomial([0.0, 0.0, 1.0], F.exp_abs())
    assert F.evaluate(g, 3.0) == pytest.approx(9.0, abs=1e-6)
    assert F.evaluate(g, -2.5) == pytest.approx(6.25, abs=1e-6)
    lin = F.from_polynomial([0.0, 1.0], F.exp_abs())
    assert F.evaluate(lin, 2.0) == pytest.approx(2.0, abs=1e-9)


def test_constant_polynomial():
    g = F.from_polynomial([5.0], F.exp_abs())
    assert g.constant_c == 5.0 and g.densities == () and g.atoms == ()


def test_evaluate_quadrature_path_matches_closed_form():
    coeffs = [1.0, -2.0, 0.5, 0.25]
    g = F.from_polynomial(coeffs, F.exp_abs())
    no_cum = replace(g, densities=tuple(replace(d, cumulative=None) for d in g.densities))
    x = np.linspace(-4, 4, 33)
    direct = np.polynomial.Polynomial(coeffs)(x)
    np.testing.assert_allclose(no_cum(x), direct, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose([F.evaluate(no_cum, v) for v in x], direct, rtol=1e-9, atol=1e-9)


def test_evaluate_reports_quadrature_failure():
    dens = F.Density(func=lambda z: np.sin(1.0 / np.maximum(np.abs(z), 1e-300)) / np.abs(z) ** 1.5,
                     name="wild")
    g = FunctionalRep(0.0, densities=(dens,))
    with pytest.raises(F.QuadratureError, match="achieved error estimate"):
        F.evaluate(g, 1.0)


def test_step_plus_ramp_by_hand():
    ramp = F.Density(func=lambda z: np.where((np.asarray(z) >= 0) & (np.asarray(z) <= 2), 0.5, 0.0),
                     support=(0.0, 2.0), name="ramp'")
    g = F.from_bv([(1.0, 2.0), (-1.0, -0.5, "left")], density=ramp, c=3.0, bump=F.exp_abs())
    # g = 3 + 2 [x >= 1] - 0.5 [x > -1] + clamp(x, 0, 2) / 2
    hand = {-2.0: 3.0, -1.0: 3.0, 0.5: 2.75, 1.0: 5.0, 3.0: 5.5}
    for x, want in hand.items():
        assert F.evaluate(g, x) == pytest.approx(want, abs=1e-9), x


# ------------------------------------------------------------------ variations

def test_total_variation_closed_forms():
    assert F.total_variation(F.indicator(1.0)) == pytest.approx(1.0)
    assert F.total_variation(F.arctan()) == pytest.approx(math.pi, rel=1e-9)
    assert F.total_variation(F.staircase()) == pytest.approx(0.875)


def test_total_variation_needs_bv_tag():
    with pytest.raises(F.FunctionalError):
        F.total_variation(F.from_polynomial([0.0, 1.0], F.exp_abs()))


def test_v_identity_exp_abs_is_two():
    g = F.from_polynomial([0.0, 1.0], F.exp_abs())
    assert F.p_phi_variation(g, 1) == pytest.approx(2.0, rel=1e-9)


@pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
def test_v_pure_jump(p):
    phi = F.exp_abs()
    a, lam = 0.7, -1.3
    g = FunctionalRep(0.0, jumps=(Jump(a, lam * phi(a)),), bump=phi)
    assert F.p_phi_variation(g, p) == pytest.approx(abs(lam) * phi(a) ** (1 + 1 / p), rel=1e-12)


def test_v_square_with_power_bump():
    phi = F.power(8)
    g = F.from_polynomial([0.0, 0.0, 1.0], phi, p=2, assume_decay=True)
    # int (1+|z|)^-4 2|z| dz = 4 B(2, 2) = 2/3
    oracle, _ = integrate.quad(lambda z: 4 * z * (1 + z) ** -4.0, 0, np.inf, epsabs=1e-14)
    assert oracle == pytest.approx(2 / 3, rel=1e-12)
    assert F.p_phi_variation(g, 2) == pytest.approx(2 / 3, abs=1e-6)


def test_polynomial_decay_check_rejects_power_bump():
    with pytest.raises(F.FunctionalError):
        F.from_polynomial([0.0, 0.0, 1.0], F.power(8))


def test_cubic_variation_finite():
    g = F.from_polynomial([0.0, -1.0, 0.0, 1.0], F.exp_abs())
    r = 1 / math.sqrt(3)
    f = lambda z: math.exp(-z) * abs(3 * z * z - 1)  # noqa: E731
    oracle = 2 * (integrate.quad(f, 0, r)[0] + integrate.quad(f, r, np.inf)[0])
    assert F.p_phi_variation(g, 1) == pytest.approx(oracle, rel=1e-8)


def test_divergent_variation_names_membership():
    g = F.from_polynomial([0.0, 0.0, 1.0], F.power(1), assume_decay=True)
    with pytest.raises(F.MembershipError, match="L_"):
        F.p_phi_variation(g, 1)


def test_jump_sum_dominated_by_total_variation():
    g = F.staircase()
    for p in (1.0, 2.0, 5.0):
        s = sum(abs(w) * g.bump(a) ** (1 + 1 / p) for a, w in g.mu_atoms())
        assert s <= F.p_phi_variation(g, p) * (1 + 1e-12)
        assert F.p_phi_variation(g, p) <= F.total_variation(g) + 1e-12


def lemma_pairs():
    cheb_norms = lambda p: 1.5 * normal_abs_moment_norm(p)  # noqa: E731
    return [
        (F.exp_abs(2.0), F.exp_abs(1.0)),
        (F.exp_abs(1.0), F.envelope(F.exp_abs(1.0), F.gaussian(3.0))),
        (F.gaussian(1.0), F.gaussian(2.0)),
        (F.euler_tail_bump("BoundedCoeffs", 0.8, 1.0), F.euler_tail_bump("BoundedCoeffs", 0.3, 1.0)),
        (F.chebyshev_bump(cheb_norms, 0.6), F.chebyshev_bump(cheb_norms, 0.3)),
        (F.exp_abs(1.5), F.chebyshev_bump(cheb_norms, 0.5, floor=F.exp_abs(1.5))),
    ]


def lemma_functionals():
    return [F.from_polynomial([0.0, 1.0], F.exp_abs()), F.from_polynomial([1.0, 0.0, -2.0],
            F.exp_abs()), F.staircase(), F.arctan(), F.indicator(0.5)]


@pytest.mark.parametrize("i", range(10))
def test_lemma_ordering(i):
    pairs, gs = lemma_pairs(), lemma_functionals()
    phi, psi = pairs[i % len(pairs)]
    g = F.rebump(gs[i % len(gs)], psi)
    assert np.all(phi(GRID) <= psi(GRID) * (1 + 1e-12))
    for p in (1.0, 2.0):
        assert F.p_phi_variation(g, p, bump=phi) <= F.p_phi_variation(g, p) * (1 + 1e-9)


def test_rebump_preserves_values():
    g = F.staircase()
    h = F.rebump(g, F.gaussian(0.5))
    x = np.linspace(-1, 3, 41)
    np.testing.assert_array_equal(g(x), h(x))
    # the measure weights change by the bump ratio
    for (a, w_g), (_, w_h) in zip(g.mu_atoms(), h.mu_atoms()):
        assert w_h == pytest.approx(w_g * g.bump(a) / h.bump(a))


# ------------------------------------------------------------------ exponential growth

SQRT_HALF = math.sqrt(0.5)   # 2 M^2 T = 1: the threshold is theta / p


@pytest.mark.parametrize("theta, p", [(0.5, 1.0), (0.5, 2.0), (0.8, 1.0)])
def test_membership_boundary(theta, p):
    phi = F.euler_tail_bump("BoundedCoeffs", theta, SQRT_HALF, 0.0, 1.0)
    at = F.exp_growth_membership(theta / p, 2.0, theta, p, phi)
    assert not at.member and at.v_p_phi is None
    above = F.exp_growth_membership(1.2 * theta / p, 2.0, theta, p, phi)
    assert not above.member
    half = F.exp_growth_membership(theta / (2 * p), 2.0, theta, p, phi)
    assert half.member and math.isfinite(half.v_p_phi) and half.v_p_phi > 0


@pytest.mark.parametrize("c", [0.1, 1.0, 3.0])
def test_gamma_below_two_always_member(c):
    phi = F.euler_tail_bump("BoundedCoeffs", 0.5, 1.0, 0.0, 1.0)
    m = F.exp_growth_membership(c, 1.0, 0.5, 1.0, phi)
    assert m.member and math.isfinite(m.v_p_phi)


def test_membership_value_matches_independent_quadrature():
    theta, p, c = 0.5, 1.0, 0.25
    phi = F.euler_tail_bump("BoundedCoeffs", theta, SQRT_HALF, 0.0, 1.0)
    m = F.exp_growth_membership(c, 2.0, theta, p, phi)
    f = lambda z: 2 * c * z * math.exp(float(phi.log(z)) / p + c * z * z)  # noqa: E731
    oracle = 2 * sum(integrate.quad(f, a, b, limit=200)[0]
                     for a, b in [(0, 1), (1, 10), (10, 60)])
    assert m.v_p_phi == pytest.approx(oracle, rel=1e-7)


def test_exp_growth_evaluates():
    g = F.exp_growth(0.3, 1.5, F.exp_abs())
    for x in (-2.0, 0.0, 0.7, 3.0):
        assert F.evaluate(g, x) == pytest.approx(math.exp(0.3 * abs(x) ** 1.5), rel=1e-9)


# ------------------------------------------------------------------ structure

def reps_for_json():
    return [F.indicator(1.0), F.indicator(-0.5, "(-inf,K]"), F.staircase(), F.arctan(),
            F.from_polynomial([1.0, 0.0, 3.0], F.exp_abs()),
            F.from_bv([(0.2, 1.0, "left")], c=-1.0, bump=F.gaussian(2.0)),
            F.exp_growth(0.25, 2.0, F.euler_tail_bump("BoundedCoeffs", 0.5, SQRT_HALF))]


@pytest.mark.parametrize("rep", reps_for_json(), ids=lambda r: r.name)
def test_json_round_trip(rep):
    text = json.dumps(rep.to_json())
    back = F.FunctionalRep.from_json(json.loads(text))
    x = np.linspace(-3, 3, 61)
    np.testing.assert_allclose(back(x), rep(x), rtol=1e-9, atol=1e-12)
    assert back.constant_c == rep.constant_c
    assert [(a.loc, a.height) for a in back.atoms] == [(a.loc, a.height) for a in rep.atoms]
    assert [(j.a, j.value) for j in back.jumps] == [(j.a, j.value) for j in rep.jumps]
    assert back.class_tag.kind == rep.class_tag.kind


def test_json_document_keys():
    doc = F.staircase().to_json()
    assert {"c", "atoms", "densities", "jumps", "bump", "class_tag"} <= set(doc)
    assert {"loc", "w"} <= set(doc["atoms"][0])


def test_canonical_constructor_is_injective():
    a = F.from_bv([(0.5, 1.0), (1.5, -0.3, "left")], c=2.0, bump=F.exp_abs())
    b = F.from_bv([(0.5, 1.0), (1.5, -0.3, "left")], c=2.0, bump=F.exp_abs())
    assert a.constant_c == b.constant_c and a.atoms == b.atoms and a.jumps == b.jumps
    # recover c and the jump list from evaluations alone
    eps = 1e-9
    assert F.evaluate(a, -10.0) == 2.0
    assert F.evaluate(a, 0.5) - F.evaluate(a, 0.5 - eps) == pytest.approx(1.0)
    assert F.evaluate(a, 1.5 + eps) - F.evaluate(a, 1.5) == pytest.approx(-0.3)
    assert F.evaluate(a, 1.5) - F.evaluate(a, 1.5 - eps) == pytest.approx(0.0)


def test_duplicate_jump_locations_rejected():
    with pytest.raises(F.FunctionalError):
        FunctionalRep(0.0, jumps=(Jump(1.0, 1.0), Jump(1.0, 2.0)))


@settings(max_examples=40, deadline=None)
@given(h1=st.lists(st.tuples(st.floats(-5, 5), st.floats(-2, 2)), max_size=4),
       h2=st.lists(st.tuples(st.floats(-5, 5), st.floats(-2, 2)), max_size=4),
       c1=st.floats(-3, 3), c2=st.floats(-3, 3), x=st.floats(-6, 6))
def test_union_is_linear(h1, h2, c1, c2, x):
    phi = F.exp_abs()
    g1 = F.from_bv(h1, c=c1, bump=phi)
    g2 = F.union(F.from_bv(h2, c=c2, bump=phi), F.from_polynomial([0.0, 1.0], phi))
    u = F.union(g1, g2)
    assert F.evaluate(u, x) == pytest.approx(F.evaluate(g1, x) + F.evaluate(g2, x), abs=1e-9)


def test_union_requires_common_bump():
    with pytest.raises(F.FunctionalError):
        F.union(F.indicator(1.0, bump=F.exp_abs()), F.indicator(1.0, bump=F.gaussian()))


def test_registries():
    assert sorted(F.FUNCTIONALS) == ["arctan", "exp_growth", "indicator", "polynomial", "staircase"]
    assert "euler_tail_bounded" in F.BUMPS
    g = F.load({"name": "indicator", "params": {"K": 2.0}})
    assert F.evaluate(g, 2.0) == 1.0 and F.evaluate(g, 1.9) == 0.0
    assert F.evaluate(F.load("arctan"), 1.0) == pytest.approx(math.pi / 4)
    with pytest.raises(F.FunctionalError):
        F.functional("sawtooth")
