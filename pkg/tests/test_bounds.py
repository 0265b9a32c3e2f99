import math

import pytest
from hypothesis import given, settings, strategies as st

from sdeerr import bounds as B
from sdeerr.bounds import BoundContext, CorollaryKind


def test_indicator_bound_values():
    assert B.indicator_bound(1.0, 0.01, 1) == pytest.approx(0.3, rel=1e-14)
    assert B.indicator_bound(2.0, 0.0, 3) == 0.0


def test_indicator_bound_sharpness_case():
    eps, p = 0.1, 2
    moment = eps ** 3 / 4           # E|X - X^|^2 for the threshold-shift example
    bound = B.indicator_bound(1.0, moment ** (1 / p), p)
    assert bound == pytest.approx(3 * 0.00025 ** (1 / 3), rel=1e-14)
    assert bound == pytest.approx(0.1890, abs=5e-5)
    assert eps <= bound


@pytest.mark.parametrize("args", [(0.0, 0.1, 1), (-1.0, 0.1, 1), (1.0, -0.1, 1), (1.0, 0.1, 0)])
def test_indicator_bound_rejects(args):
    with pytest.raises(B.BoundError):
        B.indicator_bound(*args)


def test_bv_bound_values():
    assert B.bv_bound(1.0, 1.0, 0.01, 1, 1) == pytest.approx(0.9, rel=1e-14)
    for p, q in [(1, 1), (2, 3), (4, 1.5)]:
        assert B.bv_bound(1.0, 1.0, 0.0, p, q) == 0.0
    with pytest.raises(B.BoundError):
        B.bv_bound(1.0, 1.0, 0.1, 0.5, 1)


def test_gclass_bound_values():
    assert B.gclass_bound(1.0, 2.0, 0.01, 1, 1, 0.5) == pytest.approx(6 * 2 * 0.01 ** 0.25, rel=1e-14)
    assert B.gclass_bound(1.0, 2.0, 0.01, 1, 1, 0.5) == pytest.approx(3.795, abs=5e-4)
    assert B.gclass_bound(0.4, 3.0, 0.0, 2, 5, 0.2) == 0.0
    for theta in (0.0, 1.0, -0.2):
        with pytest.raises(B.BoundError):
            B.gclass_bound(1.0, 1.0, 0.1, 1, 1, theta)


@pytest.mark.parametrize("theta, eps, p, exponent", [(0.5, 0.1, 4.0, 0.4), (1.0, 0.5, 1.0, 0.5)])
def test_scheme_rate_exponent(theta, eps, p, exponent):
    choice = B.scheme_rate_exponent(theta, eps)
    assert choice.p_choice == pytest.approx(p, rel=1e-14)
    assert choice.exponent == pytest.approx(exponent, rel=1e-14)
    # theta p / (p + 1) is the same number
    assert theta * choice.p_choice / (choice.p_choice + 1) == pytest.approx(exponent, rel=1e-13)


@settings(max_examples=200)
@given(theta=st.floats(0.01, 2.0), frac=st.floats(0.001, 0.999))
def test_exponent_plus_epsilon_is_order(theta, frac):
    eps = frac * theta
    # exact up to the rounding of theta - eps
    assert abs(B.scheme_rate_exponent(theta, eps).exponent + eps - theta) <= 2 * math.ulp(theta)


@pytest.mark.parametrize("eps", [0.5, 0.7, 0.0, -0.1])
def test_scheme_rate_exponent_rejects(eps):
    with pytest.raises(B.BoundError):
        B.scheme_rate_exponent(0.5, eps)


def test_log_corrected_exponent_values():
    assert B.euler_log_corrected_exponent(math.exp(-27), 1.0) == pytest.approx(-0.5, abs=1e-12)
    assert B.euler_log_corrected_exponent(log_mesh=-1000.0, M=1.0) == pytest.approx(0.2, abs=1e-12)


@pytest.mark.parametrize("mesh", [math.exp(-16), math.exp(-15), 0.01, 1.0])
def test_log_corrected_exponent_threshold(mesh):
    with pytest.raises(B.BoundError, match="e\\^-16"):
        B.euler_log_corrected_exponent(mesh, 1.0)


def test_log_corrected_exponent_increases_to_half():
    logs = [-17.0, -30.0, -100.0, -1e3, -1e6, -1e12]
    vals = [B.euler_log_corrected_exponent(log_mesh=v) for v in logs]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(v < 0.5 for v in vals) and vals[-1] > 0.49


def test_log_corrected_bound():
    lm = -27.0
    assert B.euler_log_corrected_bound(4.0, log_mesh=lm) == pytest.approx(4.0 * math.exp(-0.5 * lm))
    assert B.euler_log_corrected_bound(0.25, log_mesh=lm) == pytest.approx(0.5 * math.exp(-0.5 * lm))


def test_appendix_constant():
    c = B.appendix_constant(0.5)
    assert c(2.0) == pytest.approx(math.exp(2.0))


# ------------------------------------------------------------------ corollaries

def test_gclass_corollary_parameters():
    q, theta, exponent = B.corollary_parameters(CorollaryKind.GCLASS, 0.5, 0.1)
    assert q == pytest.approx(9.0, rel=1e-14)
    assert theta == pytest.approx(1 / 9, rel=1e-14)
    assert exponent == pytest.approx(0.4, rel=1e-14)
    # theta = eps / (2 gamma - eps)
    assert theta == pytest.approx(0.1 / (1.0 - 0.1), rel=1e-14)


def test_indicator_and_bv_corollary_parameters():
    p, theta, exponent = B.corollary_parameters("IndicatorCor36", 0.5, 0.1)
    assert (p, theta) == (pytest.approx(4.0), None) and exponent == pytest.approx(0.4)
    q, _, exponent = B.corollary_parameters("BvCor44", 0.5, 0.3)
    # (gamma - eps)/eps < 1: the moment is raised to 1 and the rate is gamma/2
    assert q == 1.0 and exponent == pytest.approx(0.25)


def test_corollary_exponent_vanishes_at_order():
    for kind in CorollaryKind:
        exponent = B.corollary_parameters(kind, 1.0, 1.0 - 1e-9).exponent
        assert exponent < 1e-8 or (kind is CorollaryKind.BV and exponent == pytest.approx(0.5))


@pytest.mark.parametrize("kind", list(CorollaryKind))
def test_corollary_rejects_epsilon_at_order(kind):
    ctx = BoundContext(mesh=0.01, gamma_scheme=0.5, scheme_constant_Cp=lambda p: 1.0,
                       d_upper_D=1.0, density_sup=1.0, variation=1.0)
    with pytest.raises(B.BoundError):
        B.corollary_rate_bound(kind, ctx, 0.5)


def strong_constant(p):
    return 0.3 + 0.1 * p


@pytest.mark.parametrize("mesh", [2.0 ** -k for k in (4, 7, 10)])
@pytest.mark.parametrize("gamma, eps", [(0.5, 0.1), (1.0, 0.2), (0.5, 0.3)])
def test_corollaries_assemble_the_theorem_bounds(mesh, gamma, eps):
    ctx = BoundContext(mesh=mesh, gamma_scheme=gamma, scheme_constant_Cp=strong_constant, p=2.0,
                       d_upper_D=0.7, density_sup=0.6, variation=1.4)
    p, _, _ = B.corollary_parameters("IndicatorCor36", gamma, eps)
    want = B.indicator_bound(0.7, strong_constant(p) * mesh ** gamma, p)
    assert B.corollary_rate_bound("IndicatorCor36", ctx, eps) == pytest.approx(want, rel=1e-12)
    q, _, _ = B.corollary_parameters("BvCor44", gamma, eps)
    want = B.bv_bound(0.6, 1.4, strong_constant(q) * mesh ** gamma, 2.0, q)
    assert B.corollary_rate_bound("BvCor44", ctx, eps) == pytest.approx(want, rel=1e-12)
    q, theta, _ = B.corollary_parameters("GclassCor64", gamma, eps)
    want = B.gclass_bound(0.6, 1.4, strong_constant(q) * mesh ** gamma, 2.0, q, theta)
    assert B.corollary_rate_bound("GclassCor64", ctx, eps) == pytest.approx(want, rel=1e-12)


def test_corollary_needs_constants():
    ctx = BoundContext(mesh=0.01, gamma_scheme=0.5, scheme_constant_Cp=lambda p: 1.0)
    for kind in CorollaryKind:
        with pytest.raises(B.BoundError):
            B.corollary_rate_bound(kind, ctx, 0.1)


def test_context_validation():
    with pytest.raises(B.BoundError):
        BoundContext(mesh=0.0, gamma_scheme=0.5, scheme_constant_Cp=lambda p: 1.0)
    with pytest.raises(B.BoundError):
        BoundContext(mesh=0.1, gamma_scheme=0.5, scheme_constant_Cp=lambda p: 1.0, theta=1.0)
    with pytest.raises(B.BoundError):
        BoundContext(mesh=0.1, gamma_scheme=0.5, scheme_constant_Cp=lambda p: 1.0, variation=-1.0)


# ------------------------------------------------------------------ properties

pos = st.floats(1e-6, 1e3)
moment = st.floats(1.0, 8.0)


@settings(max_examples=150)
@given(D=pos, err=pos, p=moment, f=st.floats(1.0, 2.0))
def test_indicator_bound_monotone(D, err, p, f):
    base = B.indicator_bound(D, err, p)
    assert base >= 0
    assert B.indicator_bound(D * f, err, p) >= base * (1 - 1e-12)
    assert B.indicator_bound(D, err * f, p) >= base * (1 - 1e-12)


@settings(max_examples=150)
@given(s=pos, V=pos, err=pos, p=moment, q=moment, theta=st.floats(0.01, 0.99), f=st.floats(1.0, 2.0))
def test_theorem_bounds_monotone(s, V, err, p, q, theta, f):
    for bound in (lambda a, b, c: B.bv_bound(a, b, c, p, q),
                  lambda a, b, c: B.gclass_bound(a, b, c, p, q, theta)):
        base = bound(s, V, err)
        assert base >= 0
        for args in ((s * f, V, err), (s, V * f, err), (s, V, err * f)):
            assert bound(*args) >= base * (1 - 1e-12)


def test_dominated():
    assert B.dominated(0.10, 0.01, 0.08)          # 0.10 - 0.03 <= 0.084
    assert not B.dominated(0.20, 0.01, 0.08)
    assert B.dominated(0.0839, 0.0, 0.08)
    assert not B.dominated(0.0841, 0.0, 0.08)
