"""Closed-form error bounds and rate exponents.

All bounds are on ``E|g(X) - g(X^)|^p`` (not its p-th root) and take the
constants measured or supplied by the caller: ``D_X(K)``, ``sup f_X``, the
variations ``V(g)`` / ``V_{p,phi}(g)`` and the strong errors ``||X - X^||_q``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

LOG_MESH_THRESHOLD = -16.0
MC_SIGMAS = 3.0
DX_GRID_SLACK = 0.05


class BoundError(ValueError):
    pass


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise BoundError(message)


def _pow(base: float, e: float) -> float:
    if base == 0.0:
        return 0.0 if e > 0 else 1.0
    return base ** e


def indicator_bound(D: float, lp_err: float, p: float) -> float:
    """``3 D^(p/(p+1)) ||X - X^||_p^(p/(p+1))`` for ``E|chi(X) - chi(X^)|``."""
    _require(D > 0, "D must be positive")
    _require(lp_err >= 0, "lp_err must be nonnegative")
    _require(p > 0, "p must be positive")
    e = p / (p + 1.0)
    if lp_err == 0:
        return 0.0
    return 3.0 * _pow(D, e) * _pow(lp_err, e)


def bv_bound(density_sup: float, variation_V: float, lp_err_q: float, p: float, q: float) -> float:
    """``3^(p+1) (sup f)^(q/(q+1)) V^p ||X - X^||_q^(q/(q+1))``."""
    _require(min(density_sup, variation_V, lp_err_q) >= 0, "arguments must be nonnegative")
    _require(p >= 1 and q >= 1, "p and q must be >= 1")
    e = q / (q + 1.0)
    return 3.0 ** (p + 1) * _pow(density_sup, e) * _pow(variation_V, p) * _pow(lp_err_q, e)


def gclass_bound(density_sup: float, v_p_phi: float, lp_err_q: float, p: float, q: float,
                 theta: float) -> float:
    """``3 2^p (sup f)^(q(1-theta)/(q+1)) V_{p,phi}^p ||X - X^||_q^(q(1-theta)/(q+1))``."""
    _require(0 < theta < 1, "theta must lie in (0, 1)")
    _require(min(density_sup, v_p_phi, lp_err_q) >= 0, "arguments must be nonnegative")
    _require(p >= 1 and q >= 1, "p and q must be >= 1")
    e = q * (1.0 - theta) / (q + 1.0)
    return 3.0 * 2.0 ** p * _pow(density_sup, e) * _pow(v_p_phi, p) * _pow(lp_err_q, e)


class RateChoice(NamedTuple):
    p_choice: float
    exponent: float


def scheme_rate_exponent(scheme_order_theta: float, epsilon: float) -> RateChoice:
    """Moment choice ``p = (theta - eps)/eps`` turning order theta into rate theta - eps."""
    _require(epsilon > 0, "epsilon must be positive")
    _require(epsilon < scheme_order_theta, "epsilon must be < scheme order")
    return RateChoice((scheme_order_theta - epsilon) / epsilon, scheme_order_theta - epsilon)


def euler_log_corrected_exponent(mesh: Optional[float] = None, M: float = 1.0, *,
                                 log_mesh: Optional[float] = None) -> float:
    """``1/2 - (2 + M) / (-log mesh)^(1/3)``, valid for ``mesh < e^-16``.

    Pass ``log_mesh`` directly for meshes below the double range.
    """
    if log_mesh is None:
        _require(mesh is not None and mesh > 0, "mesh must be positive")
        log_mesh = math.log(mesh)
    _require(M > 0, "M must be positive")
    _require(log_mesh < LOG_MESH_THRESHOLD,
             "mesh must be below e^-16, the validity threshold of the log-corrected rate")
    return 0.5 - (2.0 + M) / (-log_mesh) ** (1.0 / 3.0)


def euler_log_corrected_bound(D: float, mesh: Optional[float] = None, M: float = 1.0, *,
                              log_mesh: Optional[float] = None) -> float:
    """``(D v sqrt(D)) mesh^(log-corrected exponent)``."""
    _require(D > 0, "D must be positive")
    if log_mesh is None:
        log_mesh = math.log(mesh)
    e = euler_log_corrected_exponent(M=M, log_mesh=log_mesh)
    return max(D, math.sqrt(D)) * math.exp(e * log_mesh)


def appendix_constant(M: float) -> Callable[[float], float]:
    """Strong Euler constant ``C_p = e^(M p^2)``; M is problem dependent and user chosen."""
    return lambda p: math.exp(M * p * p)


class CorollaryKind(str, enum.Enum):
    INDICATOR = "IndicatorCor36"
    BV = "BvCor44"
    GCLASS = "GclassCor64"


@dataclass(frozen=True)
class BoundContext:
    """Constants entering the mesh-dependent corollary bounds."""

    mesh: float
    gamma_scheme: float
    scheme_constant_Cp: Callable[[float], float]
    p: float = 1.0
    d_upper_D: Optional[float] = None
    density_sup: Optional[float] = None
    variation: Optional[float] = None
    lp_error: Optional[float] = None
    q: Optional[float] = None
    theta: Optional[float] = None
    constant_M: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        _require(self.mesh > 0, "mesh must be positive")
        _require(self.gamma_scheme > 0, "scheme order must be positive")
        _require(self.p > 0, "p must be positive")
        if self.theta is not None:
            _require(0 < self.theta < 1, "theta must lie in (0, 1)")
        for name in ("d_upper_D", "density_sup", "variation", "lp_error"):
            value = getattr(self, name)
            if value is not None:
                _require(value >= 0, f"{name} must be nonnegative")


class CorollaryParameters(NamedTuple):
    moment: float      # p for the indicator case, q otherwise
    theta: Optional[float]
    exponent: float


def corollary_parameters(kind, gamma: float, epsilon: float) -> CorollaryParameters:
    """Parameter choices giving the rate ``mesh^(gamma - eps)``.

    Indicator: ``p = (gamma - eps)/eps``. BV: ``q = (gamma - eps)/eps`` raised to 1
    when smaller (the BV bound needs q >= 1; the rate is then gamma/2 > gamma - eps).
    G-class: ``q = 2 gamma/eps - 1`` and ``theta = 1/q``.
    """
    kind = CorollaryKind(kind)
    _require(0 < epsilon < gamma, "epsilon must be < scheme order")
    if kind is CorollaryKind.INDICATOR:
        p = (gamma - epsilon) / epsilon
        return CorollaryParameters(p, None, gamma - epsilon)
    if kind is CorollaryKind.BV:
        q = max(1.0, (gamma - epsilon) / epsilon)
        return CorollaryParameters(q, None, gamma * q / (q + 1.0) if q == 1.0 else gamma - epsilon)
    q = 2.0 * gamma / epsilon - 1.0
    return CorollaryParameters(q, 1.0 / q, gamma - epsilon)


def corollary_rate_bound(kind, context: BoundContext, epsilon: float) -> float:
    """Full mesh-dependent bound of the indicator, BV or G-class corollary."""
    kind = CorollaryKind(kind)
    ctx = context
    gamma = ctx.gamma_scheme
    moment, theta, exponent = corollary_parameters(kind, gamma, epsilon)
    c_mom = ctx.scheme_constant_Cp(moment)
    _require(c_mom >= 0, "scheme constant must be nonnegative")
    mesh_term = ctx.mesh ** exponent
    if kind is CorollaryKind.INDICATOR:
        _require(ctx.d_upper_D is not None and ctx.d_upper_D > 0, "indicator bound needs D_X(K)")
        e = moment / (moment + 1.0)
        return 3.0 * _pow(ctx.d_upper_D, e) * _pow(c_mom, e) * mesh_term
    _require(ctx.density_sup is not None, "bound needs sup f_X")
    _require(ctx.variation is not None, "bound needs the variation of g")
    _require(ctx.p >= 1, "p must be >= 1")
    if kind is CorollaryKind.BV:
        e = moment / (moment + 1.0)
        return (3.0 ** (ctx.p + 1) * _pow(ctx.density_sup, e) * _pow(ctx.variation, ctx.p)
                * _pow(c_mom, e) * mesh_term)
    e = 1.0 - epsilon / gamma
    return (3.0 * 2.0 ** ctx.p * _pow(ctx.density_sup, e) * _pow(ctx.variation, ctx.p)
            * _pow(c_mom, e) * mesh_term)


def dominated(estimate: float, std_error: float, bound: float, *, sigmas: float = MC_SIGMAS,
              slack: float = DX_GRID_SLACK) -> bool:
    """``estimate - sigmas * SE <= bound * (1 + slack)``."""
    return estimate - sigmas * std_error <= bound * (1.0 + slack)
