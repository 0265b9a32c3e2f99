"""Function classes: indicators, BV functions and G_{p,phi} members.

A member is stored as ``g = c + g^mu + Delta_A`` where

* ``g^mu(x) = int_{(0,x]} phi dmu`` for ``x >= 0`` and ``int_{(x,0]} phi dmu``
  for ``x < 0``;
* ``Delta_A(a_i) = lambda_i phi(a_i)`` and zero elsewhere.

Everything is kept in the bump-free form ``phi dmu``: an atom stores its
height ``h = phi(a) mu({a})``, a jump stores ``delta = lambda phi(a)`` and a
density part stores ``k = phi dmu/dz``. Evaluation therefore does not depend on
the bump, and changing the bump is an exact change of measure. The bump only
enters the (p, phi)-variation.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import sympy
from scipy import integrate

log = logging.getLogger(__name__)

TINY = np.finfo(np.float64).tiny
QUAD_EPSREL = 1e-9
CHEB_P_MAX = 64.0
CHEB_N_PROBE = 49


class FunctionalError(ValueError):
    pass


class QuadratureError(FunctionalError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


class MembershipError(FunctionalError):
    pass


# ------------------------------------------------------------------ bumps

class Construction(str, enum.Enum):
    EXPLICIT = "ExplicitForm"
    CHEBYSHEV = "ChebyshevTail"
    GAUSSIAN_EULER = "GaussianTailEuler"
    LIPSCHITZ_EULER = "LipschitzTailEuler"
    ENVELOPE = "Envelope"


@dataclass(frozen=True, eq=False)
class BumpFunction:
    """A bump phi: values in (0, 1], unimodal about 0, vanishing at infinity.

    ``log_eval`` returns ``log phi`` so that far tails do not underflow.
    ``superpolynomial`` is True when phi provably decays faster than every
    polynomial, False when it provably does not and None when unknown.
    """

    construction: Construction
    params: dict
    log_eval: Callable[[np.ndarray], np.ndarray]
    superpolynomial: Optional[bool] = None
    name: str = ""

    def log(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return np.minimum(np.asarray(self.log_eval(z), dtype=np.float64), 0.0)

    def __call__(self, z):
        val = np.maximum(np.exp(self.log(z)), TINY)
        return float(val) if np.ndim(z) == 0 else val

    def pow(self, z, e: float):
        """``phi(z)**e`` computed in log space."""
        val = np.exp(e * self.log(z))
        return float(val) if np.ndim(z) == 0 else val

    def to_json(self) -> dict:
        return {"construction": self.construction.value, "name": self.name,
                "params": _jsonable(self.params)}

    def __eq__(self, other):
        return isinstance(other, BumpFunction) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(json.dumps(self.to_json(), sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, BumpFunction):
        return obj.to_json()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def check_bump(bump: BumpFunction, grid: Optional[np.ndarray] = None) -> None:
    """Check the three bump invariants on a probe grid; raise on violation."""
    if grid is None:
        grid = np.concatenate([-np.geomspace(1e-6, 1e6, 600)[::-1], [0.0],
                               np.geomspace(1e-6, 1e6, 600)])
    lv = bump.log(grid)
    if np.any(~np.isfinite(lv)) or np.any(lv > 0):
        raise FunctionalError(f"bump {bump.name}: values must lie in (0, 1]")
    neg, pos = grid <= 0, grid > 0
    if np.any(np.diff(lv[neg]) < -1e-12):
        raise FunctionalError(f"bump {bump.name}: not nondecreasing on (-inf, 0]")
    if np.any(np.diff(lv[pos]) > 1e-12):
        raise FunctionalError(f"bump {bump.name}: not nonincreasing on (0, inf)")
    probes = 10.0 ** np.arange(1, 7)
    for side in (probes, -probes):
        vals = bump(side)
        if np.any(np.diff(vals) > 1e-15) or vals[-1] > 0.05:
            raise FunctionalError(f"bump {bump.name}: does not vanish at infinity")


def exp_abs(rate: float = 1.0) -> BumpFunction:
    """``exp(-rate |z|)``."""
    if not rate > 0:
        raise FunctionalError("rate must be positive")
    return BumpFunction(Construction.EXPLICIT, {"form": "exp_abs", "rate": rate},
                        lambda z: -rate * np.abs(z), True, "exp_abs")


def power(k: float = 8.0) -> BumpFunction:
    """``(1 + |z|)**-k``, polynomial decay."""
    if not k > 0:
        raise FunctionalError("k must be positive")
    return BumpFunction(Construction.EXPLICIT, {"form": "power", "k": k},
                        lambda z: -k * np.log1p(np.abs(z)), False, "power")


def gaussian(scale: float = 1.0) -> BumpFunction:
    """``exp(-z**2 / (2 scale**2))``."""
    if not scale > 0:
        raise FunctionalError("scale must be positive")
    return BumpFunction(Construction.EXPLICIT, {"form": "gaussian", "scale": scale},
                        lambda z: -0.5 * (np.asarray(z) / scale) ** 2, True, "gaussian")


def chebyshev_bump(moment_norms, theta: float, floor: Optional[BumpFunction] = None,
                   p_max: float = CHEB_P_MAX, n_probe: int = CHEB_N_PROBE) -> BumpFunction:
    """Tail envelope from moment bounds via Chebyshev's inequality.

    ``phi(z) = [min_p (N_p / |z|)^(theta p) ^ 1] v floor(z)`` with
    ``N_p = moment_norms(p)`` (a bound on ``C_p + ||X||_p``) and the minimum over
    a geometric probe grid of ``p`` in ``[1, p_max]``. The finite grid can only
    make phi larger than the exact infimum.
    """
    if not 0 < theta < 1:
        raise FunctionalError("theta must lie in (0, 1)")
    if p_max < 1:
        raise FunctionalError("p_max must be >= 1")
    floor = floor or exp_abs()
    p_grid = np.geomspace(1.0, p_max, n_probe)
    if callable(moment_norms):
        norms = np.array([float(moment_norms(p)) for p in p_grid])
    else:
        norms = np.asarray(moment_norms, dtype=float)
        if norms.shape != p_grid.shape:
            raise FunctionalError("tabulated moment norms must match the probe grid")
    if np.any(~(norms > 0)) or np.any(~np.isfinite(norms)):
        raise FunctionalError("moment norms must be positive and finite")
    return _chebyshev_from_table(theta, p_grid, norms, floor, p_max, n_probe)


def _chebyshev_from_table(theta, p_grid, norms, floor, p_max, n_probe):
    log_norms = np.log(norms)
    tp = theta * p_grid

    def log_eval(z):
        z = np.asarray(z, dtype=np.float64)
        flat = z.ravel()
        out = np.zeros(flat.shape)
        for start in range(0, len(flat), 65536):
            zz = flat[start:start + 65536]
            a = np.abs(zz)
            nz = a > 0
            la = np.log(a[nz])
            vals = (tp[None, :] * (log_norms[None, :] - la[:, None])).min(axis=1)
            seg = np.zeros(zz.shape)
            seg[nz] = np.maximum(np.minimum(vals, 0.0), floor.log(zz[nz]))
            out[start:start + 65536] = seg
        return out.reshape(z.shape)

    params = {"theta": theta, "p_max": p_max, "n_probe": n_probe,
              "norms": norms.tolist(), "floor": floor}
    return BumpFunction(Construction.CHEBYSHEV, params, log_eval,
                        True if floor.superpolynomial else None, "chebyshev")


class TailKind(str, enum.Enum):
    BOUNDED = "BoundedCoeffs"
    LIPSCHITZ = "LipschitzCoeffs"


def euler_tail_bump(kind, theta: float, M: float, x0: float = 0.0, T: float = 1.0) -> BumpFunction:
    """Explicit tail bumps for Euler approximations.

    Bounded coefficients (``|sigma|, |b| <= M``) give a Gaussian tail outside the
    plateau ``[min(x0 - MT, 0), max(x0 + MT, 0)]``; Lipschitz coefficients give
    ``|z|^(-(2 theta / (3 sqrt(3M))) sqrt(log |z|))`` beyond ``z0 = e^(3M)``.
    """
    kind = TailKind(kind)
    if not 0 < theta < 1:
        raise FunctionalError("theta must lie in (0, 1)")
    if not (M > 0 and T > 0):
        raise FunctionalError("M and T must be positive")
    if kind is TailKind.BOUNDED:
        hi = max(x0 + M * T, 0.0)
        lo = min(x0 - M * T, 0.0)
        up, down = x0 + M * T, x0 - M * T
        scale = 2.0 * M * M * T

        def log_eval(z):
            z = np.asarray(z, dtype=np.float64)
            out = np.zeros(z.shape)
            out = np.where(z > hi, -theta * (z - up) ** 2 / scale, out)
            return np.where(z < lo, -theta * (z - down) ** 2 / scale, out)

        return BumpFunction(Construction.GAUSSIAN_EULER,
                            {"kind": kind.value, "theta": theta, "M": M, "x0": x0, "T": T},
                            log_eval, True, "euler_tail_bounded")
    z0 = math.exp(3.0 * M)
    rate = 2.0 * theta / (3.0 * math.sqrt(3.0 * M))

    def log_eval(z):
        a = np.abs(np.asarray(z, dtype=np.float64))
        out = np.zeros(a.shape)
        big = a > z0
        out[big] = -rate * np.log(a[big]) ** 1.5
        return out

    return BumpFunction(Construction.LIPSCHITZ_EULER,
                        {"kind": kind.value, "theta": theta, "M": M, "x0": x0, "T": T,
                         "z0": z0}, log_eval, True, "euler_tail_lipschitz")


def envelope(*bumps: BumpFunction) -> BumpFunction:
    """Pointwise maximum of bumps, again a bump."""
    if not bumps:
        raise FunctionalError("envelope needs at least one bump")

    def log_eval(z):
        return np.max(np.stack([b.log(z) for b in bumps]), axis=0)

    flags = [b.superpolynomial for b in bumps]
    sp = True if all(f is True for f in flags) else (False if any(f is False for f in flags)
                                                     else None)
    return BumpFunction(Construction.ENVELOPE, {"members": list(bumps)}, log_eval, sp, "envelope")


def bump_from_json(doc: dict) -> BumpFunction:
    cons = Construction(doc["construction"])
    prm = doc["params"]
    if cons is Construction.EXPLICIT:
        form = prm["form"]
        if form == "exp_abs":
            return exp_abs(prm["rate"])
        if form == "power":
            return power(prm["k"])
        if form == "gaussian":
            return gaussian(prm["scale"])
        raise FunctionalError(f"unknown explicit bump form {form!r}")
    if cons is Construction.CHEBYSHEV:
        p_grid = np.geomspace(1.0, prm["p_max"], prm["n_probe"])
        return _chebyshev_from_table(prm["theta"], p_grid, np.asarray(prm["norms"], float),
                                     bump_from_json(prm["floor"]), prm["p_max"], prm["n_probe"])
    if cons in (Construction.GAUSSIAN_EULER, Construction.LIPSCHITZ_EULER):
        return euler_tail_bump(prm["kind"], prm["theta"], prm["M"], prm["x0"], prm["T"])
    return envelope(*[bump_from_json(m) for m in prm["members"]])


BUMPS = {
    "chebyshev": (lambda theta=0.5, norm=1.0, **kw: chebyshev_bump(lambda p: norm, theta, **kw),
                  "Chebyshev tail envelope from moment bounds, floored by exp(-|z|)"),
    "euler_tail_bounded": (lambda theta=0.5, M=1.0, x0=0.0, T=1.0:
                           euler_tail_bump(TailKind.BOUNDED, theta, M, x0, T),
                           "Gaussian Euler tail bump for bounded coefficients"),
    "euler_tail_lipschitz": (lambda theta=0.5, M=1.0, x0=0.0, T=1.0:
                             euler_tail_bump(TailKind.LIPSCHITZ, theta, M, x0, T),
                             "log-normal-type Euler tail bump for Lipschitz coefficients"),
    "exp_abs": (exp_abs, "exp(-rate |z|)"),
    "gaussian": (gaussian, "exp(-z^2 / (2 scale^2))"),
    "power": (power, "(1 + |z|)^-k, polynomial decay only"),
}


def bump(name: str, **params) -> BumpFunction:
    if name not in BUMPS:
        raise FunctionalError(f"unknown bump {name!r}; known: {sorted(BUMPS)}")
    return BUMPS[name][0](**params)


# ------------------------------------------------------------ representations

class ClassKind(str, enum.Enum):
    INDICATOR = "Indicator"
    BV = "BV"
    NBV = "NBV"
    POLYNOMIAL = "Polynomial"
    GCLASS = "GClass"
    EXP_GROWTH = "ExponentialGrowth"


@dataclass(frozen=True)
class ClassTag:
    kind: ClassKind
    params: dict = field(default_factory=dict)

    def to_json(self):
        return {"kind": self.kind.value, **_jsonable(self.params)}

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        return cls(ClassKind(doc.pop("kind")), doc)


@dataclass(frozen=True)
class Atom:
    loc: float
    height: float          # phi(loc) * mu({loc})


@dataclass(frozen=True)
class Jump:
    a: float
    value: float           # Delta_A(a) = lambda * phi(a)


_Z = sympy.Symbol("z", real=True)


def _lambdify(expr: str):
    parsed = sympy.sympify(expr, locals={"z": _Z})
    fn = sympy.lambdify(_Z, parsed, modules="numpy")

    def wrapped(z):
        z = np.asarray(z, dtype=np.float64)
        with np.errstate(all="ignore"):
            return np.asarray(fn(z), dtype=np.float64) + np.zeros(z.shape)

    return wrapped


@dataclass(frozen=True, eq=False)
class Density:
    """A density part ``k = phi dmu/dz`` on ``support``.

    ``cumulative(x)``, when known, is the closed form of this part's
    contribution to ``g^mu(x)``. ``log_abs`` is ``log|k|`` for tails where ``k``
    itself overflows.
    """

    func: Callable[[np.ndarray], np.ndarray]
    support: tuple = (-math.inf, math.inf)
    breakpoints: tuple = ()
    cumulative: Optional[Callable] = None
    log_abs: Optional[Callable] = None
    expr: Optional[str] = None
    cumulative_expr: Optional[str] = None
    log_abs_expr: Optional[str] = None
    name: str = ""

    def abs_log(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.log_abs is not None:
            return self.log_abs(z)
        with np.errstate(divide="ignore"):
            return np.log(np.abs(self.func(z)))

    def to_json(self):
        if self.expr is None:
            raise FunctionalError(f"density {self.name or '?'} has no expression; "
                                  "cannot serialize")
        doc = {"expr": self.expr, "support": [_num(s) for s in self.support],
               "breakpoints": list(self.breakpoints), "name": self.name}
        if self.cumulative_expr:
            doc["cumulative"] = self.cumulative_expr
        if self.log_abs_expr:
            doc["log_abs"] = self.log_abs_expr
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(func=_lambdify(doc["expr"]),
                   support=tuple(float(s) for s in doc.get("support", [-math.inf, math.inf])),
                   breakpoints=tuple(doc.get("breakpoints", ())),
                   cumulative=_lambdify(doc["cumulative"]) if doc.get("cumulative") else None,
                   log_abs=_lambdify(doc["log_abs"]) if doc.get("log_abs") else None,
                   expr=doc["expr"], cumulative_expr=doc.get("cumulative"),
                   log_abs_expr=doc.get("log_abs"), name=doc.get("name", ""))


def _num(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _side(a: float) -> float:
    return 1.0 if a > 0 else -1.0


@dataclass(frozen=True, eq=False)
class FunctionalRep:
    """``g = c + g^mu + Delta_A`` with atoms, density parts and point jumps."""

    constant_c: float
    atoms: tuple = ()
    densities: tuple = ()
    jumps: tuple = ()
    bump: Optional[BumpFunction] = None
    class_tag: ClassTag = ClassTag(ClassKind.GCLASS)
    name: str = ""

    def __post_init__(self):
        locs = [j.a for j in self.jumps]
        if len(set(locs)) != len(locs):
            raise FunctionalError("jump locations must be distinct")
        object.__setattr__(self, "atoms", tuple(sorted(self.atoms, key=lambda a: a.loc)))
        object.__setattr__(self, "jumps", tuple(sorted(self.jumps, key=lambda j: j.a)))
        pos = [a for a in self.atoms if a.loc > 0]
        neg = [a for a in self.atoms if a.loc <= 0]
        object.__setattr__(self, "_pos_locs", np.array([a.loc for a in pos]))
        object.__setattr__(self, "_pos_cum", np.concatenate([[0.0], np.cumsum([a.height for a in pos])]))
        object.__setattr__(self, "_neg_locs", np.array([a.loc for a in neg]))
        # suffix sums: contribution for x < 0 is the sum over atoms in (x, 0]
        hs = np.array([a.height for a in neg])
        object.__setattr__(self, "_neg_suffix",
                           np.concatenate([np.cumsum(hs[::-1])[::-1], [0.0]]) if len(hs)
                           else np.array([0.0]))

    # ---------------------------------------------------------- measure views

    def mu_atoms(self, bump: Optional[BumpFunction] = None):
        """Atom weights ``mu({a}) = h / phi(a)`` under ``bump`` (default: own bump)."""
        phi = self._need_bump(bump)
        return [(a.loc, a.height / phi(a.loc)) for a in self.atoms]

    def lambdas(self, bump: Optional[BumpFunction] = None):
        phi = self._need_bump(bump)
        return [(j.a, j.value / phi(j.a)) for j in self.jumps]

    def _need_bump(self, bump):
        phi = bump or self.bump
        if phi is None:
            raise FunctionalError("this operation needs a bump function")
        return phi

    def __call__(self, x):
        return evaluate_many(self, x)

    def to_json(self) -> dict:
        doc = {"c": self.constant_c, "name": self.name,
               "atoms": [{"loc": a.loc, "height": a.height} for a in self.atoms],
               "densities": [d.to_json() for d in self.densities],
               "jumps": [{"a": j.a, "value": j.value} for j in self.jumps],
               "bump": self.bump.to_json() if self.bump is not None else None,
               "class_tag": self.class_tag.to_json()}
        if self.bump is not None:
            for entry, (_, w) in zip(doc["atoms"], self.mu_atoms()):
                entry["w"] = w
            for entry, (_, lam) in zip(doc["jumps"], self.lambdas()):
                entry["lambda"] = lam
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "FunctionalRep":
        phi = bump_from_json(doc["bump"]) if doc.get("bump") else None

        def point_value(entry, key_exact, key_mu, loc):
            if key_exact in entry:
                return float(entry[key_exact])
            if phi is None:
                raise FunctionalError(f"{key_mu!r} given without a bump")
            return float(entry[key_mu]) * phi(loc)

        atoms = tuple(Atom(float(e["loc"]), point_value(e, "height", "w", float(e["loc"])))
                      for e in doc.get("atoms", []))
        jumps = tuple(Jump(float(e["a"]), point_value(e, "value", "lambda", float(e["a"])))
                      for e in doc.get("jumps", []))
        dens = tuple(Density.from_json(d) for d in doc.get("densities", []))
        tag = ClassTag.from_json(doc.get("class_tag", {"kind": "GClass"}))
        return cls(float(doc.get("c", 0.0)), atoms, dens, jumps, phi, tag, doc.get("name", ""))


# ------------------------------------------------------------------ evaluation

def _quad(func, lo, hi, points=None, what="integral"):
    if lo == hi:
        return 0.0
    kw = {"epsrel": QUAD_EPSREL, "epsabs": 1e-13, "limit": 500, "full_output": 1}
    pts = None
    if points is not None and math.isfinite(lo) and math.isfinite(hi):
        pts = [p for p in points if lo < p < hi] or None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(func, lo, hi, points=pts, **kw)
    val, err = res[0], res[1]
    ok = len(res) < 4 or res[3] is None or err <= max(1e-7 * abs(val), 1e-10)
    if not ok and math.isfinite(lo) and math.isfinite(hi):
        # many kinks (e.g. Chebyshev envelopes): retry on shorter pieces
        cuts = np.linspace(lo, hi, 17)
        parts = [_quad_raw(func, a, b) for a, b in zip(cuts[:-1], cuts[1:])]
        val, err = sum(v for v, _ in parts), sum(e for _, e in parts)
        ok = err <= max(1e-7 * abs(val), 1e-10)
    if not math.isfinite(val) or not ok:
        raise QuadratureError(f"{what} over [{lo}, {hi}] did not converge", err)
    return val


def _quad_raw(func, lo, hi):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(func, lo, hi, epsrel=QUAD_EPSREL, epsabs=1e-13, limit=500)
    return res[0], res[1]


def _scalar(fn):
    return lambda t: float(fn(np.asarray(t, dtype=np.float64)))


def _density_contribution(d: Density, x: float) -> float:
    lo, hi = d.support
    if x >= 0:
        a, b = max(0.0, lo), min(x, hi)
    else:
        a, b = max(x, lo), min(0.0, hi)
    if not a < b:
        return 0.0
    return _quad(_scalar(d.func), a, b, d.breakpoints, what=f"density {d.name}")


def evaluate(rep: FunctionalRep, x: float) -> float:
    """``g(x)``: atoms exactly, density parts by adaptive quadrature."""
    x = float(x)
    val = rep.constant_c
    if x >= 0:
        val += sum(a.height for a in rep.atoms if 0 < a.loc <= x)
    else:
        val += sum(a.height for a in rep.atoms if x < a.loc <= 0)
    for d in rep.densities:
        val += _density_contribution(d, x)
    for j in rep.jumps:
        if j.a == x:
            val += j.value
    return val


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _density_cumulative_many(d: Density, xs: np.ndarray) -> np.ndarray:
    if d.cumulative is not None:
        lo, hi = d.support
        clipped = np.clip(xs, lo, hi)
        base = float(np.clip(0.0, lo, hi))
        return np.asarray(d.cumulative(clipped), dtype=float) - float(d.cumulative(np.array(base)))
    lo = max(float(np.min(xs)), d.support[0], -1e300)
    hi = min(float(np.max(xs)), d.support[1], 1e300)
    grid = np.unique(np.concatenate([
        np.clip(xs, d.support[0], d.support[1]), [float(np.clip(0.0, *d.support))],
        [b for b in d.breakpoints if lo < b < hi],
        np.linspace(lo, hi, 2049) if hi > lo else []]))
    left, right = grid[:-1], grid[1:]
    mid, half = 0.5 * (left + right), 0.5 * (right - left)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    pieces = (d.func(nodes) * _GL_WEIGHTS[None, :]).sum(axis=1) * half
    cum = np.concatenate([[0.0], np.cumsum(pieces)])
    zero = np.searchsorted(grid, float(np.clip(0.0, *d.support)))
    cum -= cum[zero]
    # the measure on (x, 0] enters with a plus sign left of the origin
    vals = cum[np.searchsorted(grid, np.clip(xs, d.support[0], d.support[1]))]
    return np.where(xs < 0, -vals, vals)


def evaluate_many(rep: FunctionalRep, xs) -> np.ndarray:
    """Vectorized ``g`` for Monte Carlo use.

    Density parts use their closed-form cumulative when present, otherwise
    composite Gauss-Legendre between sorted evaluation points.
    """
    x = np.asarray(xs, dtype=np.float64)
    flat = x.ravel()
    out = np.full(flat.shape, float(rep.constant_c))
    finite = np.isfinite(flat)
    if len(rep._pos_locs):
        idx = np.searchsorted(rep._pos_locs, flat, side="right")
        out += np.where(flat >= 0, rep._pos_cum[idx], 0.0)
    if len(rep._neg_locs):
        idx = np.searchsorted(rep._neg_locs, flat, side="right")
        out += np.where(flat < 0, rep._neg_suffix[idx], 0.0)
    if rep.densities and finite.any():
        for d in rep.densities:
            contrib = np.zeros(flat.shape)
            contrib[finite] = _density_cumulative_many(d, flat[finite])
            out += contrib
    for j in rep.jumps:
        out += np.where(flat == j.a, j.value, 0.0)
    out[~finite] = np.nan
    return out.reshape(x.shape)


# ------------------------------------------------------------------ variations

_BV_KINDS = {ClassKind.BV, ClassKind.NBV, ClassKind.INDICATOR}


def _split_points(d: Density):
    lo, hi = d.support
    cuts = sorted({lo, hi, *[b for b in d.breakpoints if lo < b < hi],
                   *([0.0] if lo < 0 < hi else [])})
    return list(zip(cuts[:-1], cuts[1:]))


def _integrate_split(func, d: Density, what: str) -> float:
    return sum(_quad(func, a, b, what=what) for a, b in _split_points(d))


LOG_SCAN_MAX = 700.0
LOG_DROP = 40.0


def _integrate_log(log_f, lo: float, hi: float, what: str) -> float:
    """``int_lo^hi exp(log_f(z)) dz`` for ``lo, hi`` on one side of 0.

    ``|z| <= 1`` is integrated directly; beyond that the substitution
    ``z = +-e^u`` is used and the effective support is located by scanning u,
    which copes with mass sitting far out (e.g. near ``|z| = e^30``). An
    integrand still not decaying at ``|z| = e^700`` is reported as divergent.
    """
    if lo >= hi:
        return 0.0
    if hi <= 0:
        return _integrate_log(lambda z: log_f(-np.asarray(z)), -hi, -lo, what)

    def direct(z):
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.exp(log_f(np.asarray(z, dtype=np.float64))))

    total = _quad(direct, lo, min(hi, 1.0), what=what) if lo < 1.0 else 0.0
    if hi <= 1.0:
        return total
    u0 = math.log(max(lo, 1.0))
    u1 = min(math.log(hi), LOG_SCAN_MAX) if math.isfinite(hi) else LOG_SCAN_MAX
    if u1 <= u0:
        return total
    u = np.linspace(u0, u1, 4001)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        lv = log_f(np.exp(u)) + u
    bad = np.nonzero(np.isnan(lv) | (lv == np.inf))[0]
    if len(bad):
        # overflow far out: keep the finite prefix and judge decay there
        if bad[0] < 2:
            raise QuadratureError(f"{what}: integrand not finite", math.inf)
        u, lv = u[:bad[0]], lv[:bad[0]]
        hi = math.inf
    top = int(np.argmax(lv))
    peak = float(lv[top])
    if peak == -np.inf:
        return total
    if math.isinf(hi) and lv[-1] > peak - LOG_DROP:
        raise QuadratureError(f"{what}: integrand does not decay up to |z| = e^{u1:.0f}", math.inf)
    alive = np.nonzero(lv > peak - LOG_DROP)[0]
    a = float(u[max(alive[0] - 1, 0)])
    b = float(u[min(alive[-1] + 1, len(u) - 1)])

    def scaled(s):
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.exp(log_f(np.exp(np.asarray(s, dtype=np.float64))) + s - peak))

    # short pieces: envelope bumps are only piecewise smooth in u
    cuts = np.unique(np.concatenate([np.linspace(a, b, max(2, int(math.ceil((b - a) / 0.25)) + 1)),
                                     [u[top]]]))
    tail = sum(_quad(scaled, float(l), float(r), what=what) for l, r in zip(cuts[:-1], cuts[1:]))
    return total + tail * math.exp(peak) if peak < 700 else math.inf


def total_variation(rep: FunctionalRep) -> float:
    """``V(g)`` of a BV representation: point jumps plus ``int |k|``."""
    if rep.class_tag.kind not in _BV_KINDS and not (
            rep.class_tag.kind is ClassKind.POLYNOMIAL and not rep.densities):
        raise FunctionalError(f"total variation needs a BV class tag, got {rep.class_tag.kind.value}")
    points = {}
    for a in rep.atoms:
        points.setdefault(a.loc, [0.0, 0.0])[0] += _side(a.loc) * a.height
    for j in rep.jumps:
        points.setdefault(j.a, [0.0, 0.0])[1] += j.value
    total = sum(abs(step + delta) + abs(delta) for step, delta in points.values())
    for d in rep.densities:
        total += _integrate_split(lambda t, d=d: abs(float(d.func(np.asarray(t)))), d,
                                  f"|density {d.name}|")
    return total


def p_phi_variation(rep: FunctionalRep, p: float, bump: Optional[BumpFunction] = None) -> float:
    """``V_{p,phi}(g) = int phi^(1+1/p) d|mu| + sum |lambda_i| phi(a_i)^(1+1/p)``.

    In the bump-free form every term is ``phi^(1/p)`` against ``|h|``, ``|delta|``
    or ``|k| dz``.
    """
    if p < 1:
        raise FunctionalError("p must be >= 1")
    phi = rep._need_bump(bump)
    e = 1.0 / p
    total = sum(abs(a.height) * phi.pow(a.loc, e) for a in rep.atoms)
    total += sum(abs(j.value) * phi.pow(j.a, e) for j in rep.jumps)
    for d in rep.densities:
        def log_integrand(t, d=d):
            t = np.asarray(t, dtype=np.float64)
            return e * phi.log(t) + d.abs_log(t)
        try:
            total += sum(_integrate_log(log_integrand, a, b, f"phi^(1/p)|density {d.name}|")
                         for a, b in _split_points(d))
        except QuadratureError as exc:
            raise MembershipError(
                f"phi is not in L_(1+1/p)(|mu|) for p={p}: {exc}") from exc
    if total == math.inf:
        # convergent, but beyond the double range
        warnings.warn(f"(p,phi)-variation of {rep.name} exceeds the double range", RuntimeWarning)
    elif not math.isfinite(total):
        raise MembershipError(f"(p,phi)-variation diverges for p={p}")
    return total


# ------------------------------------------------------------------ constructors

def _check_decay(phi: BumpFunction, order: int) -> None:
    z = 10.0 ** np.arange(2, 7)
    for side in (z, -z):
        lv = phi.log(side) + order * np.log(np.abs(side))
        if not (lv[-1] < lv[-2] and lv[-1] < math.log(1e-6)):
            raise MembershipError(
                f"bump {phi.name} does not decay faster than |z|^-{order}; "
                "polynomials need super-polynomial decay (pass assume_decay=True to override)")


def from_polynomial(coeffs: Sequence[float], bump: BumpFunction, p: float = 1.0,
                    assume_decay: bool = False) -> FunctionalRep:
    """Polynomial ``sum coeffs[i] x^i`` (ascending powers) as a G-class member.

    ``c = g(0)`` and ``phi dmu = sgn(z) g'(z) dz`` with no jump part.
    """
    coeffs = [float(v) for v in coeffs]
    poly = np.polynomial.Polynomial(coeffs)
    deriv = poly.deriv()
    degree = poly.degree() if any(coeffs) else 0
    if not assume_decay and bump.superpolynomial is not True and degree > 0:
        _check_decay(bump, 2 * degree + 4)
    tag = ClassTag(ClassKind.POLYNOMIAL, {"coefficients": coeffs, "p": p})
    if degree == 0 or not any(coeffs[1:]):
        return FunctionalRep(coeffs[0] if coeffs else 0.0, bump=bump, class_tag=tag,
                             name="polynomial")
    g0 = float(poly(0.0))
    expr_g = sum(sympy.Float(cf) * _Z ** i for i, cf in enumerate(coeffs))
    dens = Density(
        func=lambda z: np.sign(z) * deriv(z),
        breakpoints=(0.0,),
        cumulative=lambda z: poly(z) - g0,
        log_abs=lambda z: np.log(np.abs(deriv(np.asarray(z)))),
        expr=str(sympy.sign(_Z) * sympy.diff(expr_g, _Z)),
        cumulative_expr=str(expr_g - g0),
        name="polynomial'")
    return FunctionalRep(g0, densities=(dens,), bump=bump, class_tag=tag, name="polynomial")


def from_derivative(gprime: Callable, g0: float, bump: Optional[BumpFunction] = None,
                    antiderivative: Optional[Callable] = None, *, expr: Optional[str] = None,
                    antiderivative_expr: Optional[str] = None, support=(-math.inf, math.inf),
                    class_tag: Optional[ClassTag] = None, name: str = "") -> FunctionalRep:
    """Absolutely continuous ``g`` from ``g'`` and ``g(0)``: ``phi dmu = sgn(z) g'(z) dz``."""
    cum = None
    if antiderivative is not None:
        base = float(antiderivative(np.array(0.0)))
        cum = lambda z: np.asarray(antiderivative(z), dtype=float) - base  # noqa: E731
    dens = Density(
        func=lambda z: np.sign(z) * np.asarray(gprime(z), dtype=float),
        support=tuple(support), breakpoints=(0.0,), cumulative=cum,
        expr=f"sign(z)*({expr})" if expr else None,
        cumulative_expr=(f"({antiderivative_expr}) - ({sympy.sympify(antiderivative_expr).subs('z', 0)})"
                         if antiderivative_expr else None),
        name=name + "'")
    return FunctionalRep(float(g0), densities=(dens,), bump=bump,
                         class_tag=class_tag or ClassTag(ClassKind.GCLASS), name=name)


def _jump_entries(jumps):
    for entry in jumps:
        if isinstance(entry, dict):
            yield float(entry["a"]), float(entry["h"]), entry.get("side", "right")
        elif len(entry) == 3:
            yield float(entry[0]), float(entry[1]), entry[2]
        else:
            yield float(entry[0]), float(entry[1]), "right"


def from_bv(jumps=(), density: Optional[Density] = None, c: float = 0.0,
            bump: Optional[BumpFunction] = None, p: float = 1.0,
            class_tag: Optional[ClassTag] = None, name: str = "bv") -> FunctionalRep:
    """BV function ``g = c + sum h_i step_i + int_{-inf}^x g'`` as a G-class member.

    ``jumps`` holds ``(a, h)`` or ``(a, h, side)``: a right-continuous step of
    height ``h`` at ``a`` (``side="right"``, value at ``a`` is the right limit)
    or a left-continuous one (``side="left"``). ``density`` is the
    bump-free density ``g'``; ``c`` is the limit of ``g`` at minus infinity.
    The representation constant is ``g(0+)``; right-continuous steps become
    atoms and left-continuous ones add a point correction.
    """
    entries = list(_jump_entries(jumps))
    atoms, corrections = {}, {}
    c_rep = float(c)
    for a, h, side in entries:
        if side not in ("right", "left"):
            raise FunctionalError(f"jump side must be 'right' or 'left', got {side!r}")
        if a <= 0:
            c_rep += h
        atoms[a] = atoms.get(a, 0.0) + _side(a) * h
        if side == "left":
            corrections[a] = corrections.get(a, 0.0) - h
    dens = ()
    if density is not None:
        lo, hi = density.support
        below = _quad(_scalar(density.func), lo, min(0.0, hi), density.breakpoints,
                      "BV density below 0") if lo < min(0.0, hi) else 0.0
        if density.cumulative is not None and math.isinf(lo):
            below = float(density.cumulative(np.array(0.0)) - density.cumulative(np.array(-1e300)))
        c_rep += below
        f = density.func
        dens = (replace(density, func=lambda z: np.where(np.asarray(z) > 0, 1.0, -1.0) * f(z),
                        cumulative=(None if density.cumulative is None else
                                    _shifted(density.cumulative)),
                        log_abs=density.log_abs,
                        expr=f"Piecewise(({density.expr}, z > 0), (-({density.expr}), True))"
                        if density.expr else None,
                        cumulative_expr=None,
                        breakpoints=tuple(sorted({0.0, *density.breakpoints}))),)
    tag = class_tag or ClassTag(ClassKind.BV, {"p": p})
    rep = FunctionalRep(c_rep, tuple(Atom(a, h) for a, h in atoms.items() if h != 0.0), dens,
                        tuple(Jump(a, v) for a, v in corrections.items() if v != 0.0), bump,
                        tag, name)
    return rep


def _shifted(cum):
    base = float(cum(np.array(0.0)))
    return lambda z: np.asarray(cum(z), dtype=float) - base


def indicator(K: float = 1.0, shape: str = "[K,inf)", bump: Optional[BumpFunction] = None,
              p: float = 1.0) -> FunctionalRep:
    """Indicator of ``[K, inf)``, ``(K, inf)``, ``(-inf, K)`` or ``(-inf, K]``."""
    table = {"[K,inf)": (0.0, 1.0, "right"), "(K,inf)": (0.0, 1.0, "left"),
             "(-inf,K)": (1.0, -1.0, "right"), "(-inf,K]": (1.0, -1.0, "left")}
    if shape not in table:
        raise FunctionalError(f"unknown indicator shape {shape!r}; known: {sorted(table)}")
    c, h, side = table[shape]
    return from_bv([(K, h, side)], c=c, bump=bump or exp_abs(), p=p,
                   class_tag=ClassTag(ClassKind.INDICATOR, {"K": K, "shape": shape}),
                   name="indicator")


def staircase(locations=(0.5, 1.0, 1.5), heights=(0.5, -0.25, 0.125),
              bump: Optional[BumpFunction] = None, p: float = 1.0) -> FunctionalRep:
    if len(locations) != len(heights):
        raise FunctionalError("staircase needs one height per location")
    return from_bv(list(zip(locations, heights)), bump=bump or exp_abs(), p=p,
                   class_tag=ClassTag(ClassKind.BV, {"locations": list(locations),
                                                     "heights": list(heights)}),
                   name="staircase")


def arctan(bump: Optional[BumpFunction] = None, p: float = 1.0) -> FunctionalRep:
    dens = Density(func=lambda z: 1.0 / (1.0 + np.asarray(z) ** 2), cumulative=np.arctan,
                   expr="1/(1 + z**2)", name="arctan'")
    return from_bv(density=dens, c=-math.pi / 2, bump=bump or exp_abs(), p=p,
                   class_tag=ClassTag(ClassKind.BV, {"function": "arctan"}), name="arctan")


def rebump(rep: FunctionalRep, bump: BumpFunction) -> FunctionalRep:
    """Re-express ``rep`` under ``bump``: ``dmu_phi = (psi / phi) dmu_psi``, same ``g``."""
    return replace(rep, bump=bump)


def union(first: FunctionalRep, second: FunctionalRep) -> FunctionalRep:
    """Representation of ``g1 + g2``; both must share one bump."""
    if first.bump is not None and second.bump is not None and first.bump != second.bump:
        raise FunctionalError("union needs a common bump; rebump one side first")
    atoms = {}
    for a in first.atoms + second.atoms:
        atoms[a.loc] = atoms.get(a.loc, 0.0) + a.height
    jumps = {}
    for j in first.jumps + second.jumps:
        jumps[j.a] = jumps.get(j.a, 0.0) + j.value
    return FunctionalRep(first.constant_c + second.constant_c,
                         tuple(Atom(k, v) for k, v in atoms.items()),
                         first.densities + second.densities,
                         tuple(Jump(k, v) for k, v in jumps.items()),
                         first.bump or second.bump, ClassTag(ClassKind.GCLASS),
                         f"{first.name}+{second.name}")


# ----------------------------------------------------------- exponential growth

@dataclass(frozen=True)
class Membership:
    member: bool
    v_p_phi: Optional[float]
    reason: str


def exp_growth(c: float, gamma: float, bump: Optional[BumpFunction] = None,
               p: float = 1.0) -> FunctionalRep:
    """``g(z) = exp(c |z|^gamma)`` with ``g~'(0) = 0``."""
    if not (c > 0 and 0 < gamma <= 2):
        raise FunctionalError("need c > 0 and 0 < gamma <= 2")

    def gp(z):
        a = np.abs(np.asarray(z, dtype=float))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = c * gamma * a ** (gamma - 1.0) * np.exp(c * a ** gamma)
        return np.where(a > 0, out, 0.0)

    def log_abs(z):
        a = np.abs(np.asarray(z, dtype=float))
        with np.errstate(divide="ignore"):
            return np.where(a > 0, math.log(c * gamma) + (gamma - 1.0) * np.log(a) + c * a ** gamma,
                            -np.inf)

    dens = Density(func=gp, breakpoints=(0.0,),
                   cumulative=lambda z: np.exp(c * np.abs(np.asarray(z, dtype=float)) ** gamma) - 1.0,
                   log_abs=log_abs,
                   expr=f"{c}*{gamma}*Abs(z)**({gamma}-1)*exp({c}*Abs(z)**{gamma})",
                   cumulative_expr=f"exp({c}*Abs(z)**{gamma}) - 1",
                   log_abs_expr=f"log({c}*{gamma}) + ({gamma}-1)*log(Abs(z)) + {c}*Abs(z)**{gamma}",
                   name="exp_growth'")
    return FunctionalRep(1.0, densities=(dens,), bump=bump,
                         class_tag=ClassTag(ClassKind.EXP_GROWTH, {"c": c, "gamma": gamma, "p": p}),
                         name="exp_growth")


def exp_growth_membership(c: float, gamma: float, theta: float, p: float,
                          bump: BumpFunction) -> Membership:
    """Decide ``exp(c|z|^gamma)`` in ``G_{p,phi}`` for the bounded-coefficient Euler bump.

    For ``gamma < 2`` the Gaussian tail always wins. For ``gamma = 2`` the
    integrand ``phi^(1/p) |g'|`` has net exponent ``(c - theta/(2 M^2 T p)) z^2``,
    so membership holds iff ``c < theta / (2 M^2 T p)`` (strict).
    """
    if bump.construction is not Construction.GAUSSIAN_EULER:
        raise FunctionalError("membership is decided for the bounded-coefficient Euler bump")
    prm = bump.params
    if not math.isclose(prm["theta"], theta, rel_tol=1e-12):
        raise FunctionalError(f"theta={theta} differs from the bump's theta={prm['theta']}")
    if not (c > 0 and 0 < gamma <= 2 and p >= 1):
        raise FunctionalError("need c > 0, 0 < gamma <= 2, p >= 1")
    threshold = theta / (2.0 * prm["M"] ** 2 * prm["T"] * p)
    if gamma < 2:
        reason = "gamma < 2: Gaussian tail dominates"
    elif c < threshold:
        reason = f"gamma = 2 and c < {threshold:.6g}"
    else:
        return Membership(False, None, f"gamma = 2 and c >= {threshold:.6g}: integrand not decaying")
    rep = exp_growth(c, gamma, bump, p)
    return Membership(True, p_phi_variation(rep, p), reason)


# ------------------------------------------------------------------ registry

FUNCTIONALS = {
    "arctan": (arctan, "arctan(x); BV with V = pi"),
    "exp_growth": (lambda c=0.25, gamma=1.0, bump_params=None, p=1.0:
                   exp_growth(c, gamma, euler_tail_bump(TailKind.BOUNDED,
                                                        **(bump_params or {"theta": 0.5, "M": 1.0})),
                              p),
                   "exp(c |x|^gamma) under the bounded-coefficient Euler bump"),
    "indicator": (indicator, "indicator of [K, inf) (or other half-line shapes)"),
    "polynomial": (lambda coefficients=(0.0, 0.0, 1.0), bump=None, p=1.0:
                   from_polynomial(coefficients, bump or exp_abs(), p),
                   "polynomial with ascending coefficients under exp(-|z|)"),
    "staircase": (staircase, "right-continuous step function; default jumps 0.5, -0.25, 0.125"),
}


def functional(name: str, **params) -> FunctionalRep:
    if name not in FUNCTIONALS:
        raise FunctionalError(f"unknown functional {name!r}; known: {sorted(FUNCTIONALS)}")
    return FUNCTIONALS[name][0](**params)


def load(doc) -> FunctionalRep:
    """A registry reference ``{"name": ..., "params": {...}}``, a name, or a full JSON rep."""
    if isinstance(doc, str):
        return functional(doc)
    if "c" in doc or "atoms" in doc or "densities" in doc:
        return FunctionalRep.from_json(doc)
    return functional(doc["name"], **doc.get("params", {}))
