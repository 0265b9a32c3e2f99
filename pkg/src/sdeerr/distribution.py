"""Laws of terminal values: the rearrangement X*, alpha(K), d_X(K) and D_X(K).

``X*(s) = inf{c : P(X > c) <= s}`` is the upper-quantile function. The
minimal slope ``d_X(K)`` is the infimum over ``s != alpha(K)`` of the chord
slope ``|X*(s) - K| / |s - alpha(K)|`` with ``alpha(K) = P(X >= K)``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

REL_TOL = 1e-12
ABS_FLOOR = 1e-300
DX_SLACK = 0.05
REFINE_DEPTH = 40


class DistributionError(ValueError):
    pass


class Kind(str, enum.Enum):
    ANALYTIC = "AnalyticCdf"
    EMPIRICAL = "EmpiricalSample"


class Side(str, enum.Enum):
    UPPER_GEQ = "UpperGeq"
    LOWER_LEQ = "LowerLeq"


def _vector(fn):
    return lambda x: np.asarray(fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


@dataclass(frozen=True)
class DistributionModel:
    """A law on the real line, analytic or empirical.

    Analytic models carry ``cdf`` and optionally ``sf_geq`` (``P(X >= x)``,
    which differs from ``1 - cdf`` only at atoms), ``isf`` (a closed-form
    upper quantile) and ``density_sup``.
    """

    kind: Kind
    name: str = "anonymous"
    cdf: Optional[Callable] = None
    sf_geq: Optional[Callable] = None
    isf: Optional[Callable] = None
    pdf: Optional[Callable] = None
    density_sup: Optional[float] = None
    sample: Optional[np.ndarray] = None
    scale_hint: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is Kind.EMPIRICAL:
            s = np.asarray(self.sample, dtype=np.float64)
            if s.ndim != 1 or len(s) == 0:
                raise DistributionError("empirical sample must be a non-empty 1-d array")
            if not np.all(np.isfinite(s)):
                raise DistributionError("empirical sample contains non-finite values")
            s = np.sort(s)
            s.setflags(write=False)
            object.__setattr__(self, "sample", s)
        elif self.cdf is None:
            raise DistributionError("analytic models need a cdf")

    # elementary probabilities ------------------------------------------------

    def cdf_at(self, x):
        """``P(X <= x)``."""
        if self.kind is Kind.EMPIRICAL:
            return np.searchsorted(self.sample, x, side="right") / len(self.sample)
        return self.cdf(x)

    def sf_strict(self, x):
        """``P(X > x)``."""
        sf = self.meta.get("sf")
        if self.kind is Kind.ANALYTIC and sf is not None:
            return sf(x)
        return 1.0 - np.asarray(self.cdf_at(x))

    def alpha(self, k):
        """``P(X >= k)``."""
        if self.kind is Kind.EMPIRICAL:
            n = len(self.sample)
            return (n - np.searchsorted(self.sample, k, side="left")) / n
        if self.sf_geq is not None:
            return self.sf_geq(k)
        return 1.0 - np.asarray(self.cdf(k))

    # checks ------------------------------------------------------------------

    def validate(self, grid: Optional[np.ndarray] = None) -> None:
        """Spot-check monotonicity, limits and ``density_sup`` on a grid."""
        if self.kind is Kind.EMPIRICAL:
            return
        if grid is None:
            grid = np.linspace(-50, 50, 20001) * self.scale_hint
        f = np.asarray(self.cdf(grid))
        if np.any(np.diff(f) < -1e-12):
            raise DistributionError(f"{self.name}: cdf is not nondecreasing")
        far = 1e6 * self.scale_hint
        lo, hi = float(self.cdf(-far)), float(self.cdf(far))
        if lo > 1e-6 or hi < 1 - 1e-6:
            raise DistributionError(f"{self.name}: cdf limits are {lo}, {hi}")
        if self.density_sup is not None:
            slopes = np.diff(f) / np.diff(grid)
            if np.max(slopes) > self.density_sup * (1 + 1e-6):
                raise DistributionError(
                    f"{self.name}: cdf slope {np.max(slopes)} exceeds density_sup "
                    f"{self.density_sup}")


# rearrangement ------------------------------------------------------------------

def _check_open_unit(s: np.ndarray) -> None:
    if np.any(~(s > 0)) or np.any(~(s < 1)):
        raise DistributionError("rearrangement level s must lie in the open interval (0,1)")


def _bisect_rearrangement(model: DistributionModel, s: np.ndarray) -> np.ndarray:
    """Bracketing search for ``inf{c : P(X > c) <= s}``, elementwise."""
    scale = model.scale_hint

    def ok(c, target):
        return np.asarray(model.sf_strict(c)) <= target

    hi = np.full(s.shape, scale)
    lo = np.full(s.shape, -scale)
    for _ in range(2100):
        bad = ~ok(hi, s)
        if not bad.any():
            break
        hi = np.where(bad, hi * 2.0, hi)
    for _ in range(2100):
        bad = ok(lo, s)
        if not bad.any():
            break
        lo = np.where(bad, lo * 2.0, lo)
    for _ in range(4000):
        width = hi - lo
        done = width <= np.maximum(REL_TOL * np.abs(hi), ABS_FLOOR)
        mid = lo + 0.5 * width
        collapsed = (mid <= lo) | (mid >= hi)
        if np.all(done | collapsed):
            break
        good = ok(mid, s)
        hi = np.where(good & ~done, mid, hi)
        lo = np.where(~good & ~done, mid, lo)
    return hi


def rearrangement(model: DistributionModel, s):
    """``X*(s)`` for ``s`` in ``(0, 1)``; scalar in, scalar out."""
    arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
    _check_open_unit(arr)
    if model.kind is Kind.EMPIRICAL:
        n = len(model.sample)
        m = np.floor(arr * n).astype(np.int64)
        out = model.sample[np.clip(n - m - 1, 0, n - 1)]
    elif model.isf is not None:
        out = np.asarray(model.isf(arr), dtype=np.float64)
    else:
        out = _bisect_rearrangement(model, arr)
    return float(out[0]) if np.ndim(s) == 0 else out


def draw(model: DistributionModel, size: int, seed: int) -> np.ndarray:
    """Sample of ``size`` points as ``X*(U)``, U uniform; X* is equidistributed with X."""
    u = np.random.Generator(np.random.PCG64(seed)).random(size)
    u = np.clip(u, 1e-300, np.nextafter(1.0, 0.0))
    return np.asarray(rearrangement(model, u), dtype=np.float64)


def alpha_level(model: DistributionModel, k: float) -> float:
    """``P(X >= K)``."""
    return float(np.clip(model.alpha(k), 0.0, 1.0))


def tail_probability(model: DistributionModel, k: float, side=Side.UPPER_GEQ) -> float:
    side = Side(side)
    if side is Side.UPPER_GEQ:
        return alpha_level(model, k)
    return float(np.clip(model.cdf_at(k), 0.0, 1.0))


class SlopeEstimate(NamedTuple):
    value: float
    resolution: float
    degenerate: bool
    argmin: float


def slope_grid(alpha: float, grid_size: int) -> np.ndarray:
    """Nested evaluation grid in (0,1): dyadic base plus refinement near alpha and the tails.

    The grid for a larger ``grid_size`` contains the grid for a smaller one,
    so the infimum estimate can only decrease as ``grid_size`` grows.
    """
    levels = max(1, math.ceil(math.log2(grid_size)))
    base = np.arange(1, 2 ** levels) / 2.0 ** levels
    steps = 2.0 ** -np.arange(1, REFINE_DEPTH + 1)
    tails = np.concatenate([steps, 1.0 - steps])
    near = np.concatenate([alpha - steps, alpha + steps])
    s = np.unique(np.concatenate([base, tails, near]))
    return s[(s > 0) & (s < 1) & (s != alpha)]


def minimal_slope_dx(model: DistributionModel, k: float, grid_size: int = 4096) -> SlopeEstimate:
    """Grid estimate of ``d_X(K)``; an over-estimate that decreases with ``grid_size``."""
    if grid_size < 100:
        raise DistributionError("grid_size must be >= 100")
    a = alpha_level(model, k)
    s = slope_grid(a, grid_size)
    xs = rearrangement(model, s)
    ratio = np.abs(xs - k) / np.abs(s - a)
    ratio[~np.isfinite(xs)] = np.inf
    i = int(np.argmin(ratio))
    value = float(ratio[i])
    resolution = max(2.0 ** -max(1, math.ceil(math.log2(grid_size))), 2.0 ** -REFINE_DEPTH)
    degenerate = value <= 1e-12
    if degenerate:
        log.warning("%s: zero minimal slope at K=%g (flat quantile stretch); D_X is infinite",
                    model.name, k)
        value = 0.0
    return SlopeEstimate(value, resolution, degenerate, float(s[i]))


def dx_upper_bound(model: DistributionModel, k: float, grid_size: int = 4096) -> float:
    """``D_X(K) = 1 / d_X(K)``; ``inf`` when the slope vanishes."""
    est = minimal_slope_dx(model, k, grid_size)
    if est.degenerate:
        return math.inf
    d_upper = 1.0 / est.value
    if model.density_sup is not None and d_upper > model.density_sup * (1 + DX_SLACK):
        raise DistributionError(
            f"{model.name}: D_X({k}) = {d_upper} exceeds sup density {model.density_sup}")
    return d_upper


# constructors ------------------------------------------------------------------

def from_scipy(dist, name: str, density_sup: Optional[float] = None,
               scale_hint: Optional[float] = None, **meta) -> DistributionModel:
    """Wrap a frozen continuous scipy distribution."""
    if scale_hint is None:
        lo, hi = dist.ppf(0.25), dist.ppf(0.75)
        scale_hint = float(max(abs(lo), abs(hi), hi - lo, 1e-300))
    return DistributionModel(
        Kind.ANALYTIC, name=name, cdf=_vector(dist.cdf), sf_geq=_vector(dist.sf),
        isf=_vector(dist.isf), pdf=_vector(dist.pdf), density_sup=density_sup,
        scale_hint=scale_hint, meta={"sf": _vector(dist.sf), **meta})


def uniform(a: float = 0.0, b: float = 1.0) -> DistributionModel:
    if not b > a:
        raise DistributionError("uniform needs b > a")
    width = b - a

    def isf(s):
        return a + (1.0 - s) * width

    return DistributionModel(
        Kind.ANALYTIC, name=f"uniform({a},{b})",
        cdf=lambda x: np.clip((np.asarray(x, dtype=float) - a) / width, 0.0, 1.0),
        isf=isf, pdf=lambda x: np.where((np.asarray(x) >= a) & (np.asarray(x) <= b), 1 / width, 0.0),
        density_sup=1.0 / width, scale_hint=max(abs(a), abs(b)),
        meta={"sf": lambda x: np.clip((b - np.asarray(x, dtype=float)) / width, 0.0, 1.0)})


def normal(mean: float = 0.0, sd: float = 1.0) -> DistributionModel:
    return from_scipy(stats.norm(mean, sd), f"normal({mean},{sd})",
                      density_sup=1.0 / (sd * math.sqrt(2 * math.pi)),
                      scale_hint=max(abs(mean), sd))


def lognormal(mu: float = 0.0, sd: float = 1.0) -> DistributionModel:
    """Law of ``exp(mu + sd Z)``."""
    sup = math.exp(sd * sd / 2 - mu) / (sd * math.sqrt(2 * math.pi))
    return from_scipy(stats.lognorm(s=sd, scale=math.exp(mu)), f"lognormal({mu},{sd})",
                      density_sup=sup, scale_hint=math.exp(mu))


def point_mass(loc: float) -> DistributionModel:
    return mixture([(1.0, loc)], name=f"point_mass({loc})")


def mixture(components: Sequence, name: str = "mixture") -> DistributionModel:
    """Finite mixture of ``(weight, component)`` pairs; a float component is an atom."""
    weights = np.array([w for w, _ in components], dtype=float)
    if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, rel_tol=1e-12):
        raise DistributionError("mixture weights must be nonnegative and sum to 1")
    parts = [c for _, c in components]
    atoms = [float(c) for c in parts if not isinstance(c, DistributionModel)]

    def cdf(x):
        x = np.asarray(x, dtype=float)
        return sum(w * (np.where(x >= c, 1.0, 0.0) if not isinstance(c, DistributionModel)
                        else np.asarray(c.cdf_at(x))) for w, c in zip(weights, parts))

    def sf_geq(x):
        x = np.asarray(x, dtype=float)
        return sum(w * (np.where(x <= c, 1.0, 0.0) if not isinstance(c, DistributionModel)
                        else np.asarray(c.alpha(x))) for w, c in zip(weights, parts))

    def sf(x):
        return 1.0 - cdf(x)

    if atoms:
        sup = None
    else:
        sups = [c.density_sup for c in parts]
        sup = None if any(v is None for v in sups) else float(np.dot(weights, sups))
    scales = [abs(c) if not isinstance(c, DistributionModel) else c.scale_hint for c in parts]
    return DistributionModel(Kind.ANALYTIC, name=name, cdf=cdf, sf_geq=sf_geq,
                             density_sup=sup, scale_hint=max(max(scales), 1e-300),
                             meta={"sf": sf, "atoms": atoms})


def empirical(sample, name: str = "empirical") -> DistributionModel:
    return DistributionModel(Kind.EMPIRICAL, name=name, sample=np.asarray(sample, dtype=float))


def load_sample(path, name: Optional[str] = None) -> DistributionModel:
    """Empirical model from a CSV/text column or a flat little-endian float64 file."""
    path = Path(path)
    if path.suffix.lower() in {".csv", ".txt", ".dat"}:
        data = np.loadtxt(path, dtype=np.float64, delimiter=",", ndmin=1)
    else:
        data = np.fromfile(path, dtype="<f8")
    return empirical(data.ravel(), name or path.stem)


def terminal_law(spec) -> DistributionModel:
    """Analytic law of ``X_T`` for the built-in models that have one."""
    prm = spec.params
    if spec.name == "gbm":
        mu, sig, x0, T = prm["mu"], prm["sigma"], prm["x0"], prm["T"]
        if x0 <= 0:
            raise DistributionError("gbm terminal law needs x0 > 0")
        return lognormal(math.log(x0) + (mu - 0.5 * sig * sig) * T, abs(sig) * math.sqrt(T))
    if spec.name == "additive":
        return normal(prm["x0"] + prm["mu"] * prm["T"], abs(prm["sigma"]) * math.sqrt(prm["T"]))
    raise DistributionError(f"no analytic terminal law for model {spec.name!r}")


REGISTRY = {
    "lognormal01": (lambda: lognormal(0.0, 1.0), "law of exp(W_1)"),
    "lognormal_gbm_T1": (lambda: lognormal(-0.5, 1.0), "law of S_1 = exp(W_1 - 1/2)"),
    "point_mass": (point_mass, "Dirac mass at loc"),
    "stdnormal": (lambda: normal(0.0, 1.0), "standard normal"),
    "uniform01": (lambda: uniform(0.0, 1.0), "uniform on [0,1]"),
}


def get(name: str, **params) -> DistributionModel:
    if name not in REGISTRY:
        raise DistributionError(f"unknown distribution {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name][0](**params)
