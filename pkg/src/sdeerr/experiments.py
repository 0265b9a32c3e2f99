"""Monte Carlo experiments: functional and strong errors, rate fits, lower bound.

Every estimate couples the reference solution and the scheme on one Brownian
driver. Sub-seeds come from ``rng.derive_seed(master, kind, ...)`` so each
(experiment, mesh) cell is reproducible on its own.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from . import bounds, distribution, functionals, rng, sde
from .functionals import ClassKind, FunctionalRep
from .sde import Partition, SchemeTag, SdeSpec

log = logging.getLogger(__name__)


class ExperimentError(ValueError):
    pass


@dataclass
class ErrorEstimate:
    value: float
    std_error: float
    n_paths: int
    p: float
    mesh: float
    n_valid: int = 0
    exclusion_rate: float = 0.0
    moment: Optional[float] = None
    moment_std_error: Optional[float] = None

    def __post_init__(self):
        if self.std_error < 0:
            raise ExperimentError("std_error must be nonnegative")


@dataclass
class RateReport:
    mesh_grid: np.ndarray
    values: np.ndarray
    fitted_slope: float
    slope_ci: tuple
    intercept: float
    reference_slope: Optional[float] = None
    scheme_tag: Optional[SchemeTag] = None
    functional_id: Optional[str] = None
    estimates: list = field(default_factory=list)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.slope_ci[1] - self.slope_ci[0])

    def local_slopes(self) -> np.ndarray:
        """Slope between each mesh and the previous (coarser) one; NaN first."""
        lm, lv = np.log(self.mesh_grid), np.log(self.values)
        return np.concatenate([[math.nan], np.diff(lv) / np.diff(lm)])


# ------------------------------------------------------------------ estimators

def _moment_stats(summand: np.ndarray):
    n = len(summand)
    mean = float(np.mean(summand))
    sd = float(np.std(summand, ddof=1)) if n > 1 else 0.0
    return mean, sd / math.sqrt(n)


def functional_error_from_sample(sample: sde.CoupledSample, rep: FunctionalRep,
                                 p: float = 1.0) -> ErrorEstimate:
    """``mean |g(X_T) - g(X_T^pi)|^p`` over the valid paths of ``sample``."""
    valid = sample.valid
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ExperimentError("no valid paths")
    gx = functionals.evaluate_many(rep, sample.exact_terminal[valid])
    gy = functionals.evaluate_many(rep, sample.scheme_terminal[valid])
    summand = np.abs(gx - gy) ** p
    mean, se = _moment_stats(summand)
    if rep.class_tag.kind is ClassKind.INDICATOR:
        # disagreement indicator: binomial variance
        se = math.sqrt(max(mean * (1.0 - mean), 0.0) / n_valid)
    return ErrorEstimate(mean, se, len(valid), p, sample.partition.mesh, n_valid,
                         sample.exclusion_rate)


def estimate_functional_error(spec: SdeSpec, scheme, partition: Partition, rep: FunctionalRep,
                              p: float, n_paths: int, seed: int, *, reference: str = "auto",
                              fine_factor: Optional[int] = None, threads: Optional[int] = None,
                              backend=None) -> ErrorEstimate:
    """Coupled estimate of ``E|g(X_T) - g(X_T^pi)|^p``.

    Without an exact solution pass ``reference="fine"`` to use a fine Euler
    run (mesh at most ``mesh^2 T``) as the surrogate for ``X_T``.
    """
    if p <= 0:
        raise ExperimentError("p must be positive")
    sample = sde.couple(spec, partition, scheme, n_paths, seed, reference=reference,
                        fine_factor=fine_factor, threads=threads, backend=backend)
    return functional_error_from_sample(sample, rep, p)


def strong_error_from_differences(diff: np.ndarray, p: float, mesh: float,
                                  n_total: Optional[int] = None) -> ErrorEstimate:
    """``||X - X^||_p`` with a delta-method standard error."""
    valid = np.isfinite(diff)
    d = np.abs(diff[valid])
    n_total = n_total or len(diff)
    if len(d) == 0:
        raise ExperimentError("no valid paths")
    moment, mse = _moment_stats(d ** p)
    value = moment ** (1.0 / p)
    se = mse * value / (p * moment) if moment > 0 else 0.0
    return ErrorEstimate(value, se, n_total, p, mesh, len(d), 1.0 - len(d) / n_total,
                         moment, mse)


def estimate_strong_error(spec: SdeSpec, scheme, partition: Partition, p: float, n_paths: int,
                          seed: int, *, sup_norm: bool = False, monitor_factor: int = 8,
                          reference: str = "auto", threads: Optional[int] = None,
                          backend=None, chunk_paths: int = 8192) -> ErrorEstimate:
    """``||X_T - X_T^pi||_p``, or ``||sup_t |X_t - X_t^E| ||_p`` on a monitoring grid.

    The monitoring grid refines the partition by ``monitor_factor``; the exact
    solution is evaluated there from the bridged Brownian values.
    """
    tag = SchemeTag.parse(scheme)
    if p < 1:
        raise ExperimentError("p must be >= 1")
    if not sup_norm:
        sample = sde.couple(spec, partition, tag, n_paths, seed, reference=reference,
                            threads=threads, backend=backend)
        return strong_error_from_differences(sample.exact_terminal - sample.scheme_terminal,
                                             p, partition.mesh)
    if tag is SchemeTag.MILSTEIN:
        raise ExperimentError("sup_norm is defined for the continuous-time Euler scheme only")
    if spec.exact_solution is None:
        raise ExperimentError("sup_norm needs an exact solution")
    grid = partition.refine(monitor_factor).nodes
    sups = np.empty(n_paths)
    for start in range(0, n_paths, chunk_paths):
        count = min(chunk_paths, n_paths - start)
        run = sde.simulate_euler_continuous(spec, partition, grid, count, seed,
                                            path_start=start, backend=backend)
        exact = spec.exact_solution(run.brownian, grid[None, :])
        sups[start:start + count] = np.max(np.abs(exact - run.values), axis=1)
    return strong_error_from_differences(sups, p, partition.mesh)


# ------------------------------------------------------------------ rate fitting

def fit_rate(pairs: Iterable, *, reference_slope: Optional[float] = None, scheme_tag=None,
             functional_id: Optional[str] = None, estimates=None,
             confidence: float = 0.95) -> RateReport:
    """Least-squares slope of ``log value`` against ``log mesh`` with a t-based CI."""
    data = sorted(((float(m), float(v)) for m, v in pairs), key=lambda t: -t[0])
    if len(data) < 3:
        raise ExperimentError("fit_rate needs at least 3 mesh points")
    mesh = np.array([m for m, _ in data])
    vals = np.array([v for _, v in data])
    if np.any(~(vals > 0)):
        raise ExperimentError("fit_rate needs positive values (log undefined)")
    if np.any(~(mesh > 0)) or len(np.unique(mesh)) != len(mesh):
        raise ExperimentError("mesh sizes must be positive and distinct")
    if mesh.max() / mesh.min() < 4.0:
        raise ExperimentError("mesh points must span at least 2 octaves")
    x, y = np.log(mesh), np.log(vals)
    res = stats.linregress(x, y)
    dof = len(x) - 2
    if dof > 0:
        half = float(stats.t.ppf(0.5 + confidence / 2, dof)) * float(res.stderr)
    else:
        half = 0.0
    slope = float(res.slope)
    return RateReport(mesh, vals, slope, (slope - half, slope + half), float(res.intercept),
                      reference_slope, SchemeTag.parse(scheme_tag) if scheme_tag else None,
                      functional_id, list(estimates or []))


def rate_experiment(spec: SdeSpec, scheme, n_grid: Sequence[int], n_paths: int, master_seed: int,
                    *, kind: str = "strong", p: float = 2.0, rep: Optional[FunctionalRep] = None,
                    reference: str = "auto", threads: Optional[int] = None,
                    backend=None) -> RateReport:
    """Strong or functional errors over equidistant meshes, then a slope fit."""
    tag = SchemeTag.parse(scheme)
    estimates = []
    for n in n_grid:
        part = Partition.equidistant(spec.horizon_T, int(n))
        seed = rng.derive_seed(master_seed, kind, tag.value, int(n))
        if kind == "strong":
            est = estimate_strong_error(spec, tag, part, p, n_paths, seed, reference=reference,
                                        threads=threads, backend=backend)
        elif kind == "functional":
            if rep is None:
                raise ExperimentError("functional rate needs a functional")
            est = estimate_functional_error(spec, tag, part, rep, p, n_paths, seed,
                                            reference=reference, threads=threads,
                                            backend=backend)
        else:
            raise ExperimentError(f"unknown rate kind {kind!r}")
        estimates.append(est)
    ref = tag.strong_order if kind == "strong" else None
    return fit_rate([(e.mesh, e.value) for e in estimates], reference_slope=ref, scheme_tag=tag,
                    functional_id=rep.name if rep is not None else None, estimates=estimates)


# ------------------------------------------------------------------ sharpness

@dataclass(frozen=True)
class SharpnessResult:
    epsilon: float
    p: float
    indicator_error: float
    lp_moment: float
    bound_value: float

    @property
    def ratio(self) -> float:
        return self.indicator_error / self.bound_value

    @property
    def dominated(self) -> bool:
        return self.indicator_error <= self.bound_value

    @property
    def passed(self) -> bool:
        return self.dominated and self.ratio >= 1.0 / 3.0


def sharpness_example(epsilon: float, p: float) -> SharpnessResult:
    """Closed-form extremal example: ``X = omega`` uniform on [0,1], ``K = 1/2``.

    ``X^`` shifts ``X`` by ``eps/2`` towards and across ``K`` on a band of width
    ``eps``, so the indicator error is ``eps`` and ``E|X - X^|^p = eps^(p+1)/2^p``
    with ``D_X(1/2) = 1``.
    """
    if not 0 < epsilon < 1:
        raise ExperimentError("epsilon must lie in (0, 1); the construction needs eps < 1")
    if p <= 0:
        raise ExperimentError("p must be positive")
    lp_moment = epsilon ** (p + 1) / 2.0 ** p
    bound = bounds.indicator_bound(1.0, lp_moment ** (1.0 / p), p)
    return SharpnessResult(epsilon, p, epsilon, lp_moment, bound)


# ------------------------------------------------------------------ lower bound

@dataclass
class LowerBoundResult:
    n_grid: list
    K_grid: np.ndarray
    max_error: np.ndarray
    argmax_K: np.ndarray
    std_error: np.ndarray
    n_paths: int

    @property
    def scaled(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.n_grid, dtype=float)) * self.max_error

    @property
    def scaled_std_error(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.n_grid, dtype=float)) * self.std_error

    @property
    def min_scaled(self) -> float:
        return float(np.min(self.scaled))


def default_k_grid(K0: float = 1.0, size: int = 200, upper_quantile: float = 0.9999) -> np.ndarray:
    law = distribution.get("lognormal_gbm_T1")
    top = distribution.rearrangement(law, 1.0 - upper_quantile)
    return np.linspace(K0, top, size)


def disagreement_curve(x: np.ndarray, y: np.ndarray, K_grid: np.ndarray) -> np.ndarray:
    """``P(chi_[K,inf)(x) != chi_[K,inf)(y))`` for every K, from sorted mins and maxes."""
    lo = np.sort(np.minimum(x, y))
    hi = np.sort(np.maximum(x, y))
    count = np.searchsorted(lo, K_grid, side="left") - np.searchsorted(hi, K_grid, side="left")
    return count / len(x)


def lower_bound_harness(n_grid: Sequence[int], K_grid: Optional[Sequence[float]] = None,
                        n_paths: int = 100_000, seed: int = 0, *, K0: float = 1.0,
                        threads: Optional[int] = None, backend=None) -> LowerBoundResult:
    """``sqrt(n) max_K E|chi(S_1) - chi(S_1^E)|`` for ``dS = S dW`` on [0,1]."""
    K = default_k_grid(K0) if K_grid is None else np.asarray(K_grid, dtype=float)
    if K.size == 0:
        raise ExperimentError("K_grid must not be empty")
    if np.any(K < K0):
        raise ExperimentError(f"K_grid must lie in [K0, inf) with K0={K0}")
    spec = sde.gbm()
    maxes, args, ses = [], [], []
    for n in n_grid:
        part = Partition.equidistant(1.0, int(n))
        sub = rng.derive_seed(seed, "lower_bound", int(n))
        sample = sde.couple(spec, part, SchemeTag.EULER, n_paths, sub, threads=threads,
                            backend=backend)
        ok = sample.valid
        curve = disagreement_curve(sample.exact_terminal[ok], sample.scheme_terminal[ok], K)
        i = int(np.argmax(curve))
        m = float(curve[i])
        maxes.append(m)
        args.append(float(K[i]))
        ses.append(math.sqrt(m * (1 - m) / int(ok.sum())))
    return LowerBoundResult(list(map(int, n_grid)), K, np.array(maxes), np.array(args),
                            np.array(ses), n_paths)


# ------------------------------------------------------------------ density probe

@dataclass(frozen=True)
class DensityProbe:
    value: float
    window_width: float
    unbounded: bool
    refined_value: float


def _window_max(sorted_x: np.ndarray, width: float, offsets: int) -> float:
    lo, hi = sorted_x[0], sorted_x[-1]
    starts = np.arange(lo - width, hi + width, width / offsets)
    counts = (np.searchsorted(sorted_x, starts + width, side="left")
              - np.searchsorted(sorted_x, starts, side="left"))
    return float(np.max(counts)) / (len(sorted_x) * width)


def density_bound_probe(sample, window_count: int = 20, *, offsets: int = 4,
                        refine: int = 16) -> DensityProbe:
    """Max over sliding windows of empirical mass / width, a proxy for ``sup f_X``.

    The window width is the central 99.8% range over ``window_count``. The
    probe is repeated with ``refine`` times narrower windows; a density that
    keeps growing roughly in proportion signals atoms (unbounded density).
    """
    x = np.sort(np.asarray(sample, dtype=float))
    x = x[np.isfinite(x)]
    if len(x) < 1000:
        raise ExperimentError("density probe needs at least 1000 sample points")
    if window_count < 1:
        raise ExperimentError("window_count must be >= 1")
    span = float(np.quantile(x, 0.999) - np.quantile(x, 0.001))
    if span <= 0:
        return DensityProbe(math.inf, 0.0, True, math.inf)
    width = span / window_count
    value = _window_max(x, width, offsets)
    refined = _window_max(x, width / refine, offsets)
    return DensityProbe(value, width, refined > 0.25 * refine * value, refined)


# ------------------------------------------------------------------ GBM moments

def _gaussian_moment(k: int) -> float:
    return 0.0 if k % 2 else float(math.prod(range(k - 1, 0, -2))) if k else 1.0


def _even_at_least(p: float) -> int:
    k = int(math.ceil(p))
    return k + (k % 2)


def gbm_exact_moment_norm(p: float, mu: float = 0.0, sigma: float = 1.0, x0: float = 1.0,
                          T: float = 1.0) -> float:
    """``||S_T||_p = x0 exp((mu - sigma^2/2) T + p sigma^2 T / 2)``."""
    return abs(x0) * math.exp((mu - 0.5 * sigma * sigma) * T + 0.5 * p * sigma * sigma * T)


def gbm_scheme_moment_norm(scheme, n: int, p: float, mu: float = 0.0, sigma: float = 1.0,
                           x0: float = 1.0, T: float = 1.0) -> float:
    """Upper bound on ``||X_T^pi||_p`` for Euler/Milstein on GBM, n equal steps.

    Exact for even integer p; otherwise the next even integer (Lyapunov).
    Each step multiplies by ``a + bZ + cZ^2`` with independent standard normal Z.
    """
    tag = SchemeTag.parse(scheme)
    dt = T / n
    if tag is SchemeTag.MILSTEIN:
        coeffs = [1.0 + mu * dt - 0.5 * sigma * sigma * dt, sigma * math.sqrt(dt),
                  0.5 * sigma * sigma * dt]
    else:
        coeffs = [1.0 + mu * dt, sigma * math.sqrt(dt)]
    k = _even_at_least(p)
    poly = np.polynomial.polynomial.polypow(coeffs, k)
    step_moment = sum(c * _gaussian_moment(j) for j, c in enumerate(poly))
    return abs(x0) * math.exp(n * math.log(step_moment) / k)


def gbm_chebyshev_bump(scheme, n: int, theta: float, spec: Optional[SdeSpec] = None,
                       floor: Optional[functionals.BumpFunction] = None):
    """Tail envelope covering both ``S_T`` and its scheme approximation on ``n`` steps."""
    prm = (spec or sde.gbm()).params
    args = dict(mu=prm["mu"], sigma=prm["sigma"], x0=prm["x0"], T=prm["T"])

    def norms(p):
        return max(gbm_exact_moment_norm(p, **args), gbm_scheme_moment_norm(scheme, n, p, **args))

    return functionals.chebyshev_bump(norms, theta, floor or functionals.exp_abs())


# ------------------------------------------------------------------ dominance

@dataclass
class DominanceCell:
    scheme: str
    functional: str
    n: int
    mesh: float
    estimate: float
    std_error: float
    bound: float
    corollary_bound: float
    theorem: str

    @property
    def passed(self) -> bool:
        return (bounds.dominated(self.estimate, self.std_error, self.bound)
                and bounds.dominated(self.estimate, self.std_error, self.corollary_bound))


DEFAULT_EPSILON = {SchemeTag.EULER: 0.1, SchemeTag.MILSTEIN: 0.2}


def dominance_functionals(K: float = 1.0) -> dict:
    return {
        "indicator": functionals.indicator(K),
        "staircase": functionals.staircase(),
        "arctan": functionals.arctan(),
        "polynomial_x2": functionals.from_polynomial([0.0, 0.0, 1.0], functionals.exp_abs()),
    }


def bound_dominance(n_grid: Sequence[int] = (16, 32, 64, 128, 256, 512),
                    schemes: Sequence = (SchemeTag.EULER, SchemeTag.MILSTEIN),
                    n_paths: int = 100_000, seed: int = 0, *, p: float = 1.0, q: float = 2.0,
                    theta: float = 0.5, K: float = 1.0, epsilon: Optional[dict] = None,
                    threads: Optional[int] = None, backend=None) -> list:
    """MC functional errors on GBM against the theorem and corollary bounds.

    Theorem bounds use the strong errors measured at the same mesh; corollary
    bounds use ``C_q = max over the grid of ||X - X^||_q / mesh^gamma``. The
    polynomial gets the Chebyshev tail bump (floor ``exp(-|z|)``) built from the
    exact moments of ``S_T`` and of the scheme.
    """
    spec = sde.gbm()
    law = distribution.terminal_law(spec)
    sup_f = law.density_sup
    D = distribution.dx_upper_bound(law, K)
    reps = dominance_functionals(K)
    eps_map = {**DEFAULT_EPSILON, **{SchemeTag.parse(k): v for k, v in (epsilon or {}).items()}}
    cells = []
    for scheme in schemes:
        tag = SchemeTag.parse(scheme)
        gamma = tag.strong_order
        eps = eps_map[tag]
        p_ind = bounds.corollary_parameters("IndicatorCor36", gamma, eps).moment
        q_bv = bounds.corollary_parameters("BvCor44", gamma, eps).moment
        q_g, theta_g, _ = bounds.corollary_parameters("GclassCor64", gamma, eps)
        orders = sorted({p_ind, q, q_bv, q_g})
        per_n = []
        for n in n_grid:
            part = Partition.equidistant(spec.horizon_T, int(n))
            sub = rng.derive_seed(seed, "dominance", tag.value, int(n))
            sample = sde.couple(spec, part, tag, n_paths, sub, threads=threads, backend=backend)
            diff = sample.exact_terminal - sample.scheme_terminal
            norms = {r: strong_error_from_differences(diff, r, part.mesh).value for r in orders}
            errs = {name: functional_error_from_sample(sample, rep, p)
                    for name, rep in reps.items()}
            per_n.append((int(n), part.mesh, norms, errs))
        c_const = {r: max(nm[r] / mesh ** gamma for _, mesh, nm, _ in per_n) for r in orders}

        def const(r):
            return c_const[r]

        for n, mesh, norms, errs in per_n:
            ctx_kw = dict(mesh=mesh, gamma_scheme=gamma, scheme_constant_Cp=const, p=p,
                          density_sup=sup_f, d_upper_D=D)
            for name, est in errs.items():
                rep = reps[name]
                if name == "indicator":
                    bound = bounds.indicator_bound(D, norms[q], q)
                    cor = bounds.corollary_rate_bound(
                        "IndicatorCor36", bounds.BoundContext(**ctx_kw), eps)
                    theorem = "indicator"
                elif name in ("staircase", "arctan"):
                    V = functionals.total_variation(rep)
                    bound = bounds.bv_bound(sup_f, V, norms[q], p, q)
                    cor = bounds.corollary_rate_bound(
                        "BvCor44", bounds.BoundContext(variation=V, **ctx_kw), eps)
                    theorem = "bv"
                else:
                    phi = gbm_chebyshev_bump(tag, n, theta, spec)
                    V = functionals.p_phi_variation(functionals.rebump(rep, phi), p)
                    bound = bounds.gclass_bound(sup_f, V, norms[q], p, q, theta)
                    phi_c = gbm_chebyshev_bump(tag, n, theta_g, spec)
                    V_c = functionals.p_phi_variation(functionals.rebump(rep, phi_c), p)
                    cor = bounds.corollary_rate_bound(
                        "GclassCor64", bounds.BoundContext(variation=V_c, theta=theta_g, **ctx_kw),
                        eps)
                    theorem = "gclass"
                cells.append(DominanceCell(tag.value, name, n, mesh, est.value, est.std_error,
                                           bound, cor, theorem))
    return cells
