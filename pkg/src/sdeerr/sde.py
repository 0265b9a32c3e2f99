"""SDE problems, partitions and coupled Euler/Milstein/exact terminal samples.

All schemes driven by the same seed and the same driver partition consume the
same Brownian increments, so ``X_T`` and ``X_T^pi`` can be compared path by
path.
"""
from __future__ import annotations

import enum
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _pykernels, rng
from ._backend import Backend, get_backend

log = logging.getLogger(__name__)

Coefficient = Callable[[float, np.ndarray], np.ndarray]

BATCH_PATHS = 32768


class SdeError(ValueError):
    pass


class SchemeTag(str, enum.Enum):
    EULER = "EulerDiscrete"
    EULER_CONTINUOUS = "EulerContinuous"
    MILSTEIN = "Milstein"

    @classmethod
    def parse(cls, value) -> "SchemeTag":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {
            "euler": cls.EULER, "eulerdiscrete": cls.EULER,
            "eulercontinuous": cls.EULER_CONTINUOUS, "euler_continuous": cls.EULER_CONTINUOUS,
            "milstein": cls.MILSTEIN,
        }
        if key not in aliases:
            raise SdeError(f"unknown scheme {value!r}")
        return aliases[key]

    @property
    def strong_order(self) -> float:
        return 1.0 if self is SchemeTag.MILSTEIN else 0.5


@dataclass(frozen=True)
class SdeSpec:
    """``dX_t = sigma(t, X_t) dW_t + b(t, X_t) dt`` on ``[0, T]``, ``X_0 = x0``.

    Coefficients are vectorized in the state argument. ``exact_solution(w, t)``
    maps the Brownian value ``W_t`` to ``X_t`` when the solution is a function
    of ``W_t`` alone. ``kernel`` names a built-in model the compiled backend
    can run without calling back into Python.
    """

    sigma: Coefficient
    drift_b: Coefficient
    x0: float
    horizon_T: float
    sigma_dx: Optional[Coefficient] = None
    b_dx: Optional[Coefficient] = None
    holder_alpha: float = 0.5
    coefficients_bounded: bool = False
    coefficients_lipschitz: bool = True
    exact_solution: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    ct_bound: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    kernel: Optional[tuple[int, tuple[float, ...]]] = None

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise SdeError(f"horizon_T must be positive, got {self.horizon_T}")
        if not self.holder_alpha >= 0.5:
            raise SdeError(f"holder_alpha must be >= 1/2, got {self.holder_alpha}")
        if not math.isfinite(self.x0):
            raise SdeError("x0 must be finite")

    def coefficients(self, t: float, x: np.ndarray):
        sdx = self.sigma_dx(t, x) if self.sigma_dx is not None else 0.0
        return self.drift_b(t, x), self.sigma(t, x), sdx


@dataclass(frozen=True)
class Partition:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise SdeError("a partition needs at least two nodes")
        if nodes[0] != 0.0:
            raise SdeError("partition must start at 0")
        if not np.all(np.diff(nodes) > 0):
            raise SdeError("partition nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def equidistant(cls, T: float, n: int) -> "Partition":
        if n < 1:
            raise SdeError("need at least one step")
        nodes = np.arange(n + 1, dtype=np.float64) * T / n
        nodes[-1] = T
        return cls(nodes)

    @property
    def n_steps(self) -> int:
        return len(self.nodes) - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.nodes)))

    def refine(self, factor: int) -> "Partition":
        """Split every interval into ``factor`` equal pieces."""
        if factor < 1:
            raise SdeError("refinement factor must be >= 1")
        if factor == 1:
            return self
        frac = np.arange(factor) / factor
        left, gaps = self.nodes[:-1], np.diff(self.nodes)
        fine = (left[:, None] + gaps[:, None] * frac[None, :]).ravel()
        return Partition(np.append(fine, self.nodes[-1]))

    def coarsen(self, stride: int) -> "Partition":
        if self.n_steps % stride:
            raise SdeError("stride must divide the number of steps")
        return Partition(self.nodes[::stride])


@dataclass
class SchemeRun:
    """Scheme terminals plus the Brownian terminal ``W_T`` of the same paths."""

    terminal: np.ndarray
    brownian_terminal: np.ndarray
    seed: int
    scheme_tag: SchemeTag
    partition: Partition
    driver: Partition
    backend: str

    @property
    def invalid(self) -> np.ndarray:
        return ~np.isfinite(self.terminal)

    @property
    def n_invalid(self) -> int:
        return int(np.count_nonzero(self.invalid))


@dataclass
class CoupledSample:
    exact_terminal: np.ndarray
    scheme_terminal: np.ndarray
    seed: int
    scheme_tag: SchemeTag
    partition: Partition
    reference: str = "exact"

    def __post_init__(self):
        if len(self.exact_terminal) != len(self.scheme_terminal) or len(self.exact_terminal) < 1:
            raise SdeError("coupled arrays must have equal length >= 1")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.exact_terminal) & np.isfinite(self.scheme_terminal)

    @property
    def exclusion_rate(self) -> float:
        return 1.0 - float(np.mean(self.valid))


def default_threads() -> int:
    return max(1, int(os.environ.get("SDEERR_THREADS", "1")))


def _check_partition(spec: SdeSpec, partition: Partition) -> None:
    if not math.isclose(partition.horizon, spec.horizon_T, rel_tol=1e-12, abs_tol=0.0):
        raise SdeError(
            f"partition ends at {partition.horizon}, expected horizon_T={spec.horizon_T}")


def _stride(partition: Partition, driver: Partition) -> int:
    if driver.n_steps % partition.n_steps:
        raise SdeError("driver partition must refine the scheme partition")
    stride = driver.n_steps // partition.n_steps
    if not np.array_equal(driver.nodes[::stride], partition.nodes):
        raise SdeError("scheme partition nodes must be driver nodes")
    return stride


def _batches(n_paths: int):
    for start in range(0, n_paths, BATCH_PATHS):
        yield start, min(BATCH_PATHS, n_paths - start)


def _scheme_id(tag: SchemeTag) -> int:
    return 1 if tag is SchemeTag.MILSTEIN else 0


def simulate(spec: SdeSpec, partition: Partition, scheme, n_paths: int, seed: int, *,
             driver: Optional[Partition] = None, backend: Optional[Backend] = None,
             threads: Optional[int] = None, path_start: int = 0) -> SchemeRun:
    """Terminal values of ``scheme`` on ``partition`` for ``n_paths`` paths.

    ``driver`` is the partition the Brownian increments are drawn on (default:
    ``partition`` itself). Path ``i`` always sees the same increments for a
    given ``(seed, driver)``, whatever the batching or thread count.
    """
    tag = SchemeTag.parse(scheme)
    if tag is SchemeTag.EULER_CONTINUOUS:
        tag = SchemeTag.EULER
    if n_paths < 1:
        raise SdeError("n_paths must be >= 1")
    _check_partition(spec, partition)
    if tag is SchemeTag.MILSTEIN and spec.sigma_dx is None:
        raise SdeError("Milstein needs sigma_dx: assumption (iv) requires the state "
                       "derivative of sigma")
    driver = partition if driver is None else driver
    stride = _stride(partition, driver)
    be = backend or get_backend()
    threads = threads or default_threads()
    key = rng.stream_key(seed, rng.INCREMENTS)
    out_x = np.empty(n_paths)
    out_w = np.empty(n_paths)
    nodes = np.ascontiguousarray(driver.nodes)
    scheme_id = _scheme_id(tag)

    def run(batch):
        start, count = batch
        xs, ws = out_x[start:start + count], out_w[start:start + count]
        if spec.kernel is not None:
            model, params = spec.kernel
            be.terminal_values(model, np.asarray(params, dtype=np.float64), float(spec.x0),
                               nodes, scheme_id, key, path_start + start, xs, ws, stride)
        else:
            _pykernels.step_with_coefficients(spec.coefficients, spec.x0, nodes, scheme_id,
                                              key, path_start + start, xs, ws, stride,
                                              normals=be.normals_block)

    batches = list(_batches(n_paths))
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, batches))
    else:
        for b in batches:
            run(b)
    result = SchemeRun(out_x, out_w, seed, tag, partition, driver, be.name)
    if result.n_invalid:
        log.warning("%d of %d paths produced non-finite values", result.n_invalid, n_paths)
    return result


def simulate_euler(spec: SdeSpec, partition: Partition, n_paths: int, seed: int,
                   **kwargs) -> SchemeRun:
    return simulate(spec, partition, SchemeTag.EULER, n_paths, seed, **kwargs)


def simulate_milstein(spec: SdeSpec, partition: Partition, n_paths: int, seed: int,
                      **kwargs) -> SchemeRun:
    return simulate(spec, partition, SchemeTag.MILSTEIN, n_paths, seed, **kwargs)


def brownian_increments(seed: int, partition: Partition, n_paths: int, *,
                        path_start: int = 0, backend: Optional[Backend] = None) -> np.ndarray:
    """The ``(n_paths, n_steps)`` increments every scheme on ``partition`` uses."""
    be = backend or get_backend()
    z = np.empty((n_paths, partition.n_steps))
    be.normals_block(rng.stream_key(seed, rng.INCREMENTS), path_start, 0, z)
    return z * np.sqrt(np.diff(partition.nodes))[None, :]


@dataclass
class ContinuousRun:
    times: np.ndarray
    values: np.ndarray
    brownian: np.ndarray
    node_values: np.ndarray


def simulate_euler_continuous(spec: SdeSpec, partition: Partition, query_times, n_paths: int,
                              seed: int, *, path_start: int = 0,
                              backend: Optional[Backend] = None) -> ContinuousRun:
    """Continuous-time Euler values at ``query_times``.

    Between nodes the Brownian path is filled in by a Brownian bridge drawn
    from a separate stream, so node increments stay identical to
    :func:`simulate_euler` under the same seed.
    """
    _check_partition(spec, partition)
    q = np.asarray(query_times, dtype=np.float64)
    T = partition.horizon
    if q.ndim != 1:
        raise SdeError("query_times must be one-dimensional")
    if np.any(q < 0) or np.any(q > T) or not np.all(np.isfinite(q)):
        raise SdeError("query times must lie in [0, T]")
    be = backend or get_backend()
    nodes = partition.nodes
    n = partition.n_steps
    dw = brownian_increments(seed, partition, n_paths, path_start=path_start, backend=be)
    w_nodes = np.zeros((n_paths, n + 1))
    x_nodes = np.empty((n_paths, n + 1))
    x = np.full(n_paths, float(spec.x0))
    x_nodes[:, 0] = x
    w = np.zeros(n_paths)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            w = w + dw[:, k]
            w_nodes[:, k + 1] = w
            drift, sig, _ = spec.coefficients(nodes[k], x)
            x = x + drift * (nodes[k + 1] - nodes[k]) + sig * dw[:, k]
            x_nodes[:, k + 1] = x

    order = np.argsort(q, kind="stable")
    zb = np.empty((n_paths, len(q) + len(q) % 2))
    be.normals_block(rng.stream_key(seed, rng.BRIDGE), path_start, 0, zb)
    values = np.empty((n_paths, len(q)))
    brown = np.empty((n_paths, len(q)))
    last_t, last_w, last_k = None, None, -1
    with np.errstate(over="ignore", invalid="ignore"):
        for rank, qi in enumerate(order):
            t = q[qi]
            k = min(int(np.searchsorted(nodes, t, side="right")) - 1, n)
            if nodes[k] == t:
                values[:, qi] = x_nodes[:, k]
                brown[:, qi] = w_nodes[:, k]
                last_t, last_w, last_k = t, w_nodes[:, k], k
                continue
            if last_k != k or last_t is None:
                last_t, last_w = nodes[k], w_nodes[:, k]
            right_t, right_w = nodes[k + 1], w_nodes[:, k + 1]
            frac = (t - last_t) / (right_t - last_t)
            sd = math.sqrt((t - last_t) * (right_t - t) / (right_t - last_t))
            wt = last_w + frac * (right_w - last_w) + sd * zb[:, rank]
            drift, sig, _ = spec.coefficients(nodes[k], x_nodes[:, k])
            values[:, qi] = x_nodes[:, k] + sig * (wt - w_nodes[:, k]) + drift * (t - nodes[k])
            brown[:, qi] = wt
            last_t, last_w, last_k = t, wt, k
    return ContinuousRun(q, values, brown, x_nodes)


def exact_gbm_terminal(brownian_terminal, t: float) -> np.ndarray:
    """``exp(w - t/2)``: the solution of ``dS = S dW``, ``S_0 = 1``."""
    if t < 0:
        raise SdeError("t must be >= 0")
    return np.exp(np.asarray(brownian_terminal, dtype=np.float64) - t / 2.0)


def couple(spec: SdeSpec, partition: Partition, scheme, n_paths: int, seed: int, *,
           reference: str = "auto", fine_factor: Optional[int] = None,
           backend: Optional[Backend] = None, threads: Optional[int] = None) -> CoupledSample:
    """Exact (or fine-mesh reference) and scheme terminals on one Brownian driver.

    ``reference="exact"`` needs ``spec.exact_solution``; ``"fine"`` runs Euler
    on a refinement whose mesh is at most ``mesh**2 * T`` (unless
    ``fine_factor`` is given) and uses it as a surrogate for ``X_T``.
    """
    tag = SchemeTag.parse(scheme)
    if reference == "auto":
        reference = "exact" if spec.exact_solution is not None else "missing"
    if reference == "exact":
        if spec.exact_solution is None:
            raise SdeError("spec has no exact_solution; pass reference='fine'")
        run = simulate(spec, partition, tag, n_paths, seed, backend=backend, threads=threads)
        exact = spec.exact_solution(run.brownian_terminal, spec.horizon_T)
        return CoupledSample(np.asarray(exact, dtype=np.float64), run.terminal, seed, tag,
                             partition, "exact")
    if reference == "fine":
        if fine_factor is None:
            target = partition.mesh ** 2 * spec.horizon_T
            fine_factor = max(1, math.ceil(partition.mesh / target))
        fine = partition.refine(fine_factor)
        ref = simulate(spec, fine, SchemeTag.EULER, n_paths, seed, backend=backend,
                       threads=threads)
        run = simulate(spec, partition, tag, n_paths, seed, driver=fine, backend=backend,
                       threads=threads)
        return CoupledSample(ref.terminal, run.terminal, seed, tag, partition, "fine")
    raise SdeError("no reference available: spec has no exact_solution and the fine-mesh "
                   "fallback was not enabled")


# ---------------------------------------------------------------- built-in models

def gbm(mu: float = 0.0, sigma: float = 1.0, x0: float = 1.0, T: float = 1.0) -> SdeSpec:
    def exact(w, t):
        return x0 * np.exp((mu - 0.5 * sigma * sigma) * t + sigma * np.asarray(w))

    return SdeSpec(
        sigma=lambda t, x: sigma * x,
        drift_b=lambda t, x: mu * x,
        sigma_dx=lambda t, x: sigma + 0.0 * x,
        b_dx=lambda t, x: mu + 0.0 * x,
        x0=x0, horizon_T=T, coefficients_bounded=False, coefficients_lipschitz=True,
        exact_solution=exact, ct_bound=max(abs(mu), abs(sigma)), name="gbm",
        params={"mu": mu, "sigma": sigma, "x0": x0, "T": T},
        kernel=(_pykernels.MODEL_IDS["gbm"], (mu, sigma)),
    )


def additive(mu: float = 0.0, sigma: float = 1.0, x0: float = 0.0, T: float = 1.0) -> SdeSpec:
    def exact(w, t):
        return x0 + mu * t + sigma * np.asarray(w)

    return SdeSpec(
        sigma=lambda t, x: sigma + 0.0 * x,
        drift_b=lambda t, x: mu + 0.0 * x,
        sigma_dx=lambda t, x: 0.0 * x,
        b_dx=lambda t, x: 0.0 * x,
        x0=x0, horizon_T=T, coefficients_bounded=True, coefficients_lipschitz=True,
        exact_solution=exact, ct_bound=max(abs(mu), abs(sigma)), name="additive",
        params={"mu": mu, "sigma": sigma, "x0": x0, "T": T},
        kernel=(_pykernels.MODEL_IDS["additive"], (mu, sigma)),
    )


def bounded_tanh(m: float = 0.5, s0: float = 1.0, s1: float = 0.5, x0: float = 0.0,
                 T: float = 1.0) -> SdeSpec:
    """``b = m tanh(x)``, ``sigma = s0 + s1 tanh(x)``: bounded, Lipschitz, elliptic if s0 > |s1|."""
    return SdeSpec(
        sigma=lambda t, x: s0 + s1 * np.tanh(x),
        drift_b=lambda t, x: m * np.tanh(x),
        sigma_dx=lambda t, x: s1 * (1.0 - np.tanh(x) * np.tanh(x)),
        b_dx=lambda t, x: m * (1.0 - np.tanh(x) * np.tanh(x)),
        x0=x0, horizon_T=T, coefficients_bounded=True, coefficients_lipschitz=True,
        ct_bound=max(abs(m), abs(s0) + abs(s1)), name="bounded_tanh",
        params={"m": m, "s0": s0, "s1": s1, "x0": x0, "T": T},
        kernel=(_pykernels.MODEL_IDS["bounded_tanh"], (m, s0, s1)),
    )


MODELS = {
    "additive": (additive, "dX = mu dt + sigma dW (Brownian motion with drift); exact solution"),
    "bounded_tanh": (bounded_tanh, "b = m tanh x, sigma = s0 + s1 tanh x; bounded coefficients, "
                                   "fine-mesh reference"),
    "gbm": (gbm, "geometric Brownian motion dX = mu X dt + sigma X dW; exact solution"),
}


def model(name: str, **params) -> SdeSpec:
    """Construct a built-in SdeSpec by registry name."""
    if name not in MODELS:
        raise SdeError(f"unknown model {name!r}; known: {sorted(MODELS)}")
    return MODELS[name][0](**params)
