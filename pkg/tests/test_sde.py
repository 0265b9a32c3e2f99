import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sdeerr import _pykernels, experiments, rng, sde
from sdeerr.sde import Partition, SchemeTag, SdeSpec


def one_step_spec(sigma, b, sigma_dx=None, x0=1.0):
    return SdeSpec(sigma=sigma, drift_b=b, sigma_dx=sigma_dx, x0=x0, horizon_T=1.0)


class FixedNormals:
    """A normals generator that hands out a prescribed matrix."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def __call__(self, key, path_start, step_start, out):
        out[:] = self.z[path_start:path_start + out.shape[0], step_start:step_start + out.shape[1]]


# ------------------------------------------------------------------ RNG

def test_splitmix_finalizer_reference_value():
    # first output of the reference SplitMix64 generator seeded with 0
    assert _pykernels.mix(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF


def test_derive_seed_is_stable_and_label_sensitive():
    a = rng.derive_seed(7, "strong", "EulerDiscrete", 16)
    assert a == rng.derive_seed(7, "strong", "EulerDiscrete", 16)
    assert a != rng.derive_seed(7, "strong", "EulerDiscrete", 32)
    assert a != rng.derive_seed(8, "strong", "EulerDiscrete", 16)
    assert 0 <= a < 2 ** 64


def test_streams_are_distinct():
    keys = {rng.stream_key(3, s) for s in (rng.INCREMENTS, rng.BRIDGE, rng.AUXILIARY)}
    assert len(keys) == 3


def test_normals_are_standard(backend):
    z = np.empty((20000, 8))
    backend.normals_block(rng.stream_key(11), 0, 0, z)
    flat = z.ravel()
    assert abs(flat.mean()) < 4 / math.sqrt(flat.size)
    assert abs(flat.var() - 1) < 0.03
    assert stats.kstest(flat, "norm").pvalue > 1e-3
    # steps are uncorrelated across the cos/sin pairing
    assert abs(np.corrcoef(z[:, 0], z[:, 1])[0, 1]) < 0.03


def test_normals_block_is_counter_based(backend):
    key = rng.stream_key(5)
    full = np.empty((64, 10))
    backend.normals_block(key, 0, 0, full)
    part = np.empty((16, 4))
    backend.normals_block(key, 32, 6, part)
    np.testing.assert_array_equal(part, full[32:48, 6:10])


def test_backends_agree_to_rounding():
    try:
        compiled = sde.get_backend("compiled")
    except RuntimeError:
        pytest.skip("compiled kernels not built")
    python = sde.get_backend("python")
    spec = sde.gbm()
    part = Partition.equidistant(1.0, 64)
    for tag in (SchemeTag.EULER, SchemeTag.MILSTEIN):
        a = sde.simulate(spec, part, tag, 3000, 99, backend=python)
        b = sde.simulate(spec, part, tag, 3000, 99, backend=compiled)
        np.testing.assert_allclose(a.terminal, b.terminal, rtol=1e-12, atol=0)
        np.testing.assert_allclose(a.brownian_terminal, b.brownian_terminal, rtol=0, atol=1e-12)


# ------------------------------------------------------------------ partitions

def test_equidistant_nodes_exact():
    part = Partition.equidistant(2.0, 8)
    np.testing.assert_array_equal(part.nodes, np.arange(9) * 2.0 / 8)
    assert part.mesh == 0.25 and part.n_steps == 8 and part.horizon == 2.0


@pytest.mark.parametrize("nodes", [[0.0, 0.5, 0.5, 1.0], [0.1, 1.0], [0.0, 0.7, 0.3, 1.0], [0.0]])
def test_invalid_partitions_rejected(nodes):
    with pytest.raises(sde.SdeError):
        Partition(np.array(nodes))


def test_general_partition_mesh_is_max_gap():
    part = Partition(np.array([0.0, 0.1, 0.5, 1.0]))
    assert part.mesh == pytest.approx(0.5)
    assert part.refine(2).n_steps == 6


def test_partition_horizon_must_match_spec():
    with pytest.raises(sde.SdeError):
        sde.simulate(sde.gbm(), Partition.equidistant(2.0, 4), "euler", 10, 0)


# ------------------------------------------------------------------ one-step formulas

def test_euler_one_step_gbm_by_hand():
    spec = one_step_spec(lambda t, x: x, lambda t, x: 0.0 * x)
    out_x, out_w = np.empty(1), np.empty(1)
    coeff = lambda t, x: (0.0 * x, x, 1.0 + 0.0 * x)  # noqa: E731
    _pykernels.step_with_coefficients(coeff, spec.x0, np.array([0.0, 1.0]), 0, 0, 0,
                                      out_x, out_w, normals=FixedNormals([[1.0]]))
    assert out_x[0] == 2.0 and out_w[0] == 1.0


def test_milstein_one_step_gbm_by_hand():
    out_x, out_w = np.empty(1), np.empty(1)
    coeff = lambda t, x: (0.0 * x, x, 1.0 + 0.0 * x)  # noqa: E731
    _pykernels.step_with_coefficients(coeff, 1.0, np.array([0.0, 1.0]), 1, 0, 0,
                                      out_x, out_w, normals=FixedNormals([[1.0]]))
    assert out_x[0] == 2.0
    _pykernels.step_with_coefficients(coeff, 1.0, np.array([0.0, 1.0]), 1, 0, 0,
                                      out_x, out_w, normals=FixedNormals([[2.0]]))
    assert out_x[0] == pytest.approx(1 + 2 + 0.5 * (4 - 1))


def test_degenerate_coefficients_keep_x0():
    spec = one_step_spec(lambda t, x: 0.0 * x, lambda t, x: 0.0 * x, x0=3.25)
    run = sde.simulate(spec, Partition.equidistant(1.0, 7), "euler", 50, 1)
    assert np.all(run.terminal == 3.25)


@pytest.mark.parametrize("n", [1, 3, 16, 100])
def test_brownian_motion_euler_is_exact(n):
    run = sde.simulate(sde.additive(), Partition.equidistant(1.0, n), "euler", 200, 4)
    np.testing.assert_allclose(run.terminal, run.brownian_terminal, rtol=0, atol=1e-12)


def test_terminal_brownian_matches_increments():
    part = Partition.equidistant(1.0, 12)
    inc = sde.brownian_increments(8, part, 100)
    run = sde.simulate(sde.additive(), part, "euler", 100, 8)
    np.testing.assert_allclose(inc.sum(axis=1), run.brownian_terminal, atol=1e-12)


def test_milstein_requires_sigma_dx():
    spec = one_step_spec(lambda t, x: x, lambda t, x: 0.0 * x)
    with pytest.raises(sde.SdeError, match=r"assumption \(iv\)"):
        sde.simulate_milstein(spec, Partition.equidistant(1.0, 4), 10, 0)


def test_constant_sigma_milstein_equals_euler():
    part = Partition.equidistant(1.0, 32)
    spec = sde.additive(mu=0.3, sigma=1.7)
    e = sde.simulate_euler(spec, part, 500, 12)
    m = sde.simulate_milstein(spec, part, 500, 12)
    np.testing.assert_array_equal(e.terminal, m.terminal)


def test_euler_and_milstein_share_the_driver():
    part = Partition.equidistant(1.0, 16)
    e = sde.simulate_euler(sde.gbm(), part, 300, 3)
    m = sde.simulate_milstein(sde.gbm(), part, 300, 3)
    np.testing.assert_array_equal(e.brownian_terminal, m.brownian_terminal)


def test_generic_coefficients_match_fused_kernel():
    base = sde.bounded_tanh()
    generic = SdeSpec(sigma=base.sigma, drift_b=base.drift_b, sigma_dx=base.sigma_dx,
                      x0=base.x0, horizon_T=1.0)
    part = Partition.equidistant(1.0, 20)
    for tag in ("euler", "milstein"):
        a = sde.simulate(base, part, tag, 400, 21)
        b = sde.simulate(generic, part, tag, 400, 21)
        np.testing.assert_allclose(a.terminal, b.terminal, rtol=1e-12, atol=1e-12)


def test_non_finite_paths_are_flagged():
    spec = SdeSpec(sigma=lambda t, x: 50.0 * x * x, drift_b=lambda t, x: 10.0 * x ** 3,
                   x0=5.0, horizon_T=1.0)
    run = sde.simulate(spec, Partition.equidistant(1.0, 8), "euler", 200, 0)
    assert run.n_invalid > 0
    assert np.array_equal(run.invalid, ~np.isfinite(run.terminal))


# ------------------------------------------------------------------ determinism

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 63), n=st.integers(1, 40), paths=st.integers(1, 300))
def test_rerun_is_bit_identical(seed, n, paths):
    part = Partition.equidistant(1.0, n)
    a = sde.simulate(sde.gbm(), part, "milstein", paths, seed)
    b = sde.simulate(sde.gbm(), part, "milstein", paths, seed)
    np.testing.assert_array_equal(a.terminal, b.terminal)


def test_thread_count_does_not_change_output():
    part = Partition.equidistant(1.0, 8)
    n_paths = 2 * sde.BATCH_PATHS + 17
    one = sde.simulate(sde.gbm(), part, "euler", n_paths, 5, threads=1)
    four = sde.simulate(sde.gbm(), part, "euler", n_paths, 5, threads=4)
    np.testing.assert_array_equal(one.terminal, four.terminal)


def test_path_start_offsets_the_same_stream():
    part = Partition.equidistant(1.0, 8)
    full = sde.simulate(sde.gbm(), part, "euler", 100, 5)
    tail = sde.simulate(sde.gbm(), part, "euler", 40, 5, path_start=60)
    np.testing.assert_array_equal(full.terminal[60:], tail.terminal)


# ------------------------------------------------------------------ continuous Euler

def test_continuous_euler_at_nodes_matches_discrete():
    part = Partition.equidistant(1.0, 8)
    run = sde.simulate_euler_continuous(sde.gbm(), part, part.nodes, 300, 17)
    disc = sde.simulate_euler(sde.gbm(), part, 300, 17)
    np.testing.assert_allclose(run.values[:, -1], disc.terminal, rtol=1e-12)
    np.testing.assert_allclose(run.node_values[:, -1], disc.terminal, rtol=1e-12)


def test_continuous_euler_for_brownian_motion_is_w():
    part = Partition.equidistant(1.0, 4)
    q = np.linspace(0.0, 1.0, 37)
    run = sde.simulate_euler_continuous(sde.additive(), part, q, 200, 2)
    np.testing.assert_allclose(run.values, run.brownian, atol=1e-12)


def test_bridge_has_brownian_variance():
    part = Partition.equidistant(1.0, 2)
    run = sde.simulate_euler_continuous(sde.additive(), part, [0.25, 0.5], 40000, 6)
    w = run.brownian
    assert np.var(w[:, 0]) == pytest.approx(0.25, rel=0.05)
    assert np.var(w[:, 1] - w[:, 0]) == pytest.approx(0.25, rel=0.05)


def test_continuous_query_outside_horizon_rejected():
    with pytest.raises(sde.SdeError):
        sde.simulate_euler_continuous(sde.gbm(), Partition.equidistant(1.0, 4), [1.5], 5, 0)


# ------------------------------------------------------------------ exact solution, coupling

def test_exact_gbm_terminal_values():
    assert sde.exact_gbm_terminal(0.0, 1.0) == pytest.approx(math.exp(-0.5))
    assert sde.exact_gbm_terminal(0.5, 1.0) == pytest.approx(1.0)
    with pytest.raises(sde.SdeError):
        sde.exact_gbm_terminal(0.0, -1.0)


def test_exact_gbm_mean_is_one():
    run = sde.simulate(sde.gbm(), Partition.equidistant(1.0, 1), "euler", 1_000_000, 77)
    s = sde.exact_gbm_terminal(run.brownian_terminal, 1.0)
    se = s.std(ddof=1) / math.sqrt(len(s))
    assert abs(s.mean() - 1.0) < 3 * se


def test_exact_solution_agrees_with_fine_euler():
    errs = []
    for n in (64, 1024):
        c = sde.couple(sde.gbm(), Partition.equidistant(1.0, n), "euler", 4000, 3)
        errs.append(np.sqrt(np.mean((c.exact_terminal - c.scheme_terminal) ** 2)))
    assert errs[1] < errs[0] / 3


def test_couple_without_exact_solution_needs_fallback():
    part = Partition.equidistant(1.0, 8)
    with pytest.raises(sde.SdeError, match="fallback"):
        sde.couple(sde.bounded_tanh(), part, "euler", 10, 0)
    c = sde.couple(sde.bounded_tanh(), part, "euler", 10, 0, reference="fine")
    assert c.reference == "fine"
    assert c.exact_terminal.shape == c.scheme_terminal.shape == (10,)


def test_fine_reference_identical_partition_gives_zero_error():
    part = Partition.equidistant(1.0, 8)
    c = sde.couple(sde.bounded_tanh(), part, "euler", 100, 0, reference="fine", fine_factor=1)
    np.testing.assert_array_equal(c.exact_terminal, c.scheme_terminal)


def test_coupled_sample_rejects_mismatched_arrays():
    with pytest.raises(sde.SdeError):
        sde.CoupledSample(np.zeros(3), np.zeros(2), 0, SchemeTag.EULER,
                          Partition.equidistant(1.0, 1))


def test_registry_models():
    assert sorted(sde.MODELS) == ["additive", "bounded_tanh", "gbm"]
    assert sde.model("gbm", sigma=0.5).params["sigma"] == 0.5
    with pytest.raises(sde.SdeError):
        sde.model("heston")


@pytest.mark.parametrize("p, grid, paths", [(1, [16, 64, 256], 20000), (2, [16, 64, 256], 20000),
                                            # the L4 norm needs finer meshes to leave the
                                            # pre-asymptotic range
                                            (4, [64, 256, 1024], 50000)])
def test_euler_strong_slope_for_several_p(p, grid, paths):
    report = experiments.rate_experiment(sde.gbm(), "euler", grid, paths, 31, p=p)
    assert 0.4 <= report.fitted_slope <= 0.6
