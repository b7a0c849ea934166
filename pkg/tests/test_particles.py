import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvdlmc.model import Constant, InvalidParticleCount, Normal, kuramoto_model, zero_kernel_model
from mvdlmc.particles import (
    EmpiricalLaw,
    NonFiniteStateError,
    aggregate_increments,
    coarsen_law,
    dump_trajectories_csv,
    evolve_particles,
    law_at,
    partition_antithetic,
    simulate_particles,
)
from mvdlmc.rng import RandomStreams


def test_deterministic_kuramoto_paths(deterministic_kuramoto):
    law = simulate_particles(deterministic_kuramoto, 2, 4, 0)
    for row in law.trajectories:
        assert row.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert law.time_grid.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_single_particle_is_brownian_with_drift():
    model = kuramoto_model(0.4, Constant(0.3), Normal(0.0, 0.2))
    law = simulate_particles(model, 1, 8, 5)
    dt = 1 / 8
    expect = law.initial_states[0] + 0.3 * law.time_grid + np.concatenate(
        [[0.0], np.cumsum(0.4 * np.sqrt(dt) * law.wiener_increments[0])])
    assert np.allclose(law.trajectories[0], expect, atol=1e-14)


def test_zero_kernel_mean(abm):
    law = simulate_particles(abm, 10_000, 8, 1)
    xt = law.trajectories[:, -1]
    se = xt.std(ddof=1) / np.sqrt(xt.size)
    assert abs(xt.mean() - 0.1) < 4 * se


def test_reproducible(benchmark):
    a = simulate_particles(benchmark, 30, 8, RandomStreams(9).child("x", 2))
    b = simulate_particles(benchmark, 30, 8, RandomStreams(9).child("x", 2))
    assert np.array_equal(a.trajectories, b.trajectories)
    c = simulate_particles(benchmark, 30, 8, RandomStreams(9).child("x", 3))
    assert not np.array_equal(a.trajectories, c.trajectories)


def test_invalid_counts(benchmark):
    with pytest.raises(InvalidParticleCount):
        simulate_particles(benchmark, 0, 4, 0)
    with pytest.raises(ValueError):
        simulate_particles(benchmark, 4, 0, 0)


def test_non_finite_state_reports_particle():
    model = zero_kernel_model(Constant(0.0), 1.0, Constant(0.0))
    eps = np.zeros((3, 2))
    eps[1, 1] = np.inf
    with pytest.raises(NonFiniteStateError) as info:
        evolve_particles(model, np.zeros(3), np.zeros(3), eps)
    assert info.value.index == 1 and info.value.step == 2


@given(st.integers(0, 10_000))
def test_exchangeability(seed):
    model = kuramoto_model(0.5, Constant(0.1), Normal(0, 0.3))
    rng = np.random.default_rng(seed)
    x0, nu, eps = rng.normal(size=6), rng.uniform(-.2, .2, 6), rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a = evolve_particles(model, x0, nu, eps)
    b = evolve_particles(model, x0[perm], nu[perm], eps[perm])
    assert np.allclose(np.sort(a.trajectories, axis=0), np.sort(b.trajectories, axis=0), atol=1e-12)
    assert np.allclose(a.trajectories[perm], b.trajectories, atol=1e-12)


def test_law_at_grid_and_midpoint():
    traj = np.array([[0.0, 1.0, 3.0, 3.0, 5.0]])
    law = EmpiricalLaw(traj, np.zeros(1), np.linspace(0, 1, 5), np.zeros((1, 4)))
    assert law_at(law, 0.25)[0] == 1.0
    assert law_at(law, 0.125)[0] == 0.5
    assert law_at(law, 0.375)[0] == 2.0
    assert law_at(law, 1.0)[0] == 5.0
    with pytest.raises(ValueError):
        law_at(law, 1.01)
    with pytest.raises(ValueError):
        law_at(law, -0.1)


def test_law_at_deterministic_midpoints(deterministic_kuramoto):
    law = simulate_particles(deterministic_kuramoto, 2, 4, 0)
    for t in (0.125, 0.375, 0.625, 0.875):
        assert np.all(law_at(law, t) == t)


@given(st.integers(0, 1000), st.integers(1, 16))
def test_law_at_returns_exact_columns(seed, n_steps):
    law = simulate_particles(kuramoto_model(0.4, Constant(0.0), Normal(0, 1)), 3, n_steps, seed)
    for n, tn in enumerate(law.time_grid):
        assert np.array_equal(law_at(law, float(tn)), law.trajectories[:, n])


def test_aggregated_increments_unit_variance():
    eps = np.random.default_rng(3).standard_normal((200, 1000))
    agg = aggregate_increments(eps)
    assert agg.shape == (200, 500)
    assert abs(agg.var() - 1.0) < 4 * np.sqrt(2.0 / agg.size)
    with pytest.raises(ValueError):
        aggregate_increments(np.zeros((2, 3)))


def test_partition_deterministic(deterministic_kuramoto):
    law = simulate_particles(deterministic_kuramoto, 4, 8, 0)
    for half in partition_antithetic(deterministic_kuramoto, law):
        assert half.n_particles == 2 and half.n_steps == 4
        assert np.array_equal(half.trajectories, law.trajectories[:2, ::2])


def test_partition_halves_are_disjoint(benchmark):
    law = simulate_particles(benchmark, 10, 4, 3)
    a, b = partition_antithetic(benchmark, law)
    assert np.array_equal(np.concatenate([a.initial_states, b.initial_states]), law.initial_states)
    assert np.array_equal(np.concatenate([a.particle_params, b.particle_params]), law.particle_params)


def test_partition_zero_kernel_paths_match_fine_grid():
    model = zero_kernel_model(Normal(0.0, 0.2), 0.4, Normal(0.0, 0.3))
    law = simulate_particles(model, 6, 16, 11)
    a, b = partition_antithetic(model, law)
    coarse = np.concatenate([a.trajectories, b.trajectories])
    assert np.allclose(coarse, law.trajectories[:, ::2], atol=1e-14)


def test_partition_requires_even(benchmark):
    with pytest.raises(ValueError):
        partition_antithetic(benchmark, simulate_particles(benchmark, 5, 4, 0))
    with pytest.raises(ValueError):
        partition_antithetic(benchmark, simulate_particles(benchmark, 4, 3, 0))
    a, _ = partition_antithetic(benchmark, simulate_particles(benchmark, 4, 3, 0), coarsen_time=False)
    assert a.n_steps == 3


def test_coarsen_law(benchmark):
    law = simulate_particles(benchmark, 8, 8, 0)
    c = coarsen_law(benchmark, law)
    assert c.n_particles == 8 and c.n_steps == 4
    assert np.array_equal(c.initial_states, law.initial_states)


def test_dump_csv(tmp_path, deterministic_kuramoto):
    law = simulate_particles(deterministic_kuramoto, 2, 4, 0)
    path = tmp_path / "traj.csv"
    dump_trajectories_csv(law, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "particle,time_index,state" and len(lines) == 11
