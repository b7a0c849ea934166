import math

import numpy as np
import pytest

from mvdlmc.control import ControlField, Grid1D, eval_control
from mvdlmc.decoupled import (
    WeightedSample,
    coupled_values,
    inner_estimator,
    propagate_decoupled,
    simulate_coupled_levels,
    simulate_decoupled_path,
    simulate_decoupled_paths,
)
from mvdlmc.model import Constant, constant_observable, cosine_observable, indicator_observable
from mvdlmc.particles import NonFiniteStateError, partition_antithetic, simulate_particles


def constant_control(c, T=1.0):
    grid = Grid1D(4.0, 8, 4, T)
    return ControlField(np.full((5, 9), float(c)), grid)


def test_zero_control_likelihood_is_one(benchmark):
    law = simulate_particles(benchmark, 20, 8, 0)
    _, lik = simulate_decoupled_paths(benchmark, law, None, 8, 500, 1)
    assert np.all(lik == 1.0)
    _, lik = simulate_decoupled_paths(benchmark, law, constant_control(0.0), 8, 500, 1)
    assert np.all(lik == 1.0)


def test_single_step_likelihood(abm):
    law = simulate_particles(abm, 2, 1, 0)
    _, ll = propagate_decoupled(abm, law, constant_control(1.0), [0.0], [0.1], [[0.0]])
    assert math.exp(ll[0]) == pytest.approx(math.exp(-0.5), rel=1e-15)


def test_likelihood_telescopes(benchmark):
    law = simulate_particles(benchmark, 20, 16, 0)
    grid = Grid1D(4.0, 40, 16)
    ctrl = ControlField(np.random.default_rng(2).uniform(-2, 2, (17, 41)), grid)
    rng = np.random.default_rng(3)
    x0, nu, eps = rng.normal(0, .2, 50), rng.uniform(-.2, .2, 50), rng.standard_normal((50, 16))
    _, ll = propagate_decoupled(benchmark, law, ctrl, x0, nu, eps)
    dt = 1 / 16
    for p in range(0, 50, 7):
        x, acc = x0[p], 0.0
        for n in range(16):
            b, s = benchmark.coefficients(np.array([x]), law.trajectories[:, n], np.array([nu[p]]))
            z = eval_control(ctrl, n * dt, x)
            x = x + (b[0] + s[0] * z) * dt + s[0] * math.sqrt(dt) * eps[p, n]
            acc += -0.5 * dt * z * z - math.sqrt(dt) * eps[p, n] * z
        assert ll[p] == pytest.approx(acc, abs=1e-12)


def test_constant_control_shifts_gaussian(abm):
    law = simulate_particles(abm, 2, 8, 0)
    c = 0.5
    x, _ = simulate_decoupled_paths(abm, law, constant_control(c), 8, 100_000, 4)
    mean = 0.0 + (0.1 + 0.4 * c) * 1.0
    assert abs(x.mean() - mean) < 4 * 0.4 / math.sqrt(x.size)


def test_expected_likelihood_is_one(abm):
    law = simulate_particles(abm, 2, 16, 0)
    _, lik = simulate_decoupled_paths(abm, law, constant_control(0.8), 16, 100_000, 5)
    assert abs(lik.mean() - 1.0) < 4 * lik.std(ddof=1) / math.sqrt(lik.size)


def test_single_path_sample(benchmark):
    law = simulate_particles(benchmark, 10, 8, 0)
    s = simulate_decoupled_path(benchmark, law, None, 8, 3, indicator_observable(0.0))
    assert isinstance(s, WeightedSample) and s.likelihood == 1.0
    assert s.observable_value == float(s.terminal_state > 0.0)
    assert s.weighted_value == s.observable_value


def test_inner_estimator_constant(benchmark):
    law = simulate_particles(benchmark, 10, 8, 0)
    assert inner_estimator(benchmark, constant_observable(1.0), law, None, 8, 50, 1) == (1.0, 0.0)
    with pytest.raises(ValueError):
        inner_estimator(benchmark, constant_observable(1.0), law, None, 8, 1, 1)


def test_is_and_crude_agree(benchmark):
    from mvdlmc.control import solve_offline_control

    g = indicator_observable(1.5)
    control, _, _ = solve_offline_control(benchmark, g, Grid1D.from_spacing(4.0, 0.02), 200, 20, rng=1)
    law = simulate_particles(benchmark, 50, 16, 2)
    m_is, v_is = inner_estimator(benchmark, g, law, control, 16, 100_000, 3)
    m_mc, v_mc = inner_estimator(benchmark, g, law, None, 16, 100_000, 4)
    assert abs(m_is - m_mc) <= 4 * math.sqrt((v_is + v_mc) / 100_000)
    assert v_is < v_mc


def test_non_finite_path_reports_step(abm):
    law = simulate_particles(abm, 2, 4, 0)
    eps = np.zeros((2, 4))
    eps[1, 2] = np.nan
    with pytest.raises(NonFiniteStateError) as info:
        propagate_decoupled(abm, law, None, np.zeros(2), np.zeros(2), eps)
    assert info.value.step == 3 and info.value.index == 1


def test_coupled_levels_deterministic(deterministic):
    law = simulate_particles(deterministic, 4, 8, 0)
    halves = partition_antithetic(deterministic, law)
    fine, coarse = simulate_coupled_levels(deterministic, cosine_observable(), law, halves, None, 8, 1)
    assert fine.terminal_state == 0.5
    for c in coarse:
        assert c.observable_value == fine.observable_value


def test_coupled_levels_zero_kernel_exact(abm):
    law = simulate_particles(abm, 4, 8, 0)
    halves = partition_antithetic(abm, law)
    fine, coarse = coupled_values(abm, cosine_observable(), law, halves, None, 8, 200, 2)
    for c in coarse:
        assert np.allclose(c, fine, atol=1e-13)
    with pytest.raises(ValueError):
        coupled_values(abm, cosine_observable(), law, halves, None, 7, 2, 2)


def test_paths_use_streams_disjoint_from_law(benchmark):
    law = simulate_particles(benchmark, 10, 8, 7)
    x, _ = simulate_decoupled_paths(benchmark, law, None, 8, 10, 7)
    assert not np.any(np.isin(x, law.trajectories[:, -1]))
