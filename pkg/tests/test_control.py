import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from mvdlmc.control import (
    ControlField,
    ControlRefused,
    Grid1D,
    ValueField,
    dump_field_csv,
    eval_control,
    extract_control,
    load_control,
    model_hash,
    save_control,
    solve_kbe,
    solve_offline_control,
)
from mvdlmc.model import constant_observable, cosine_observable, indicator_observable

K, NU, SIGMA = 2.0, 0.1, 0.4


def exact_value(grid):
    """Gaussian tail of the arithmetic Brownian motion, v(t, x) = P(X_T > K | X_t = x)."""
    tau = grid.terminal_time - grid.t[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (grid.x[None, :] + NU * tau - K) / (SIGMA * np.sqrt(tau))
    return norm.cdf(z)


def oracle_error(abm, dx):
    grid = Grid1D.from_spacing(4.0, dx)
    v = solve_kbe(abm, indicator_observable(K), None, grid)
    region = (np.abs(grid.x) <= 3.0)[None, :] & (grid.terminal_time - grid.t >= 0.05)[:, None]
    return np.max(np.abs(v.values - exact_value(grid))[region]), v


def test_grid_from_spacing():
    g = Grid1D.from_spacing(4.0, 0.01)
    assert g.n_space == 800 and g.n_time == 500
    assert g.dx == pytest.approx(0.01) and g.dt == pytest.approx(0.002) and g.ratio == pytest.approx(0.2)
    assert g.x[0] == -4.0 and g.x[-1] == 4.0
    with pytest.raises(ValueError):
        Grid1D(1.0, 3, 1)
    with pytest.raises(ValueError):
        Grid1D(1.0, 8, 0)


@pytest.mark.parametrize("c", [1.0, 3.5])
def test_constant_terminal_data_is_preserved(benchmark, c):
    grid = Grid1D.from_spacing(2.0, 0.05)
    from mvdlmc.particles import simulate_particles

    law = simulate_particles(benchmark, 50, 10, 0)
    v = solve_kbe(benchmark, constant_observable(c), law, grid)
    assert np.max(np.abs(v.values - c)) <= 1e-12 * c


def test_terminal_row_is_exact(abm):
    grid = Grid1D.from_spacing(4.0, 0.02)
    v = solve_kbe(abm, indicator_observable(K), None, grid)
    assert np.array_equal(v.values[-1], (grid.x > K).astype(float))


def test_refuses_sign_changing_observable(abm):
    with pytest.raises(ControlRefused):
        solve_kbe(abm, cosine_observable(), None, Grid1D.from_spacing(2.0, 0.1))


def test_zero_kernel_oracle(abm):
    err, v = oracle_error(abm, 0.01)
    assert err <= 1e-3
    v00 = np.interp(0.0, v.grid.x, v.values[0])
    assert v00 == pytest.approx(norm.cdf(-4.75), rel=0.1)


def test_oracle_second_order(abm):
    coarse, _ = oracle_error(abm, 0.02)
    fine, _ = oracle_error(abm, 0.01)
    assert coarse / fine >= 3.0


def test_extract_log_linear_is_exact(abm):
    grid = Grid1D.from_spacing(1.0, 0.05)
    a = 1.7
    v = ValueField(np.exp(a * grid.x)[None, :].repeat(grid.n_time + 1, axis=0), grid)
    z = extract_control(v, abm, None)
    assert np.allclose(z.values, SIGMA * a, rtol=1e-12)


def test_extract_constant_is_zero(abm):
    grid = Grid1D.from_spacing(1.0, 0.05)
    z = extract_control(ValueField(np.full((grid.n_time + 1, grid.n_space + 1), 2.0), grid), abm, None)
    assert np.all(z.values == 0.0)


def test_control_matches_analytic_log_gradient(abm):
    grid = Grid1D.from_spacing(4.0, 0.01)
    z = extract_control(solve_kbe(abm, indicator_observable(K), None, grid), abm, None)
    x = grid.x
    for tn in (0.0, 0.25, 0.5):
        n = int(round(tn / grid.dt))
        tau = 1.0 - tn
        zz = (x + NU * tau - K) / (SIGMA * np.sqrt(tau))
        exact = np.exp(norm.logpdf(zz) - norm.logcdf(zz)) / np.sqrt(tau)
        sel = (np.abs(x) <= 3.0) & (norm.cdf(zz) >= 1e-8)
        rel = np.abs(z.values[n][sel] - exact[sel]) / exact[sel]
        assert rel.max() <= 0.01, (tn, rel.max())


def test_control_finite_capped_and_pushes_towards_threshold(abm):
    grid = Grid1D.from_spacing(4.0, 0.02)
    z = extract_control(solve_kbe(abm, indicator_observable(K), None, grid), abm, None, cap=20.0)
    assert np.all(np.isfinite(z.values)) and np.max(np.abs(z.values)) <= 20.0
    # close to T the far-left values sit on the positivity floor, where zeta is 0
    near = (grid.x > K - 0.3) & (grid.x < K)
    early = grid.terminal_time - grid.t >= 0.05
    assert np.all(z.values[early][:, near] > 0)


def test_eval_control_grid_nodes_and_clamping():
    grid = Grid1D(1.0, 4, 2)
    vals = np.arange(15, dtype=float).reshape(3, 5)
    f = ControlField(vals, grid)
    assert eval_control(f, 0.5, 0.5) == vals[1, 3]
    assert eval_control(f, 0.0, -7.0) == vals[0, 0]
    assert eval_control(f, 1.0, 9.0) == vals[2, 4]
    with pytest.raises(ValueError):
        eval_control(f, 1.5, 0.0)


def test_eval_control_cell_midpoint():
    grid = Grid1D(1.0, 4, 1)
    vals = np.zeros((2, 5))
    vals[1] = 1.0
    assert eval_control(ControlField(vals, grid), 0.5, 0.25) == pytest.approx(0.5)


def _scalar_bilinear(vals, grid, t, x):
    x = min(max(x, -grid.x_bound), grid.x_bound)
    u, w = t / grid.dt, (x + grid.x_bound) / grid.dx
    n, i = min(int(u), grid.n_time - 1), min(int(w), grid.n_space - 1)
    a, b = u - n, w - i
    return ((1 - a) * ((1 - b) * vals[n, i] + b * vals[n, i + 1])
            + a * ((1 - b) * vals[n + 1, i] + b * vals[n + 1, i + 1]))


@given(st.floats(0.0, 1.0), st.floats(-2.0, 2.0))
def test_eval_control_matches_scalar_oracle(t, x):
    grid = Grid1D(1.5, 12, 7)
    vals = np.random.default_rng(0).normal(size=(8, 13))
    assert eval_control(ControlField(vals, grid), t, x) == pytest.approx(_scalar_bilinear(vals, grid, t, x),
                                                                         abs=1e-12)


def test_eval_control_vectorised():
    grid = Grid1D(1.0, 8, 4)
    f = ControlField(np.random.default_rng(1).normal(size=(5, 9)), grid)
    xs = np.linspace(-1.2, 1.2, 11)
    assert np.array_equal(eval_control(f, 0.3, xs), np.array([eval_control(f, 0.3, x) for x in xs]))


def test_offline_control_and_artifact(tmp_path, benchmark):
    grid = Grid1D.from_spacing(4.0, 0.05)
    control, value, law = solve_offline_control(benchmark, indicator_observable(K), grid, 100, 20, rng=3)
    assert law.n_particles == 100 and law.n_steps == 20
    assert np.all(np.isfinite(control.values))
    h = model_hash({"sigma": 0.4})
    path = tmp_path / "ctrl.npz"
    save_control(path, control, value, {"model_hash": h})
    back = load_control(path, h)
    assert np.array_equal(back.values, control.values) and back.grid == grid
    with pytest.raises(ValueError):
        load_control(path, model_hash({"sigma": 0.5}))


def test_constant_observable_control_is_zero(benchmark):
    control, _, _ = solve_offline_control(benchmark, constant_observable(1.0), Grid1D.from_spacing(2.0, 0.1), 20,
                                          10, rng=0)
    assert np.max(np.abs(control.values)) <= 1e-10


def test_dump_field_csv(tmp_path):
    path = tmp_path / "v.csv"
    dump_field_csv(np.ones((2, 3)), path)
    assert len(path.read_text().splitlines()) == 7
