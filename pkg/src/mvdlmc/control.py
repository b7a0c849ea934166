"""Finite-difference solver for the backward control equation.

Given an empirical law, the decoupled process has frozen coefficients and
the importance-sampling control is ``zeta = sigma * d/dx log v`` where ``v``
solves the linear backward equation

    v_t + b v_x + 0.5 sigma^2 v_xx = 0,    v(T, x) = |G(x)|

on a truncated interval ``[-x_b, x_b]``.  Space is discretised with central
differences, time with a weighted (theta) scheme, and the two end nodes are
linear extrapolations of their neighbours.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from mvdlmc.model import ModelSpec, Observable
from mvdlmc.particles import EmpiricalLaw, law_at, simulate_particles

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
DEFAULT_CONTROL_CAP = 20.0


class ControlRefused(ValueError):
    """The observable changes sign, so no zero-variance control exists."""


class KBESolverError(ArithmeticError):
    def __init__(self, message: str, time_level: int | None = None):
        super().__init__(message)
        self.time_level = time_level


@dataclass(frozen=True)
class Grid1D:
    """Uniform space-time grid on ``[0, T] x [-x_bound, x_bound]``.

    ``scheme_weight`` is the weight of the later time level in the theta
    scheme (0.5 is Crank-Nicolson).
    """

    x_bound: float
    n_space: int
    n_time: int
    terminal_time: float = 1.0
    scheme_weight: float = 0.5

    def __post_init__(self):
        if self.n_space < 4:
            raise ValueError(f"n_space must be >= 4, got {self.n_space}")
        if self.n_time < 1:
            raise ValueError(f"n_time must be >= 1, got {self.n_time}")
        if not 0.0 <= self.scheme_weight <= 1.0:
            raise ValueError("scheme_weight must lie in [0, 1]")
        if not (self.x_bound > 0 and self.terminal_time > 0):
            raise ValueError("x_bound and terminal_time must be positive")

    @classmethod
    def from_spacing(cls, x_bound: float, dx: float, T: float = 1.0, ratio: float = 0.2,
                     scheme_weight: float = 0.5) -> "Grid1D":
        """Grid with space step ``dx`` and time step ``ratio * dx``."""
        n_space = int(round(2.0 * x_bound / dx))
        n_time = int(round(T / (ratio * dx)))
        return cls(float(x_bound), n_space, n_time, float(T), scheme_weight)

    @property
    def dx(self) -> float:
        return 2.0 * self.x_bound / self.n_space

    @property
    def dt(self) -> float:
        return self.terminal_time / self.n_time

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.x_bound, self.x_bound, self.n_space + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.terminal_time, self.n_time + 1)

    @property
    def ratio(self) -> float:
        return self.dt / self.dx


@dataclass(frozen=True, eq=False)
class ValueField:
    values: np.ndarray  # (n_time + 1, n_space + 1)
    grid: Grid1D


@dataclass(frozen=True, eq=False)
class ControlField:
    values: np.ndarray  # (n_time + 1, n_space + 1)
    grid: Grid1D
    cap: float = DEFAULT_CONTROL_CAP
    metadata: dict = field(default_factory=dict)


def _kernel_means(model: ModelSpec, law: EmpiricalLaw | None, x: np.ndarray, t: float):
    if law is None:
        return np.zeros_like(x), np.zeros_like(x)
    states = law_at(law, min(t, law.terminal_time))
    return model.kernel1.mean(x, states), model.kernel2.mean(x, states)


def _cell_average(observable: Observable, x: np.ndarray, dx: float, n_sub: int = 16) -> np.ndarray:
    offsets = ((np.arange(n_sub) + 0.5) / n_sub - 0.5) * dx
    return np.mean(np.abs(observable(x[:, None] + offsets[None, :])), axis=1)


def _operator_bands(b: np.ndarray, s: np.ndarray, dx: float):
    """Interior rows of the discrete operator ``-b d/dx - 0.5 s^2 d2/dx2``.

    Returns lower, diagonal and upper bands for unknowns ``1 .. n-1`` with the
    extrapolated end values ``v_0 = 2 v_1 - v_2`` and ``v_n = 2 v_{n-1} -
    v_{n-2}`` substituted into the first and last rows.
    """
    half_var = 0.5 * s * s / dx**2
    adv = 0.5 * b / dx
    lower = (adv - half_var)[1:-1]
    diag = (2.0 * half_var)[1:-1]
    upper = (-(adv + half_var))[1:-1]
    lower, diag, upper = lower.copy(), diag.copy(), upper.copy()
    # first interior row
    diag[0], upper[0] = 2.0 * lower[0] + diag[0], upper[0] - lower[0]
    # last interior row
    lower[-1], diag[-1] = lower[-1] - upper[-1], diag[-1] + 2.0 * upper[-1]
    return lower, diag, upper


def _apply_bands(lower, diag, upper, v):
    out = diag * v
    out[1:] += lower[1:] * v[:-1]
    out[:-1] += upper[:-1] * v[1:]
    return out


def solve_kbe(model: ModelSpec, observable: Observable, law: EmpiricalLaw | None, grid: Grid1D,
              damping_steps: int = 2, smooth_terminal: bool = True) -> ValueField:
    """Backward sweep for ``v`` from ``v(T) = |G|`` down to ``t = 0``.

    Coefficients at each time level use kernel means against ``law_at(law,
    t_n)``; ``law=None`` means no interaction.  The drift takes the mean
    per-particle parameter of the model.

    Args:
        damping_steps: number of initial backward steps taken fully implicit
            before switching to ``grid.scheme_weight``; damps the oscillations
            Crank-Nicolson produces from discontinuous terminal data.
        smooth_terminal: start the sweep from cell averages of ``|G|`` rather
            than point values.  The stored terminal row is ``|G(x_i)|``
            regardless.

    Raises:
        ControlRefused: the observable is not sign-constant.
        KBESolverError: singular step matrix or non-finite values.
    """
    if not observable.sign_constant:
        raise ControlRefused(f"observable {observable.name!r} changes sign; no zero-variance control")
    x, t = grid.x, grid.t
    dx, dt = grid.dx, grid.dt
    nu = model.param_mean

    out = np.empty((grid.n_time + 1, grid.n_space + 1))
    out[-1] = np.abs(observable(x))
    v = _cell_average(observable, x, dx) if smooth_terminal else out[-1].copy()

    def bands(n):
        m1, m2 = _kernel_means(model, law, x, t[n])
        b = np.asarray(model.drift(x, m1, nu), dtype=float) * np.ones_like(x)
        s = np.asarray(model.diffusion(x, m2), dtype=float) * np.ones_like(x)
        return _operator_bands(b, s, dx)

    later = bands(grid.n_time)
    for step, n in enumerate(range(grid.n_time, 0, -1)):
        w = 0.0 if step < damping_steps else grid.scheme_weight
        earlier = bands(n - 1)
        rhs = v[1:-1] - w * dt * _apply_bands(*later, v[1:-1]) if w else v[1:-1].copy()
        lo, di, up = earlier
        ab = np.zeros((3, di.size))
        ab[0, 1:] = (1.0 - w) * dt * up[:-1]
        ab[1] = 1.0 + (1.0 - w) * dt * di
        ab[2, :-1] = (1.0 - w) * dt * lo[1:]
        try:
            inner = solve_banded((1, 1), ab, rhs, check_finite=False)
        except LinAlgError as exc:
            raise KBESolverError(f"singular step matrix at time level {n - 1}", n - 1) from exc
        v = np.empty_like(v)
        v[1:-1] = inner
        v[0] = 2.0 * inner[0] - inner[1]
        v[-1] = 2.0 * inner[-1] - inner[-2]
        if not np.all(np.isfinite(v)):
            raise KBESolverError(f"non-finite value at time level {n - 1}", n - 1)
        out[n - 1] = v
        later = earlier
    return ValueField(out, grid)


def extract_control(v: ValueField, model: ModelSpec, law: EmpiricalLaw | None,
                    cap: float = DEFAULT_CONTROL_CAP, floor: float = 1e-16) -> ControlField:
    """``zeta = sigma * d/dx log v`` by finite differences, capped at ``cap``.

    Values are floored at ``floor * max(v)`` per time level before the log;
    central differences inside, one-sided at the two ends.
    """
    grid = v.grid
    x, dx = grid.x, grid.dx
    zeta = np.zeros_like(v.values)
    for n, tn in enumerate(grid.t):
        row = v.values[n]
        top = np.max(row)
        if not top > 0:
            continue
        logv = np.log(np.maximum(row, floor * top))
        grad = np.empty_like(logv)
        grad[1:-1] = (logv[2:] - logv[:-2]) / (2.0 * dx)
        grad[0] = (logv[1] - logv[0]) / dx
        grad[-1] = (logv[-1] - logv[-2]) / dx
        _, m2 = _kernel_means(model, law, x, tn)
        zeta[n] = model.diffusion(x, m2) * grad
    np.clip(zeta, -cap, cap, out=zeta)
    return ControlField(zeta, grid, float(cap))


def eval_control(field: ControlField, t: float, x):
    """Bilinear interpolation of the control; ``x`` is clamped to the grid.

    ``x`` may be a scalar or an array; ``t`` must lie in ``[0, T]``.
    """
    grid = field.grid
    if not (0.0 <= t <= grid.terminal_time):
        raise ValueError(f"t={t} outside [0, {grid.terminal_time}]")
    Z = field.values
    u = t / grid.dt
    if abs(u - round(u)) <= 1e-12 * max(1.0, u):
        u = float(round(u))
    n0 = min(int(np.floor(u)), grid.n_time - 1)
    ft = u - n0

    xa = np.asarray(x, dtype=float)
    xi = (np.clip(xa, -grid.x_bound, grid.x_bound) + grid.x_bound) / grid.dx
    snapped = np.round(xi)
    xi = np.where(np.abs(xi - snapped) <= 1e-12 * np.maximum(1.0, xi), snapped, xi)
    i0 = np.minimum(np.floor(xi).astype(np.intp), grid.n_space - 1)
    fx = xi - i0

    lo = (1.0 - fx) * Z[n0, i0] + fx * Z[n0, i0 + 1]
    if ft == 0.0:
        out = lo
    else:
        hi = (1.0 - fx) * Z[n0 + 1, i0] + fx * Z[n0 + 1, i0 + 1]
        out = (1.0 - ft) * lo + ft * hi
    return float(out) if xa.ndim == 0 else out


def solve_offline_control(model: ModelSpec, observable: Observable, grid: Grid1D, P_bar: int = 1000,
                          N_bar: int = 100, rng=None, cap: float = DEFAULT_CONTROL_CAP, **solver_kw):
    """Offline phase: one large particle law, one backward solve, one control.

    Returns:
        ``(control, value, law)``.
    """
    law = simulate_particles(model, P_bar, N_bar, rng)
    value = solve_kbe(model, observable, law, grid, **solver_kw)
    control = extract_control(value, model, law, cap=cap)
    log.info("offline control: P=%d N=%d grid %dx%d, |zeta|max=%.3g", P_bar, N_bar,
             grid.n_time, grid.n_space, np.max(np.abs(control.values)))
    return control, value, law


# ---------------------------------------------------------------------------
# artifacts


def model_hash(params: dict) -> str:
    """Stable digest of model/observable parameters stored with a control."""
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_control(path, control: ControlField, value: ValueField | None = None, metadata: dict | None = None) -> None:
    g = control.grid
    meta = dict(metadata or {})
    meta.update(version=ARTIFACT_VERSION, x_bound=g.x_bound, n_space=g.n_space, n_time=g.n_time,
                terminal_time=g.terminal_time, scheme_weight=g.scheme_weight, cap=control.cap)
    arrays = {"control": control.values, "metadata": np.array(json.dumps(meta, sort_keys=True))}
    if value is not None:
        arrays["value"] = value.values
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_control(path, expected_hash: str | None = None) -> ControlField:
    """Read a control artifact; refuse it if its model hash differs."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["metadata"]))
        values = np.array(data["control"])
    if meta.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported control artifact version {meta.get('version')}")
    if expected_hash is not None and meta.get("model_hash") != expected_hash:
        raise ValueError(f"control artifact was built for model hash {meta.get('model_hash')}, "
                         f"expected {expected_hash}")
    grid = Grid1D(meta["x_bound"], meta["n_space"], meta["n_time"], meta["terminal_time"], meta["scheme_weight"])
    if values.shape != (grid.n_time + 1, grid.n_space + 1) or not np.all(np.isfinite(values)):
        raise ValueError("control artifact is malformed")
    return ControlField(values, grid, meta["cap"], meta)


def dump_field_csv(values: np.ndarray, path) -> None:
    """Write ``time_level, node, value`` rows for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_level", "node", "value"])
        for n, row in enumerate(values):
            for i, val in enumerate(row):
                writer.writerow([n, i, repr(float(val))])
