"""Euler-Maruyama interacting particle system and its empirical law."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from mvdlmc.model import InvalidParticleCount, ModelSpec
from mvdlmc.rng import as_streams


class NonFiniteStateError(ArithmeticError):
    """A simulated state became NaN or infinite."""

    def __init__(self, message: str, step: int, index: int | None = None):
        super().__init__(message)
        self.step = step
        self.index = index


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    """Particle trajectories on a uniform time grid.

    ``trajectories[p, n]`` is particle ``p`` at ``time_grid[n]``.  The standard
    normal draws that drove the simulation are kept in ``wiener_increments`` so
    the same noise can be reused on a coarser grid.
    """

    trajectories: np.ndarray
    particle_params: np.ndarray
    time_grid: np.ndarray
    wiener_increments: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.trajectories.shape[0]

    @property
    def n_steps(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def terminal_time(self) -> float:
        return float(self.time_grid[-1])

    @property
    def dt(self) -> float:
        return self.terminal_time / self.n_steps

    @property
    def initial_states(self) -> np.ndarray:
        return self.trajectories[:, 0]


def evolve_particles(model: ModelSpec, initial_states, params, increments, T: float | None = None) -> EmpiricalLaw:
    """Run the Euler-Maruyama particle scheme with given randomness.

    Args:
        model: the problem instance.
        initial_states: shape (P,) initial positions.
        params: shape (P,) per-particle parameters.
        increments: shape (P, N) standard normal draws; N fixes the grid.
        T: terminal time, defaults to ``model.terminal_time``.
    """
    x = np.array(initial_states, dtype=float)
    params = np.asarray(params, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidParticleCount("need a nonempty 1-d array of initial states")
    P, N = increments.shape
    if P != x.size or params.shape != (P,):
        raise ValueError("initial_states, params and increments disagree on particle count")
    if N < 1:
        raise ValueError("need at least one time step")
    T = model.terminal_time if T is None else float(T)
    dt = T / N
    sqdt = np.sqrt(dt)

    traj = np.empty((P, N + 1))
    traj[:, 0] = x
    for n in range(N):
        b, s = model.coefficients(x, x, params)
        x = x + b * dt + s * sqdt * increments[:, n]
        if not np.all(np.isfinite(x)):
            p = int(np.flatnonzero(~np.isfinite(x))[0])
            raise NonFiniteStateError(
                f"particle {p} non-finite at step {n + 1} (previous state {traj[p, n]!r}, "
                f"param {params[p]!r}, increment {increments[p, n]!r})",
                step=n + 1,
                index=p,
            )
        traj[:, n + 1] = x
    return EmpiricalLaw(traj, params.copy(), np.linspace(0.0, T, N + 1), increments)


def simulate_particles(model: ModelSpec, P: int, N1: int, rng=None) -> EmpiricalLaw:
    """Simulate one realisation of the P-particle system with N1 Euler steps.

    Initial states, per-particle parameters and Wiener increments come from
    three independent substreams of ``rng`` (a seed or ``RandomStreams``).
    """
    if P < 1:
        raise InvalidParticleCount(f"P must be >= 1, got {P}")
    if N1 < 1:
        raise ValueError(f"N1 must be >= 1, got {N1}")
    streams = as_streams(rng)
    x0 = np.asarray(model.initial_law(streams.generator("law-x0"), P), dtype=float)
    params = model.sample_params(streams.generator("law-params"), P)
    eps = streams.generator("law-wiener").standard_normal((P, N1))
    return evolve_particles(model, x0, params, eps)


def law_at(law: EmpiricalLaw, t: float) -> np.ndarray:
    """Particle states at time ``t``.

    Grid times return the stored column; in between, each trajectory is
    interpolated linearly.
    """
    T = law.terminal_time
    if not (0.0 <= t <= T):
        raise ValueError(f"t={t} outside [0, {T}]")
    u = t / law.dt
    n = int(round(u))
    if abs(u - n) <= 1e-12 * max(1.0, u):
        return law.trajectories[:, min(n, law.n_steps)]
    lo = int(np.floor(u))
    frac = u - lo
    return (1.0 - frac) * law.trajectories[:, lo] + frac * law.trajectories[:, lo + 1]


def aggregate_increments(increments) -> np.ndarray:
    """Pairwise sums of consecutive standard normals, rescaled to unit variance."""
    eps = np.asarray(increments, dtype=float)
    if eps.shape[-1] % 2:
        raise ValueError("need an even number of increments to aggregate")
    return (eps[..., 0::2] + eps[..., 1::2]) / np.sqrt(2.0)


def coarsen_law(model: ModelSpec, law: EmpiricalLaw) -> EmpiricalLaw:
    """Same particles re-simulated on the grid with half as many steps."""
    if law.n_steps % 2:
        raise ValueError(f"need an even number of steps, got {law.n_steps}")
    return evolve_particles(model, law.initial_states, law.particle_params,
                            aggregate_increments(law.wiener_increments), law.terminal_time)


def partition_antithetic(model: ModelSpec, law_fine: EmpiricalLaw, coarsen_time: bool = True):
    """Split the particles into two halves and re-simulate each as its own system.

    The first half is particles ``0 .. P/2-1``, the second the rest.  Each half
    keeps its initial states, parameters and noise; with ``coarsen_time`` the
    noise is aggregated pairwise onto the grid with half as many steps.

    Returns:
        Two :class:`EmpiricalLaw` with ``P/2`` particles each.
    """
    P, N = law_fine.n_particles, law_fine.n_steps
    if P % 2:
        raise ValueError(f"antithetic partition needs an even particle count, got {P}")
    if coarsen_time and N % 2:
        raise ValueError(f"antithetic partition needs an even step count, got {N}")
    eps = aggregate_increments(law_fine.wiener_increments) if coarsen_time else law_fine.wiener_increments
    half = P // 2
    out = []
    for idx in (slice(0, half), slice(half, P)):
        out.append(evolve_particles(model, law_fine.initial_states[idx], law_fine.particle_params[idx],
                                    eps[idx], law_fine.terminal_time))
    return out[0], out[1]


def dump_trajectories_csv(law: EmpiricalLaw, path) -> None:
    """Write ``particle, time_index, state`` rows for debugging."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["particle", "time_index", "state"])
        for p in range(law.n_particles):
            for n in range(law.n_steps + 1):
                writer.writerow([p, n, repr(float(law.trajectories[p, n]))])
