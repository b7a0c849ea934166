"""Importance-sampled paths of the decoupled process.

Conditional on a stored empirical law, the McKean-Vlasov SDE becomes an
ordinary SDE.  Paths are driven with the shifted drift ``b + sigma * zeta``
and carry the likelihood ratio

    L = prod_n exp(-0.5 dt zeta_n^2 - sqrt(dt) eps_n zeta_n)

so that ``E[G(X) L]`` under the shifted dynamics equals ``E[G(X)]``.
Paths are simulated in vectorised batches; the single-path functions are thin
wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mvdlmc.control import ControlField, eval_control
from mvdlmc.model import ModelSpec, Observable
from mvdlmc.particles import EmpiricalLaw, NonFiniteStateError, aggregate_increments, law_at
from mvdlmc.rng import as_streams


@dataclass(frozen=True)
class WeightedSample:
    terminal_state: float
    likelihood: float
    observable_value: float

    @property
    def weighted_value(self) -> float:
        return self.observable_value * self.likelihood


def propagate_decoupled(model: ModelSpec, law: EmpiricalLaw, control: ControlField | None, initial_states,
                        params, increments, T: float | None = None):
    """Euler-Maruyama for a batch of decoupled paths with given randomness.

    Args:
        control: importance-sampling control, or ``None`` for no shift.
        initial_states, params: shape (M,).
        increments: shape (M, N2) standard normals; N2 fixes the step.

    Returns:
        ``(terminal_states, log_likelihoods)``, both shape (M,).  With
        ``control=None`` the log-likelihoods are exactly zero.
    """
    x = np.array(initial_states, dtype=float)
    params = np.asarray(params, dtype=float)
    increments = np.asarray(increments, dtype=float)
    M, N = increments.shape
    T = model.terminal_time if T is None else float(T)
    dt = T / N
    sqdt = np.sqrt(dt)
    log_lik = np.zeros(M)
    for n in range(N):
        tn = T * n / N
        b, s = model.coefficients(x, law_at(law, tn), params)
        eps = increments[:, n]
        if control is None:
            x = x + b * dt + s * sqdt * eps
        else:
            z = eval_control(control, tn, x)
            x = x + (b + s * z) * dt + s * sqdt * eps
            log_lik -= 0.5 * dt * z * z + sqdt * eps * z
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(log_lik))):
            k = int(np.flatnonzero(~(np.isfinite(x) & np.isfinite(log_lik)))[0])
            raise NonFiniteStateError(f"decoupled path {k} non-finite at step {n + 1}", step=n + 1, index=k)
    return x, log_lik


def _draw(model: ModelSpec, streams, M: int, N: int):
    x0 = np.asarray(model.initial_law(streams.generator("path-x0"), M), dtype=float)
    params = model.sample_params(streams.generator("path-params"), M)
    eps = streams.generator("path-wiener").standard_normal((M, N))
    return x0, params, eps


def simulate_decoupled_paths(model: ModelSpec, law: EmpiricalLaw, control: ControlField | None, N2: int, M: int,
                             rng=None):
    """``M`` independent decoupled paths with ``N2`` steps.

    Initial states are fresh draws from the initial law, independent of the
    particles behind ``law``.

    Returns:
        ``(terminal_states, likelihoods)``.
    """
    if N2 < 1 or M < 1:
        raise ValueError("need N2 >= 1 and M >= 1")
    x0, params, eps = _draw(model, as_streams(rng), M, N2)
    x, log_lik = propagate_decoupled(model, law, control, x0, params, eps)
    return x, np.exp(log_lik)


def simulate_decoupled_path(model: ModelSpec, law: EmpiricalLaw, control: ControlField | None, N2: int, rng=None,
                            observable: Observable | None = None) -> WeightedSample:
    x, lik = simulate_decoupled_paths(model, law, control, N2, 1, rng)
    g = float(observable(x)[0]) if observable is not None else float("nan")
    return WeightedSample(float(x[0]), float(lik[0]), g)


def weighted_values(model, observable, law, control, N2, M, rng=None) -> np.ndarray:
    """Samples of ``G(X(T)) * L`` for ``M`` paths."""
    x, lik = simulate_decoupled_paths(model, law, control, N2, M, rng)
    return observable(x) * lik


def inner_estimator(model: ModelSpec, observable: Observable, law: EmpiricalLaw, control: ControlField | None,
                    N2: int, M2: int, rng=None) -> tuple[float, float]:
    """Conditional mean and unbiased variance of ``G * L`` given ``law``."""
    if M2 < 2:
        raise ValueError(f"inner estimator needs M2 >= 2, got {M2}")
    y = weighted_values(model, observable, law, control, N2, M2, rng)
    return float(np.mean(y)), float(np.var(y, ddof=1))


def coupled_values(model: ModelSpec, observable: Observable, fine_law: EmpiricalLaw, coarse_laws,
                   control: ControlField | None, N_fine: int, M: int, rng=None, coarsen_time: bool = True):
    """``G * L`` on one fine path and on coarse paths sharing its randomness.

    All paths start from the same initial state and parameter.  With
    ``coarsen_time`` the coarse paths take ``N_fine / 2`` steps driven by the
    pairwise-aggregated fine increments, otherwise the same increments.

    Returns:
        ``(fine, [coarse_1, ...])`` arrays of shape (M,).
    """
    if coarsen_time and N_fine % 2:
        raise ValueError(f"N_fine must be even to coarsen, got {N_fine}")
    x0, params, eps = _draw(model, as_streams(rng), M, N_fine)
    xf, lf = propagate_decoupled(model, fine_law, control, x0, params, eps)
    eps_c = aggregate_increments(eps) if coarsen_time else eps
    coarse = []
    for law_c in coarse_laws:
        xc, lc = propagate_decoupled(model, law_c, control, x0, params, eps_c)
        coarse.append(observable(xc) * np.exp(lc))
    return observable(xf) * np.exp(lf), coarse


def simulate_coupled_levels(model: ModelSpec, observable: Observable, law_fine: EmpiricalLaw, laws_coarse,
                            control: ControlField | None, N_fine: int, rng=None):
    """One fine path and two coarse paths on the antithetic coarse laws.

    Returns:
        ``(fine, (coarse_1, coarse_2))`` as :class:`WeightedSample`.
    """
    if N_fine % 2:
        raise ValueError(f"N_fine must be even, got {N_fine}")
    x0, params, eps = _draw(model, as_streams(rng), 1, N_fine)
    xf, lf = propagate_decoupled(model, law_fine, control, x0, params, eps)
    eps_c = aggregate_increments(eps)
    samples = []
    for law_c in laws_coarse:
        xc, lc = propagate_decoupled(model, law_c, control, x0, params, eps_c)
        samples.append(WeightedSample(float(xc[0]), float(np.exp(lc[0])), float(observable(xc)[0])))
    fine = WeightedSample(float(xf[0]), float(np.exp(lf[0])), float(observable(xf)[0]))
    return fine, tuple(samples)
