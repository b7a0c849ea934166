"""Double loop Monte Carlo estimator, its diagnostics and the adaptive driver.

The outer loop draws independent empirical laws from the particle system; the
inner loop averages importance-sampled decoupled paths conditional on each
law.  Each outer realisation owns the random substream
``("outer", index)`` under the caller's streams, so results are bit-identical
whatever the worker count.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from mvdlmc.control import ControlField
from mvdlmc.decoupled import coupled_values, weighted_values
from mvdlmc.model import ModelSpec, Observable
from mvdlmc.particles import NonFiniteStateError, coarsen_law, partition_antithetic, simulate_particles
from mvdlmc.rng import RandomStreams, as_streams

log = logging.getLogger(__name__)

DEFAULT_MAX_LEVEL = 12


class ToleranceNotMet(RuntimeError):
    """The adaptive driver hit its level cap before the bias test passed."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


class OuterLoopError(ArithmeticError):
    """A simulation inside an outer realisation produced a non-finite value."""

    def __init__(self, message: str, outer_index: int, step: int | None = None, path_index: int | None = None):
        super().__init__(message)
        self.outer_index = outer_index
        self.step = step
        self.path_index = path_index


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class ToleranceBudget:
    tol_r: float
    theta_split: float = 0.5
    c_alpha: float = 1.96

    def __post_init__(self):
        if not self.tol_r > 0:
            raise ValueError(f"tol_r must be positive, got {self.tol_r}")
        if not 0.0 < self.theta_split < 1.0:
            raise ValueError(f"theta_split must lie in (0, 1), got {self.theta_split}")
        if not self.c_alpha > 0:
            raise ValueError(f"c_alpha must be positive, got {self.c_alpha}")


@dataclass(frozen=True)
class LevelParams:
    """Level ``level`` of the hierarchy ``P = p0 tau^l``, ``N = n0 tau^l``."""

    p0: int
    n0: int
    tau: int = 2
    level: int = 0

    def __post_init__(self):
        if self.tau < 2 or self.p0 < 1 or self.n0 < 1 or self.level < 0:
            raise ValueError(f"invalid level parameters {self}")

    @property
    def P(self) -> int:
        return self.p0 * self.tau ** self.level

    @property
    def N(self) -> int:
        return self.n0 * self.tau ** self.level

    def at(self, level: int) -> "LevelParams":
        return LevelParams(self.p0, self.n0, self.tau, level)


@dataclass(frozen=True)
class VarianceConstants:
    v1: float
    v2: float

    def __post_init__(self):
        if self.v1 < 0 or self.v2 < 0:
            raise ValueError(f"variance constants must be nonnegative, got {self}")


@dataclass
class EstimatorResult:
    estimate: float
    m1: int
    m2: int
    P: int
    N1: int
    N2: int
    level: int = 0
    bias_estimate: float = float("nan")
    v1: float = float("nan")
    v2: float = float("nan")
    std_error: float = float("nan")
    work_units: float = 0.0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def work_units(P: int, N1: int, N2: int, M1: int, M2: int) -> float:
    """Cost model ``M1 N1 P^2 + M1 M2 N2 P``."""
    return float(M1 * N1 * P * P + M1 * M2 * N2 * P)


# ---------------------------------------------------------------------------
# outer loop plumbing


def _map_outer(fn: Callable[[int], np.ndarray], m1: int, workers: int = 1) -> np.ndarray:
    """``fn(0), ..., fn(m1-1)`` stacked in index order."""
    if workers <= 1 or m1 <= 1:
        out = [fn(m) for m in range(m1)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(fn, range(m1)))
    return np.asarray(out, dtype=float)


def _guard(m: int, thunk):
    try:
        return thunk()
    except NonFiniteStateError as exc:
        raise OuterLoopError(f"outer realisation {m}: {exc}", m, exc.step, exc.index) from exc


def _inner_stats(model, observable, control, P, N1, N2, M2, streams: RandomStreams, workers=1, M1=1):
    """Rows ``(inner mean, inner variance)`` for ``M1`` outer realisations."""

    def task(m):
        def run():
            s = streams.child("outer", m)
            law = simulate_particles(model, P, N1, s.child("law"))
            y = weighted_values(model, observable, law, control, N2, M2, s.child("inner"))
            var = float(np.var(y, ddof=1)) if M2 >= 2 else float("nan")
            return float(np.mean(y)), var

        return _guard(m, run)

    return _map_outer(task, M1, workers)


# ---------------------------------------------------------------------------
# estimators


def dlmc_estimate(model: ModelSpec, observable: Observable, control: ControlField | None, P: int, N1: int, N2: int,
                  M1: int, M2: int, rng=None, workers: int = 1, level: int = 0) -> EstimatorResult:
    """Double loop estimate of ``E[G(X(T))]``.

    Each of the ``M1`` outer realisations simulates a fresh ``P``-particle law
    with ``N1`` steps, then averages ``M2`` weighted decoupled paths with
    ``N2`` steps.  ``v1`` and ``v2`` are reported when the sample sizes allow.

    Raises:
        OuterLoopError: a non-finite state, tagged with the outer index.
    """
    for name, val in (("P", P), ("N1", N1), ("N2", N2), ("M1", M1), ("M2", M2)):
        if int(val) < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    start = time.perf_counter()
    stats = _inner_stats(model, observable, control, P, N1, N2, M2, as_streams(rng), workers, M1)
    means = stats[:, 0]
    estimate = float(np.mean(means))
    v1 = float(np.var(means, ddof=1)) if M1 >= 2 else float("nan")
    v2 = float(np.mean(stats[:, 1])) if M2 >= 2 else float("nan")
    se = math.sqrt(v1 / M1) if M1 >= 2 else float("nan")
    return EstimatorResult(estimate=estimate, m1=int(M1), m2=int(M2), P=int(P), N1=int(N1), N2=int(N2), level=level,
                           v1=v1, v2=v2, std_error=se, work_units=work_units(P, N1, N2, M1, M2),
                           wall_time=time.perf_counter() - start)


def estimate_variance_constants(model: ModelSpec, observable: Observable, control: ControlField | None,
                                level: LevelParams, m1_pilot: int, m2_pilot: int, rng=None,
                                workers: int = 1, debias: bool = False) -> VarianceConstants:
    """Pilot estimate of ``V1`` (variance of conditional means) and ``V2``.

    ``V1`` is the sample variance of the ``m1_pilot`` inner means and ``V2`` the
    average of the inner sample variances, at ``P = N1 = N2`` of ``level``.

    The inner means carry their own noise, so the plain ``V1`` overestimates
    ``Var(E[Y | law])`` by ``V2 / m2_pilot``.  With ``debias`` that term is
    subtracted (clipped at zero), which matters when ``V1`` is small.
    """
    if m1_pilot < 2 or m2_pilot < 2:
        raise ValueError(f"pilot sizes must be >= 2, got ({m1_pilot}, {m2_pilot})")
    stats = _inner_stats(model, observable, control, level.P, level.N, level.N, m2_pilot, as_streams(rng),
                         workers, m1_pilot)
    v1 = float(np.var(stats[:, 0], ddof=1))
    v2 = float(np.mean(stats[:, 1]))
    if debias:
        v1 = max(0.0, v1 - v2 / m2_pilot)
    return VarianceConstants(v1, v2)


def _difference_samples(model, observable, control, M1, M2, streams: RandomStreams, workers, make_laws, N_fine,
                        coarsen_time):
    """Per-outer means of ``fine - mean(coarse)`` for a coupled pair of levels."""

    def task(m):
        def run():
            s = streams.child("outer", m)
            fine_law, coarse_laws = make_laws(s.child("law"))
            fine, coarse = coupled_values(model, observable, fine_law, coarse_laws, control, N_fine, M2,
                                          s.child("inner"), coarsen_time=coarsen_time)
            return float(np.mean(fine - sum(coarse) / len(coarse)))

        return _guard(m, run)

    return _map_outer(task, M1, workers)


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(samples.size)) if samples.size >= 2 else float("nan")
    return mean, se


def estimate_level_difference(model: ModelSpec, observable: Observable, control: ControlField | None,
                              level: LevelParams, m1: int, m2: int, rng=None, workers: int = 1):
    """Antithetic estimate of ``E[Delta G_l]`` with its standard error.

    The fine term uses ``P_l`` particles and ``N_l`` steps; the coarse term
    averages the two half-size systems obtained by splitting the fine
    particles, each on the grid with ``N_l / 2`` steps, and decoupled paths
    driven by the aggregated fine increments.

    Returns:
        ``(mean, standard_error)``.
    """
    if level.level < 1:
        raise ValueError("the antithetic difference needs level >= 1")
    P, N = level.P, level.N
    if P % 2 or N % 2:
        raise ValueError(f"P and N must be even at level {level.level}, got P={P}, N={N}")

    def make_laws(s):
        law = simulate_particles(model, P, N, s)
        return law, partition_antithetic(model, law)

    samples = _difference_samples(model, observable, control, m1, m2, as_streams(rng), workers, make_laws, N, True)
    return _mean_se(samples)


def estimate_bias_antithetic(model: ModelSpec, observable: Observable, control: ControlField | None,
                             level: LevelParams, m1: int, m2: int, rng=None, workers: int = 1) -> float:
    """Monte Carlo estimate of ``E[G_l L_l - (G_{l-1} L_{l-1} averaged over both halves)]``."""
    return estimate_level_difference(model, observable, control, level, m1, m2, rng, workers)[0]


# ---------------------------------------------------------------------------
# optimal sample sizes and parameters


class SampleSizes(NamedTuple):
    m1: int
    m2: int
    degenerate: bool = False


def _ceil(x: float) -> int:
    # guard against 2.0000000000000004 style round-off pushing an exact integer up
    r = round(x)
    return int(r) if abs(x - r) <= 1e-12 * max(1.0, abs(x)) else int(math.ceil(x))


def optimal_samples(v: VarianceConstants, P_L: int, budget: ToleranceBudget, tol_abs: float) -> SampleSizes:
    """Outer and inner sample sizes meeting the statistical constraint.

    ``M1 = (V1 + sqrt(V1 V2 / P)) C^2 / ((1-theta)^2 TOL^2)`` and
    ``M2 = sqrt(V2 P / V1)``, both rounded up.  When one constant vanishes the
    constraint is met with the other sample size alone; when both vanish
    ``(1, 1)`` is returned with ``degenerate=True``.
    """
    if not tol_abs > 0:
        raise ValueError(f"tol_abs must be positive, got {tol_abs}")
    k = budget.c_alpha ** 2 / ((1.0 - budget.theta_split) ** 2 * tol_abs ** 2)
    v1, v2 = v.v1, v.v2
    if v1 == 0.0 and v2 == 0.0:
        return SampleSizes(1, 1, True)
    if v1 == 0.0:
        return SampleSizes(1, max(1, _ceil(v2 * k)), True)
    if v2 == 0.0:
        return SampleSizes(max(1, _ceil(v1 * k)), 1, True)
    m1 = (v1 + math.sqrt(v1 * v2 / P_L)) * k
    m2 = math.sqrt(v2 * P_L / v1)
    return SampleSizes(max(1, _ceil(m1)), max(1, _ceil(m2)), False)


class OptimalParameters(NamedTuple):
    P: int
    N1: int
    N2: int
    M1: int
    M2: int


def optimal_parameters(cp: float, cn1: float, cn2: float, c1: float, c2: float, budget: ToleranceBudget,
                       tol_abs: float, rounded: bool = True) -> OptimalParameters:
    """Closed-form work-minimising ``(P, N1, N2, M1, M2)`` for given constants.

    ``cp, cn1, cn2`` are the bias constants in ``P``, ``N1``, ``N2`` and
    ``c1, c2`` the variance constants.  With ``rounded=False`` the real-valued
    optimum is returned.
    """
    for name, c in (("cp", cp), ("cn1", cn1), ("cn2", cn2), ("c1", c1), ("c2", c2), ("tol_abs", tol_abs)):
        if not c > 0:
            raise ValueError(f"{name} must be positive, got {c}")
    th, ca = budget.theta_split, budget.c_alpha
    alpha = (c2 / c1) ** (1 / 3) * (cn1 / cn2) ** (2 / 3)
    gamma = (c2 / c1) ** (2 / 3) * (cn1 / cn2) ** (1 / 3)
    beta = (alpha ** 2 * cp / cn1) / (alpha + gamma)
    s = cp + beta * cn1 / alpha + beta * cn2
    P = s / (th * tol_abs)
    N1 = (alpha * cp / beta + cn1 + alpha * cn2) / (th * tol_abs)
    N2 = (cp / beta + cn1 / alpha + cn2) / (th * tol_abs)
    M1 = th / (1 - th) ** 2 * ca ** 2 * (c1 + c2 / gamma) / (s * tol_abs)
    M2 = gamma * s / (th * tol_abs)
    vals = (P, N1, N2, M1, M2)
    if rounded:
        vals = tuple(max(1, _ceil(x)) for x in vals)
    return OptimalParameters(*vals)


# ---------------------------------------------------------------------------
# adaptive driver


@dataclass(frozen=True)
class PilotSizes:
    """Sample sizes for the rough estimate, variance pilots and bias estimate."""

    rough_m1: int = 1000
    rough_m2: int = 100
    var_m1: int = 50
    var_m2: int = 1000
    bias_m1_min: int = 100
    bias_m2_min: int = 50


def adaptive_dlmc(model: ModelSpec, observable: Observable, control: ControlField | None, p0: int, n0: int,
                  budget: ToleranceBudget, pilots: PilotSizes = PilotSizes(), rng=None, tau: int = 2,
                  max_level: int = DEFAULT_MAX_LEVEL, pilot_levels: int = 3,
                  trace: Callable[[dict], None] | None = None, workers: int = 1) -> EstimatorResult:
    """Refine ``(P, N)`` level by level until the bias estimate meets the budget.

    At each level ``l`` with ``P = p0 tau^l`` and ``N1 = N2 = n0 tau^l``:

    * variance constants come from pilot runs for ``l <= pilot_levels`` and
      are extrapolated beyond (``V1 ~ 1/P``, ``V2`` constant);
    * ``(M1, M2)`` follow from :func:`optimal_samples` with
      ``tol_abs = tol_r |alpha|``, ``alpha`` the latest estimate;
    * the bias is ``2 |E[Delta G_{l+1}]|``, and past ``pilot_levels`` the
      maximum of that and the halved/quartered biases of the two previous
      levels;
    * a full estimate refreshes ``alpha``; the loop stops when
      ``bias <= theta tol_r |alpha|``.  Level 0 never stops the loop.

    Each level emits a progress record to ``trace``.

    Raises:
        ToleranceNotMet: if level ``max_level`` is passed without stopping.
    """
    streams = as_streams(rng)
    start = time.perf_counter()
    base = LevelParams(p0, n0, tau, 0)
    records: list[dict] = []

    rough = dlmc_estimate(model, observable, control, base.P, base.N, base.N, pilots.rough_m1, pilots.rough_m2,
                          streams.child("rough"), workers)
    alpha = abs(rough.estimate)
    total_work = rough.work_units
    biases: list[float] = []
    v_ref: VarianceConstants | None = None
    for ell in range(max_level + 1):
        lp = base.at(ell)
        P, N = lp.P, lp.N
        if ell <= pilot_levels or v_ref is None:
            v = estimate_variance_constants(model, observable, control, lp, pilots.var_m1, pilots.var_m2,
                                            streams.child("variance", ell), workers)
            total_work += work_units(P, N, N, pilots.var_m1, pilots.var_m2)
            v_ref, p_ref = v, P
        else:
            v = VarianceConstants(v_ref.v1 * p_ref / P, v_ref.v2)
        tol_abs = budget.tol_r * alpha if alpha > 0 else budget.tol_r
        m1, m2, degenerate = optimal_samples(v, P, budget, tol_abs)

        fine = lp.at(ell + 1)
        bm1, bm2 = max(m1, pilots.bias_m1_min), max(m2, pilots.bias_m2_min)
        diff, diff_se = estimate_level_difference(model, observable, control, fine, bm1, bm2,
                                                  streams.child("bias", ell), workers)
        total_work += work_units(fine.P, fine.N, fine.N, bm1, bm2)
        direct = 2.0 * abs(diff)
        bias = direct
        if ell > pilot_levels and len(biases) >= 2:
            bias = max(direct, biases[-1] / tau, biases[-2] / tau ** 2)
        biases.append(bias)

        result = dlmc_estimate(model, observable, control, P, N, N, m1, m2, streams.child("estimate", ell), workers,
                               level=ell)
        total_work += result.work_units
        if result.estimate != 0.0 or alpha == 0.0:
            alpha = abs(result.estimate)
        threshold = budget.theta_split * budget.tol_r * alpha
        record = dict(level=ell, P=P, N=N, v1=v.v1, v2=v.v2, m1=m1, m2=m2, degenerate=degenerate,
                      bias=bias, bias_direct=direct, bias_se=2.0 * diff_se, alpha=alpha, estimate=result.estimate,
                      threshold=threshold, work=result.work_units, total_work=total_work)
        records.append(record)
        log.info("level %d: P=%d N=%d M1=%d M2=%d bias=%.3g alpha=%.4g", ell, P, N, m1, m2, bias, alpha)
        if trace is not None:
            trace(record)
        if ell >= 1 and bias <= threshold:
            result.bias_estimate = bias
            result.v1, result.v2 = v.v1, v.v2
            result.wall_time = time.perf_counter() - start
            result.extra = {"total_work": total_work, "rough_estimate": rough.estimate, "trace": records}
            return result
    raise ToleranceNotMet(f"bias test not met by level {max_level} (last bias {biases[-1]:.3g}, "
                          f"threshold {threshold:.3g})", records)


# ---------------------------------------------------------------------------
# convergence studies


def fit_slope(xs, ys) -> float:
    """Least-squares slope of ``log|y|`` against ``log x``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.abs(np.asarray(ys, dtype=float))
    if np.any(ys == 0):
        return float("nan")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


@dataclass(frozen=True)
class StudyRow:
    study: str
    parameter: int
    estimate: float
    std_error: float


def difference_study(model: ModelSpec, observable: Observable, control: ControlField | None, kind: str,
                     values, M1: int, M2: int, P: int = 80, N1: int = 64, N2: int = 64, rng=None,
                     workers: int = 1) -> list[StudyRow]:
    """Coupled estimates of the change in ``E[G]`` when one parameter doubles.

    ``kind`` selects the doubled parameter:

    * ``"P"``: ``2P`` particles against the two ``P``-particle halves, same
      grids;
    * ``"N1"``: particle grid ``2 N1`` against ``N1``, decoupled paths on
      ``N2`` steps with shared increments;
    * ``"N2"``: decoupled paths on ``2 N2`` against ``N2`` steps, one law;
    * ``"N"``: both grids doubled together.

    Each entry of ``values`` replaces the studied parameter.
    """
    streams = as_streams(rng)
    rows = []
    for i, val in enumerate(values):
        val = int(val)
        s = streams.child("study", i)
        if kind == "P":
            def make_laws(r, val=val):
                law = simulate_particles(model, 2 * val, N1, r)
                return law, partition_antithetic(model, law, coarsen_time=False)
            n_fine, coarsen = N2, False
        elif kind == "N1":
            def make_laws(r, val=val):
                law = simulate_particles(model, P, 2 * val, r)
                return law, [coarsen_law(model, law)]
            n_fine, coarsen = N2, False
        elif kind == "N2":
            def make_laws(r):
                law = simulate_particles(model, P, N1, r)
                return law, [law]
            n_fine, coarsen = 2 * val, True
        elif kind == "N":
            def make_laws(r, val=val):
                law = simulate_particles(model, P, 2 * val, r)
                return law, [coarsen_law(model, law)]
            n_fine, coarsen = 2 * val, True
        else:
            raise ValueError(f"unknown study kind {kind!r}")
        samples = _difference_samples(model, observable, control, M1, M2, s, workers, make_laws, n_fine, coarsen)
        mean, se = _mean_se(samples)
        rows.append(StudyRow(kind, val, mean, se))
    return rows


def variance_study(model: ModelSpec, observable: Observable, control: ControlField | None, P_values, N: int,
                   M1: int, M2: int, rng=None, workers: int = 1,
                   debias: bool = True) -> list[tuple[int, VarianceConstants]]:
    """``(P, VarianceConstants)`` at ``N1 = N2 = N`` for each ``P``.

    ``V1`` is debiased by default since the study tracks its decay in ``P``.
    """
    streams = as_streams(rng)
    out = []
    for i, P in enumerate(P_values):
        lp = LevelParams(int(P), int(N), 2, 0)
        out.append((int(P), estimate_variance_constants(model, observable, control, lp, M1, M2,
                                                        streams.child("variance-study", i), workers, debias)))
    return out
