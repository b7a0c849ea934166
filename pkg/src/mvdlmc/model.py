"""Problem definition: McKean-Vlasov drift/diffusion, kernels, laws, observables.

A model is described by

    dX = b(X, mean_j k1(X, X_j), nu) dt + sigma(X, mean_j k2(X, X_j)) dW

where ``nu`` is an optional random parameter attached to each particle
(the natural frequency in the Kuramoto model).  Everything here is scalar
(one-dimensional state) and vectorised over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class InvalidParticleCount(ValueError):
    pass


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# samplers


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0

    def __call__(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(size)


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def __call__(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size)


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    @property
    def mean(self) -> float:
        return self.value

    def __call__(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, float(self.value))


# ---------------------------------------------------------------------------
# kernels


class Kernel:
    """Pairwise interaction kernel ``k(x, y)``.

    ``mean(x, states)`` returns ``mean_j k(x_i, states_j)`` for every entry of
    ``x``.  The default is the direct O(len(states)) sum per point; subclasses
    may override it with an exact cheaper evaluation.
    """

    name = "kernel"

    def __call__(self, x, y):
        raise NotImplementedError

    def mean(self, x, states) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        states = np.asarray(states, dtype=float)
        return np.mean(self(x[..., None], states), axis=-1)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class SineKernel(Kernel):
    """``sin(x - y)``; the mean uses sin(x-y) = sin x cos y - cos x sin y."""

    name = "sine"

    def __call__(self, x, y):
        return np.sin(np.subtract(x, y))

    def mean(self, x, states) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        states = np.asarray(states, dtype=float)
        s = np.mean(np.sin(states))
        c = np.mean(np.cos(states))
        return np.sin(x) * c - np.cos(x) * s


class ZeroKernel(Kernel):
    name = "zero"

    def __call__(self, x, y):
        return np.zeros(np.broadcast(x, y).shape)

    def mean(self, x, states) -> np.ndarray:
        return np.zeros(np.shape(x))


class FunctionKernel(Kernel):
    """Wraps an arbitrary vectorised callable; mean is the direct sum."""

    name = "function"

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, x, y):
        return self.fn(x, y)

    def __repr__(self) -> str:
        return f"FunctionKernel({getattr(self.fn, '__name__', self.fn)!r})"


def interaction_mean(x, states, kernel) -> float | np.ndarray:
    """Empirical kernel mean ``(1/P) sum_j kernel(x, states_j)``.

    This is the plain O(P) sum per evaluation point.  ``kernel`` may be a
    :class:`Kernel` or any vectorised callable of ``(x, y)``.

    Raises:
        InvalidParticleCount: if ``states`` is empty.
    """
    states = np.asarray(states, dtype=float).ravel()
    if states.size == 0:
        raise InvalidParticleCount("interaction_mean needs at least one particle state")
    x_arr = np.asarray(x, dtype=float)
    values = kernel(x_arr[..., None], states)
    out = np.sum(values, axis=-1) / states.size
    return float(out) if x_arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# model and observable


def _constant_diffusion(sigma: float):
    def diffusion(x, m):
        return np.full(np.shape(x), sigma, dtype=float)

    diffusion.sigma = sigma
    return diffusion


def _frequency_plus_mean(x, m, nu):
    return nu + m


@dataclass(frozen=True)
class ModelSpec:
    """One McKean-Vlasov problem instance.

    Attributes:
        drift: ``b(x, m1, nu)`` with ``m1`` the kernel-1 mean and ``nu`` the
            per-particle parameter (zeros when the model has none).
        diffusion: ``sigma(x, m2)``, nonnegative.
        kernel1, kernel2: drift and diffusion interaction kernels.
        initial_law: sampler ``(rng, size) -> states`` for X(0).
        terminal_time: T > 0.
        param_law: optional sampler for per-particle parameters.
        name, params: registry name and parameters (used for hashing).
    """

    drift: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kernel1: Kernel
    kernel2: Kernel
    initial_law: Callable[[np.random.Generator, int], np.ndarray]
    terminal_time: float
    param_law: Callable[[np.random.Generator, int], np.ndarray] | None = None
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.terminal_time > 0:
            raise ModelError(f"terminal time must be positive, got {self.terminal_time}")

    @property
    def param_mean(self) -> float:
        """Mean of the per-particle parameter; used where a single value is needed."""
        if self.param_law is None:
            return 0.0
        return float(getattr(self.param_law, "mean", 0.0))

    def sample_params(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.param_law is None:
            return np.zeros(size)
        return np.asarray(self.param_law(rng, size), dtype=float)

    def coefficients(self, x, states, params):
        """Drift and diffusion at ``x`` given the particle ``states``."""
        m1 = self.kernel1.mean(x, states)
        m2 = self.kernel2.mean(x, states)
        return self.drift(x, m1, params), self.diffusion(x, m2)


@dataclass(frozen=True)
class Observable:
    """Scalar observable G.

    ``sign_constant`` must be true for the importance-sampling control to be
    solvable: the zero-variance construction needs G of one sign.
    """

    g: Callable[[np.ndarray], np.ndarray]
    sign_constant: bool
    threshold: float | None = None
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __call__(self, x) -> np.ndarray:
        return self.g(np.asarray(x, dtype=float))


def indicator_observable(threshold: float) -> Observable:
    """``G(x) = 1{x > threshold}``."""
    k = float(threshold)

    def g(x):
        return (x > k).astype(float)

    return Observable(g, True, k, "indicator", {"K": k})


def cosine_observable() -> Observable:
    return Observable(np.cos, False, None, "cos", {})


def constant_observable(value: float = 1.0) -> Observable:
    c = float(value)

    def g(x):
        return np.full(np.shape(x), c)

    return Observable(g, True, None, "constant", {"c": c})


def kuramoto_model(sigma: float, nu_sampler, mu0_sampler, T: float = 1.0) -> ModelSpec:
    """Fully connected Kuramoto oscillators with additive noise.

    ``b(x, m, nu) = nu + m`` with ``m = mean_j sin(x - X_j)`` and constant
    diffusion ``sigma``.  ``sigma = 0`` is allowed (deterministic limit).
    """
    if sigma < 0:
        raise ModelError(f"sigma must be nonnegative, got {sigma}")
    return ModelSpec(
        drift=_frequency_plus_mean,
        diffusion=_constant_diffusion(float(sigma)),
        kernel1=SineKernel(),
        kernel2=ZeroKernel(),
        initial_law=mu0_sampler,
        terminal_time=float(T),
        param_law=nu_sampler,
        name="kuramoto",
        params={"sigma": float(sigma), "nu": repr(nu_sampler), "x0": repr(mu0_sampler), "T": float(T)},
    )


def zero_kernel_model(nu_sampler, sigma: float, mu0_sampler, T: float = 1.0) -> ModelSpec:
    """Arithmetic Brownian motion ``dX = nu dt + sigma dW`` with zero kernels.

    Has closed-form laws, so it serves as an oracle for the solvers.
    """
    if sigma < 0:
        raise ModelError(f"sigma must be nonnegative, got {sigma}")
    return ModelSpec(
        drift=_frequency_plus_mean,
        diffusion=_constant_diffusion(float(sigma)),
        kernel1=ZeroKernel(),
        kernel2=ZeroKernel(),
        initial_law=mu0_sampler,
        terminal_time=float(T),
        param_law=nu_sampler,
        name="zero-kernel-drift",
        params={"sigma": float(sigma), "nu": repr(nu_sampler), "x0": repr(mu0_sampler), "T": float(T)},
    )


def benchmark_kuramoto(sigma: float = 0.4, nu_half_width: float = 0.2, x0_std: float = 0.2, T: float = 1.0):
    """The Kuramoto configuration used throughout the numerical experiments."""
    return kuramoto_model(sigma, Uniform(-nu_half_width, nu_half_width), Normal(0.0, x0_std), T)


# ---------------------------------------------------------------------------
# registries (configuration files select by name, never by code)


def _law_from_params(kind: str, a: float, b: float):
    if kind == "normal":
        return Normal(a, b)
    if kind == "uniform":
        return Uniform(a, b)
    if kind == "constant":
        return Constant(a)
    raise ModelError(f"unknown law kind {kind!r}")


def _build_kuramoto(sigma=0.4, nu_law="uniform", nu_a=-0.2, nu_b=0.2, x0_law="normal", x0_a=0.0, x0_b=0.2, T=1.0):
    return kuramoto_model(float(sigma), _law_from_params(nu_law, float(nu_a), float(nu_b)),
                          _law_from_params(x0_law, float(x0_a), float(x0_b)), float(T))


def _build_zero_kernel(sigma=0.4, nu_law="constant", nu_a=0.1, nu_b=0.0, x0_law="constant", x0_a=0.0, x0_b=0.0, T=1.0):
    return zero_kernel_model(_law_from_params(nu_law, float(nu_a), float(nu_b)), float(sigma),
                             _law_from_params(x0_law, float(x0_a), float(x0_b)), float(T))


MODELS: dict[str, Callable[..., ModelSpec]] = {
    "kuramoto": _build_kuramoto,
    "zero-kernel-drift": _build_zero_kernel,
}

OBSERVABLES: dict[str, Callable[..., Observable]] = {
    "indicator": lambda K=2.0: indicator_observable(float(K)),
    "cos": lambda: cosine_observable(),
    "constant": lambda c=1.0: constant_observable(float(c)),
}


def build_model(name: str, **params) -> ModelSpec:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    model = factory(**params)
    return model


def build_observable(name: str, **params) -> Observable:
    try:
        factory = OBSERVABLES[name]
    except KeyError:
        raise ModelError(f"unknown observable {name!r}; known: {sorted(OBSERVABLES)}") from None
    return factory(**params)
