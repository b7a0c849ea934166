"""Importance sampling for P(X(T) > K) in the Kuramoto benchmark.

Solves the offline control once, fixes one particle law, and compares the
inner-loop estimator with and without the control at the same sample size.

    python demos/rare_event_is.py [K]
"""

import sys

import numpy as np

from mvdlmc.control import Grid1D, solve_offline_control
from mvdlmc.decoupled import weighted_values
from mvdlmc.model import benchmark_kuramoto, indicator_observable
from mvdlmc.particles import simulate_particles


def summarize(name, y):
    mean = np.mean(y)
    cv2 = np.var(y, ddof=1) / mean**2 if mean > 0 else float("inf")
    print(f"{name:>6}: mean {mean:.4e}  std.err {np.std(y, ddof=1) / np.sqrt(len(y)):.2e}  squared CV {cv2:.3g}")
    return cv2


def main(K=2.0, M=20_000):
    model = benchmark_kuramoto()
    obs = indicator_observable(K)
    control, _, _ = solve_offline_control(model, obs, Grid1D.from_spacing(4.0, 0.01), P_bar=1000, N_bar=100, rng=1)
    print(f"control solved, max |zeta| = {np.max(np.abs(control.values)):.2f}")
    law = simulate_particles(model, 200, 32, rng=2)
    cv_is = summarize("IS", weighted_values(model, obs, law, control, 32, M, rng=3))
    cv_mc = summarize("crude", weighted_values(model, obs, law, None, 32, M, rng=4))
    print(f"variance reduction (squared CV ratio): {cv_mc / cv_is:.1f}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 2.0)
