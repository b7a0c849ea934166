"""Weak-error and variance rates for G(x) = cos(x) on the Kuramoto benchmark.

Prints coupled differences when P or N doubles and the variance constants
V1, V2 against P, with fitted log-log slopes (ideal: -1, -1 and 0).

    python demos/convergence.py
"""

from mvdlmc.dlmc import difference_study, fit_slope, variance_study
from mvdlmc.model import benchmark_kuramoto, cosine_observable


def main():
    model, obs = benchmark_kuramoto(), cosine_observable()
    for kind, values in (("P", [10, 20, 40, 80]), ("N", [4, 8, 16, 32])):
        rows = difference_study(model, obs, None, kind, values, 50, 500, rng=1)
        for r in rows:
            print(f"{kind}={r.parameter:4d}  diff {r.estimate:+.3e} +- {r.std_error:.1e}")
        print(f"slope vs {kind}: {fit_slope(values, [abs(r.estimate) for r in rows]):.2f}")
    vs = variance_study(model, obs, None, [16, 32, 64], 16, 200, 2000, rng=2)
    for P, v in vs:
        print(f"P={P:4d}  V1 {v.v1:.3e}  V2 {v.v2:.3e}")
    P = [p for p, _ in vs]
    print(f"slopes: V1 {fit_slope(P, [v.v1 for _, v in vs]):.2f}, V2 {fit_slope(P, [v.v2 for _, v in vs]):.2f}")


if __name__ == "__main__":
    main()
