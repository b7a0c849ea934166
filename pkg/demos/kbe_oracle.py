"""Backward-equation solver against the Gaussian tail of a drifted Brownian motion.

For dX = nu dt + sigma dW the value v(t, x) = P(X(T) > K | X(t) = x) is known
in closed form; the solver error should shrink about fourfold per halving.

    python demos/kbe_oracle.py
"""

import numpy as np
from scipy.stats import norm

from mvdlmc.control import Grid1D, solve_kbe
from mvdlmc.model import Constant, indicator_observable, zero_kernel_model

NU, SIGMA, K = 0.1, 0.4, 2.0


def sup_error(dx):
    model = zero_kernel_model(Constant(NU), SIGMA, Constant(0.0), 1.0)
    grid = Grid1D.from_spacing(4.0, dx)
    v = solve_kbe(model, indicator_observable(K), None, grid)
    tau = grid.terminal_time - grid.t[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = norm.cdf((grid.x[None, :] + NU * tau - K) / (SIGMA * np.sqrt(tau)))
    region = (np.abs(grid.x) <= 3.0)[None, :] & (tau >= 0.05)
    return np.max(np.abs(v.values - exact)[region])


def main():
    prev = None
    for dx in (0.04, 0.02, 0.01):
        err = sup_error(dx)
        ratio = f"  contraction {prev / err:.2f}" if prev else ""
        print(f"dx={dx:.2f}  sup error {err:.2e}{ratio}")
        prev = err


if __name__ == "__main__":
    main()
