"""Areas over long horizons become Cauchy with scale m(n-m).

The spectral engine follows the radial spectrum on the clock
d tau = (sum_j Tr Lambda_j^{-1}) dt and draws the areas from their
conditional Gaussian law.  a(T)/T is then fitted by maximum likelihood.
"""

import time

import numpy as np

from flagflow.flag import FlagDims
from flagflow.liebm import RngStream
from flagflow.stats import cauchy_cdf, cauchy_fit, ks_test
from flagflow.timechange import simulate_spectral

dims = FlagDims(1, 1)
T, N = 30.0, 1000
t0 = time.perf_counter()
run = simulate_spectral(dims, T, [RngStream(42, i) for i in range(N)])
print(f"{N} paths to T = {T} in {time.perf_counter() - t0:.1f} s")

target = dims.m * (dims.n - dims.m)
for j in range(dims.ncols):
    x = run.areas[:, -1, j] / T
    fit = cauchy_fit(x)
    ks = ks_test(x, cauchy_cdf(fit.location, fit.scale))
    print(f"a_{j + 1}/T: scale {fit.scale:.3f} +/- {fit.se_scale:.3f} (target {target}), "
          f"location {fit.location:+.3f}, KS p = {ks.p_approx:.3f}")

w = run.windings[:, -1] / T
print("windings/T scales:", np.round([cauchy_fit(w[:, j]).scale for j in range(dims.ncols)], 3))
