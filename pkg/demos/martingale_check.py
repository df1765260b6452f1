"""The exponential martingale D^u has mean one.

D^u is built from prod_j det(Lambda_j)^{|u_j|/2} and the area quadratic
variation.  Its mean over simulated paths should stay at 1 for every u.
"""

import numpy as np

from flagflow.experiments import fourier_start
from flagflow.flag import FlagDims
from flagflow.functionals import MartingaleObserver
from flagflow.liebm import RngStream, run_unitary_batch

dims = FlagDims(1, 1)
grid = [(0.5, -0.3), (1.0, 0.0), (0.2, 0.2)]
obs = MartingaleObserver(dims, grid)
N = 2000
run_unitary_batch(fourier_start(dims), 1.0, 1e-3, [RngStream(7, i) for i in range(N)], [obs])

D = obs.D
for u, col in zip(grid, D.T):
    se = col.std(ddof=1) / np.sqrt(N)
    print(f"u = {u}: mean D = {col.mean():.4f} +/- {se:.4f}  (|z| = {abs(col.mean() - 1) / se:.2f})")
