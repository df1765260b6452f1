"""From a unitary Brownian path to flag coordinates, areas and windings.

Runs one path on U(4) split into two blocks of size 2, prints the chart
coordinates, the radial spectrum, the areas and the determinant windings,
and checks the pathwise identity |det Z_j|^2 = det Lambda_j.
"""

import numpy as np

from flagflow.experiments import fourier_start
from flagflow.flag import FlagDims, project_affine, radial_from_unitary
from flagflow.functionals import AreaObserver, WindingObserver, stiefel_blocks
from flagflow.liebm import RngStream, run_unitary_batch

dims = FlagDims(m=2, k=1)
U0 = fourier_start(dims)
print(f"n = {dims.n}, blocks of size {dims.m}, {dims.ncols} columns")

area, wind = AreaObserver(dims), WindingObserver(dims)
keep = []
res = run_unitary_batch(U0, 2.0, 1e-3, [RngStream(2026, 0)], [area, wind],
                        on_step=lambda s, t, U, alive: keep.append(U[0].copy()))
U = keep[-1]

w = project_affine(U, dims)
lam = radial_from_unitary(U, dims)
print("\nchart block w_1 at t = 2:\n", np.round(w.w[0], 4))
print("eigenvalues of Lambda_1:", np.round(np.linalg.eigvalsh(lam.lam[0]), 4))
print("Lambda_1 + Lambda_2 = I:", np.allclose(lam.lam.sum(0), np.eye(2)))

print("\nareas    a_j(2):", np.round(area.a[0], 4))
print("windings th_j(2):", np.round(wind.theta[0], 4))

Z = stiefel_blocks(U, dims)
lhs = np.abs(np.linalg.det(Z)) ** 2
rhs = np.real(np.linalg.det(lam.lam))
print("\n|det Z_j|^2 =", lhs, " det Lambda_j =", rhs)
print("largest modulus residual along the path:", wind.max_modulus_residual)
