"""Affine chart, radial process and Laplacian coefficients of the flag manifold.

A unitary ``U`` of size ``n = (k+1) m`` is cut into ``m x m`` blocks.  The
bottom block row gives ``Z_j = U_{(k+1)j}``, the rows above give ``W_j``, and
the chart coordinates are ``w_j = W_j Z_j^{-1}``.  The radial process is
``Lambda_j = Z_j Z_j^* = (I + w_j^* w_j)^{-1}``.

Stacked arrays are used throughout: ``w`` has shape ``(..., k+1, n-m, m)``
and ``Lambda`` has shape ``(..., k+1, m, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import DegenerateStep, InvalidDimension, OutsideChart
from .matcore import hermitize

__all__ = [
    "CHART_GUARD",
    "CHART_TOL",
    "FlagDims",
    "FlagPoint",
    "SimplexPoint",
    "bottom_blocks",
    "upper_blocks",
    "chart_batch",
    "radial_batch",
    "radial_from_chart_batch",
    "project_affine",
    "radial_from_unitary",
    "radial_from_chart",
    "chart_residual",
    "QVTables",
    "flag_qv_predict",
    "flag_generator_apply",
    "sample_chart_increments",
]

CHART_GUARD = 1e-8
CHART_TOL = 1e-8


@dataclass(frozen=True)
class FlagDims:
    """Block size ``m`` and flag length ``k``; ``n = (k+1) m``."""

    m: int
    k: int

    def __post_init__(self):
        if self.m < 1 or self.k < 1:
            raise InvalidDimension(f"need m >= 1 and k >= 1, got m={self.m}, k={self.k}")

    @property
    def n(self) -> int:
        return (self.k + 1) * self.m

    @property
    def ncols(self) -> int:
        """Number of column blocks, ``k+1``."""
        return self.k + 1


@dataclass(frozen=True)
class FlagPoint:
    """Chart coordinates ``w_j``, stored as an array of shape ``(k+1, n-m, m)``."""

    dims: FlagDims
    w: np.ndarray

    def residual(self) -> float:
        """Largest ``||w_j^* w_l + I||_F`` over ``j != l``."""
        return float(np.max(chart_residual(self.w)))


@dataclass(frozen=True)
class SimplexPoint:
    """Hermitian blocks ``Lambda_j``, shape ``(k+1, m, m)``, summing to ``I_m``."""

    dims: FlagDims
    lam: np.ndarray

    def check(self, psd_tol=1e-10, sum_tol=1e-8) -> bool:
        """Whether the simplex invariants hold."""
        ev = np.linalg.eigvalsh(hermitize(self.lam))
        s = np.sum(self.lam, axis=0) - np.eye(self.dims.m)
        return bool(
            np.min(ev) >= -psd_tol
            and np.max(ev) <= 1 + psd_tol
            and np.linalg.norm(s) <= sum_tol
        )


def bottom_blocks(U, dims: FlagDims):
    """``Z_j = U_{(k+1)j}`` as an array of shape ``(..., k+1, m, m)``."""
    U = np.asarray(U)
    m, k = dims.m, dims.k
    Zrow = U[..., k * m :, :]
    return np.stack([Zrow[..., :, j * m : (j + 1) * m] for j in range(k + 1)], axis=-3)


def upper_blocks(U, dims: FlagDims):
    """Stacked ``W_j`` (rows above the bottom block row), shape ``(..., k+1, n-m, m)``."""
    U = np.asarray(U)
    m, k = dims.m, dims.k
    Wrows = U[..., : k * m, :]
    return np.stack([Wrows[..., :, j * m : (j + 1) * m] for j in range(k + 1)], axis=-3)


def chart_batch(U, dims: FlagDims):
    """Chart coordinates without guards: ``W_j Z_j^{-1}``."""
    Z = bottom_blocks(U, dims)
    W = upper_blocks(U, dims)
    # W Z^{-1} = (Z^{-T} W^T)^T
    return np.swapaxes(np.linalg.solve(np.swapaxes(Z, -1, -2), np.swapaxes(W, -1, -2)), -1, -2)


def radial_batch(U, dims: FlagDims):
    """``Lambda_j = Z_j Z_j^*`` for a stack of unitaries."""
    Z = bottom_blocks(U, dims)
    return Z @ np.conj(np.swapaxes(Z, -1, -2))


def radial_from_chart_batch(w):
    """``(I + w_j^* w_j)^{-1}`` for stacked chart coordinates."""
    w = np.asarray(w)
    m = w.shape[-1]
    J = np.conj(np.swapaxes(w, -1, -2)) @ w
    return hermitize(np.linalg.inv(np.eye(m) + J))


def chart_residual(w):
    """Array of ``||w_j^* w_l + I||_F`` over ordered pairs ``j != l``."""
    w = np.asarray(w)
    kk = w.shape[-3]
    m = w.shape[-1]
    G = np.conj(np.swapaxes(w, -1, -2))[..., :, None, :, :] @ w[..., None, :, :, :]
    G = G + np.eye(m)
    off = ~np.eye(kk, dtype=bool)
    return np.sqrt(np.sum(np.abs(G) ** 2, axis=(-2, -1)))[..., off]


def project_affine(U, dims: FlagDims, chart_guard: float = CHART_GUARD) -> FlagPoint:
    """Affine chart coordinates of the flag represented by ``U``.

    Parameters
    ----------
    U : ndarray, shape (n, n)
        Unitary matrix.
    dims : FlagDims
    chart_guard : float
        Minimum admissible ``|det Z_j|``.

    Raises
    ------
    OutsideChart
        If some bottom-row block has ``|det Z_j| < chart_guard``.
    """
    U = np.asarray(U, dtype=complex)
    if U.shape != (dims.n, dims.n):
        raise InvalidDimension(f"expected a {dims.n}x{dims.n} matrix, got {U.shape}")
    Z = bottom_blocks(U, dims)
    dets = np.abs(np.linalg.det(Z))
    if np.min(dets) < chart_guard:
        j = int(np.argmin(dets))
        raise OutsideChart(f"|det Z_{j + 1}| = {dets[j]:.3e} below guard {chart_guard:.1e}")
    return FlagPoint(dims, chart_batch(U, dims))


def radial_from_unitary(U, dims: FlagDims) -> SimplexPoint:
    """Radial process ``Lambda_j = Z_j Z_j^*``."""
    return SimplexPoint(dims, hermitize(radial_batch(np.asarray(U, dtype=complex), dims)))


def radial_from_chart(w: FlagPoint) -> SimplexPoint:
    """Radial process ``(I + w_j^* w_j)^{-1}`` from chart coordinates."""
    return SimplexPoint(w.dims, radial_from_chart_batch(w.w))


# --------------------------------------------------------------------------
# Laplacian coefficients


@dataclass(frozen=True)
class QVTables:
    """Second-order coefficient tables of the flag Laplacian.

    Coordinates are flattened in the order ``(j, p, q)`` of ``w[j, p, q]``.

    Attributes
    ----------
    same : ndarray, shape (N, N)
        Coefficient of ``d^2/dw_a dconj(w_b)`` (zero unless ``a`` and ``b``
        lie in the same column block).
    same_conj : ndarray
        Coefficient of ``d^2/dconj(w_a) dw_b``; the conjugate of ``same``.
    cross : ndarray, shape (N, N)
        Coefficient of ``d^2/dw_a dw_b`` over ordered pairs of distinct
        column blocks (zero within a block).
    cross_conj : ndarray
        Coefficient of ``d^2/dconj(w_a) dconj(w_b)``.
    """

    same: np.ndarray
    same_conj: np.ndarray
    cross: np.ndarray
    cross_conj: np.ndarray

    def covariation(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-unit-time covariations ``(E dw_a dconj(w_b), E dw_a dw_b) / dt``.

        The same-block covariation is half of ``same``.  The cross-block
        covariation equals ``cross`` because the Laplacian sums over ordered
        pairs, so each unordered pair appears twice.
        """
        return 0.5 * self.same, self.cross


def flag_qv_predict(w) -> QVTables:
    """Coefficient tables of the Laplace-Beltrami operator at ``w``.

    Parameters
    ----------
    w : FlagPoint or ndarray, shape (k+1, n-m, m)

    Returns
    -------
    QVTables
        ``same[(j,p,q),(j,r,s)] = 4 (I + w_j w_j^*)_{pr} (I + w_j^* w_j)_{sq}`` and
        ``cross[(j,p,q),(l,r,s)] = -2 (w_l - w_j)_{ps} (w_j - w_l)_{rq}``.
    """
    W = w.w if isinstance(w, FlagPoint) else np.asarray(w, dtype=complex)
    kk, d, m = W.shape
    N = kk * d * m
    same = np.zeros((kk, d, m, kk, d, m), dtype=complex)
    cross = np.zeros_like(same)
    for j in range(kk):
        A = np.eye(d) + W[j] @ np.conj(W[j].T)
        Bm = np.eye(m) + np.conj(W[j].T) @ W[j]
        # [p, q, r, s] = A[p, r] * B[s, q]
        same[j, :, :, j, :, :] = 4.0 * np.einsum("pr,sq->pqrs", A, Bm)
        for l in range(kk):
            if l == j:
                continue
            D1 = W[l] - W[j]
            D2 = W[j] - W[l]
            cross[j, :, :, l, :, :] = -2.0 * np.einsum("ps,rq->pqrs", D1, D2)
    same = same.reshape(N, N)
    cross = cross.reshape(N, N)
    return QVTables(same, np.conj(same), cross, np.conj(cross))


def _real_hessian(F, x0, h, order):
    """Finite-difference Hessian of a real function of a real vector."""
    n = x0.size
    H = np.zeros((n, n))
    f0 = F(x0)
    steps = [(1.0, 1.0)] if order == 2 else [(1.0, 4.0 / 3.0), (2.0, -1.0 / 3.0)]

    def d2(i, j, c):
        e_i = np.zeros(n)
        e_i[i] = c * h
        if i == j:
            return (F(x0 + e_i) - 2.0 * f0 + F(x0 - e_i)) / (c * h) ** 2
        e_j = np.zeros(n)
        e_j[j] = c * h
        return (F(x0 + e_i + e_j) - F(x0 + e_i - e_j) - F(x0 - e_i + e_j) + F(x0 - e_i - e_j)) / (
            4.0 * (c * h) ** 2
        )

    for i in range(n):
        for j in range(i, n):
            # Richardson combination cancels the h^2 term when order == 4
            val = sum(wt * d2(i, j, c) for c, wt in steps)
            H[i, j] = H[j, i] = val
    return H


def flag_generator_apply(f: Callable, w, h: float = 1e-3, order: int = 2) -> float:
    """Apply half the flag Laplacian to ``f`` by finite differences.

    Parameters
    ----------
    f : callable
        Real scalar field taking an array of shape ``(k+1, n-m, m)``.
    w : FlagPoint or ndarray
        Evaluation point.
    h : float
        Step in ``[1e-5, 1e-2]``.
    order : {2, 4}
        Accuracy order of the central differences.

    Returns
    -------
    float
        ``(1/2) Delta_F f (w)``.

    Raises
    ------
    DegenerateStep
        If ``h`` is outside the admissible range.
    """
    if not (1e-5 <= h <= 1e-2):
        raise DegenerateStep(f"h={h} outside [1e-5, 1e-2]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    W = w.w if isinstance(w, FlagPoint) else np.asarray(w, dtype=complex)
    shape = W.shape
    N = W.size
    x0 = np.concatenate([W.real.ravel(), W.imag.ravel()])

    def F(x):
        return float(np.real(f((x[:N] + 1j * x[N:]).reshape(shape))))

    H = _real_hessian(F, x0, h, order)
    Hxx, Hxy, Hyx, Hyy = H[:N, :N], H[:N, N:], H[N:, :N], H[N:, N:]
    d_wwbar = 0.25 * (Hxx + 1j * Hxy - 1j * Hyx + Hyy)
    d_ww = 0.25 * (Hxx - 1j * Hxy - 1j * Hyx - Hyy)
    cov_same, cov_cross = flag_qv_predict(W).covariation()
    # Ito generator: sum c^{w wbar} d d-bar + Re sum c^{ww} d d
    val = np.sum(cov_same * d_wwbar) + np.real(np.sum(cov_cross * d_ww))
    return float(np.real(val))


def sample_chart_increments(U, dims: FlagDims, dt: float, n_samples: int, rng):
    """One-step chart increments from a fixed unitary state.

    Used by the covariation and martingale oracles.

    Parameters
    ----------
    U : ndarray, shape (n, n)
    dims : FlagDims
    dt : float
    n_samples : int
    rng : numpy.random.Generator

    Returns
    -------
    ndarray, shape (n_samples, k+1, n-m, m)
        ``p(U expm(dA)) - p(U)`` for independent increments.
    """
    from .liebm import skew_from_normals
    from .matcore import expm_skew

    n = dims.n
    dA = skew_from_normals(n, dt, rng.standard_normal((n_samples, n * n)))
    Un = np.asarray(U, dtype=complex) @ expm_skew(dA)
    return chart_batch(Un, dims) - chart_batch(np.asarray(U, dtype=complex), dims)[None]
