"""Complex-matrix primitives shared by the simulation modules.

Everything here is a pure function of its inputs.  Functions accept a single
matrix of shape ``(n, n)`` and, where noted, stacks of shape ``(..., n, n)``
so the path engines can apply them to many paths at once.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .errors import NotHermitian, SingularMatrix

__all__ = [
    "EIG_FLOOR",
    "herm_power",
    "det_arg",
    "det_arg_batch",
    "unitary_project",
    "eig_clip",
    "expm_skew",
    "hermitize",
    "canonical_phase",
    "haar_unitary",
    "is_hermitian",
]

EIG_FLOOR = 1e-12

# Taylor degree and norm threshold for expm_skew.  With ||A|| <= 1/4 the
# truncation error of the degree-12 polynomial is below 3e-18.
_TAYLOR_DEGREE = 12
_TAYLOR_THETA = 0.25


def hermitize(H):
    """Return the Hermitian part ``(H + H*)/2`` (works on stacks)."""
    H = np.asarray(H)
    return 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))


def is_hermitian(H, rtol=1e-12):
    """Check ``max|H - H*| <= rtol * (1 + max|H|)`` for a single matrix."""
    H = np.asarray(H)
    dev = np.max(np.abs(H - np.conj(H.T))) if H.size else 0.0
    scale = np.max(np.abs(H)) if H.size else 0.0
    return bool(dev <= rtol * (1.0 + scale))


def canonical_phase(phi):
    """Map angles in ``[-pi, pi]`` to ``(-pi, pi]``; ``-pi`` becomes ``+pi``."""
    phi = np.asarray(phi, dtype=float)
    out = np.where(phi <= -np.pi, np.pi, phi)
    return float(out) if out.ndim == 0 else out


def herm_power(H, p, eig_floor=EIG_FLOOR):
    """Spectral power of a Hermitian matrix.

    Parameters
    ----------
    H : array_like, shape (n, n) or (..., n, n)
        Hermitian matrix or stack of them.
    p : float
        Exponent, one of ``1/2``, ``-1/2``, ``-1``.  Other real exponents
        are accepted as well; the same floor rules apply.
    eig_floor : float
        Smallest admissible eigenvalue for negative exponents.

    Returns
    -------
    ndarray
        ``V diag(lam**p) V*`` with the input's shape.

    Raises
    ------
    NotHermitian
        If a single input matrix fails the Hermitian tolerance.
    SingularMatrix
        If ``p < 0`` and the smallest eigenvalue is below ``eig_floor``.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim == 2 and not is_hermitian(H):
        raise NotHermitian("herm_power: input is not Hermitian")
    lam, V = np.linalg.eigh(hermitize(H))
    if p < 0:
        if np.min(lam) < eig_floor:
            raise SingularMatrix(
                f"herm_power: eigenvalue {np.min(lam):.3e} below floor {eig_floor:.1e}"
            )
        lp = lam**p
    else:
        # tiny negative roundoff eigenvalues of a PSD input
        lp = np.clip(lam, 0.0, None) ** p
    return hermitize((V * lp[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2)))


def det_arg(M):
    """Log-modulus and principal argument of ``det(M)``.

    Uses a partially pivoted LU factorisation, summing the logarithms of the
    pivot moduli and the pivot phases so that neither overflows.

    Parameters
    ----------
    M : array_like, shape (n, n)

    Returns
    -------
    log_modulus : float
    principal_arg : float
        In ``(-pi, pi]``.

    Raises
    ------
    SingularMatrix
        If some pivot has modulus below ``1e-300``.
    """
    M = np.asarray(M, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("det_arg expects a square matrix")
    with warnings.catch_warnings():
        # exact singularity is reported below as SingularMatrix
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=True)
    d = np.diag(lu)
    mods = np.abs(d)
    if np.min(mods) < 1e-300:
        raise SingularMatrix("det_arg: pivot modulus underflow")
    swaps = int(np.count_nonzero(piv != np.arange(len(piv))))
    phase = float(np.sum(np.angle(d))) + (np.pi if swaps % 2 else 0.0)
    phase = np.angle(np.exp(1j * phase))
    return float(np.sum(np.log(mods))), canonical_phase(phase)


def det_arg_batch(M):
    """Vectorised :func:`det_arg` for a stack ``(..., n, n)``.

    Returns arrays ``(log_modulus, principal_arg)``; exactly singular inputs
    give ``-inf`` log-moduli rather than raising.
    """
    sign, logabs = np.linalg.slogdet(np.asarray(M, dtype=complex))
    return logabs, canonical_phase(np.angle(sign))


def unitary_project(M, eig_floor=EIG_FLOOR):
    """Closest unitary matrix in Frobenius norm (the polar factor).

    Parameters
    ----------
    M : array_like, shape (n, n) or (..., n, n)

    Returns
    -------
    ndarray
        ``M (M* M)^{-1/2}`` computed from an SVD as ``W V*``.

    Raises
    ------
    SingularMatrix
        If ``M* M`` has an eigenvalue below ``eig_floor`` relative to its
        largest one.
    """
    M = np.asarray(M, dtype=complex)
    W, s, Vh = np.linalg.svd(M)
    smax = np.max(s, axis=-1)
    if np.any(s[..., -1] ** 2 < eig_floor * np.maximum(smax, 1e-300) ** 2):
        raise SingularMatrix("unitary_project: input is numerically singular")
    return W @ Vh


def eig_clip(H, lo, hi):
    """Clamp the spectrum of a Hermitian matrix into ``[lo, hi]``.

    Eigenvectors are preserved.  When the spectrum already lies inside the
    interval the input is returned unchanged (bitwise).

    Parameters
    ----------
    H : array_like, shape (n, n) or (..., n, n)
    lo, hi : float
        Interval bounds with ``lo <= hi``.
    """
    if lo > hi:
        raise ValueError("eig_clip: lo > hi")
    H = np.asarray(H, dtype=complex)
    lam, V = np.linalg.eigh(hermitize(H))
    inside = np.all((lam >= lo) & (lam <= hi), axis=-1)
    if np.all(inside):
        return H.copy()
    clipped = hermitize((V * np.clip(lam, lo, hi)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2)))
    if H.ndim == 2:
        return clipped
    return np.where(inside[..., None, None], H, clipped)


def expm_skew(A):
    """Matrix exponential by scaling and squaring of a Taylor polynomial.

    Designed for the small skew-Hermitian increments of the group integrator
    but valid for any square input.

    Parameters
    ----------
    A : array_like, shape (n, n) or (..., n, n)

    Returns
    -------
    ndarray
        ``exp(A)`` with the input's shape.
    """
    A = np.asarray(A, dtype=complex)
    norms = np.max(np.sum(np.abs(A), axis=-2), axis=-1)
    # per-matrix squaring counts keep each result independent of its batch
    s = np.ceil(np.log2(np.maximum(norms, 1e-300) / _TAYLOR_THETA))
    s = np.maximum(s, 0).astype(np.int64)
    X = A / (2.0 ** s)[..., None, None]
    n = A.shape[-1]
    eye = np.broadcast_to(np.eye(n, dtype=complex), A.shape)
    # Horner evaluation of sum_{j<=d} X^j / j!
    E = eye + X / _TAYLOR_DEGREE
    for j in range(_TAYLOR_DEGREE - 1, 0, -1):
        E = eye + (X @ E) / j
    for r in range(int(np.max(s, initial=0))):
        if E.ndim == 2:
            E = E @ E
        else:
            sq = s > r
            E[sq] = E[sq] @ E[sq]
    return E


def haar_unitary(n, rng, size=None):
    """Haar-distributed unitary matrices via QR with phase correction.

    Parameters
    ----------
    n : int
        Matrix dimension.
    rng : numpy.random.Generator
    size : int, optional
        Number of matrices; ``None`` returns a single ``(n, n)`` matrix.
    """
    shape = (n, n) if size is None else (size, n, n)
    Zm = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    Q, R = np.linalg.qr(Zm)
    d = np.diagonal(R, axis1=-2, axis2=-1)
    return Q * (d / np.abs(d))[..., None, :]
