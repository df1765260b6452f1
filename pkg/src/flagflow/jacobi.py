"""Jacobi processes on the simplex of Hermitian matrices.

The state is a tuple ``Lambda = (Lambda_1, ..., Lambda_{k+1})`` of ``m x m``
Hermitian matrices with ``0 <= Lambda_j <= I`` and ``sum_j Lambda_j = I``.
The process solves

    dLambda_j = Lambda_j^{1/2} sum_{l != j} dgamma_{lj}^* Lambda_l^{1/2}
                + sum_{l != j} Lambda_l^{1/2} dgamma_{lj} Lambda_j^{1/2}
                + 2 ((kappa_j + m/2) I - (|kappa| + n/2) Lambda_j) dt,

where the ``dgamma_{lj}`` (``l < j``) are independent complex Gaussian
blocks with entry variance ``2 dt`` and ``dgamma_{jl} = -dgamma_{lj}^*``.
For ``kappa = (m/2, ..., m/2)`` this is the radial part of flag Brownian
motion.

The generator implemented here is the one of this SDE.  It is twice the
operator in the displayed definition of the Jacobi operator; multiply by
:data:`DEFINITION_SCALE` to obtain the latter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BoundaryContact,
    DegenerateStep,
    IrreparableState,
    Unsupported,
)
from .flag import FlagDims, SimplexPoint
from .liebm import NoiseBuffer, RngStream, _as_generator
from .matcore import EIG_FLOOR, hermitize

__all__ = [
    "DEFINITION_SCALE",
    "JacobiIndex",
    "JacobiState",
    "jacobi_drift",
    "jacobi_covariation",
    "noise_width",
    "jacobi_increment",
    "repair_simplex",
    "repair_batch",
    "step_jacobi",
    "JacobiBatchResult",
    "simulate_jacobi_batch",
    "jacobi_generator_apply",
    "jacobi_mc_generator_oracle",
    "eigenfunction_bracket",
    "stationary_beta_params",
    "barycenter",
]

#: factor converting this module's generator into the definition's normalisation
DEFINITION_SCALE = 0.5

_INTERIOR = 10.0 * EIG_FLOOR


@dataclass(frozen=True)
class JacobiIndex:
    """Index ``kappa`` of the Jacobi process and block size ``m``.

    Parameters
    ----------
    kappa : tuple of float
        One entry per block, each greater than ``m/2 - 1``.
    m : int
    """

    kappa: Tuple[float, ...]
    m: int

    def __post_init__(self):
        object.__setattr__(self, "kappa", tuple(float(x) for x in self.kappa))
        if len(self.kappa) < 2:
            raise ValueError("kappa needs at least two entries")
        bad = [x for x in self.kappa if not x > self.m / 2 - 1]
        if bad:
            raise ValueError(f"kappa entries must exceed m/2 - 1 = {self.m / 2 - 1}, got {bad}")

    @classmethod
    def flag(cls, dims: FlagDims) -> "JacobiIndex":
        """The radial index ``(m/2, ..., m/2)``."""
        return cls(tuple([dims.m / 2.0] * dims.ncols), dims.m)

    @property
    def total(self) -> float:
        """``|kappa|``."""
        return float(sum(self.kappa))

    @property
    def k(self) -> int:
        return len(self.kappa) - 1

    @property
    def n(self) -> int:
        return len(self.kappa) * self.m

    @property
    def dims(self) -> FlagDims:
        return FlagDims(self.m, self.k)


@dataclass(frozen=True)
class JacobiState:
    """A simplex point together with its time stamp."""

    point: SimplexPoint
    time: float = 0.0


def barycenter(dims: FlagDims) -> np.ndarray:
    """``Lambda_j = I/(k+1)`` as an array of shape ``(k+1, m, m)``."""
    return np.broadcast_to(np.eye(dims.m, dtype=complex) / dims.ncols, (dims.ncols, dims.m, dims.m)).copy()


def jacobi_drift(lam, idx: JacobiIndex):
    """Drift ``2((kappa_j + m/2) I - (|kappa| + n/2) Lambda_j)`` (stacks allowed)."""
    lam = np.asarray(lam)
    m = idx.m
    kap = np.asarray(idx.kappa)
    eye = np.eye(m)
    return 2.0 * ((kap[:, None, None] + m / 2.0) * eye - (idx.total + idx.n / 2.0) * lam)


def jacobi_covariation(lam, j, a, b, l, c, d):
    """Per-unit-time covariation ``d(Lambda_j)_{ab} d(Lambda_l)_{cd} / dt``.

    Parameters
    ----------
    lam : ndarray, shape (k+1, m, m)
    j, l : int
        Block indices.
    a, b, c, d : int
        Entry indices.
    """
    lam = np.asarray(lam)
    m = lam.shape[-1]
    if j == l:
        Ic = np.eye(m) - lam[j]
        return 2.0 * (Ic[a, d] * lam[j][c, b] + Ic[c, b] * lam[j][a, d])
    return -2.0 * (lam[l][a, d] * lam[j][c, b] + lam[l][c, b] * lam[j][a, d])


def _pairs(K):
    return [(l, j) for j in range(K) for l in range(j)]


def noise_width(dims: FlagDims) -> int:
    """Number of standard normals consumed by one Euler step."""
    K = dims.ncols
    return len(_pairs(K)) * 2 * dims.m * dims.m


def _psd_sqrt(lam):
    ev, V = np.linalg.eigh(hermitize(lam))
    return (V * np.sqrt(np.clip(ev, 0.0, None))[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))


def jacobi_increment(lam, idx: JacobiIndex, dt, g):
    """Euler increment for a stack of states.

    Parameters
    ----------
    lam : ndarray, shape (B, k+1, m, m)
    idx : JacobiIndex
    dt : float or ndarray of shape (B,)
    g : ndarray, shape (B, noise_width)
        Standard normals.

    Returns
    -------
    ndarray, shape (B, k+1, m, m)
    """
    lam = np.asarray(lam)
    B, K, m, _ = lam.shape
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (B,))
    P = _psd_sqrt(lam)
    out = jacobi_drift(lam, idx) * dt[:, None, None, None]
    sdt = np.sqrt(dt)[:, None, None]
    mm = m * m
    for i, (l, j) in enumerate(_pairs(K)):
        base = 2 * mm * i
        G = (g[:, base : base + mm] + 1j * g[:, base + mm : base + 2 * mm]).reshape(B, m, m) * sdt
        # term of block j: X + X^*, X = P_l G P_j; block l receives the negative
        X = P[:, l] @ G @ P[:, j]
        Y = X + np.conj(np.swapaxes(X, -1, -2))
        out[:, j] += Y
        out[:, l] -= Y
    return out


def repair_batch(raw, max_iter: int = 50):
    """Vectorised :func:`repair_simplex` without the precondition check."""
    raw = hermitize(np.asarray(raw, dtype=complex))
    K, m = raw.shape[-3], raw.shape[-1]
    eye = np.eye(m)

    def clip(H):
        ev, V = np.linalg.eigh(H)
        if np.all((ev >= 0) & (ev <= 1)):
            return H
        return hermitize((V * np.clip(ev, 0.0, 1.0)[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2)))

    out = clip(raw)
    for _ in range(max_iter):
        dev = np.sum(out, axis=-3) - eye
        out = out - dev[..., None, :, :] / K
        out = clip(out)
        if np.max(np.abs(np.sum(out, axis=-3) - eye), initial=0.0) <= 1e-13:
            break
    return hermitize(out)


def repair_simplex(raw) -> np.ndarray:
    """Project a nearly valid tuple of blocks back onto the Hermitian simplex.

    Symmetrises each block, clamps its spectrum into ``[0, 1]``, spreads the
    deviation of the sum from ``I`` evenly over the blocks and clamps again.
    The last two moves are repeated until the sum constraint holds to
    ``1e-13``, which they do after one pass unless a clamp was active.

    Parameters
    ----------
    raw : ndarray, shape (k+1, m, m)

    Returns
    -------
    ndarray, shape (k+1, m, m)

    Raises
    ------
    IrreparableState
        If ``||sum_j raw_j - I||_F > 0.1``.
    """
    raw = np.asarray(raw, dtype=complex)
    m = raw.shape[-1]
    dev = np.linalg.norm(np.sum(raw, axis=0) - np.eye(m))
    if dev > 0.1:
        raise IrreparableState(f"sum deviation {dev:.3g} exceeds 0.1")
    if _is_valid(raw):
        return raw.copy()
    return repair_batch(raw)


def _is_valid(lam, tol=0.0):
    H = np.asarray(lam)
    if np.max(np.abs(H - np.conj(np.swapaxes(H, -1, -2)))) != 0.0:
        return False
    ev = np.linalg.eigvalsh(H)
    if np.min(ev) < -tol or np.max(ev) > 1 + tol:
        return False
    return np.max(np.abs(np.sum(H, axis=-3) - np.eye(H.shape[-1]))) <= 1e-14


def _min_eig(lam):
    return np.min(np.linalg.eigvalsh(hermitize(lam)), axis=(-2, -1))


def step_jacobi(state: JacobiState, idx: JacobiIndex, dt: float, rng) -> JacobiState:
    """One Euler-Maruyama step followed by :func:`repair_simplex`.

    Parameters
    ----------
    state : JacobiState
    idx : JacobiIndex
    dt : float
    rng : RngStream or numpy.random.Generator

    Raises
    ------
    BoundaryContact
        If some block of the input has an eigenvalue below ``10 * eig_floor``.
    """
    lam = np.asarray(state.point.lam, dtype=complex)
    if np.min(_min_eig(lam)) < _INTERIOR:
        raise BoundaryContact("state is not interior")
    dims = state.point.dims
    g = _as_generator(rng).standard_normal(noise_width(dims))
    raw = lam + jacobi_increment(lam[None], idx, dt, g[None])[0]
    new = repair_batch(raw)
    return JacobiState(SimplexPoint(dims, new), state.time + dt)


@dataclass
class JacobiBatchResult:
    """Outcome of :func:`simulate_jacobi_batch`.

    Attributes
    ----------
    lam : ndarray, shape (B, k+1, m, m)
        Final states.
    snapshots : dict
        Requested time -> array of states at that time.
    flagged : ndarray of bool
    n_rejected : ndarray of int
        Number of rejected (halved) steps per path.
    """

    lam: np.ndarray
    snapshots: dict
    flagged: np.ndarray
    n_rejected: np.ndarray


def simulate_jacobi_batch(
    lam0,
    idx: JacobiIndex,
    T: float,
    dt: float,
    streams: Sequence[RngStream],
    snapshot_times: Sequence[float] = (),
    max_halvings: int = 8,
    chunk: int = 256,
) -> JacobiBatchResult:
    """Simulate many independent Jacobi paths with reject-and-shrink.

    A step whose unrepaired result has an eigenvalue below ``10 * eig_floor``
    is rejected and replaced by two half steps with freshly drawn noise,
    recursively up to ``max_halvings`` times; beyond that the path is
    flagged and frozen.  Resampling slightly favours steps away from the
    boundary, an effect confined to a layer of width ``O(dt)``.

    Parameters
    ----------
    lam0 : ndarray, shape (k+1, m, m) or (B, k+1, m, m)
    idx : JacobiIndex
    T, dt : float
    streams : sequence of RngStream
    snapshot_times : sequence of float
        Times (multiples of ``dt`` up to rounding) at which to store states.
    """
    B = len(streams)
    dims = idx.dims
    lam = np.array(np.broadcast_to(np.asarray(lam0, dtype=complex), (B, dims.ncols, dims.m, dims.m)))
    width = noise_width(dims)
    noise = NoiseBuffer(streams, width, chunk=chunk)
    nsteps = max(1, int(np.ceil(T / dt - 1e-9)))
    snap_steps = {int(round(s / dt)): s for s in snapshot_times}
    snapshots = {}
    alive = np.ones(B, dtype=bool)
    n_rej = np.zeros(B, dtype=np.int64)
    if 0 in snap_steps:
        snapshots[snap_steps[0]] = lam.copy()
    for s in range(nsteps):
        h = dt if s < nsteps - 1 else T - dt * (nsteps - 1)
        ai = np.nonzero(alive)[0]
        g = noise.take(ai)
        raw = lam[ai] + jacobi_increment(lam[ai], idx, h, g)
        bad = _min_eig(raw) < _INTERIOR
        good = ~bad
        lam[ai[good]] = repair_batch(raw[good])
        for p_local in np.nonzero(bad)[0]:
            p = ai[p_local]
            n_rej[p] += 1
            gen = streams[p].substream(s + 1).generator()
            ok, new = _jacobi_refine(lam[p], idx, h, g[p_local], gen, 1, max_halvings)
            if ok:
                lam[p] = new
            else:
                alive[p] = False
        if (s + 1) in snap_steps:
            snapshots[snap_steps[s + 1]] = lam.copy()
    return JacobiBatchResult(lam, snapshots, ~alive, n_rej)


def _jacobi_refine(lam, idx, h, g, gen, level, max_level):
    if level > max_level:
        return False, lam
    # fresh noise per half step: a bridge-conditioned split keeps the
    # offending increment and at the critical boundary rarely recovers
    halves = (gen.standard_normal(g.shape), gen.standard_normal(g.shape))
    cur = lam
    for gh in halves:
        raw = cur + jacobi_increment(cur[None], idx, h / 2.0, gh[None])[0]
        if np.min(_min_eig(raw)) < _INTERIOR:
            ok, cur = _jacobi_refine(cur, idx, h / 2.0, gh, gen, level + 1, max_level)
            if not ok:
                return False, cur
        else:
            cur = repair_batch(raw)
    return True, cur


# --------------------------------------------------------------------------
# generator


def _coords(dims: FlagDims):
    """Real coordinates of the first k blocks: (block, a, b, kind)."""
    out = []
    for j in range(dims.k):
        for a in range(dims.m):
            out.append((j, a, a, "d"))
        for a in range(dims.m):
            for b in range(a + 1, dims.m):
                out.append((j, a, b, "re"))
                out.append((j, a, b, "im"))
    return out


def _from_coords(x, coords, dims):
    m, K = dims.m, dims.ncols
    lam = np.zeros((K, m, m), dtype=complex)
    for v, (j, a, b, kind) in zip(x, coords):
        if kind == "d":
            lam[j, a, a] = v
        elif kind == "re":
            lam[j, a, b] += v
            lam[j, b, a] += v
        else:
            lam[j, a, b] += 1j * v
            lam[j, b, a] -= 1j * v
    lam[K - 1] = np.eye(m) - np.sum(lam[: K - 1], axis=0)
    return lam


def _to_coords(lam, coords):
    x = np.empty(len(coords))
    for i, (j, a, b, kind) in enumerate(coords):
        z = lam[j, a, b]
        x[i] = z.real if kind in ("d", "re") else z.imag
    return x


def _entry_cov(lam, j, a, b, l, c, d):
    return jacobi_covariation(lam, j, a, b, l, c, d)


def _real_cov(lam, ca, cb):
    """Covariation of two real coordinates from the complex entry formula."""
    j, a, b, ka = ca
    l, c, d, kb = cb

    # express each real coordinate as sum of coefficient * entry
    def parts(jj, aa, bb, kind):
        if kind == "d":
            return [(1.0, jj, aa, bb)]
        if kind == "re":
            return [(0.5, jj, aa, bb), (0.5, jj, bb, aa)]
        return [(-0.5j, jj, aa, bb), (0.5j, jj, bb, aa)]

    tot = 0.0
    for w1, j1, a1, b1 in parts(j, a, b, ka):
        for w2, j2, a2, b2 in parts(l, c, d, kb):
            tot += w1 * w2 * _entry_cov(lam, j1, a1, b1, j2, a2, b2)
    return float(np.real(tot))


def jacobi_generator_apply(
    f: Callable, lam, idx: JacobiIndex, h: float = 1e-3, order: int = 2
) -> float:
    """Apply the Jacobi generator to ``f`` by finite differences.

    The function is differentiated in the independent real coordinates of
    the first ``k`` blocks (diagonal entries, real and imaginary parts above
    the diagonal); the last block is ``I - sum`` of the others.

    Parameters
    ----------
    f : callable
        Real function of an array of shape ``(k+1, m, m)``.
    lam : SimplexPoint or ndarray
        Interior evaluation point.
    idx : JacobiIndex
    h : float
        Step in ``[1e-5, 1e-2]``.
    order : {2, 4}
        Accuracy order of the central differences.

    Returns
    -------
    float

    Raises
    ------
    DegenerateStep
    """
    if not (1e-5 <= h <= 1e-2):
        raise DegenerateStep(f"h={h} outside [1e-5, 1e-2]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    L = lam.lam if isinstance(lam, SimplexPoint) else np.asarray(lam, dtype=complex)
    dims = idx.dims
    coords = _coords(dims)
    x0 = _to_coords(L, coords)
    nc = len(coords)

    def F(x):
        return float(np.real(f(_from_coords(x, coords, dims))))

    f0 = F(x0)
    terms = [(1.0, 1.0)] if order == 2 else [(1.0, 4.0 / 3.0), (2.0, -1.0 / 3.0)]
    grad = np.zeros(nc)
    hess = np.zeros((nc, nc))
    for i in range(nc):
        for c, wt in terms:
            e = np.zeros(nc)
            e[i] = c * h
            fp, fm = F(x0 + e), F(x0 - e)
            grad[i] += wt * (fp - fm) / (2 * c * h)
            hess[i, i] += wt * (fp - 2 * f0 + fm) / (c * h) ** 2
        for k2 in range(i + 1, nc):
            val = 0.0
            for c, wt in terms:
                ei = np.zeros(nc)
                ei[i] = c * h
                ek = np.zeros(nc)
                ek[k2] = c * h
                val += wt * (F(x0 + ei + ek) - F(x0 + ei - ek) - F(x0 - ei + ek) + F(x0 - ei - ek)) / (
                    4 * (c * h) ** 2
                )
            hess[i, k2] = hess[k2, i] = val
    drift = jacobi_drift(L, idx)
    b = _to_coords(drift, coords)
    C = np.array([[_real_cov(L, ca, cb) for cb in coords] for ca in coords])
    return float(b @ grad + 0.5 * np.sum(C * hess))


def eigenfunction_bracket(lam, u, m: int) -> float:
    """Bracket of the determinant eigenfunction identity.

    ``-m(n-m)|u| + sum_j (u_j^2/2)(Tr Lambda_j^{-1} - m) - (m/2) sum_{j != l} |u_j u_l|``
    with ``|u| = sum_j |u_j|``.
    """
    L = np.asarray(lam)
    u = np.asarray(u, dtype=float)
    K = L.shape[0]
    n = K * m
    tr_inv = np.array([np.real(np.trace(np.linalg.inv(L[j]))) for j in range(K)])
    au = np.abs(u)
    cross = np.sum(np.outer(au, au)) - np.sum(au**2)
    return float(-m * (n - m) * np.sum(au) + np.sum(u**2 / 2.0 * (tr_inv - m)) - m / 2.0 * cross)


def jacobi_mc_generator_oracle(
    f: Callable, lam, idx: JacobiIndex, dt: float, N: int, rng
) -> Tuple[float, float]:
    """Monte Carlo generator estimate ``(E f(Lambda_dt) - f(Lambda_0)) / dt``.

    Parameters
    ----------
    f : callable
        Real function of an array of shape ``(k+1, m, m)``.
    lam : SimplexPoint or ndarray
    idx : JacobiIndex
    dt : float
    N : int
        Number of independent one-step simulations.
    rng : RngStream or numpy.random.Generator

    Returns
    -------
    value, standard_error : float
    """
    L = lam.lam if isinstance(lam, SimplexPoint) else np.asarray(lam, dtype=complex)
    dims = idx.dims
    g = _as_generator(rng).standard_normal((N, noise_width(dims)))
    raw = L[None] + jacobi_increment(np.broadcast_to(L, (N,) + L.shape), idx, dt, g)
    new = repair_batch(raw)
    f0 = float(np.real(f(L)))
    vals = np.array([float(np.real(f(x))) for x in new]) - f0
    return float(np.mean(vals) / dt), float(np.std(vals, ddof=1) / np.sqrt(N) / dt)


def stationary_beta_params(idx: JacobiIndex, j: int) -> Tuple[float, float]:
    """Beta parameters of the stationary marginal of ``lambda_j`` for ``m = 1``.

    Solves stationarity of ``lambda(1-lambda) f'' + ((kappa_j + 1/2) -
    (|kappa| + (k+1)/2) lambda) f'``, giving ``a = kappa_j + 1/2`` and
    ``b = |kappa| + (k+1)/2 - kappa_j - 1/2``.

    Parameters
    ----------
    idx : JacobiIndex
    j : int
        Zero-based block index.

    Raises
    ------
    Unsupported
        For ``m > 1``.
    """
    if idx.m != 1:
        raise Unsupported("closed-form stationary marginals are only available for m = 1")
    kj = idx.kappa[j]
    a = kj + 0.5
    b = idx.total + (idx.k + 1) / 2.0 - kj - 0.5
    return a, b
