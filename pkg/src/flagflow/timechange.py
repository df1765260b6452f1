"""Spectral simulation of radial paths on an intrinsic clock, with exact area laws.

The area vector is conditionally Gaussian given the radial path: its
covariation is ``d a_j d a_l = C_jl dt`` with
``C = diag(Tr Lambda_j^{-1}) - 2m I + m 1 1^T`` and it does not covary with
``Lambda``.  Long-time area statistics are dominated by brief excursions of
``Lambda`` towards the simplex boundary, where ``Tr Lambda^{-1}`` explodes;
a fixed-step simulation cannot follow these excursions to the depth that
matters.  The engines here run in the clock ``tau`` with
``d tau = S dt``, ``S = sum_j Tr Lambda_j^{-1}``, in which the radial
spectrum has bounded coefficients.  State is kept in logarithmic
coordinates so boundary excursions never underflow, and every rate is
formed as ``exp(log rate - log S)``.

Two spectral reductions are implemented:

* ``m = 1`` and any ``k``: the log-simplex engine on ``rho_j = log lambda_j``.
* ``k = 1`` and any ``m``: the eigenvalue engine on the logits of the
  eigenvalues of ``Lambda_1``.

The combination ``m > 1`` and ``k > 1`` has no scalar spectral reduction
and is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidStep, Unsupported
from .flag import FlagDims
from .jacobi import JacobiIndex
from .liebm import NoiseBuffer, RngStream

__all__ = [
    "ClockSettings",
    "eigen_clock_step",
    "SpectralRun",
    "area_rate",
    "clock_step",
    "simulate_simplex_clock",
    "simulate_eigen_clock",
    "simulate_spectral",
]

#: counter block used for the conditional Gaussian draws
AREA_SUBSTREAM = 1 << 62
#: counter block used for the independent fibre Brownian motions
FIBRE_SUBSTREAM = (1 << 62) + 1


@dataclass(frozen=True)
class ClockSettings:
    """Step-size controls for the intrinsic clock.

    Attributes
    ----------
    h : float
        Base clock step.
    dt_cap : float
        Upper bound on the physical time step.
    stretch : float
        Coefficient of the deep-excursion enlargement
        ``stretch * max(G - 2, 0)^2`` where ``G`` is the gap between the two
        largest log-rates.
    collision : float
        Eigenvalue engine only: clock step bounded by ``collision * gap^2``
        in logit coordinates.
    min_step : float
        Floor of the collision bound.
    """

    h: float = 0.01
    dt_cap: float = 1e-3
    stretch: float = 1.0 / 256.0
    collision: float = 0.05
    min_step: float = 1e-8

    def __post_init__(self):
        if not (self.h > 0 and self.dt_cap > 0):
            raise InvalidStep("clock steps must be positive")


@dataclass
class SpectralRun:
    """Output of a spectral clock simulation.

    Attributes
    ----------
    times : ndarray, shape (R,)
        Record times (the last one is the horizon).
    areas : ndarray, shape (B, R, k+1)
        Area vectors at the record times.
    fibre : ndarray, shape (B, R, k+1)
        Independent Brownian motions ``Im Tr A_jj`` with variance ``2m t``.
    spectrum : ndarray, shape (B, R, d)
        ``lambda_j`` (``m = 1``) or the eigenvalues of ``Lambda_1``
        (``k = 1``) at the record times.
    clock : ndarray, shape (B,)
        Total intrinsic time.
    n_iter : int
        Number of batch iterations.
    n_rejected : ndarray, shape (B,)
        Rejected steps (eigenvalue ordering violations).
    """

    times: np.ndarray
    areas: np.ndarray
    fibre: np.ndarray
    spectrum: np.ndarray
    clock: np.ndarray
    n_iter: int
    n_rejected: np.ndarray

    @property
    def windings(self) -> np.ndarray:
        """Winding angles ``Im Tr A_jj - a_j`` at the record times."""
        return self.fibre - self.areas


def area_rate(inv_traces, m: int):
    """Covariation matrix ``C`` of the areas from ``Tr Lambda_j^{-1}``.

    Parameters
    ----------
    inv_traces : ndarray, shape (..., k+1)
    m : int

    Returns
    -------
    ndarray, shape (..., k+1, k+1)
    """
    t = np.asarray(inv_traces, dtype=float)
    K = t.shape[-1]
    C = np.full(t.shape + (K,), float(m))
    idx = np.arange(K)
    C[..., idx, idx] = t - m
    return C


def clock_step(log_rates, log_S, settings: ClockSettings):
    """Clock increment from the log-rates ``(B, d)`` and ``log S`` ``(B,)``."""
    if log_rates.shape[1] > 1:
        top = np.partition(log_rates, -2, axis=1)
        G = top[:, -1] - top[:, -2]
    else:
        G = np.zeros(len(log_rates))
    dtau = np.maximum(settings.h, settings.stretch * np.maximum(G - 2.0, 0.0) ** 2)
    return np.minimum(dtau, settings.dt_cap * np.exp(np.minimum(log_S, 700.0)))


def eigen_clock_step(ell, log_S, settings: ClockSettings):
    """Clock increment for the eigenvalue engine.

    Each logit coordinate runs on its own clock at the share
    ``exp(ell_i - log S)`` of ``d tau``.  Coordinates more than 2 above the
    shallowest log-rate are deep and may advance their own clock by
    ``max(h, stretch * (g_i - 2)^2)``; the others by ``h / m``.  Two
    eigenvalues deep at opposite ends of the spectrum are then stepped at
    their own scale instead of at ``h``.
    """
    g = ell - ell.min(axis=1, keepdims=True)
    m = ell.shape[1]
    own = np.where(g > 2.0, np.maximum(settings.h, settings.stretch * (g - 2.0) ** 2), settings.h / m)
    # own / share in logs: a vanishing share would otherwise divide by zero
    log_dtau = np.min(np.log(own) - ell + log_S[:, None], axis=1)
    dtau = np.exp(np.minimum(log_dtau, 700.0))
    return np.minimum(dtau, settings.dt_cap * np.exp(np.minimum(log_S, 700.0)))


def _logcosh(y):
    return np.logaddexp(y, -y) - np.log(2.0)


def _scaled_repulsion(x, log_S):
    """``sum_{l != i} 1 / (S (mu_i - mu_l))`` from the logits, without overflow.

    Uses ``mu_i - mu_l = sinh((x_i - x_l)/2) / (2 cosh(x_i/2) cosh(x_l/2))``.
    """
    d = x[:, :, None] - x[:, None, :]
    ad = np.abs(d)
    m = x.shape[1]
    ii = np.arange(m)
    ad[:, ii, ii] = 1.0
    log_sinh = 0.5 * ad + np.log(-np.expm1(-ad)) - np.log(2.0)
    lc = _logcosh(0.5 * x)
    log_diff = log_sinh - np.log(2.0) - lc[:, :, None] - lc[:, None, :]
    term = np.sign(d) * np.exp(-log_S[:, None, None] - log_diff)
    term[:, ii, ii] = 0.0
    return term.sum(axis=2)


def _shorten(dtau, dt, remaining, hit):
    # scale the clock step of paths that reach a record time
    frac = np.divide(remaining, dt, out=np.zeros_like(dt), where=hit & (dt > 0))
    return np.where(hit, dtau * np.minimum(frac, 1.0), dtau)


def _record_grid(T, record_times):
    times = sorted({float(t) for t in record_times if 0 < t < T} | {float(T)})
    return np.array(times)


def _gaussian_areas(V, streams, m, times):
    """Sample areas from segment covariances ``V`` of shape ``(B, R, K, K)``."""
    B, R, K, _ = V.shape
    areas = np.empty((B, R, K))
    fibre = np.empty((B, R, K))
    dts = np.diff(np.concatenate([[0.0], times]))
    for p in range(B):
        g = streams[p].substream(AREA_SUBSTREAM).standard_normal((R, K))
        w, U = np.linalg.eigh(V[p])
        w = np.clip(w, 0.0, None)
        seg = np.einsum("rij,rj,rj->ri", U, np.sqrt(w), g)
        areas[p] = np.cumsum(seg, axis=0)
        f = streams[p].substream(FIBRE_SUBSTREAM).standard_normal((R, K))
        fibre[p] = np.cumsum(f * np.sqrt(2.0 * m * dts)[:, None], axis=0)
    return areas, fibre


def simulate_simplex_clock(
    lam0,
    kappa: Sequence[float],
    T: float,
    streams: Sequence[RngStream],
    record_times: Sequence[float] = (),
    settings: Optional[ClockSettings] = None,
    chunk: int = 256,
) -> SpectralRun:
    """Log-simplex engine for ``m = 1``.

    In clock time ``rho_j = log lambda_j`` has drift
    ``(2 kappa_j - 1) lambda_j^{-1}/S - 2(|kappa| + n/2 - 1)/S`` and one
    noise per pair ``a < b`` entering ``rho_a`` with coefficient
    ``2 (lambda_b / (lambda_a S))^{1/2}`` and ``rho_b`` with the opposite
    sign.  After each step ``rho`` is renormalised onto the simplex.

    Parameters
    ----------
    lam0 : ndarray, shape (n,) or (B, n)
        Initial simplex point(s) with positive entries.
    kappa : sequence of float
        Jacobi index, ``kappa_j = 1/2`` for the radial part of the flag
        Brownian motion.
    T : float
    streams : sequence of RngStream
    record_times : sequence of float
    settings : ClockSettings, optional

    Returns
    -------
    SpectralRun
    """
    settings = settings or ClockSettings()
    kap = np.asarray(kappa, dtype=float)
    n = kap.size
    JacobiIndex(tuple(kap), 1)
    B = len(streams)
    lam0 = np.broadcast_to(np.asarray(lam0, dtype=float), (B, n))
    rho = np.log(lam0)
    rho = rho - logsumexp(rho, axis=1)[:, None]
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    pa = np.array([p[0] for p in pairs])
    pb = np.array([p[1] for p in pairs])
    c_drift = 2.0 * (kap.sum() + n / 2.0 - 1.0)
    times = _record_grid(T, record_times)
    R = len(times)
    V = np.zeros((B, R, n, n))
    spec = np.zeros((B, R, n))
    clock = np.zeros(B)
    t = np.zeros(B)
    seg = np.zeros(B, dtype=np.int64)
    noise = NoiseBuffer(streams, len(pairs), chunk=chunk)
    it = 0
    while True:
        act = np.nonzero(seg < R)[0]
        if act.size == 0:
            break
        it += 1
        r = rho[act]
        ell = -r
        L = logsumexp(ell, axis=1)
        dtau = clock_step(ell, L, settings)
        dt = dtau * np.exp(-L)
        target = times[seg[act]]
        hit = t[act] + dt >= target
        dtau = _shorten(dtau, dt, target - t[act], hit)
        dt = np.where(hit, target - t[act], dt)
        eL = np.exp(-L)
        # C / S, formed without exp(ell) which may overflow
        Cs = np.broadcast_to(eL[:, None, None], (act.size, n, n)).copy()
        Cs[:, np.arange(n), np.arange(n)] = np.exp(ell - L[:, None]) - eL[:, None]
        V[act, seg[act]] += Cs * dtau[:, None, None]
        drift = (2.0 * kap - 1.0) * np.exp(ell - L[:, None]) - c_drift * eL[:, None]
        z = noise.take(act) * np.sqrt(dtau)[:, None]
        new = r + drift * dtau[:, None]
        np.add.at(new.T, pa, (2.0 * np.exp(0.5 * (r[:, pb] - r[:, pa] - L[:, None])) * z).T)
        np.add.at(new.T, pb, (-2.0 * np.exp(0.5 * (r[:, pa] - r[:, pb] - L[:, None])) * z).T)
        new -= logsumexp(new, axis=1)[:, None]
        rho[act] = new
        clock[act] += dtau
        t[act] = np.where(hit, target, t[act] + dt)
        hi = act[hit]
        spec[hi, seg[hi]] = np.exp(rho[hi])
        seg[hi] += 1
    areas, fibre = _gaussian_areas(V, streams, 1, times)
    return SpectralRun(times, areas, fibre, spec, clock, it, np.zeros(B, dtype=np.int64))


def simulate_eigen_clock(
    mu0,
    kappa: Sequence[float],
    m: int,
    T: float,
    streams: Sequence[RngStream],
    record_times: Sequence[float] = (),
    settings: Optional[ClockSettings] = None,
    chunk: int = 256,
) -> SpectralRun:
    """Eigenvalue engine for ``k = 1``.

    With ``x_i = logit mu_i`` for the eigenvalues ``mu_i`` of ``Lambda_1``,
    ``dx_i = 2 s_i^{1/2} dB_i + [(2 kappa_1 - m)/mu_i - (2 kappa_2 - m)/(1 - mu_i)
    + 4 sum_{l != i} 1/(mu_i - mu_l)] dt`` with ``s_i = 1/(mu_i(1 - mu_i))``.
    Steps that would reorder the eigenvalues are rejected and redrawn.

    Parameters
    ----------
    mu0 : ndarray, shape (m,) or (B, m)
        Distinct initial eigenvalues in ``(0, 1)``.
    kappa : sequence of two floats
    m : int
    T : float
    streams : sequence of RngStream
    record_times : sequence of float
    settings : ClockSettings, optional

    Returns
    -------
    SpectralRun
    """
    settings = settings or ClockSettings()
    kap = np.asarray(kappa, dtype=float)
    if kap.size != 2:
        raise Unsupported("the eigenvalue engine needs k = 1")
    JacobiIndex(tuple(kap), m)
    B = len(streams)
    mu0 = np.sort(np.broadcast_to(np.asarray(mu0, dtype=float), (B, m)), axis=1)
    if m > 1 and np.any(np.diff(mu0, axis=1) <= 0):
        raise ValueError("initial eigenvalues must be distinct")
    x = np.log(mu0) - np.log1p(-mu0)
    a1, a2 = 2.0 * kap[0] - m, 2.0 * kap[1] - m
    times = _record_grid(T, record_times)
    R = len(times)
    V = np.zeros((B, R, 2, 2))
    spec = np.zeros((B, R, m))
    clock = np.zeros(B)
    t = np.zeros(B)
    seg = np.zeros(B, dtype=np.int64)
    n_rej = np.zeros(B, dtype=np.int64)
    noise = NoiseBuffer(streams, m, chunk=chunk)
    it = 0
    while True:
        act = np.nonzero(seg < R)[0]
        if act.size == 0:
            break
        it += 1
        xa = x[act]
        lmu = -np.logaddexp(0.0, -xa)
        l1mu = -np.logaddexp(0.0, xa)
        ell = -(lmu + l1mu)
        L = logsumexp(ell, axis=1)
        dtau = eigen_clock_step(ell, L, settings)
        if m > 1:
            gap = np.min(np.diff(xa, axis=1), axis=1)
            dtau = np.minimum(dtau, np.maximum(settings.collision * gap**2, settings.min_step))
        dt = dtau * np.exp(-L)
        target = times[seg[act]]
        hit = t[act] + dt >= target
        dtau = _shorten(dtau, dt, target - t[act], hit)
        dt = np.where(hit, target - t[act], dt)
        eL = np.exp(-L)
        inv_mu = np.exp(-lmu - L[:, None])
        inv_1mu = np.exp(-l1mu - L[:, None])
        drift = a1 * inv_mu - a2 * inv_1mu
        if m > 1:
            drift = drift + 4.0 * _scaled_repulsion(xa, L)
        g = noise.take(act)
        new = xa + drift * dtau[:, None] + 2.0 * np.exp(0.5 * (ell - L[:, None])) * np.sqrt(dtau)[:, None] * g
        ok = np.ones(act.size, dtype=bool)
        if m > 1:
            ok = np.all(np.diff(new, axis=1) > 0, axis=1)
            n_rej[act[~ok]] += 1
        c11 = inv_mu.sum(1) - m * eL
        c22 = inv_1mu.sum(1) - m * eL
        c12 = m * eL
        ga = act[ok]
        dg = dtau[ok]
        sg = seg[ga]
        V[ga, sg, 0, 0] += c11[ok] * dg
        V[ga, sg, 1, 1] += c22[ok] * dg
        V[ga, sg, 0, 1] += c12[ok] * dg
        V[ga, sg, 1, 0] += c12[ok] * dg
        x[ga] = new[ok]
        clock[ga] += dg
        hit_ok = hit[ok]
        t[ga] = np.where(hit_ok, target[ok], t[ga] + dt[ok])
        hi = ga[hit_ok]
        spec[hi, seg[hi]] = 1.0 / (1.0 + np.exp(-x[hi]))
        seg[hi] += 1
    areas, fibre = _gaussian_areas(V, streams, m, times)
    return SpectralRun(times, areas, fibre, spec, clock, it, n_rej)


def simulate_spectral(
    dims: FlagDims,
    T: float,
    streams: Sequence[RngStream],
    record_times: Sequence[float] = (),
    settings: Optional[ClockSettings] = None,
    start=None,
) -> SpectralRun:
    """Radial spectrum and areas of the flag Brownian motion on the clock.

    Parameters
    ----------
    dims : FlagDims
    T : float
    streams : sequence of RngStream
    record_times : sequence of float
    settings : ClockSettings, optional
    start : ndarray, optional
        Initial ``lambda`` (``m = 1``) or eigenvalues of ``Lambda_1``
        (``k = 1``).  Defaults to the barycenter, with the eigenvalues spread
        symmetrically about ``1/2`` when ``m > 1``.

    Raises
    ------
    Unsupported
        When ``m > 1`` and ``k > 1``.
    """
    kappa = [dims.m / 2.0] * dims.ncols
    if dims.m == 1:
        lam0 = np.full(dims.ncols, 1.0 / dims.ncols) if start is None else start
        return simulate_simplex_clock(lam0, kappa, T, streams, record_times, settings)
    if dims.k == 1:
        if start is None:
            start = 1.0 / (1.0 + np.exp(-np.linspace(-0.5, 0.5, dims.m)))
        return simulate_eigen_clock(start, kappa, dims.m, T, streams, record_times, settings)
    raise Unsupported("spectral engine needs m = 1 or k = 1")
