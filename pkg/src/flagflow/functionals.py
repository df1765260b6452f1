"""Path functionals: stochastic areas, windings, connection form, martingale, lift.

Single-step functions follow the mathematical definitions directly.  The
``*Observer`` classes wrap them for the batched unitary engine in
:mod:`flagflow.liebm`: ``check`` reports guard violations before a step is
accepted, ``commit`` accumulates the functional once it is.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import ChartMismatch, SingularBlock, StepTooLarge
from .flag import (
    CHART_GUARD,
    FlagDims,
    FlagPoint,
    SimplexPoint,
    bottom_blocks,
    chart_batch,
    radial_batch,
    radial_from_chart_batch,
)
from .liebm import GUARD_FATAL, GUARD_OK, GUARD_REFINE
from .matcore import EIG_FLOOR, canonical_phase, det_arg, expm_skew, herm_power, hermitize, unitary_project

__all__ = [
    "UNWRAP_GUARD",
    "FunctionalState",
    "HorizontalLiftState",
    "area_increment",
    "area_increment_batch",
    "stiefel_blocks",
    "winding_update",
    "connection_form_increment",
    "connection_form_batch",
    "exp_martingale_update",
    "log_martingale_increment",
    "stiefel_section",
    "horizontal_lift_start",
    "horizontal_lift_step",
    "AreaObserver",
    "WindingObserver",
    "RadialObserver",
    "MartingaleObserver",
    "ConnectionObserver",
]

UNWRAP_GUARD = np.pi / 2


def _dag(X):
    return np.conj(np.swapaxes(X, -1, -2))


@dataclass
class FunctionalState:
    """Accumulated functionals of one path.

    Attributes
    ----------
    a : ndarray, shape (k+1,)
        Stochastic areas.
    theta : ndarray, shape (k+1,)
        Unwrapped winding angles.
    last_arg : ndarray, shape (k+1,)
        Principal arguments at the last accepted step.
    D : float
        Exponential martingale value.
    u : ndarray, shape (k+1,)
        Frequency parameter of ``D``.
    """

    a: np.ndarray
    theta: np.ndarray
    last_arg: np.ndarray
    D: float = 1.0
    u: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def start(cls, Z, u=None) -> "FunctionalState":
        """Initial state anchored at the bottom blocks ``Z`` (shape ``(k+1, m, m)``)."""
        K = len(Z)
        args = np.array([det_arg(z)[1] for z in Z])
        uu = np.zeros(K) if u is None else np.asarray(u, dtype=float)
        return cls(np.zeros(K), np.zeros(K), args, 1.0, uu)


@dataclass
class HorizontalLiftState:
    """State of the horizontal lift.

    Attributes
    ----------
    Theta : ndarray, shape (k+1, m, m)
        Special unitary factors.
    X : ndarray, shape (n, n)
        Reconstructed unitary lift.
    a : ndarray, shape (k+1,)
        Accumulated areas used in the phase factor.
    steps : int
    """

    Theta: np.ndarray
    X: np.ndarray
    a: np.ndarray
    steps: int = 0


# --------------------------------------------------------------------------
# areas


def area_increment_batch(w_prev, w_next):
    """Midpoint-rule area increments for stacked chart points.

    Parameters
    ----------
    w_prev, w_next : ndarray, shape (..., k+1, n-m, m)

    Returns
    -------
    ndarray, shape (..., k+1)
        ``(i/2) Tr(Lambda_mid (dw^* w_mid - w_mid^* dw))`` per block, with
        ``w_mid`` the average and ``Lambda_mid`` its radial value.
    """
    wm = 0.5 * (w_prev + w_next)
    dw = w_next - w_prev
    lam = radial_from_chart_batch(wm)
    X = _dag(wm) @ dw
    # (i/2)(conj-transpose pair) reduces to Im Tr(Lambda w^* dw)
    val = np.trace(lam @ (_dag(X) - X), axis1=-2, axis2=-1) * 0.5j
    return val


def area_increment(w_prev: FlagPoint, w_next: FlagPoint, lam_mid: Optional[SimplexPoint] = None):
    """Stratonovich midpoint increment of the stochastic areas.

    Parameters
    ----------
    w_prev, w_next : FlagPoint
    lam_mid : SimplexPoint, optional
        Radial value at the midpoint chart value; computed when omitted.

    Returns
    -------
    ndarray, shape (k+1,)

    Raises
    ------
    ChartMismatch
        If the two points have different dimensions.
    """
    if w_prev.dims != w_next.dims:
        raise ChartMismatch("chart points have different dimensions")
    wm = 0.5 * (w_prev.w + w_next.w)
    dw = w_next.w - w_prev.w
    lam = radial_from_chart_batch(wm) if lam_mid is None else np.asarray(lam_mid.lam)
    X = _dag(wm) @ dw
    val = 0.5j * np.trace(lam @ (_dag(X) - X), axis1=-2, axis2=-1)
    scale = 1.0 + np.max(np.abs(val))
    if np.max(np.abs(val.imag)) > 1e-12 * scale:
        raise AssertionError("area increment has a non-negligible imaginary part")
    return val.real


def stiefel_blocks(U, dims: FlagDims):
    """Bottom-row blocks ``Z_j`` (the Stiefel projection), shape ``(k+1, m, m)``."""
    return bottom_blocks(np.asarray(U), dims)


# --------------------------------------------------------------------------
# windings


def winding_update(state: FunctionalState, Z, chart_guard: float = CHART_GUARD) -> FunctionalState:
    """Accumulate the unwrapped argument of ``det Z_j``.

    Parameters
    ----------
    state : FunctionalState
    Z : ndarray, shape (k+1, m, m)
    chart_guard : float

    Returns
    -------
    FunctionalState
        Updated copy.

    Raises
    ------
    SingularBlock
        If ``|det Z_j| <= chart_guard``.
    StepTooLarge
        If an unwrapped increment reaches ``pi/2``.
    """
    K = len(Z)
    logmod = np.empty(K)
    args = np.empty(K)
    for j in range(K):
        logmod[j], args[j] = det_arg(Z[j])
    if np.any(logmod <= np.log(chart_guard)):
        raise SingularBlock("block determinant below the chart guard")
    delta = _unwrap_delta(args, state.last_arg)
    if np.any(np.abs(delta) >= UNWRAP_GUARD):
        raise StepTooLarge(f"phase increment {np.max(np.abs(delta)):.3f} >= pi/2")
    return replace(state, theta=state.theta + delta, last_arg=args)


def _unwrap_delta(new, old):
    d = np.asarray(new) - np.asarray(old)
    return d - 2 * np.pi * np.round(d / (2 * np.pi))


# --------------------------------------------------------------------------
# connection form


def connection_form_batch(M_prev, M_next, dims: FlagDims):
    """Midpoint connection-form increments for stacks of unitaries.

    Returns ``Im Tr(Mbar_j^* dM_j)`` per column block, with ``Mbar`` the polar
    projection of the average and ``dM`` the difference.
    """
    Mbar = unitary_project(0.5 * (M_prev + M_next))
    dM = M_next - M_prev
    m = dims.m
    out = []
    for j in range(dims.ncols):
        sl = slice(j * m, (j + 1) * m)
        out.append(np.imag(np.trace(_dag(Mbar[..., :, sl]) @ dM[..., :, sl], axis1=-2, axis2=-1)))
    return np.stack(out, axis=-1)


def connection_form_increment(M_prev, M_next, dims: FlagDims):
    """Increment of the torus-bundle connection form between two unitaries.

    The form is normalised so that the vertical move
    ``M exp(i eps P_j / m)``, with ``P_j`` the projector onto column block
    ``j``, has increment ``eps`` in slot ``j``.

    Parameters
    ----------
    M_prev, M_next : ndarray, shape (n, n)
    dims : FlagDims

    Returns
    -------
    ndarray, shape (k+1,)
    """
    return connection_form_batch(np.asarray(M_prev, dtype=complex), np.asarray(M_next, dtype=complex), dims)


# --------------------------------------------------------------------------
# exponential martingale


def _abs_cross(u):
    au = np.abs(u)
    return float(np.sum(np.outer(au, au)) - np.sum(au**2))


def log_martingale_increment(lam_prev, lam_next, dt, u, m: int):
    """Increment of ``log D`` for stacks of radial states.

    Parameters
    ----------
    lam_prev, lam_next : ndarray, shape (..., k+1, m, m)
    dt : float
    u : ndarray, shape (k+1,)
    m : int

    Returns
    -------
    ndarray, shape (...)
    """
    u = np.asarray(u, dtype=float)
    K = u.size
    n = K * m
    au = np.abs(u)
    const = (m * (n - m) * np.sum(au) + 0.5 * m * _abs_cross(u)) * dt
    _, ld_next = np.linalg.slogdet(lam_next)
    _, ld_prev = np.linalg.slogdet(lam_prev)
    body = 0.5 * au * (ld_next - ld_prev)
    if m == 1 and dt > 0:
        body = body + _bessel_bridge_term(np.real(lam_prev[..., 0, 0]), np.real(lam_next[..., 0, 0]), au, dt)
    else:
        mid = 0.5 * (lam_prev + lam_next)
        tr_inv = np.real(np.trace(np.linalg.inv(mid), axis1=-2, axis2=-1))
        body = body - 0.5 * u**2 * (tr_inv - m) * dt
    return const + np.sum(body, axis=-1)


def _bessel_bridge_term(lp, ln, au, dt):
    # Near 0 the root of a scalar block is a 2-d Bessel process, so the
    # conditional mean of exp(-(u^2/2) int ds / lambda) over a step is
    # I_|u|(z) / I_0(z) with z = sqrt(lp ln) / dt.  Midpoint quadrature
    # misses close approaches and converges only logarithmically in dt.
    z = np.sqrt(np.clip(lp * ln, 0.0, None)) / dt
    with np.errstate(divide="ignore"):
        ratio = np.log(special.ive(au, z) / special.ive(0.0, z))
    return np.where(au > 0, ratio, 0.0) + 0.5 * au**2 * dt


def exp_martingale_update(
    state: FunctionalState, lam_prev: SimplexPoint, lam_next: SimplexPoint, dt: float
) -> FunctionalState:
    """Multiply ``D`` by its one-step factor.

    The factor is ``exp(m(n-m)|u| dt + (m/2) sum_{j != l} |u_j u_l| dt)
    prod_j (det Lambda_next,j / det Lambda_prev,j)^{|u_j|/2}
    exp(-(u_j^2/2)(Tr Lambda_mid,j^{-1} - m) dt)``.  For ``m = 1`` the
    inverse-trace factor is replaced by its Bessel-bridge conditional mean,
    which agrees with the midpoint rule to ``O(dt^2)`` away from the
    boundary and stays exact near it.

    Raises
    ------
    SingularBlock
        If some ``det Lambda_j < eig_floor^m``.
    """
    m = lam_prev.dims.m
    floor = EIG_FLOOR**m
    for L in (lam_prev.lam, lam_next.lam):
        if np.min(np.real(np.linalg.det(L))) < floor:
            raise SingularBlock("radial determinant below eig_floor^m")
    if not np.any(state.u) or dt == 0:
        return replace(state)
    inc = float(log_martingale_increment(lam_prev.lam, lam_next.lam, dt, state.u, m))
    return replace(state, D=state.D * float(np.exp(inc)))


# --------------------------------------------------------------------------
# horizontal lift


def stiefel_section(w):
    """Orthonormal columns ``[w_j; I] Lambda_j^{1/2}`` for stacked chart points.

    Returns an array of shape ``(..., k+1, n, m)``.
    """
    w = np.asarray(w, dtype=complex)
    m = w.shape[-1]
    lam = radial_from_chart_batch(w)
    ev, V = np.linalg.eigh(lam)
    half = (V * np.sqrt(np.clip(ev, 0, None))[..., None, :]) @ _dag(V)
    eye = np.broadcast_to(np.eye(m, dtype=complex), w.shape[:-2] + (m, m))
    return np.concatenate([w, eye], axis=-2) @ half


def _assemble(S, a, Theta):
    m = S.shape[-1]
    K = S.shape[-3]
    cols = [S[j] @ (np.exp(-1j * a[j] / m) * Theta[j]) for j in range(K)]
    return np.concatenate(cols, axis=-1)


def horizontal_lift_start(w: FlagPoint) -> HorizontalLiftState:
    """Lift of the initial point with ``Theta_j = I`` and zero areas."""
    K, m = w.dims.ncols, w.dims.m
    Theta = np.broadcast_to(np.eye(m, dtype=complex), (K, m, m)).copy()
    a = np.zeros(K)
    S = stiefel_section(w.w)
    return HorizontalLiftState(Theta, _assemble(S, a, Theta), a, 0)


def horizontal_lift_step(
    lift: HorizontalLiftState,
    w_prev: FlagPoint,
    w_next: FlagPoint,
    lam_prev: Optional[SimplexPoint],
    lam_next: Optional[SimplexPoint],
    da,
    proj_interval: int = 64,
) -> HorizontalLiftState:
    """Advance the horizontal lift by one step of the base path.

    The lift is ``X_j = S_j exp(-i a_j / m) Theta_j`` with ``S_j`` the
    Stiefel section of ``w_j``.  Horizontality ``X_j^* dX_j = 0`` gives
    ``dTheta_j = -omega_j^0 Theta_j`` where ``omega_j^0`` is the trace-free
    part of ``S_j^* dS_j``; the midpoint value of that form is exactly
    skew-Hermitian.  ``Theta_j`` is renormalised to unit determinant by the
    principal ``m``-th root, and re-projected onto the unitary group every
    ``proj_interval`` steps.

    Parameters
    ----------
    lift : HorizontalLiftState
    w_prev, w_next : FlagPoint
    lam_prev, lam_next : SimplexPoint or None
        Radial values; accepted for interface symmetry, the section uses the
        values implied by the chart points.
    da : ndarray, shape (k+1,)
        Area increment of the step.

    Raises
    ------
    StepTooLarge
        If the connection increment has norm at least 0.1.
    """
    S0 = stiefel_section(w_prev.w)
    S1 = stiefel_section(w_next.w)
    omega = 0.5 * (_dag(S0) @ S1 - _dag(S1) @ S0)
    m = omega.shape[-1]
    tr = np.trace(omega, axis1=-2, axis2=-1)
    omega0 = omega - (tr / m)[..., None, None] * np.eye(m)
    if np.max(np.linalg.norm(omega0, axis=(-2, -1))) >= 0.1:
        raise StepTooLarge("connection increment too large for the lift step")
    Theta = expm_skew(-omega0) @ lift.Theta
    steps = lift.steps + 1
    if proj_interval > 0 and steps % proj_interval == 0:
        Theta = unitary_project(Theta)
    det = np.linalg.det(Theta)
    Theta = Theta / (det ** (1.0 / m))[..., None, None]
    a = lift.a + np.asarray(da, dtype=float)
    return HorizontalLiftState(Theta, _assemble(S1, a, Theta), a, steps)


# --------------------------------------------------------------------------
# observers for the batched unitary engine


class AreaObserver:
    """Accumulates stochastic areas; optionally realized covariations.

    Parameters
    ----------
    dims : FlagDims
    chart_guard : float
        Steps landing with ``|det Z_j| < chart_guard`` are fatal.
    track_qv : bool
        Also accumulate ``sum da da^T`` and ``int (Tr Lambda^{-1} - m) ds``.
    """

    def __init__(self, dims: FlagDims, chart_guard: float = CHART_GUARD, track_qv: bool = False):
        self.dims = dims
        self.guard = chart_guard
        self.track_qv = track_qv

    def start(self, U0):
        B, K = len(U0), self.dims.ncols
        self.a = np.zeros((B, K))
        if self.track_qv:
            self.qv = np.zeros((B, K, K))
            self.integral = np.zeros((B, K))
        self._w = {}

    def check(self, idx, Up, Un):
        dets = np.abs(np.linalg.det(bottom_blocks(Un, self.dims)))
        code = np.where(np.min(dets, axis=-1) < self.guard, GUARD_FATAL, GUARD_OK)
        ok = code == GUARD_OK
        da = np.zeros((len(idx), self.dims.ncols))
        if np.any(ok):
            da[ok] = area_increment_batch(chart_batch(Up[ok], self.dims), chart_batch(Un[ok], self.dims)).real
            code = np.where(ok & (np.max(np.abs(da), axis=-1) >= UNWRAP_GUARD), GUARD_REFINE, code)
        # commit always follows the latest check on a subset of the same candidates
        self._pending = (np.asarray(idx), da)
        return code

    def _cached(self, idx, Up, Un):
        pidx, da = self._pending
        pos = np.minimum(np.searchsorted(pidx, idx), max(len(pidx) - 1, 0))
        if len(pidx) and np.array_equal(pidx[pos], idx):
            return da[pos]
        return area_increment_batch(chart_batch(Up, self.dims), chart_batch(Un, self.dims)).real

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        da = self._cached(np.asarray(idx), Up, Un)
        self.a[idx] += da
        if self.track_qv:
            self.qv[idx] += da[:, :, None] * da[:, None, :]
            lam_p = radial_batch(Up, self.dims)
            lam_n = radial_batch(Un, self.dims)
            tr_p = np.real(np.trace(np.linalg.inv(lam_p), axis1=-2, axis2=-1))
            tr_n = np.real(np.trace(np.linalg.inv(lam_n), axis1=-2, axis2=-1))
            self.integral[idx] += 0.5 * (tr_p + tr_n - 2 * self.dims.m) * dt


class WindingObserver:
    """Unwrapped arguments of ``det Z_j`` with the modulus identity residual.

    Parameters
    ----------
    dims : FlagDims
    chart_guard : float
    """

    def __init__(self, dims: FlagDims, chart_guard: float = CHART_GUARD):
        self.dims = dims
        self.guard = chart_guard

    def start(self, U0):
        Z = bottom_blocks(U0, self.dims)
        sign, _ = np.linalg.slogdet(Z)
        self.last = canonical_phase(np.angle(sign))
        self.theta = np.zeros(self.last.shape)
        self.max_modulus_residual = 0.0

    def _args(self, U):
        Z = bottom_blocks(U, self.dims)
        det = np.linalg.det(Z)
        return det, canonical_phase(np.angle(det))

    def check(self, idx, Up, Un):
        det, args = self._args(Un)
        self._pending = (np.asarray(idx), det, args)
        delta = _unwrap_delta(args, self.last[idx])
        code = np.where(np.max(np.abs(delta), axis=-1) >= UNWRAP_GUARD, GUARD_REFINE, GUARD_OK)
        return np.where(np.min(np.abs(det), axis=-1) <= self.guard, GUARD_FATAL, code)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        idx = np.asarray(idx)
        pidx, pdet, pargs = self._pending
        pos = np.minimum(np.searchsorted(pidx, idx), len(pidx) - 1)
        if len(pidx) and np.array_equal(pidx[pos], idx):
            det, args = pdet[pos], pargs[pos]
        else:
            det, args = self._args(Un)
        self.theta[idx] += _unwrap_delta(args, self.last[idx])
        self.last[idx] = args
        lam = radial_batch(Un, self.dims)
        detlam = np.real(np.linalg.det(lam))
        res = np.max(np.abs(np.abs(det) ** 2 - detlam))
        self.max_modulus_residual = max(self.max_modulus_residual, float(res))


class RadialObserver:
    """Stores ``Lambda`` at requested times.

    Parameters
    ----------
    dims : FlagDims
    times : sequence of float
    tol : float
        Matching tolerance for the step end times.
    """

    def __init__(self, dims: FlagDims, times: Sequence[float], tol: float = 1e-9):
        self.dims = dims
        self.times = sorted(times)
        self.tol = tol

    def start(self, U0):
        self.snapshots = {}
        self._current = radial_batch(U0, self.dims).copy()
        if self.times and abs(self.times[0]) < self.tol:
            self.snapshots[self.times[0]] = self._current.copy()

    def check(self, idx, Up, Un):
        return np.zeros(len(idx), dtype=np.int64)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        self._current[idx] = radial_batch(Un, self.dims)
        for t in self.times:
            if abs(t_next - t) < self.tol and dt > 0:
                self.snapshots[t] = self._current.copy()


class MartingaleObserver:
    """Log of the exponential martingale ``D^u`` along radial paths.

    Parameters
    ----------
    dims : FlagDims
    u : sequence of float
        One frequency vector, or several stacked as rows.
    """

    def __init__(self, dims: FlagDims, u):
        self.dims = dims
        self.u = np.atleast_2d(np.asarray(u, dtype=float))

    def start(self, U0):
        self.logD = np.zeros((len(U0), len(self.u)))

    def check(self, idx, Up, Un):
        lam = radial_batch(Un, self.dims)
        dets = np.real(np.linalg.det(lam))
        bad = np.min(dets, axis=-1) < EIG_FLOOR**self.dims.m
        return np.where(bad, GUARD_FATAL, GUARD_OK)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        lp = radial_batch(Up, self.dims)
        ln = radial_batch(Un, self.dims)
        for r, u in enumerate(self.u):
            self.logD[idx, r] += log_martingale_increment(lp, ln, dt, u, self.dims.m)

    @property
    def D(self):
        return np.exp(self.logD)


class ConnectionObserver:
    """Sums connection-form increments and their realized quadratic variation."""

    def __init__(self, dims: FlagDims):
        self.dims = dims

    def start(self, U0):
        B, K = len(U0), self.dims.ncols
        self.eta = np.zeros((B, K))
        self.qv = np.zeros((B, K))

    def check(self, idx, Up, Un):
        return np.zeros(len(idx), dtype=np.int64)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        d = connection_form_batch(Up, Un, self.dims)
        self.eta[idx] += d
        self.qv[idx] += d**2
