"""Brownian motion on u(n) and the group-exponential integrator for dU = U dA.

The increment normalisation follows the block quadratic-variation relation
``dA_ij dA_jr = -2 m delta_ir I_m dt``: off-diagonal entries are complex
Gaussians of variance ``2 dt`` and diagonal entries are ``i`` times a real
Gaussian of variance ``2 dt``.

Paths are advanced in batches.  Each path owns an :class:`RngStream`, so the
output of a path depends only on its own seed tuple and never on how paths
are grouped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidDimension, InvalidStep, StepTooLarge
from .matcore import expm_skew, unitary_project

__all__ = [
    "RngStream",
    "NoiseBuffer",
    "LieIncrement",
    "skew_from_normals",
    "sample_skew_increment",
    "step_unitary",
    "simulate_unitary_path",
    "UnitaryBatchResult",
    "run_unitary_batch",
    "GUARD_OK",
    "GUARD_REFINE",
    "GUARD_FATAL",
]

_MASK64 = (1 << 64) - 1

# observer guard codes
GUARD_OK = 0
GUARD_REFINE = 1
GUARD_FATAL = 2


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(master_seed, stream_index)``.

    The Philox key is the pair of 64-bit words; ``counter`` selects a
    disjoint block of the counter space (the top counter word), which is how
    refinement draws obtain independent sub-streams.

    Parameters
    ----------
    master_seed : int
    stream_index : int
    counter : int
        Sub-stream selector, 0 for the main stream.
    """

    master_seed: int
    stream_index: int
    counter: int = 0
    _gen: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        """The (lazily created, stateful) generator of this stream."""
        if self._gen is None:
            key = np.array([self.master_seed & _MASK64, self.stream_index & _MASK64], dtype=np.uint64)
            ctr = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key, counter=ctr))
        return self._gen

    def substream(self, counter: int) -> "RngStream":
        """A fresh stream sharing the key but using another counter block."""
        return RngStream(self.master_seed, self.stream_index, counter)

    def standard_normal(self, size):
        return self.generator().standard_normal(size)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or numpy Generator")


class NoiseBuffer:
    """Per-path standard normals drawn in chunks from per-path streams.

    All live paths consume one row per call of :meth:`take`, which keeps the
    read position shared.  A path's draws depend only on its stream.

    Parameters
    ----------
    streams : sequence of RngStream
    width : int
        Number of normals per row.
    chunk : int
        Rows drawn per refill.
    """

    def __init__(self, streams: Sequence[RngStream], width: int, chunk: int = 256):
        self.streams = list(streams)
        self.width = int(width)
        self.chunk = int(chunk)
        self.buf = np.empty((len(self.streams), self.chunk, self.width))
        self.pos = np.full(len(self.streams), self.chunk, dtype=np.int64)

    def take(self, idx: np.ndarray) -> np.ndarray:
        """Next row of normals for every path in ``idx`` (shape ``(len(idx), width)``)."""
        idx = np.asarray(idx, dtype=np.int64)
        stale = idx[self.pos[idx] >= self.chunk]
        for p in stale:
            self.buf[p] = self.streams[p].standard_normal((self.chunk, self.width))
            self.pos[p] = 0
        rows = self.buf[idx, self.pos[idx]]
        self.pos[idx] += 1
        return rows


def _upper_indices(n):
    return np.triu_indices(n, 1)


def skew_from_normals(n: int, dt, g: np.ndarray) -> np.ndarray:
    """Assemble skew-Hermitian increments from ``n*n`` standard normals.

    Parameters
    ----------
    n : int
    dt : float or ndarray
        Step size, scalar or one per leading index of ``g``.
    g : ndarray, shape (..., n*n)
        The first ``n(n-1)/2`` values are real parts of the upper entries,
        the next ``n(n-1)/2`` imaginary parts, the last ``n`` drive the
        diagonal.

    Returns
    -------
    ndarray, shape (..., n, n)
    """
    g = np.asarray(g, dtype=float)
    npair = n * (n - 1) // 2
    iu, ju = _upper_indices(n)
    lead = g.shape[:-1]
    sdt = np.sqrt(np.asarray(dt, dtype=float))[..., None]
    off = (g[..., :npair] + 1j * g[..., npair : 2 * npair]) * sdt
    A = np.zeros(lead + (n, n), dtype=complex)
    A[..., iu, ju] = off
    A[..., ju, iu] = -np.conj(off)
    diag = 1j * g[..., 2 * npair :] * np.sqrt(2.0) * sdt
    A[..., np.arange(n), np.arange(n)] = diag
    return A


@dataclass(frozen=True)
class LieIncrement:
    """One Brownian increment on u(n).

    Attributes
    ----------
    n : int
    dt : float
    dA : ndarray, shape (n, n)
        Skew-Hermitian by construction.
    """

    n: int
    dt: float
    dA: np.ndarray


def sample_skew_increment(n: int, dt: float, rng) -> LieIncrement:
    """Draw ``dA`` with ``E[dA dA] = -2 n I dt``.

    Parameters
    ----------
    n : int
        Dimension, at least 2.
    dt : float
        Positive step.
    rng : RngStream or numpy.random.Generator

    Raises
    ------
    InvalidDimension, InvalidStep
    """
    if n < 2:
        raise InvalidDimension(f"n must be >= 2, got {n}")
    if not dt > 0:
        raise InvalidStep(f"dt must be positive, got {dt}")
    g = _as_generator(rng).standard_normal(n * n)
    return LieIncrement(n, float(dt), skew_from_normals(n, dt, g))


def step_unitary(U, inc: LieIncrement, step_index: Optional[int] = None, proj_interval: int = 64):
    """One group-exponential step ``U expm(dA)``.

    Parameters
    ----------
    U : ndarray, shape (n, n) or (B, n, n)
    inc : LieIncrement or ndarray
        Increment (or raw skew matrices with matching leading shape).
    step_index : int, optional
        Zero-based index of this step; when given, the output is re-projected
        onto the unitary group after every ``proj_interval``-th step.
    proj_interval : int

    Raises
    ------
    DimensionMismatch
    """
    dA = inc.dA if isinstance(inc, LieIncrement) else np.asarray(inc)
    U = np.asarray(U, dtype=complex)
    if U.shape[-1] != dA.shape[-1] or U.shape[-2] != dA.shape[-2]:
        raise DimensionMismatch(f"U is {U.shape[-2:]}, increment is {dA.shape[-2:]}")
    out = U @ expm_skew(dA)
    if step_index is not None and proj_interval > 0 and (step_index + 1) % proj_interval == 0:
        out = unitary_project(out)
    return out


# --------------------------------------------------------------------------
# batched engine


@dataclass
class UnitaryBatchResult:
    """Outcome of :func:`run_unitary_batch`.

    Attributes
    ----------
    U : ndarray, shape (B, n, n)
        Final states (last accepted state for flagged paths).
    flagged : ndarray of bool, shape (B,)
    flag_reason : list of str
        Empty string for unflagged paths.
    n_steps : int
    n_refined : ndarray of int, shape (B,)
        Number of steps that needed bridge refinement.
    max_unitarity_residual : float
    """

    U: np.ndarray
    flagged: np.ndarray
    flag_reason: list
    n_steps: int
    n_refined: np.ndarray
    max_unitarity_residual: float


def _unitarity_residual(U):
    n = U.shape[-1]
    R = np.conj(np.swapaxes(U, -1, -2)) @ U - np.eye(n)
    return np.sqrt(np.sum(np.abs(R) ** 2, axis=(-2, -1)))


def run_unitary_batch(
    U0,
    T: float,
    dt: float,
    streams: Sequence[RngStream],
    observers: Sequence = (),
    proj_interval: int = 64,
    max_refine: int = 12,
    chunk: int = 256,
    monitor_every: int = 0,
    on_step: Optional[Callable] = None,
) -> UnitaryBatchResult:
    """Advance many independent unitary Brownian paths in lockstep.

    Parameters
    ----------
    U0 : ndarray, shape (n, n) or (B, n, n)
        Initial states; a single matrix is broadcast to every stream.
    T, dt : float
        Horizon and step.  ``ceil(T/dt)`` steps are taken, the last one
        shortened so the final time is exactly ``T``.
    streams : sequence of RngStream
        One per path.
    observers : sequence
        Objects with ``start(U0)``, ``check(idx, U_prev, U_next)`` returning
        guard codes, and ``commit(idx, U_prev, U_next, dA, dt, t_next)``.
    proj_interval : int
        Polar re-projection period (in steps).
    max_refine : int
        Maximum bridge-halving depth when an observer returns
        ``GUARD_REFINE``; deeper failures flag the path.
    monitor_every : int
        When positive, the unitarity residual is measured every this many
        steps (and at the end) and its maximum reported.
    on_step : callable, optional
        ``on_step(step_index, t, U, alive)`` called after each step.

    Returns
    -------
    UnitaryBatchResult
    """
    if not dt > 0:
        raise InvalidStep(f"dt must be positive, got {dt}")
    if not T > 0 or dt > T * (1 + 1e-12):
        raise InvalidStep(f"need 0 < dt <= T, got dt={dt}, T={T}")
    B = len(streams)
    U0 = np.asarray(U0, dtype=complex)
    n = U0.shape[-1]
    if n < 2:
        raise InvalidDimension(f"n must be >= 2, got {n}")
    U = np.array(np.broadcast_to(U0, (B, n, n)))
    nsteps = max(1, int(math.ceil(T / dt - 1e-9)))
    noise = NoiseBuffer(streams, n * n, chunk=chunk)
    alive = np.ones(B, dtype=bool)
    reasons = [""] * B
    n_refined = np.zeros(B, dtype=np.int64)
    for ob in observers:
        ob.start(U.copy())
    max_res = float(np.max(_unitarity_residual(U))) if monitor_every else 0.0
    t = 0.0
    for s in range(nsteps):
        h = dt if s < nsteps - 1 else T - dt * (nsteps - 1)
        t_next = T if s == nsteps - 1 else (s + 1) * dt
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        dA = skew_from_normals(n, h, noise.take(idx))
        Up = U[idx]
        Un = Up @ expm_skew(dA)
        code = np.zeros(idx.size, dtype=np.int64)
        for ob in observers:
            code = np.maximum(code, ob.check(idx, Up, Un))
        good = code == GUARD_OK
        gi = idx[good]
        for ob in observers:
            ob.commit(gi, Up[good], Un[good], dA[good], h, t_next)
        U[gi] = Un[good]
        for p_local in np.nonzero(~good)[0]:
            p = idx[p_local]
            if code[p_local] == GUARD_FATAL:
                alive[p] = False
                reasons[p] = f"chart exit at step {s}"
                continue
            sub = streams[p].substream(s + 1).generator()
            ok, Uend = _refine(p, Up[p_local], dA[p_local], h, t, observers, sub, 1, max_refine, n)
            n_refined[p] += 1
            if ok:
                U[p] = Uend
            else:
                alive[p] = False
                reasons[p] = f"refinement exhausted at step {s}"
        if proj_interval > 0 and (s + 1) % proj_interval == 0:
            ai = np.nonzero(alive)[0]
            U[ai] = unitary_project(U[ai])
        if monitor_every and ((s + 1) % monitor_every == 0 or s == nsteps - 1):
            ai = np.nonzero(alive)[0]
            if ai.size:
                max_res = max(max_res, float(np.max(_unitarity_residual(U[ai]))))
        t = t_next
        if on_step is not None:
            on_step(s, t, U, alive)
    return UnitaryBatchResult(U, ~alive, reasons, nsteps, n_refined, max_res)


def _refine(p, Uprev, dA, h, t0, observers, gen, level, max_level, n):
    """Split a rejected step by Brownian-bridge midpoint sampling.

    Returns ``(ok, U_end)``; observers are committed sub-step by sub-step.
    """
    if level > max_level:
        return False, Uprev
    dA1 = 0.5 * dA + skew_from_normals(n, h / 4.0, gen.standard_normal(n * n))
    dA2 = dA - dA1
    idx = np.array([p])
    U = Uprev
    tcur = t0
    for piece in (dA1, dA2):
        Un = U @ expm_skew(piece)
        code = GUARD_OK
        for ob in observers:
            code = max(code, int(ob.check(idx, U[None], Un[None])[0]))
        tcur = tcur + h / 2.0
        if code == GUARD_OK:
            for ob in observers:
                ob.commit(idx, U[None], Un[None], piece[None], h / 2.0, tcur)
            U = Un
        elif code == GUARD_FATAL:
            return False, U
        else:
            ok, U = _refine(p, U, piece, h / 2.0, tcur - h / 2.0, observers, gen, level + 1, max_level, n)
            if not ok:
                return False, U
    return True, U


def simulate_unitary_path(
    U0,
    T: float,
    dt: float,
    rng: RngStream,
    observers: Sequence = (),
    proj_interval: int = 64,
    max_refine: int = 12,
):
    """Simulate one unitary Brownian path.

    This is the single-path face of :func:`run_unitary_batch`; a path that
    cannot satisfy an observer guard raises instead of being flagged.

    Parameters
    ----------
    U0 : ndarray, shape (n, n)
    T, dt : float
    rng : RngStream
    observers : sequence
        Batched observers (see :func:`run_unitary_batch`); callables with the
        signature ``f(step, t, U, dA)`` are wrapped automatically.

    Returns
    -------
    U : ndarray, shape (n, n)
        Final state.
    outputs : list
        One entry per observer: the observer itself for batched observers,
        the list of returned values for plain callables.

    Raises
    ------
    StepTooLarge
        If refinement cannot satisfy a guard.
    """
    wrapped = []
    for ob in observers:
        wrapped.append(ob if hasattr(ob, "check") else _CallbackObserver(ob))
    res = run_unitary_batch(
        np.asarray(U0, dtype=complex)[None], T, dt, [rng], wrapped, proj_interval, max_refine
    )
    if res.flagged[0]:
        raise StepTooLarge(res.flag_reason[0])
    outs = [w.values if isinstance(w, _CallbackObserver) else w for w in wrapped]
    return res.U[0], outs


class _CallbackObserver:
    """Adapter turning ``f(step, t, U, dA)`` into a batched observer."""

    def __init__(self, fn):
        self.fn = fn
        self.values = []
        self.count = 0

    def start(self, U0):
        self.count = 0

    def check(self, idx, Up, Un):
        return np.zeros(len(idx), dtype=np.int64)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx):
            self.values.append(self.fn(self.count, t_next, Un[0], dA[0]))
            self.count += 1
