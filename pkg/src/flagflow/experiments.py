"""Experiment configurations, simulations, estimators and report files.

Every experiment is split into a simulation over a chunk of path indices and
an evaluation over the merged per-path arrays.  A path's output depends
only on ``(master_seed, path_index)``, so chunking and worker count never
change the results.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import stats as sps

from . import __version__
from .errors import ConfigInvalid, FlagflowError, RuntimeFailure, StepTooLarge
from .flag import FlagDims, bottom_blocks, chart_batch, flag_qv_predict, project_affine, radial_batch, sample_chart_increments
from .functionals import (
    AreaObserver,
    ConnectionObserver,
    MartingaleObserver,
    WindingObserver,
    area_increment,
    connection_form_increment,
    horizontal_lift_start,
    horizontal_lift_step,
)
from .jacobi import JacobiIndex, barycenter, simulate_jacobi_batch, stationary_beta_params
from .liebm import RngStream, run_unitary_batch
from .matcore import haar_unitary
from .stats import cauchy_cdf, cauchy_fit, ecf_with_se, ks_test
from .timechange import ClockSettings, simulate_spectral

__all__ = [
    "EXPERIMENTS",
    "ENGINES",
    "ExperimentConfig",
    "PathBlock",
    "ExperimentResult",
    "simulate_paths",
    "evaluate",
    "run_experiment",
    "write_paths_csv",
    "fourier_start",
    "DEFAULT_U_GRID",
]

EXPERIMENTS = (
    "unitary-qv",
    "flag-generator",
    "radial-match",
    "jacobi-stationary",
    "area-covariation",
    "martingale",
    "cauchy-limit",
    "stiefel-winding",
    "horizontal-lift",
)
ENGINES = ("auto", "unitary", "spectral")

DEFAULT_U_GRID = ((0.5, -0.3), (1.0, 0.0), (0.2, 0.2))
ECF_GRID = (-1.0, 0.5, 1.0)
FLAG_LIMIT = 0.01
# stream-index offset separating the Jacobi comparison paths
JACOBI_STREAM_OFFSET = 1 << 40
# halvings allowed per rejected step; passages near det Z = 0 need deep splits
MAX_REFINE = 40


@dataclass
class ExperimentConfig:
    """Configuration of one experiment run.

    Attributes
    ----------
    experiment : str
        One of :data:`EXPERIMENTS`.
    m, k : int
        Block size and flag length, ``n = (k+1) m``.
    T, dt : float
        Horizon and step.  The spectral engine uses ``dt`` as its cap on the
        physical step.
    n_paths : int
        Paths, or chart points for ``flag-generator``.
    master_seed : int
    u : list, optional
        Martingale frequency vector or list of vectors.
    output_dir : str
    thin : int
        Keep every ``thin``-th step in ``paths.csv`` (plus the last one).
    engine : str
        ``auto``, ``unitary`` or ``spectral``.
    samples : int
        One-step samples per chart point (``flag-generator``).
    """

    experiment: str
    m: int = 1
    k: int = 1
    T: float = 1.0
    dt: float = 1e-3
    n_paths: int = 100
    master_seed: int = 0
    u: Optional[list] = None
    output_dir: str = "results"
    thin: int = 100
    engine: str = "auto"
    samples: int = 20000

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {unknown}")
        if "experiment" not in d:
            raise ConfigInvalid("config needs an 'experiment' field")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc
        return cfg.resolved()

    def validate(self) -> None:
        """Raise :class:`ConfigInvalid` unless the configuration is usable."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigInvalid(f"unknown experiment {self.experiment!r}")
        if self.engine not in ENGINES:
            raise ConfigInvalid(f"unknown engine {self.engine!r}")
        for name in ("m", "k", "n_paths", "thin", "samples"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ConfigInvalid(f"{name} must be an integer")
        if self.m < 1 or self.k < 1:
            raise ConfigInvalid("need m >= 1 and k >= 1")
        try:
            T, dt = float(self.T), float(self.dt)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid("T and dt must be numbers") from exc
        if not (math.isfinite(dt) and dt > 0):
            raise ConfigInvalid("dt must be positive")
        if not (math.isfinite(T) and T >= dt * (1 - 1e-12)):
            raise ConfigInvalid("T must be at least dt")
        if self.n_paths < 1:
            raise ConfigInvalid("n_paths must be at least 1")
        if self.thin < 1:
            raise ConfigInvalid("thin must be at least 1")
        if self.samples < 100:
            raise ConfigInvalid("samples must be at least 100")
        if not isinstance(self.master_seed, (int, np.integer)) or not 0 <= self.master_seed < 2**64:
            raise ConfigInvalid("master_seed must be a 64-bit unsigned integer")
        if self.u is not None:
            try:
                U = np.atleast_2d(np.asarray(self.u, dtype=float))
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid("u must be a real vector or list of vectors") from exc
            if U.ndim != 2 or U.shape[1] != self.k + 1:
                raise ConfigInvalid(f"u vectors need k+1 = {self.k + 1} entries")
        if self.experiment == "jacobi-stationary" and self.m != 1:
            raise ConfigInvalid("jacobi-stationary needs m = 1")
        if self.experiment == "cauchy-limit" and self.engine == "spectral" and self.m > 1 and self.k > 1:
            raise ConfigInvalid("the spectral engine needs m = 1 or k = 1")
        if self.experiment == "stiefel-winding" and self.engine == "spectral" and self.m > 1 and self.k > 1:
            raise ConfigInvalid("the spectral engine needs m = 1 or k = 1")

    def resolved(self) -> "ExperimentConfig":
        """Validated copy with defaults filled in."""
        self.validate()
        d = asdict(self)
        d["T"] = float(self.T)
        d["dt"] = float(self.dt)
        d["master_seed"] = int(self.master_seed)
        if d["engine"] == "auto":
            spectral_ok = self.m == 1 or self.k == 1
            d["engine"] = "spectral" if self.experiment == "cauchy-limit" and spectral_ok else "unitary"
        if self.experiment == "martingale":
            if d["u"] is None:
                d["u"] = [list(v) + [0.0] * (self.k - 1) for v in DEFAULT_U_GRID]
            else:
                d["u"] = np.atleast_2d(np.asarray(d["u"], dtype=float)).tolist()
        return ExperimentConfig(**d)

    @property
    def dims(self) -> FlagDims:
        return FlagDims(self.m, self.k)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PathBlock:
    """Per-path simulation output for a chunk of paths.

    Attributes
    ----------
    paths : ndarray of int, shape (B,)
    steps, times : ndarray, shape (R,)
        Recorded step indices and times, shared by all paths.
    columns : dict
        Column name -> array of shape ``(B, R)``; complex arrays are split
        into ``_re``/``_im`` columns on output.
    flagged : ndarray of bool, shape (B,)
    reasons : list of str
    extra : dict
        Per-path arrays used by the estimators (leading axis ``B``).
    info : dict
        Scalar diagnostics; merged by maximum.
    """

    paths: np.ndarray
    steps: np.ndarray
    times: np.ndarray
    columns: Dict[str, np.ndarray]
    flagged: np.ndarray
    reasons: List[str]
    extra: Dict[str, np.ndarray] = field(default_factory=dict)
    info: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def merge(cls, blocks: List["PathBlock"]) -> "PathBlock":
        blocks = sorted(blocks, key=lambda b: int(b.paths[0]))
        first = blocks[0]
        cat = lambda key, attr: np.concatenate([getattr(b, attr)[key] for b in blocks], axis=0)
        info = {}
        for b in blocks:
            for k_, v in b.info.items():
                info[k_] = max(info.get(k_, -np.inf), v)
        return cls(
            np.concatenate([b.paths for b in blocks]),
            first.steps,
            first.times,
            {c: cat(c, "columns") for c in first.columns},
            np.concatenate([b.flagged for b in blocks]),
            sum((b.reasons for b in blocks), []),
            {c: cat(c, "extra") for c in first.extra},
            info,
        )


@dataclass
class ExperimentResult:
    """Summary dictionary, exit status and the merged path data."""

    summary: dict
    exit_code: int
    block: PathBlock


# --------------------------------------------------------------------------
# helpers


def _streams(cfg: ExperimentConfig, paths, offset: int = 0):
    return [RngStream(cfg.master_seed, int(offset + p)) for p in paths]


def _nsteps(cfg: ExperimentConfig) -> int:
    return max(1, int(math.ceil(cfg.T / cfg.dt - 1e-9)))


def _record_steps(nsteps: int, thin: int, must=()):
    s = set(range(0, nsteps + 1, thin)) | {nsteps} | {int(x) for x in must}
    return np.array(sorted(s), dtype=np.int64)


def _step_times(steps, cfg: ExperimentConfig, nsteps: int):
    t = steps * cfg.dt
    t[steps == nsteps] = cfg.T
    return t


def fourier_start(dims: FlagDims) -> np.ndarray:
    """Unitary start with ``Lambda_j = I/(k+1)``: the Fourier matrix tensored with ``I_m``."""
    K = dims.ncols
    a = np.arange(K)
    F = np.exp(2j * np.pi * np.outer(a, a) / K) / np.sqrt(K)
    return np.kron(F, np.eye(dims.m))


class _Recorder:
    """``on_step`` hook capturing observer state at the record steps."""

    def __init__(self, record_steps, capture, B):
        self.want = {int(s): i for i, s in enumerate(record_steps)}
        self.capture = capture
        self.cols: Dict[str, np.ndarray] = {}
        self.R = len(record_steps)
        self.B = B

    def put(self, r, U):
        for name, val in self.capture(U).items():
            if name not in self.cols:
                self.cols[name] = np.zeros((self.B, self.R), dtype=np.asarray(val).dtype)
            self.cols[name][:, r] = val

    def __call__(self, s, t, U, alive):
        r = self.want.get(s + 1)
        if r is not None:
            self.put(r, U)


def _run_unitary(cfg, paths, observers, capture, must=(), monitor_every=0):
    dims = cfg.dims
    nsteps = _nsteps(cfg)
    steps = _record_steps(nsteps, cfg.thin, must)
    times = _step_times(steps, cfg, nsteps)
    streams = _streams(cfg, paths)
    U0 = fourier_start(dims)
    rec = _Recorder(steps, capture, len(paths))
    for ob in observers:
        ob.start(np.broadcast_to(U0, (len(paths),) + U0.shape).copy())
    started = list(observers)

    class _NoRestart:
        # observers were started above so the initial record can read them
        def __init__(self, ob):
            self.ob = ob

        def start(self, U0_):
            pass

        def check(self, *a):
            return self.ob.check(*a)

        def commit(self, *a):
            return self.ob.commit(*a)

    rec.put(0, np.broadcast_to(U0, (len(paths),) + U0.shape).copy())
    res = run_unitary_batch(
        U0,
        cfg.T,
        cfg.dt,
        streams,
        [_NoRestart(o) for o in started],
        monitor_every=monitor_every,
        on_step=rec,
        max_refine=MAX_REFINE,
    )
    return res, steps, times, rec.cols


def _fits(samples, target):
    out = []
    for j in range(samples.shape[1]):
        x = samples[:, j]
        try:
            fit = cauchy_fit(x)
            ks = ks_test(x, cauchy_cdf(fit.location, fit.scale))
        except (FlagflowError, ValueError) as exc:
            out.append({"component": j + 1, "error": str(exc)})
            continue
        out.append(
            {
                "component": j + 1,
                "location": fit.location,
                "scale": fit.scale,
                "se_scale": fit.se_scale,
                "se_location": fit.se_location,
                "target_scale": target,
                "ks_statistic": ks.statistic,
                "ks_p": ks.p_approx,
            }
        )
    return out


def _check(name, value, target, tolerance, passed, **more):
    d = {"name": name, "value": value, "target": target, "tolerance": tolerance, "pass": bool(passed)}
    d.update(more)
    return d


def _cauchy_checks(prefix, fits, scale_tol=0.15, ks=True):
    checks = []
    for f in fits:
        j = f["component"]
        if "error" in f:
            checks.append(_check(f"{prefix}_fit_{j}", None, None, None, False, error=f["error"]))
            continue
        tgt = f["target_scale"]
        checks.append(
            _check(f"{prefix}_scale_{j}", f["scale"], tgt, [tgt * (1 - scale_tol), tgt * (1 + scale_tol)],
                   abs(f["scale"] - tgt) <= scale_tol * tgt)
        )
        checks.append(
            _check(f"{prefix}_location_{j}", f["location"], 0.0, 0.1 * f["scale"],
                   abs(f["location"]) <= 0.1 * f["scale"])
        )
        if ks:
            checks.append(_check(f"{prefix}_ks_{j}", f["ks_p"], "> 0.01", 0.01, f["ks_p"] > 0.01))
    return checks


def _ecf_grid_vectors(K):
    vs = []
    for a in ECF_GRID:
        for b in ECF_GRID:
            u = np.zeros(K)
            u[0], u[1] = a, b
            if K >= 3:
                u[2] = -(a + b) / 2.0
            vs.append(u)
    return vs


def independence_report(x):
    """Joint versus product-of-marginal empirical characteristic functions.

    Parameters
    ----------
    x : ndarray, shape (N, K)

    Returns
    -------
    list of dict
        One entry per grid vector with the modulus of the difference, its
        combined standard error and the verdict
        ``|diff| < 0.05 + 3 SE``.
    """
    N, K = x.shape
    out = []
    for u in _ecf_grid_vectors(K):
        joint, sr, si = ecf_with_se(x, u)
        prod = 1.0 + 0j
        var_prod = 0.0
        margs = []
        for j in range(K):
            if u[j] == 0:
                continue
            e = np.zeros(K)
            e[j] = u[j]
            v, mr, mi = ecf_with_se(x, e)
            margs.append((v, mr**2 + mi**2))
        for i, (v, var) in enumerate(margs):
            others = np.prod([abs(w) for jj, (w, _) in enumerate(margs) if jj != i]) if len(margs) > 1 else 1.0
            var_prod += (others**2) * var
            prod *= v
        se = float(np.sqrt(sr**2 + si**2 + var_prod))
        diff = abs(joint - prod)
        out.append({"u": u.tolist(), "joint": [joint.real, joint.imag], "product": [prod.real, prod.imag],
                    "abs_diff": float(diff), "se": se, "pass": bool(diff < 0.05 + 3 * se)})
    return out


# --------------------------------------------------------------------------
# unitary-qv


class _BlockQV:
    """Accumulates ``dA_ij dA_jr / dt`` block products and their squares."""

    def __init__(self, dims: FlagDims):
        self.dims = dims

    def start(self, U0):
        B, K, m = len(U0), self.dims.ncols, self.dims.m
        self.s = np.zeros((B, K, K, K, m, m), dtype=complex)
        self.q_re = np.zeros((B, K, K, K, m, m))
        self.q_im = np.zeros((B, K, K, K, m, m))
        self.count = np.zeros(B)

    def check(self, idx, Up, Un):
        return np.zeros(len(idx), dtype=np.int64)

    def commit(self, idx, Up, Un, dA, dt, t_next):
        if len(idx) == 0:
            return
        K, m = self.dims.ncols, self.dims.m
        blk = dA.reshape(len(idx), K, m, K, m).transpose(0, 1, 3, 2, 4)
        P = np.einsum("bijpq,bjrqs->bijrps", blk, blk) / dt
        self.s[idx] += P
        self.q_re[idx] += P.real**2
        self.q_im[idx] += P.imag**2
        self.count[idx] += 1


def _sim_unitary_qv(cfg, paths):
    qv = _BlockQV(cfg.dims)
    n = cfg.dims.n

    def capture(U):
        R = np.conj(np.swapaxes(U, -1, -2)) @ U - np.eye(n)
        return {"unitarity_residual": np.sqrt(np.sum(np.abs(R) ** 2, axis=(-2, -1)))}

    res, steps, times, cols = _run_unitary(cfg, paths, [qv], capture, monitor_every=1)
    extra = {"qv_sum": qv.s, "qv_sq_re": qv.q_re, "qv_sq_im": qv.q_im, "qv_count": qv.count}
    return PathBlock(np.asarray(paths), steps, times, cols, res.flagged, res.flag_reason, extra,
                     {"max_unitarity_residual": res.max_unitarity_residual})


def _eval_unitary_qv(cfg, blk):
    ok = ~blk.flagged
    N = float(np.sum(blk.extra["qv_count"][ok]))
    mean = np.sum(blk.extra["qv_sum"][ok], axis=0) / N
    var_re = np.sum(blk.extra["qv_sq_re"][ok], axis=0) / N - mean.real**2
    var_im = np.sum(blk.extra["qv_sq_im"][ok], axis=0) / N - mean.imag**2
    se_re = np.sqrt(np.maximum(var_re, 0) / N)
    se_im = np.sqrt(np.maximum(var_im, 0) / N)
    K, m = cfg.dims.ncols, cfg.m
    target = np.zeros_like(mean)
    for i in range(K):
        for j in range(K):
            target[i, j, i] = -2.0 * m * np.eye(m)
    z_re = np.abs(mean.real - target.real) / np.where(se_re > 0, se_re, np.inf)
    z_im = np.abs(mean.imag - target.imag) / np.where(se_im > 0, se_im, np.inf)
    exact_zero = (se_re == 0) & (mean.real != target.real)
    zmax = float(max(np.max(z_re), np.max(z_im)))
    checks = [
        _check("qv_normalization_max_z", zmax, 0.0, 3.0, zmax <= 3.0 and not np.any(exact_zero)),
        _check("unitarity_residual", blk.info["max_unitarity_residual"], 0.0, 1e-10,
               blk.info["max_unitarity_residual"] < 1e-10),
    ]
    est = {
        "n_increments": N,
        "block_mean_diagonal": [[float(np.mean(np.diag(mean[i, j, i].real))) for j in range(K)] for i in range(K)],
        "target_diagonal": -2.0 * m,
        "max_z": zmax,
        "max_unitarity_residual": blk.info["max_unitarity_residual"],
    }
    return est, checks


# --------------------------------------------------------------------------
# flag-generator


def _chart_start(dims, gen, min_det=0.1, tries=1000):
    for _ in range(tries):
        U = haar_unitary(dims.n, gen)
        if np.min(np.abs(np.linalg.det(bottom_blocks(U, dims)))) >= min_det:
            return U
    raise RuntimeFailure("no well-conditioned chart point found")


def generator_point_stats(U, dims: FlagDims, dt: float, n_samples: int, gen):
    """Short-time covariation and drift statistics at one chart point.

    A random complex direction ``c`` reduces the covariation tables to the
    scalars ``E|X|^2`` and ``E X^2`` for ``X = c . dw``.

    Returns
    -------
    dict
        Realised values, predictions and z-scores.
    """
    w = project_affine(U, dims)
    N = w.w.size
    c = gen.standard_normal(N) + 1j * gen.standard_normal(N)
    c /= np.linalg.norm(c)
    inc = sample_chart_increments(U, dims, dt, n_samples, gen).reshape(n_samples, N)
    X = inc @ c
    tables = flag_qv_predict(w)
    Q, Rt = tables.covariation()
    pred_abs = float(np.real(c @ Q @ np.conj(c))) * dt
    pred_sq = complex(c @ Rt @ c) * dt
    a = np.abs(X) ** 2
    s = X * X
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(n_samples))
    z_abs = abs(a.mean() - pred_abs) / se(a)
    z_sq_re = abs(s.real.mean() - pred_sq.real) / se(s.real)
    z_sq_im = abs(s.imag.mean() - pred_sq.imag) / se(s.imag)
    drift_re = inc.real.mean(axis=0) / dt
    drift_im = inc.imag.mean(axis=0) / dt
    dse_re = inc.real.std(axis=0, ddof=1) / np.sqrt(n_samples) / dt
    dse_im = inc.imag.std(axis=0, ddof=1) / np.sqrt(n_samples) / dt
    zd = float(max(np.max(np.abs(drift_re) / dse_re), np.max(np.abs(drift_im) / dse_im)))
    return {
        "abs_realized": float(a.mean()) / dt,
        "abs_predicted": pred_abs / dt,
        "sq_realized": complex(s.mean()) / dt,
        "sq_predicted": pred_sq / dt,
        "z_abs": float(z_abs),
        "z_sq_re": float(z_sq_re),
        "z_sq_im": float(z_sq_im),
        "z_drift_max": zd,
    }


def _sim_flag_generator(cfg, paths):
    dims = cfg.dims
    cols = {k_: np.zeros((len(paths), 2)) for k_ in ("abs_realized", "abs_predicted", "z_abs", "z_sq_re", "z_sq_im", "z_drift_max")}
    cols["sq_realized"] = np.zeros((len(paths), 2), dtype=complex)
    cols["sq_predicted"] = np.zeros((len(paths), 2), dtype=complex)
    for i, p in enumerate(paths):
        gen = RngStream(cfg.master_seed, int(p)).generator()
        U = _chart_start(dims, gen)
        st = generator_point_stats(U, dims, cfg.dt, cfg.samples, gen)
        for name, v in st.items():
            cols[name][i, 1] = v
    steps = np.array([0, 1])
    times = np.array([0.0, cfg.dt])
    B = len(paths)
    return PathBlock(np.asarray(paths), steps, times, cols, np.zeros(B, bool), [""] * B)


def _eval_flag_generator(cfg, blk):
    c = blk.columns
    zc = np.max(np.stack([c["z_abs"][:, 1], c["z_sq_re"][:, 1], c["z_sq_im"][:, 1]]), axis=0)
    zd = c["z_drift_max"][:, 1]
    checks = [
        _check("covariation_max_z", float(np.max(zc)), 0.0, 3.0, np.max(zc) <= 3.0),
        _check("drift_max_z", float(np.max(zd)), 0.0, 4.0, np.max(zd) <= 4.0),
    ]
    est = {"points": int(len(zc)), "covariation_z": zc.tolist(), "drift_z": zd.tolist()}
    return est, checks


# --------------------------------------------------------------------------
# radial-match


def _check_times(cfg):
    return [cfg.T / 16.0, cfg.T / 4.0, cfg.T]


def _sim_radial_match(cfg, paths):
    dims = cfg.dims
    nsteps = _nsteps(cfg)
    must = [int(round(t / cfg.dt)) for t in _check_times(cfg)]

    def capture(U):
        L1 = radial_batch(U, dims)[:, 0]
        return {"trL1_unitary": np.real(np.trace(L1, axis1=-2, axis2=-1)),
                "trL1sq_unitary": np.real(np.trace(L1 @ L1, axis1=-2, axis2=-1))}

    res, steps, times, cols = _run_unitary(cfg, paths, [], capture, must=must)
    idx = JacobiIndex.flag(dims)
    snap_times = [s * cfg.dt for s in steps]
    jr = simulate_jacobi_batch(barycenter(dims), idx, cfg.T, cfg.dt, _streams(cfg, paths, JACOBI_STREAM_OFFSET),
                               snapshot_times=snap_times)
    tr = np.zeros((len(paths), len(steps)))
    tr2 = np.zeros_like(tr)
    for r, t in enumerate(snap_times):
        L1 = jr.snapshots[t][:, 0]
        tr[:, r] = np.real(np.trace(L1, axis1=-2, axis2=-1))
        tr2[:, r] = np.real(np.trace(L1 @ L1, axis1=-2, axis2=-1))
    cols["trL1_jacobi"] = tr
    cols["trL1sq_jacobi"] = tr2
    flagged = res.flagged | jr.flagged
    reasons = [a or ("jacobi refinement exhausted" if f else "") for a, f in zip(res.flag_reason, jr.flagged)]
    return PathBlock(np.asarray(paths), steps, times, cols, flagged, reasons)


def _eval_radial_match(cfg, blk):
    ok = ~blk.flagged
    checks, est = [], {}
    for t in _check_times(cfg):
        r = int(np.argmin(np.abs(blk.times - t)))
        for name in ("trL1", "trL1sq"):
            a = blk.columns[name + "_unitary"][ok, r]
            b = blk.columns[name + "_jacobi"][ok, r]
            se = float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))
            diff = float(a.mean() - b.mean())
            est[f"{name}_t{t:g}"] = {"unitary": float(a.mean()), "jacobi": float(b.mean()), "se": se}
            checks.append(_check(f"{name}_t{t:g}", diff, 0.0, 3 * se, abs(diff) <= 3 * se + 1e-15))
    return est, checks


# --------------------------------------------------------------------------
# jacobi-stationary


def _sim_jacobi_stationary(cfg, paths):
    dims = cfg.dims
    idx = JacobiIndex.flag(dims)
    nsteps = _nsteps(cfg)
    steps = _record_steps(nsteps, cfg.thin)
    times = _step_times(steps, cfg, nsteps)
    jr = simulate_jacobi_batch(barycenter(dims), idx, cfg.T, cfg.dt, _streams(cfg, paths),
                               snapshot_times=[s * cfg.dt for s in steps])
    cols = {}
    for j in range(dims.ncols):
        cols[f"lambda_{j + 1}"] = np.stack([np.real(jr.snapshots[s * cfg.dt][:, j, 0, 0]) for s in steps], axis=1)
    reasons = ["boundary refinement exhausted" if f else "" for f in jr.flagged]
    return PathBlock(np.asarray(paths), steps, times, cols, jr.flagged, reasons,
                     info={"rejected_steps": float(np.sum(jr.n_rejected))})


def _eval_jacobi_stationary(cfg, blk):
    ok = ~blk.flagged
    idx = JacobiIndex.flag(cfg.dims)
    checks, est = [], {}
    for j in range(cfg.dims.ncols):
        a, b = stationary_beta_params(idx, j)
        x = blk.columns[f"lambda_{j + 1}"][ok, -1]
        try:
            rep = ks_test(x, sps.beta(a, b).cdf)
        except ValueError as exc:
            checks.append(_check(f"ks_lambda_{j + 1}", None, "> 0.01", 0.01, False, error=str(exc)))
            continue
        est[f"lambda_{j + 1}"] = {"beta_a": a, "beta_b": b, "ks_statistic": rep.statistic, "ks_p": rep.p_approx,
                                  "mean": float(x.mean())}
        checks.append(_check(f"ks_lambda_{j + 1}", rep.p_approx, "> 0.01", 0.01, rep.verdict))
    return est, checks


# --------------------------------------------------------------------------
# area-covariation


def _sim_area_covariation(cfg, paths):
    dims = cfg.dims
    ob = AreaObserver(dims, track_qv=True)
    K = dims.ncols

    def capture(U):
        out = {f"a_{j + 1}": ob.a[:, j].copy() for j in range(K)}
        for j in range(K):
            out[f"qv_{j + 1}{j + 1}"] = ob.qv[:, j, j].copy()
            out[f"int_{j + 1}"] = ob.integral[:, j].copy()
        for j in range(K):
            for l in range(j + 1, K):
                out[f"qv_{j + 1}{l + 1}"] = ob.qv[:, j, l].copy()
        return out

    res, steps, times, cols = _run_unitary(cfg, paths, [ob], capture)
    return PathBlock(np.asarray(paths), steps, times, cols, res.flagged, res.flag_reason,
                     {"qv": ob.qv.copy(), "integral": ob.integral.copy()})


def _eval_area_covariation(cfg, blk):
    ok = np.nonzero(~blk.flagged)[0]
    K, m, T = cfg.dims.ncols, cfg.m, cfg.T
    cross_err, diag_err = [], []
    for p in ok:
        qv = blk.extra["qv"][p]
        I = blk.extra["integral"][p]
        for j in range(K):
            diag_err.append(abs(qv[j, j] - I[j]) / I[j])
            for l in range(j + 1, K):
                cross_err.append(abs(qv[j, l] - m * T) / (m * T))
    ce = float(max(cross_err)) if cross_err else float("nan")
    de = float(max(diag_err)) if diag_err else float("nan")
    p0 = ok[0] if ok.size else 0
    est = {"cross_relative_error_max": ce, "diagonal_relative_error_max": de,
           "first_path_qv": blk.extra["qv"][p0].tolist(), "first_path_integral": blk.extra["integral"][p0].tolist(),
           "target_cross": m * T}
    checks = [_check("cross_covariation", ce, 0.0, 0.10, ce <= 0.10),
              _check("diagonal_qv", de, 0.0, 0.05, de <= 0.05)]
    return est, checks


# --------------------------------------------------------------------------
# martingale


def _sim_martingale(cfg, paths):
    dims = cfg.dims
    ob = MartingaleObserver(dims, cfg.u)

    def capture(U):
        return {f"D_{r + 1}": np.exp(ob.logD[:, r]) for r in range(len(ob.u))}

    res, steps, times, cols = _run_unitary(cfg, paths, [ob], capture)
    return PathBlock(np.asarray(paths), steps, times, cols, res.flagged, res.flag_reason)


def _eval_martingale(cfg, blk):
    ok = ~blk.flagged
    checks, est = [], {}
    for r, u in enumerate(np.atleast_2d(cfg.u)):
        D = blk.columns[f"D_{r + 1}"][ok, -1]
        mean = float(D.mean())
        se = float(D.std(ddof=1) / np.sqrt(D.size)) if D.size > 1 else math.nan
        est[f"u{r + 1}"] = {"u": list(map(float, u)), "mean_D": mean, "se": se}
        checks.append(_check(f"mean_D_u{r + 1}", mean, 1.0, 3 * se, abs(mean - 1.0) <= 3 * se))
    return est, checks


# --------------------------------------------------------------------------
# cauchy-limit


def _sim_cauchy_limit(cfg, paths):
    dims = cfg.dims
    K = dims.ncols
    if cfg.engine == "spectral":
        nsteps = _nsteps(cfg)
        steps = _record_steps(nsteps, cfg.thin)
        times = _step_times(steps, cfg, nsteps)
        run = simulate_spectral(dims, cfg.T, _streams(cfg, paths), record_times=times[1:],
                                settings=ClockSettings(dt_cap=cfg.dt))
        cols = {}
        for j in range(K):
            cols[f"a_{j + 1}"] = np.concatenate([np.zeros((len(paths), 1)), run.areas[:, :, j]], axis=1)
        spec0 = np.full(run.spectrum.shape[2], 1.0 / K) if dims.m == 1 else None
        for i in range(run.spectrum.shape[2]):
            name = f"lambda_{i + 1}" if dims.m == 1 else f"mu_{i + 1}"
            first = spec0[i] if spec0 is not None else np.nan
            cols[name] = np.concatenate([np.full((len(paths), 1), first), run.spectrum[:, :, i]], axis=1)
        B = len(paths)
        return PathBlock(np.asarray(paths), steps, times, cols, np.zeros(B, bool), [""] * B,
                         {"clock": run.clock, "rejected": run.n_rejected.astype(float)},
                         {"iterations": float(run.n_iter)})
    ob = AreaObserver(dims)

    def capture(U):
        return {f"a_{j + 1}": ob.a[:, j].copy() for j in range(K)}

    res, steps, times, cols = _run_unitary(cfg, paths, [ob], capture)
    return PathBlock(np.asarray(paths), steps, times, cols, res.flagged, res.flag_reason)


def _eval_cauchy_limit(cfg, blk):
    ok = ~blk.flagged
    K = cfg.dims.ncols
    target = float(cfg.m * (cfg.dims.n - cfg.m))
    x = np.stack([blk.columns[f"a_{j + 1}"][ok, -1] for j in range(K)], axis=1) / cfg.T
    fits = _fits(x, target)
    checks = _cauchy_checks("area", fits)
    try:
        indep = independence_report(x)
    except ValueError as exc:
        checks.append(_check("independence_ecf", None, "< 0.05", 0.05, False, error=str(exc)))
        return {"engine": cfg.engine, "target_scale": target, "fits": fits}, checks
    checks.append(_check("independence_ecf", max(d["abs_diff"] - 3 * d["se"] for d in indep), "< 0.05", 0.05,
                         all(d["pass"] for d in indep)))
    est = {"engine": cfg.engine, "target_scale": target, "fits": fits, "independence": indep}
    return est, checks


# --------------------------------------------------------------------------
# stiefel-winding


def _sim_stiefel_winding(cfg, paths):
    dims = cfg.dims
    K = dims.ncols
    if cfg.engine == "spectral":
        nsteps = _nsteps(cfg)
        steps = _record_steps(nsteps, cfg.thin)
        times = _step_times(steps, cfg, nsteps)
        run = simulate_spectral(dims, cfg.T, _streams(cfg, paths), record_times=times[1:],
                                settings=ClockSettings(dt_cap=cfg.dt))
        z = np.zeros((len(paths), 1))
        cols = {}
        for j in range(K):
            cols[f"theta_{j + 1}"] = np.concatenate([z, run.windings[:, :, j]], axis=1)
            cols[f"a_{j + 1}"] = np.concatenate([z, run.areas[:, :, j]], axis=1)
        B = len(paths)
        return PathBlock(np.asarray(paths), steps, times, cols, np.zeros(B, bool), [""] * B,
                         info={"max_modulus_residual": float("nan")})
    wob = WindingObserver(dims)
    aob = AreaObserver(dims)

    def capture(U):
        out = {f"theta_{j + 1}": wob.theta[:, j].copy() for j in range(K)}
        out.update({f"a_{j + 1}": aob.a[:, j].copy() for j in range(K)})
        Z = bottom_blocks(U, dims)
        lam = radial_batch(U, dims)
        res_ = np.abs(np.abs(np.linalg.det(Z)) ** 2 - np.real(np.linalg.det(lam)))
        out["modulus_residual"] = np.max(res_, axis=-1)
        return out

    res, steps, times, cols = _run_unitary(cfg, paths, [wob, aob], capture)
    return PathBlock(np.asarray(paths), steps, times, cols, res.flagged, res.flag_reason,
                     info={"max_modulus_residual": wob.max_modulus_residual})


def _eval_stiefel_winding(cfg, blk):
    ok = ~blk.flagged
    K = cfg.dims.ncols
    target = float(cfg.m * (cfg.dims.n - cfg.m))
    th = np.stack([blk.columns[f"theta_{j + 1}"][ok, -1] for j in range(K)], axis=1) / cfg.T
    ar = np.stack([blk.columns[f"a_{j + 1}"][ok, -1] for j in range(K)], axis=1) / cfg.T
    fth = _fits(th, target)
    far = _fits(ar, target)
    checks = _cauchy_checks("winding", fth, ks=False)
    for a, b in zip(fth, far):
        if "error" in a or "error" in b:
            continue
        se = math.hypot(a["se_scale"], b["se_scale"])
        d = a["scale"] - b["scale"]
        checks.append(_check(f"winding_area_agreement_{a['component']}", d, 0.0, 3 * se, abs(d) <= 3 * se))
    mod = blk.info.get("max_modulus_residual", float("nan"))
    if cfg.engine == "unitary":
        checks.append(_check("modulus_identity", mod, 0.0, 1e-10, mod < 1e-10))
    est = {"engine": cfg.engine, "target_scale": target, "winding_fits": fth, "area_fits": far,
           "max_modulus_residual": mod}
    return est, checks


# --------------------------------------------------------------------------
# horizontal-lift


def lift_along_path(Us, dims: FlagDims, proj_interval: int = 64):
    """Run the horizontal lift along a sampled unitary path.

    Parameters
    ----------
    Us : ndarray, shape (S+1, n, n)
    dims : FlagDims

    Returns
    -------
    dict
        Per-step residual arrays (length ``S+1``) and connection-form
        increments along ``U`` and along the lift ``X``.
    """
    S = len(Us) - 1
    K = dims.ncols
    w_prev = project_affine(Us[0], dims)
    lift = horizontal_lift_start(w_prev)
    n = dims.n
    out = {k_: np.zeros(S + 1) for k_ in ("res_unitary", "res_det", "res_projection")}
    out["eta_U"] = np.zeros((S, K))
    out["eta_X"] = np.zeros((S, K))

    def residuals(lift, w):
        X = lift.X
        ru = float(np.linalg.norm(np.conj(X.T) @ X - np.eye(n)))
        rd = float(np.max(np.abs(np.linalg.det(lift.Theta) - 1.0)))
        rp = float(np.max(np.abs(project_affine(X, dims).w - w.w)))
        return ru, rd, rp

    out["res_unitary"][0], out["res_det"][0], out["res_projection"][0] = residuals(lift, w_prev)
    for s in range(S):
        w_next = project_affine(Us[s + 1], dims)
        da = area_increment(w_prev, w_next)
        X_prev = lift.X
        lift = horizontal_lift_step(lift, w_prev, w_next, None, None, da, proj_interval)
        out["eta_U"][s] = connection_form_increment(Us[s], Us[s + 1], dims)
        out["eta_X"][s] = connection_form_increment(X_prev, lift.X, dims)
        out["res_unitary"][s + 1], out["res_det"][s + 1], out["res_projection"][s + 1] = residuals(lift, w_next)
        w_prev = w_next
    return out


def _sim_horizontal_lift(cfg, paths):
    dims = cfg.dims
    K = dims.ncols
    nsteps = _nsteps(cfg)
    steps = _record_steps(nsteps, cfg.thin)
    times = _step_times(steps, cfg, nsteps)
    B = len(paths)
    cols = {k_: np.zeros((B, len(steps))) for k_ in ("res_unitary", "res_det", "res_projection")}
    maxres = np.zeros((B, 3))
    qv_U = np.zeros((B, K))
    abs_X = np.zeros((B, K))
    flagged = np.zeros(B, bool)
    reasons = [""] * B
    for i, p in enumerate(paths):
        keep = []
        res = run_unitary_batch(fourier_start(dims)[None], cfg.T, cfg.dt, [RngStream(cfg.master_seed, int(p))],
                                [AreaObserver(dims)],
                                on_step=lambda s, t, U, alive: keep.append(U[0].copy()))
        if res.flagged[0] or len(keep) != nsteps:
            flagged[i], reasons[i] = True, res.flag_reason[0] or "refined path"
            continue
        Us = np.concatenate([fourier_start(dims)[None], np.array(keep)])
        try:
            o = lift_along_path(Us, dims)
        except (StepTooLarge, FlagflowError) as exc:
            flagged[i], reasons[i] = True, str(exc)
            continue
        for name in cols:
            cols[name][i] = o[name][steps]
        maxres[i] = [o["res_unitary"].max(), o["res_det"].max(), o["res_projection"].max()]
        qv_U[i] = np.sum(o["eta_U"] ** 2, axis=0)
        abs_X[i] = np.sum(np.abs(o["eta_X"]), axis=0)
    return PathBlock(np.asarray(paths), steps, times, cols, flagged, reasons,
                     {"max_residuals": maxres, "eta_qv_U": qv_U, "eta_abs_X": abs_X})


def _eval_horizontal_lift(cfg, blk):
    ok = ~blk.flagged
    mr = blk.extra["max_residuals"][ok]
    names = ("unitarity", "det_theta", "projection")
    worst = mr.max(axis=0) if mr.size else np.full(3, np.nan)
    checks = [_check(f"lift_{nm}", float(v), 0.0, 1e-8, v < 1e-8) for nm, v in zip(names, worst)]
    est = {
        "max_residuals": dict(zip(names, map(float, worst))),
        "connection_qv_slope_along_U": (blk.extra["eta_qv_U"][ok].mean(axis=0) / cfg.T).tolist(),
        "connection_abs_sum_along_lift": blk.extra["eta_abs_X"][ok].mean(axis=0).tolist(),
    }
    return est, checks


# --------------------------------------------------------------------------
# registry and runner

_REGISTRY: Dict[str, tuple] = {
    "unitary-qv": (_sim_unitary_qv, _eval_unitary_qv),
    "flag-generator": (_sim_flag_generator, _eval_flag_generator),
    "radial-match": (_sim_radial_match, _eval_radial_match),
    "jacobi-stationary": (_sim_jacobi_stationary, _eval_jacobi_stationary),
    "area-covariation": (_sim_area_covariation, _eval_area_covariation),
    "martingale": (_sim_martingale, _eval_martingale),
    "cauchy-limit": (_sim_cauchy_limit, _eval_cauchy_limit),
    "stiefel-winding": (_sim_stiefel_winding, _eval_stiefel_winding),
    "horizontal-lift": (_sim_horizontal_lift, _eval_horizontal_lift),
}


def _sim_chunk(args):
    cfg_dict, paths = args
    cfg = ExperimentConfig(**cfg_dict)
    return _REGISTRY[cfg.experiment][0](cfg, np.asarray(paths))


def simulate_paths(cfg: ExperimentConfig, workers: int = 1, chunk: Optional[int] = None) -> PathBlock:
    """Simulate every path of a resolved configuration.

    Parameters
    ----------
    cfg : ExperimentConfig
    workers : int
        Process-pool size; 1 runs in-process.
    chunk : int, optional
        Paths per task; defaults to an even split over the workers.
    """
    cfg = cfg.resolved()
    idx = np.arange(cfg.n_paths)
    if chunk is None:
        chunk = int(math.ceil(cfg.n_paths / max(1, workers)))
    parts = [idx[i : i + chunk] for i in range(0, cfg.n_paths, chunk)]
    tasks = [(cfg.to_dict(), p) for p in parts]
    if workers > 1 and len(parts) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            blocks = list(ex.map(_sim_chunk, tasks))
    else:
        blocks = [_sim_chunk(t) for t in tasks]
    return PathBlock.merge(blocks)


def evaluate(cfg: ExperimentConfig, blk: PathBlock):
    """Estimator outputs and checks for merged path data."""
    return _REGISTRY[cfg.experiment][1](cfg, blk)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_paths_csv(path: str, blk: PathBlock) -> None:
    """Write thinned path records with 17 significant digits."""
    names, arrays = [], []
    for c, arr in blk.columns.items():
        if np.iscomplexobj(arr):
            names += [c + "_re", c + "_im"]
            arrays += [arr.real, arr.imag]
        else:
            names.append(c)
            arrays.append(arr)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path_index", "step", "time"] + names)
        for i, p in enumerate(blk.paths):
            for r, (s, t) in enumerate(zip(blk.steps, blk.times)):
                wr.writerow([int(p), int(s), _fmt(t)] + [_fmt(a[i, r]) for a in arrays])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k_): _jsonable(v) for k_, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def run_experiment(
    config: ExperimentConfig, workers: int = 1, json_only: bool = False, write: bool = True
) -> ExperimentResult:
    """Run an experiment and write ``paths.csv`` and ``summary.json``.

    Parameters
    ----------
    config : ExperimentConfig
    workers : int
    json_only : bool
        Skip ``paths.csv``.
    write : bool
        Skip both files (the summary is still returned).

    Returns
    -------
    ExperimentResult
        ``exit_code`` is 0 when every check passes and 1 otherwise.

    Raises
    ------
    RuntimeFailure
        When more than 1% of the paths were flagged; the summary (already
        written) is attached as ``diagnostics``.
    """
    cfg = config.resolved()
    t0 = time.perf_counter()
    blk = simulate_paths(cfg, workers=workers)
    n_flag = int(np.sum(blk.flagged))
    frac = n_flag / cfg.n_paths
    est, checks = evaluate(cfg, blk) if n_flag < cfg.n_paths else ({}, [])
    reasons = {}
    for r in blk.reasons:
        if r:
            key = r.split(" at step")[0]
            reasons[key] = reasons.get(key, 0) + 1
    verdict = bool(checks) and all(c["pass"] for c in checks) and frac <= FLAG_LIMIT
    summary = {
        "version": __version__,
        "config": cfg.to_dict(),
        "n_paths": cfg.n_paths,
        "n_flagged": n_flag,
        "flagged_fraction": frac,
        "flag_reasons": reasons,
        "estimates": est,
        "checks": checks,
        "verdict": verdict,
        "runtime_seconds": time.perf_counter() - t0,
    }
    summary = _jsonable(summary)
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        if not json_only:
            write_paths_csv(os.path.join(cfg.output_dir, "paths.csv"), blk)
        with open(os.path.join(cfg.output_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=False)
            fh.write("\n")
    if frac > FLAG_LIMIT:
        raise RuntimeFailure(f"{n_flag} of {cfg.n_paths} paths flagged", diagnostics=summary)
    return ExperimentResult(summary, 0 if verdict else 1, blk)
