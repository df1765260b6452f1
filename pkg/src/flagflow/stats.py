"""Estimators and tests that turn simulated samples into verdicts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import LengthMismatch, NoConvergence

__all__ = [
    "CauchyFit",
    "TestReport",
    "cauchy_fit",
    "cauchy_cdf",
    "kolmogorov_sf",
    "ks_test",
    "ecf",
    "ecf_with_se",
    "realized_covariation",
]

MAX_NEWTON = 200


@dataclass(frozen=True)
class CauchyFit:
    """Maximum-likelihood Cauchy parameters.

    Attributes
    ----------
    location : float
    scale : float
    se_scale : float
        Standard error of ``scale`` from the observed information.
    se_location : float
    n_samples : int
    """

    location: float
    scale: float
    se_scale: float
    se_location: float = float("nan")
    n_samples: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class TestReport:
    """Outcome of a goodness-of-fit test.

    Attributes
    ----------
    statistic : float
    p_approx : float
    n_samples : int
    verdict : bool
        ``True`` when ``p_approx > level``.
    level : float
    """

    __test__ = False

    statistic: float
    p_approx: float
    n_samples: int
    verdict: bool
    level: float = 0.01


def _cauchy_loglik_derivs(x, x0, g):
    r = x - x0
    q = r * r + g * g
    n = x.size
    ll = n * np.log(g) - np.sum(np.log(q)) - n * np.log(np.pi)
    grad = np.array([np.sum(2 * r / q), n / g - np.sum(2 * g / q)])
    h_ll = np.sum((2 * r * r - 2 * g * g) / q**2)
    h_lg = -np.sum(4 * r * g / q**2)
    h_gg = -n / g**2 - np.sum((2 * r * r - 2 * g * g) / q**2)
    H = np.array([[h_ll, h_lg], [h_lg, h_gg]])
    return ll, grad, H


def cauchy_fit(samples, tol: float = 1e-12) -> CauchyFit:
    """Fit location and scale of a Cauchy law by Newton's method.

    Parameters
    ----------
    samples : array_like
        At least 100 finite values.
    tol : float
        Relative tolerance on the Newton step.

    Returns
    -------
    CauchyFit

    Raises
    ------
    NoConvergence
        When the iteration fails within 200 steps or the sample is
        degenerate; ``fallback`` holds the (median, half-IQR) start.
    ValueError
        For fewer than 100 samples.

    Examples
    --------
    >>> p = (np.arange(10000) + 0.5) / 10000
    >>> fit = cauchy_fit(np.tan(np.pi * (p - 0.5)))
    >>> round(fit.scale, 2)
    1.0
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise ValueError("cauchy_fit needs at least 100 samples")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    x0, g = float(med), float(0.5 * (q3 - q1))
    start = (x0, g)
    if not g > 0:
        raise NoConvergence("degenerate sample: zero interquartile range", fallback=start)
    ll, grad, H = _cauchy_loglik_derivs(x, x0, g)
    for _ in range(MAX_NEWTON):
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad * g * g / x.size
        if not np.all(np.isfinite(step)):
            break
        # fall back to gradient ascent when the Hessian is not negative definite
        if grad @ step <= 0:
            step = grad * g * g / x.size
        t = 1.0
        while True:
            nx0, ng = x0 + t * step[0], g + t * step[1]
            if ng > 0:
                nll, ngrad, nH = _cauchy_loglik_derivs(x, nx0, ng)
                if nll >= ll - 1e-12 * abs(ll):
                    break
            t *= 0.5
            if t < 1e-12:
                raise NoConvergence("line search failed", fallback=start)
        done = abs(t * step[0]) <= tol * (abs(x0) + g) and abs(t * step[1]) <= tol * g
        x0, g, ll, grad, H = nx0, ng, nll, ngrad, nH
        if done:
            cov = np.linalg.inv(-H)
            return CauchyFit(float(x0), float(g), float(np.sqrt(cov[1, 1])), float(np.sqrt(cov[0, 0])), int(x.size))
    raise NoConvergence("Newton iteration did not converge in 200 steps", fallback=start)


def cauchy_cdf(location: float = 0.0, scale: float = 1.0) -> Callable:
    """Distribution function of a Cauchy law."""

    def F(x):
        return 0.5 + np.arctan((np.asarray(x, dtype=float) - location) / scale) / np.pi

    return F


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Asymptotic Kolmogorov tail ``2 sum (-1)^{j-1} exp(-2 j^2 lam^2)``."""
    if lam <= 0.1:
        return 1.0
    j = np.arange(1, terms + 1)
    val = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j**2 * lam**2))
    return float(min(1.0, max(0.0, val)))


def ks_test(samples, cdf: Callable, level: float = 0.01) -> TestReport:
    """One-sample Kolmogorov-Smirnov test.

    Parameters
    ----------
    samples : array_like
        At least 50 values.
    cdf : callable
        Vectorised distribution function.
    level : float
        Significance level for the verdict.

    Returns
    -------
    TestReport
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 50:
        raise ValueError("ks_test needs at least 50 samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    D = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    p = kolmogorov_sf(np.sqrt(n) * D)
    return TestReport(D, p, n, p > level, level)


def _phases(samples, u):
    x = np.asarray(samples, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    p = x @ u
    return np.cos(p), np.sign(p) * np.sin(np.abs(p))


def ecf_with_se(samples, u):
    """Empirical characteristic function and the standard errors of its parts.

    Parameters
    ----------
    samples : ndarray, shape (N, d)
    u : ndarray, shape (d,)

    Returns
    -------
    value : complex
    se_re, se_im : float
    """
    c, s = _phases(samples, u)
    n = c.size
    if n < 100:
        raise ValueError("ecf needs at least 100 samples")
    val = complex(np.mean(c), np.mean(s))
    return val, float(np.std(c, ddof=1) / np.sqrt(n)), float(np.std(s, ddof=1) / np.sqrt(n))


def ecf(samples, u) -> complex:
    """Sample mean of ``exp(i u . x)``; ``ecf(x, -u)`` is the exact conjugate of ``ecf(x, u)``."""
    return ecf_with_se(samples, u)[0]


def realized_covariation(incr_a, incr_b) -> float:
    """Sum of products of paired increments.

    Raises
    ------
    LengthMismatch
        When the sequences differ in length.
    """
    a = np.asarray(incr_a, dtype=float).ravel()
    b = np.asarray(incr_b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"lengths {a.size} and {b.size} differ")
    return float(np.dot(a, b))
