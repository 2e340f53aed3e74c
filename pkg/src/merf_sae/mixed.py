"""Random-intercept machinery on residuals.

The model for the residuals ``e = y - offset`` is ``e_ij = v_i + eps_ij``
with ``v_i ~ N(0, sigma2_v)`` and ``eps_ij ~ N(0, sigma2_eps)``; the offset
enters with coefficient one, so there are no free regression parameters.

Covariance blocks ``V_i = sigma2_v J + sigma2_eps I`` are inverted
analytically; only :func:`blup_matrix` builds dense matrices, as a reference
path for testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .data import area_codes
from .exceptions import ConfigError

#: profile optimizer settings, reported in fit traces
OPTIMIZER = "profile ML: grid + Brent root of the profile score in log(sigma2_v/sigma2_eps)"
XTOL = 1e-14
_LOG_RATIO_BOUNDS = (-30.0, 30.0)


@dataclass(frozen=True)
class VarianceComponents:
    """Between-area ``sigma2_v``, unit-level ``sigma2_eps`` and the optional
    bias-corrected ``sigma2_bc``."""

    sigma2_v: float
    sigma2_eps: float
    sigma2_bc: float | None = None
    loglik: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sigma2_v) and self.sigma2_v >= 0):
            raise ConfigError(f"sigma2_v must be finite and >= 0, got {self.sigma2_v}")
        if not (np.isfinite(self.sigma2_eps) and self.sigma2_eps > 0):
            raise ConfigError(f"sigma2_eps must be finite and > 0, got {self.sigma2_eps}")
        if self.sigma2_bc is not None:
            if not (np.isfinite(self.sigma2_bc) and 0 <= self.sigma2_bc <= self.sigma2_eps):
                raise ConfigError("sigma2_bc must lie in [0, sigma2_eps]")

    @property
    def ratio(self) -> float:
        return self.sigma2_v / self.sigma2_eps


@dataclass(frozen=True)
class RandomEffects:
    """BLUPs ``v_hat`` for the sampled areas ``labels``."""

    labels: np.ndarray
    v_hat: np.ndarray

    def get(self, label) -> float:
        """Random effect of ``label``; 0 for areas without data."""
        for lab, v in zip(self.labels, self.v_hat):
            if lab == label:
                return float(v)
        return 0.0

    def as_dict(self) -> dict:
        return {lab: float(v) for lab, v in zip(self.labels, self.v_hat)}


def _summaries(e, area):
    labels, codes = area_codes(area)
    n_i = np.bincount(codes, minlength=len(labels)).astype(np.float64)
    ebar = np.bincount(codes, weights=e, minlength=len(labels)) / n_i
    ssw = float(np.sum((e - ebar[codes]) ** 2))
    return labels, codes, n_i, ebar, ssw


def _profile(gamma, n, n_i, ebar, ssw):
    """sigma2_eps maximizing the likelihood at ratio ``gamma`` and the
    corresponding log-likelihood."""
    d = 1.0 + n_i * gamma
    s2 = (ssw + np.sum(n_i * ebar ** 2 / d)) / n
    ll = -0.5 * (n * np.log(2 * np.pi) + n * np.log(s2) + np.sum(np.log(d)) + n)
    return s2, ll


def loglik(e, area, vc: VarianceComponents) -> float:
    """Gaussian log-likelihood of residuals under the random-intercept model."""
    e = np.asarray(e, dtype=np.float64)
    _, _, n_i, ebar, ssw = _summaries(e, area)
    s2e, s2v = vc.sigma2_eps, vc.sigma2_v
    lam = s2e + n_i * s2v
    return float(-0.5 * (e.size * np.log(2 * np.pi) + np.sum((n_i - 1) * np.log(s2e))
                         + np.sum(np.log(lam)) + ssw / s2e + np.sum(n_i * ebar ** 2 / lam)))


def fit_variance_components(offset, y, area) -> VarianceComponents:
    """Maximum-likelihood variance components for ``y = offset + Zv + eps``.

    The likelihood is profiled over ``sigma2_eps`` in closed form, leaving a
    one-dimensional search over ``log(sigma2_v / sigma2_eps)``: a coarse grid
    locates the basin, Brent's method solves the score equation in it to
    machine precision, and the boundary ``sigma2_v = 0`` is kept when it is at
    least as likely.
    """
    y = np.asarray(y, dtype=np.float64)
    e = y - np.asarray(offset, dtype=np.float64)
    if not np.all(np.isfinite(e)):
        raise ConfigError("offset and response must be finite")
    labels, _, n_i, ebar, ssw = _summaries(e, area)
    if len(labels) < 2:
        raise ConfigError("need at least two areas to estimate variance components")
    n = e.size
    scale = max(float(np.max(np.abs(e))), np.finfo(float).tiny)
    if ssw <= (64 * np.finfo(float).eps * scale) ** 2 * n:
        raise ConfigError(
            "residuals do not vary within areas, so the unit-level variance is "
            "degenerate; add a small jitter to the response")

    def neg(t):
        return -_profile(np.exp(t), n, n_i, ebar, ssw)[1]

    def score(t):
        # derivative of the profile log-likelihood with respect to log(gamma)
        gamma = np.exp(t)
        d = 1.0 + n_i * gamma
        s2 = (ssw + np.sum(n_i * ebar ** 2 / d)) / n
        ds2 = -np.sum(n_i ** 2 * ebar ** 2 / d ** 2) / n
        return -0.5 * gamma * (n * ds2 / s2 + np.sum(n_i / d))

    grid = np.linspace(*_LOG_RATIO_BOUNDS, 121)
    values = np.array([neg(t) for t in grid])
    k = int(np.argmin(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    t_best = grid[k]
    if score(lo) > 0 > score(hi):
        t = optimize.brentq(score, lo, hi, xtol=XTOL, rtol=4 * np.finfo(float).eps)
        if neg(t) <= values[k]:
            t_best = t
    gamma = float(np.exp(t_best))
    s2e, ll = _profile(gamma, n, n_i, ebar, ssw)
    s2e0, ll0 = _profile(0.0, n, n_i, ebar, ssw)
    if ll0 >= ll:
        return VarianceComponents(sigma2_v=0.0, sigma2_eps=float(s2e0), loglik=float(ll0))
    return VarianceComponents(sigma2_v=float(gamma * s2e), sigma2_eps=float(s2e),
                              loglik=float(ll))


def shrinkage(n_i, vc: VarianceComponents) -> np.ndarray:
    """``n_i sigma2_v / (n_i sigma2_v + sigma2_eps)`` per area."""
    n_i = np.asarray(n_i, dtype=np.float64)
    return n_i * vc.sigma2_v / (n_i * vc.sigma2_v + vc.sigma2_eps)


def blup(e, area, vc: VarianceComponents) -> RandomEffects:
    """BLUP of the area intercepts: the area mean of ``e`` shrunk towards 0."""
    e = np.asarray(e, dtype=np.float64)
    labels, _, n_i, ebar, _ = _summaries(e, area)
    return RandomEffects(labels=labels, v_hat=shrinkage(n_i, vc) * ebar)


def blup_matrix(e, area, vc: VarianceComponents) -> RandomEffects:
    """Reference BLUP ``H Z' V^{-1} e`` with dense matrices (small problems only)."""
    e = np.asarray(e, dtype=np.float64)
    labels, codes = area_codes(area)
    Z = np.zeros((e.size, len(labels)))
    Z[np.arange(e.size), codes] = 1.0
    H = vc.sigma2_v * np.eye(len(labels))
    V = Z @ H @ Z.T + vc.sigma2_eps * np.eye(e.size)
    v_hat = H @ Z.T @ linalg.solve(V, e, assume_a="pos")
    return RandomEffects(labels=labels, v_hat=v_hat)


def gll(e, v: RandomEffects, vc: VarianceComponents, area) -> float:
    """Generalized log-likelihood criterion (smaller is better).

    Sums, over sampled areas, the unit-level quadratic form of ``e - v_i``,
    ``v_i^2 / sigma2_v``, ``log sigma2_v`` and ``n_i log sigma2_eps``. With
    ``sigma2_v = 0`` the random effects are taken as 0 and the two
    ``sigma2_v`` terms are dropped.
    """
    e = np.asarray(e, dtype=np.float64)
    labels, codes = area_codes(area)
    lookup = v.as_dict()
    v_hat = np.array([lookup.get(lab, 0.0) for lab in labels])
    s2e, s2v = vc.sigma2_eps, vc.sigma2_v
    if s2v == 0.0:
        v_hat = np.zeros_like(v_hat)
    total = float(np.sum((e - v_hat[codes]) ** 2) / s2e + e.size * np.log(s2e))
    if s2v > 0.0:
        total += float(np.sum(v_hat ** 2) / s2v + len(labels) * np.log(s2v))
    return total
