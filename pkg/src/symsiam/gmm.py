"""Two-component 1-D Gaussian mixture fit by EM, and posterior scoring.

The component with the larger mean is the "high" one; for embedding
distances it stands for abnormal pairs, so ``posterior_abnormal`` is the
soft label.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InsufficientDataError, NumericError

VAR_FLOOR = 1e-6
MIN_SAMPLES = 4
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmParams:
    weight_low: float
    weight_high: float
    mean_low: float
    mean_high: float
    var_low: float
    var_high: float

    def __post_init__(self):
        if not (self.weight_low > 0 and self.weight_high > 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weight_low + self.weight_high - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if self.var_low < VAR_FLOOR or self.var_high < VAR_FLOOR:
            raise ValueError("variances must be >= the variance floor")
        if self.mean_high < self.mean_low:
            raise ValueError("mean_high must be >= mean_low")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        return cls(**{k: float(d[k]) for k in (
            "weight_low", "weight_high", "mean_low", "mean_high", "var_low", "var_high")})

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.weight_low, self.weight_high])

    @property
    def means(self) -> np.ndarray:
        return np.array([self.mean_low, self.mean_high])

    @property
    def variances(self) -> np.ndarray:
        return np.array([self.var_low, self.var_high])


def _log_weighted_densities(x: np.ndarray, w, mu, var) -> np.ndarray:
    """log(w_k * N(x; mu_k, var_k)) with shape (n, 2)."""
    x = x[:, None]
    return np.log(w) - 0.5 * (_LOG_2PI + np.log(var) + (x - mu) ** 2 / var)


def _responsibilities(x, w, mu, var) -> tuple[np.ndarray, float]:
    logp = _log_weighted_densities(x, w, mu, var)
    top = logp.max(axis=1, keepdims=True)
    log_norm = top + np.log(np.exp(logp - top).sum(axis=1, keepdims=True))
    resp = np.exp(logp - log_norm)
    return resp, float(log_norm.mean())


def log_likelihood(params: GmmParams, values) -> float:
    """Mean per-sample log-likelihood of ``values`` under ``params``."""
    x = np.asarray(values, dtype=np.float64)
    _, ll = _responsibilities(x, params.weights, params.means, params.variances)
    return ll


def median_split_init(values) -> GmmParams:
    """Initial parameters from the lower and upper halves of the sorted data."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    half = len(x) // 2
    lo, hi = x[:half], x[half:]
    # halves of sorted data are ordered, but their rounded means can swap by an ulp
    m_lo, m_hi = sorted((float(lo.mean()), float(hi.mean())))
    return GmmParams(
        weight_low=half / len(x),
        weight_high=1.0 - half / len(x),
        mean_low=m_lo,
        mean_high=m_hi,
        var_low=max(float(lo.var()), VAR_FLOOR),
        var_high=max(float(hi.var()), VAR_FLOOR),
    )


def fit_gmm(
    values,
    max_iters: int = 200,
    tol: float = 1e-6,
    init: tuple[np.ndarray, np.ndarray, np.ndarray] | GmmParams | None = None,
    history: list[float] | None = None,
) -> GmmParams:
    """Fit the two-component mixture to non-negative ``values`` with EM.

    Iteration stops when the mean log-likelihood improves by less than
    ``tol`` or after ``max_iters`` M-steps. Variances are clamped to
    ``VAR_FLOOR``. ``init`` may be a ``GmmParams`` or raw
    ``(weights, means, variances)`` arrays in any component order; the
    result is always ordered so that ``mean_high >= mean_low``. If
    ``history`` is given, the log-likelihood before the first and after
    every M-step is appended to it.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} values to fit, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in GMM input")

    if init is None:
        init = median_split_init(x)
    if isinstance(init, GmmParams):
        w, mu, var = init.weights, init.means, init.variances
    else:
        w, mu, var = (np.asarray(a, dtype=np.float64).copy() for a in init)

    n = x.size
    resp, ll = _responsibilities(x, w, mu, var)
    if history is not None:
        history.append(ll)
    for _ in range(max_iters):
        nk = resp.sum(axis=0)
        # a component that lost all support keeps its previous location
        nk_safe = np.maximum(nk, 1e-300)
        w = np.clip(nk / n, 1e-12, None)
        w = w / w.sum()
        mu = np.where(nk > 0, (resp * x[:, None]).sum(axis=0) / nk_safe, mu)
        var = np.where(nk > 0, (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk_safe, var)
        var = np.maximum(var, VAR_FLOOR)
        resp, new_ll = _responsibilities(x, w, mu, var)
        if history is not None:
            history.append(new_ll)
        done = abs(new_ll - ll) < tol
        ll = new_ll
        if done:
            break

    order = np.argsort(mu, kind="stable")
    w, mu, var = w[order], mu[order], var[order]
    return GmmParams(
        weight_low=float(w[0]),
        weight_high=float(1.0 - w[0]),
        mean_low=float(mu[0]),
        mean_high=float(mu[1]),
        var_low=float(var[0]),
        var_high=float(var[1]),
    )


def posterior_high(params: GmmParams, values) -> np.ndarray:
    """Posterior probability of the high-mean component, vectorized.

    Evaluated in log space. Where that still fails (non-finite input), the
    value is hard-assigned to the component with the nearer mean.
    """
    x = np.atleast_1d(np.asarray(values, dtype=np.float64))
    with np.errstate(over="ignore", invalid="ignore"):
        logp = _log_weighted_densities(x, params.weights, params.means, params.variances)
        post = 1.0 / (1.0 + np.exp(logp[:, 0] - logp[:, 1]))
    bad = ~np.isfinite(post)
    if bad.any():
        post[bad] = _hard_assign(params, x[bad])
    return post


def _hard_assign(params: GmmParams, x: np.ndarray) -> np.ndarray:
    """Nearer mean wins; ties go to the wider component, then to "high"."""
    with np.errstate(invalid="ignore"):
        d_low = np.abs(x - params.mean_low)
        d_high = np.abs(x - params.mean_high)
    tie = ~(d_low < d_high) & ~(d_high < d_low)
    out = (d_high < d_low).astype(float)
    out[tie] = 0.0 if params.var_low > params.var_high else 1.0
    return out


def posterior_abnormal(params: GmmParams, distance) -> float | np.ndarray:
    """Soft label P = h(D): probability that a pair at distance D is abnormal."""
    post = posterior_high(params, distance)
    return float(post[0]) if np.ndim(distance) == 0 else post
