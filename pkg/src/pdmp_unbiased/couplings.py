"""Randomised couplings of pairs of distributions.

Every kernel takes an explicit ``numpy.random.Generator`` and returns draws
from the two marginals. Meeting is tracked structurally: when a kernel
reports ``met=True`` both outputs are the *same object* produced by a
single shared draw, so no floating-point comparison is ever needed
downstream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol

import numpy as np
from scipy import stats

from .errors import IterationCapError

DEFAULT_MAX_ITER = 1_000_000
WEIGHT_TOL = 1e-12


@dataclass
class CoupleDraw:
    """A pair of coupled draws; ``met`` is true iff ``x is y``."""

    x: Any
    y: Any
    met: bool


def as_weight_vector(w) -> np.ndarray:
    """Validate a probability vector.

    Sums within ``1e-12`` of one are renormalised silently, anything further
    off is rejected.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weight vector must be one-dimensional and non-empty")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights sum to {total!r}, not 1")
    return w / total


def _first_index_above(cum: np.ndarray, u: float) -> int:
    # first i with cum[i] > u * total; scaling by the total absorbs rounding
    i = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return min(i, cum.size - 1)


def couple_discrete(w1, w2, rng: np.random.Generator) -> tuple[int, int]:
    """Maximal coupling of two categorical distributions.

    The residual branch uses one common uniform for both inverse-CDF
    lookups.

    Returns
    -------
    (i, j) : tuple of int
        ``i ~ Categorical(w1)``, ``j ~ Categorical(w2)`` with
        ``P(i == j) = sum(min(w1, w2))``.
    """
    w1 = as_weight_vector(w1)
    w2 = as_weight_vector(w2)
    if w1.size != w2.size:
        raise ValueError("weight vectors have different lengths")
    overlap = np.minimum(w1, w2)
    alpha = overlap.sum()
    u, v = rng.random(2)
    if alpha >= 1.0 or v < alpha:
        i = _first_index_above(np.cumsum(overlap), u)
        return i, i
    i = _first_index_above(np.cumsum(w1 - overlap), u)
    j = _first_index_above(np.cumsum(w2 - overlap), u)
    return i, j


@dataclass
class DensityPair:
    """Two samplers on a common space and their density ratios.

    ``ratio_qp(x)`` evaluates ``q(x)/p(x)`` and ``ratio_pq(y)`` evaluates
    ``p(y)/q(y)``.
    """

    sample_p: Callable[[np.random.Generator], Any]
    sample_q: Callable[[np.random.Generator], Any]
    ratio_qp: Callable[[Any], float]
    ratio_pq: Callable[[Any], float]


def _checked_ratio(value) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"density ratio must be finite and non-negative, got {value!r}")
    return value


def couple_thorisson(
    pair: DensityPair, rng: np.random.Generator, max_iter: int = DEFAULT_MAX_ITER
) -> CoupleDraw:
    """Thorisson's maximal coupling.

    Residual draws are independent of the first marginal. Raises
    :class:`IterationCapError` if the inner loop needs more than
    ``max_iter`` proposals.
    """
    x = pair.sample_p(rng)
    if rng.random() < _checked_ratio(pair.ratio_qp(x)):
        return CoupleDraw(x, x, True)
    for _ in range(max_iter):
        y = pair.sample_q(rng)
        if _checked_ratio(pair.ratio_pq(y)) < rng.random():
            return CoupleDraw(x, y, False)
    raise IterationCapError(f"Thorisson coupling exceeded {max_iter} proposals")


@dataclass
class IsoGaussianPair:
    """``N(mean1, scale1^2 C)`` and ``N(mean2, scale2^2 C)`` with ``C = L L^T``.

    ``cov_root`` is any shared square root ``L`` (triangular or symmetric);
    ``None`` means the identity.
    """

    mean1: np.ndarray
    mean2: np.ndarray
    scale1: float
    scale2: float
    cov_root: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mean1 = np.atleast_1d(np.asarray(self.mean1, dtype=float))
        self.mean2 = np.atleast_1d(np.asarray(self.mean2, dtype=float))
        if self.mean1.shape != self.mean2.shape:
            raise ValueError("means have different dimensions")
        if not (np.all(np.isfinite(self.mean1)) and np.all(np.isfinite(self.mean2))):
            raise ValueError("means must be finite")
        if not (self.scale1 > 0 and self.scale2 > 0):
            raise ValueError("scales must be positive")

    def whiten(self, x: np.ndarray) -> np.ndarray:
        if self.cov_root is None:
            return x
        return np.linalg.solve(self.cov_root, x)

    def colour(self, z: np.ndarray) -> np.ndarray:
        if self.cov_root is None:
            return z
        return self.cov_root @ z


def couple_reflection_maximal(g: IsoGaussianPair, rng: np.random.Generator) -> CoupleDraw:
    """Reflection-maximal coupling of two Gaussians with a common covariance."""
    if g.scale1 != g.scale2:
        raise ValueError("reflection-maximal coupling needs equal scales")
    sigma = g.scale1
    if np.array_equal(g.mean1, g.mean2):
        x = g.mean1 + sigma * g.colour(rng.standard_normal(g.mean1.size))
        return CoupleDraw(x, x, True)
    z = g.whiten(g.mean1 - g.mean2) / sigma
    e = z / np.linalg.norm(z)
    v = rng.standard_normal(z.size)
    log_u = np.log(rng.random())
    x = g.mean1 + sigma * g.colour(v)
    # N(v; 0, I) u < N(v + z; 0, I)
    if log_u < 0.5 * (v @ v - (v + z) @ (v + z)):
        return CoupleDraw(x, x, True)
    w = v - 2.0 * (e @ v) * e
    return CoupleDraw(x, g.mean2 + sigma * g.colour(w), False)


def gaussian_overlap(g: IsoGaussianPair) -> float:
    """``1 - TV`` between the two Gaussians of ``g``.

    Equal scales have the closed form ``2 Phi(-|z|/2)``. Otherwise the set
    where one density dominates is a ball, and both masses are
    non-central chi-squared probabilities.
    """
    m1 = g.whiten(g.mean1)
    m2 = g.whiten(g.mean2)
    d = m1.size
    s1, s2 = float(g.scale1), float(g.scale2)
    dist2 = float((m1 - m2) @ (m1 - m2))
    if s1 == s2:
        return float(2.0 * stats.norm.cdf(-np.sqrt(dist2) / (2.0 * s1)))
    a, b = 0.5 / s1**2, 0.5 / s2**2
    centre = (a * m1 - b * m2) / (a - b)
    # q >= p  <=>  (a - b) |x - c|^2 >= k
    k = a * b * dist2 / (a - b) - d * np.log(s1 / s2)
    r2 = k / (a - b)

    def chi2_cdf(level, mean, scale):
        if level <= 0:
            return 0.0
        nc = float((mean - centre) @ (mean - centre)) / scale**2
        x = level / scale**2
        return float(stats.chi2.cdf(x, d) if nc == 0 else stats.ncx2.cdf(x, d, nc))

    if s1 < s2:
        # q >= p outside the ball
        p_mass = 1.0 - chi2_cdf(r2, m1, s1)
        q_mass = chi2_cdf(r2, m2, s2)
    else:
        p_mass = chi2_cdf(r2, m1, s1)
        q_mass = 1.0 - chi2_cdf(r2, m2, s2)
    return float(np.clip(p_mass + q_mass, 0.0, 1.0))


def couple_scaled_gaussians(
    g: IsoGaussianPair, rng: np.random.Generator, max_iter: int = DEFAULT_MAX_ITER
) -> CoupleDraw:
    """Maximal coupling of two Gaussians with proportional covariances.

    Thorisson's construction in whitened coordinates. The meeting
    probability equals :func:`gaussian_overlap` but is never needed
    during sampling.
    """
    d = g.mean1.size
    m1 = g.whiten(g.mean1)
    m2 = g.whiten(g.mean2)
    s1, s2 = float(g.scale1), float(g.scale2)
    if s1 == s2 and np.array_equal(m1, m2):
        x = g.mean1 + s1 * g.colour(rng.standard_normal(d))
        return CoupleDraw(x, x, True)

    def log_p(w):
        r = (w - m1) / s1
        return -0.5 * (r @ r) - d * np.log(s1)

    def log_q(w):
        r = (w - m2) / s2
        return -0.5 * (r @ r) - d * np.log(s2)

    # ratios are capped at one, which leaves every accept test unchanged
    pair = DensityPair(
        sample_p=lambda r: m1 + s1 * r.standard_normal(d),
        sample_q=lambda r: m2 + s2 * r.standard_normal(d),
        ratio_qp=lambda w: np.exp(min(0.0, log_q(w) - log_p(w))),
        ratio_pq=lambda w: np.exp(min(0.0, log_p(w) - log_q(w))),
    )
    draw = couple_thorisson(pair, rng, max_iter)
    if draw.met:
        x = g.colour(draw.x)
        return CoupleDraw(x, x, True)
    return CoupleDraw(g.colour(draw.x), g.colour(draw.y), False)


class InverseCdfDistribution(Protocol):
    """One-dimensional law with a quantile function and a log-density.

    Frozen ``scipy.stats`` distributions satisfy this protocol.
    """

    def ppf(self, u): ...

    def logpdf(self, x): ...


def _ratio(num: InverseCdfDistribution, den: InverseCdfDistribution, x) -> float:
    ld = float(den.logpdf(x))
    ln = float(num.logpdf(x))
    if np.isnan(ld) or np.isnan(ln):
        raise ValueError("density ratio is NaN")
    if ln == -np.inf:
        return 0.0
    if ld == -np.inf:
        return np.inf
    return float(np.exp(ln - ld))


def couple_modified_antithetic(
    p1: InverseCdfDistribution, p2: InverseCdfDistribution, rng: np.random.Generator
) -> CoupleDraw:
    """Antithetic coupling with added mass on the diagonal.

    The base pair is ``(F1^-1(u), F2^-1(1 - u))``. An independent draw
    ``Z ~ p1`` accepted with probability ``min(1, p2/p1)`` replaces ``X``
    when ``U < p2(X)/p1(X)`` and ``Y`` when ``U < p1(Y)/p2(Y)``, with a
    common ``U``. Marginals are exact; the meeting probability is
    ``alpha * E[min(1, p2(X)/p1(X), p1(Y)/p2(Y))]`` which is at most the
    overlap ``alpha``.
    """
    u0 = rng.random()
    x = float(p1.ppf(u0))
    y = float(p2.ppf(1.0 - u0))
    u, v = rng.random(2)
    z = float(p1.ppf(rng.random()))
    take_x = take_y = False
    if v < _ratio(p2, p1, z):
        take_x = u < _ratio(p2, p1, x)
        take_y = u < _ratio(p1, p2, y)
    if take_x and take_y:
        return CoupleDraw(z, z, True)
    return CoupleDraw(z if take_x else x, z if take_y else y, False)


RESIDUAL_SCHEMES = ("independent", "common-random-number", "antithetic")


@dataclass
class ShiftedExpParams:
    """Two laws ``shift_i + Exp(rate)``."""

    rate: float
    shift1: float
    shift2: float
    residual_scheme: str = "antithetic"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not (np.isfinite(self.shift1) and np.isfinite(self.shift2)):
            raise ValueError("shifts must be finite")
        if self.residual_scheme not in RESIDUAL_SCHEMES:
            raise ValueError(f"unknown residual scheme {self.residual_scheme!r}")

    @property
    def overlap(self) -> float:
        return float(np.exp(-self.rate * abs(self.shift1 - self.shift2)))


def couple_shifted_exponentials(params: ShiftedExpParams, rng: np.random.Generator) -> CoupleDraw:
    """Maximal coupling of ``shift1 + Exp(rate)`` and ``shift2 + Exp(rate)``.

    Outputs are absolute values, not durations. With probability
    ``exp(-rate |shift1 - shift2|)`` both equal one shared draw beyond the
    larger shift; otherwise the residuals are drawn through their closed
    form inverse CDFs using the chosen residual scheme.
    """
    lam = params.rate
    lo, hi = sorted((params.shift1, params.shift2))
    if lo == hi:
        x = lo + rng.exponential(1.0 / lam)
        return CoupleDraw(x, x, True)
    mu = hi - lo
    alpha = np.exp(-lam * mu)
    u, v = rng.random(2)
    if v < alpha:
        x = hi - np.log1p(-u) / lam
        return CoupleDraw(x, x, True)
    if params.residual_scheme == "independent":
        w = rng.random()
    elif params.residual_scheme == "common-random-number":
        w = u
    else:
        w = 1.0 - u
    # residual of the later law lives on [hi, inf), the earlier one on [lo, hi)
    late = hi - np.log1p(-u) / lam
    early = lo - np.log1p(np.expm1(-lam * mu) * w) / lam
    early = min(early, np.nextafter(hi, -np.inf))
    if params.shift1 > params.shift2:
        return CoupleDraw(late, early, False)
    return CoupleDraw(early, late, False)
