"""Unbiased estimators built from a lagged, coupled pair of trajectories.

Times below are the processes' own stochastic times. Process 1 at
stochastic time ``s`` is stored at aligned time ``s - lag`` (see
:mod:`pdmp_unbiased.coupled`), so ``Z1(n lag)`` and ``Z2((n-1) lag)`` are
looked up at the same aligned time ``(n-1) lag``. Once the pair has coupled
both lookups return the same segment and the difference is exactly zero.

Three families are provided, each in a single-index and an averaged form:

* discretised (``drg``/``adrg``): telescoping sums over the ``lag`` grid;
* doubly discretised (``ddrg``/``addrg``): each grid point is replaced by
  the mean over ``M`` sub-grid points spaced ``delta = lag / M``;
* continuous (``crg``/``acrg``): each grid point is replaced by the time
  average of ``h`` over the following window, integrated exactly along
  the piecewise deterministic path.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb, isclose
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .coupled import CoupledPair, require_coupled
from .pdmp import AFFINE, Segment, Trajectory

CLOSED_FORM_MAX_DEGREE = 4
QUAD_TOL = 1e-10


class TestFunction:
    """A test function ``h`` with an optional exact path integral.

    Parameters
    ----------
    fn
        ``x -> h(x)``.
    segment_integral
        ``(segment, a, b) -> int_a^b h(x(s)) ds`` for absolute times inside
        the segment. Without it integrals fall back to adaptive quadrature.
    constant
        Set when ``h`` is constant; estimators then return it exactly.
    """

    __test__ = False  # not a pytest class

    def __init__(
        self,
        fn: Callable[[np.ndarray], float],
        segment_integral: Optional[Callable[[Segment, float, float], float]] = None,
        constant: Optional[float] = None,
        name: str = "h",
    ):
        self.fn = fn
        self._segment_integral = segment_integral
        self.constant = constant
        self.name = name

    def __call__(self, x: np.ndarray) -> float:
        return float(self.fn(x))

    @property
    def uses_quadrature(self) -> bool:
        return self._segment_integral is None and self.constant is None

    def segment_integral(self, seg: Segment, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        if self.constant is not None:
            return self.constant * (b - a)
        if self._segment_integral is not None:
            return self._segment_integral(seg, a, b)
        return quad_segment_integral(seg, self.fn, a, b)

    def integral(self, traj: Trajectory, a: float, b: float) -> float:
        """``int_a^b h`` along a trajectory (aligned times)."""
        return float(sum(self.segment_integral(seg, lo, hi) for seg, lo, hi in traj.segments_between(a, b)))

    def window_mean(self, traj: Trajectory, a: float, b: float) -> float:
        if self.constant is not None:
            return self.constant
        return self.integral(traj, a, b) / (b - a)


def quad_segment_integral(seg: Segment, fn, a: float, b: float) -> float:
    """Adaptive quadrature of ``fn`` along a segment."""
    val, _ = integrate.quad(lambda t: float(fn(seg.at(t)[0])), a, b, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return float(val)


# polynomial path integrals -------------------------------------------------


def _power_integrals_affine(s0: float, s1: float, degree: int) -> np.ndarray:
    """``int_{s0}^{s1} s^q ds`` for ``q = 0..degree``."""
    q = np.arange(degree + 1)
    return (s1 ** (q + 1) - s0 ** (q + 1)) / (q + 1)


def _cos_power_antiderivative(q: int, th: float) -> float:
    if q == 0:
        return th
    if q == 1:
        return np.sin(th)
    if q == 2:
        return th / 2 + np.sin(2 * th) / 4
    if q == 3:
        s = np.sin(th)
        return s - s**3 / 3
    if q == 4:
        return 3 * th / 8 + np.sin(2 * th) / 4 + np.sin(4 * th) / 32
    raise ValueError("closed forms stop at degree 4")


def segment_integral_poly(seg: Segment, coeffs: Sequence[float], coord: int, a: float, b: float) -> float:
    """Exact ``int_a^b p(x_coord(s)) ds`` for ``p(y) = sum_p coeffs[p] y^p``.

    Affine paths give a polynomial in time; elliptic paths
    ``x* + R cos(s - phi)`` give a trigonometric polynomial. Both are
    integrated in closed form by binomial expansion, up to degree 4.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    deg = len(coeffs) - 1
    if deg > CLOSED_FORM_MAX_DEGREE:
        raise ValueError(f"degree {deg} exceeds the closed-form cap {CLOSED_FORM_MAX_DEGREE}")
    if b <= a:
        return 0.0
    s0, s1 = a - seg.t0, b - seg.t0
    x0, v0 = float(seg.x0[coord]), float(seg.v0[coord])
    total = 0.0
    if seg.kind == AFFINE:
        # (x0 + v s)^p = sum_q C(p, q) x0^(p-q) v^q s^q
        mom = _power_integrals_affine(s0, s1, deg)
        for p, c in enumerate(coeffs):
            if c == 0.0:
                continue
            total += c * sum(comb(p, q) * x0 ** (p - q) * v0**q * mom[q] for q in range(p + 1))
        return float(total)
    centre = float(seg.x_star[coord])
    dx = x0 - centre
    radius = np.hypot(dx, v0)
    phi = np.arctan2(v0, dx)
    th0, th1 = s0 - phi, s1 - phi
    cos_int = [_cos_power_antiderivative(q, th1) - _cos_power_antiderivative(q, th0) for q in range(deg + 1)]
    for p, c in enumerate(coeffs):
        if c == 0.0:
            continue
        total += c * sum(comb(p, q) * centre ** (p - q) * radius**q * cos_int[q] for q in range(p + 1))
    return float(total)


class CoordinatePolynomial(TestFunction):
    """``h(x) = sum_p coeffs[p] * x[coord]**p``.

    Path integrals are exact up to degree 4 and use quadrature above that.
    """

    def __init__(self, coord: int, coeffs: Sequence[float], name: Optional[str] = None):
        self.coord = int(coord)
        self.coeffs = np.asarray(coeffs, dtype=float)
        poly = np.polynomial.Polynomial(self.coeffs)
        closed = len(self.coeffs) - 1 <= CLOSED_FORM_MAX_DEGREE
        constant = float(self.coeffs[0]) if not np.any(self.coeffs[1:]) else None
        super().__init__(
            fn=lambda x: poly(x[self.coord]),
            segment_integral=(lambda seg, a, b: segment_integral_poly(seg, self.coeffs, self.coord, a, b)) if closed else None,
            constant=constant,
            name=name or f"poly(x[{self.coord}])",
        )


def constant_function(value: float = 1.0) -> CoordinatePolynomial:
    return CoordinatePolynomial(0, [value], name=f"const({value!r})")


def coordinate_moment(coord: int, power: int) -> CoordinatePolynomial:
    """``h(x) = x[coord]**power``."""
    coeffs = np.zeros(power + 1)
    coeffs[power] = 1.0
    return CoordinatePolynomial(coord, coeffs, name=f"x[{coord}]^{power}")


# configuration and reports -------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    """Grid of an estimator.

    ``lag`` is the window length, ``k`` the burn-in and ``m`` the last
    index averaged over. The doubly discretised family splits each window
    into ``M`` sub-steps of length ``delta = lag / M``.
    """

    lag: float
    k: int
    m: Optional[int] = None
    M: int = 1
    delta: Optional[float] = None

    def __post_init__(self):
        if not self.lag > 0:
            raise ValueError("lag must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.m is not None and self.m < self.k:
            raise ValueError("m must be at least k")
        if self.M < 1:
            raise ValueError("M must be a positive integer")
        if self.delta is not None and not isclose(self.delta * self.M, self.lag, rel_tol=1e-12):
            raise ValueError("lag must equal M * delta")

    @property
    def step(self) -> float:
        return self.lag / self.M if self.delta is None else self.delta

    def with_k(self, k: int) -> "EstimatorConfig":
        return EstimatorConfig(self.lag, k, max(self.m, k) if self.m is not None else None, self.M, self.delta)


@dataclass
class EstimatorReport:
    """One estimate and its bias-correction part."""

    value: float
    correction: float
    kappa: float
    windows_used: int
    events_total: int
    quadrature: bool = False


@dataclass
class Aggregate:
    mean: float
    se: float
    n: int


def aggregate(reports) -> Aggregate:
    """Mean and standard error over independent replicates."""
    vals = np.array([r.value if isinstance(r, EstimatorReport) else float(r) for r in reports])
    if vals.size < 2:
        raise ValueError("need at least two replicates")
    return Aggregate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size)), int(vals.size))


# helpers -------------------------------------------------------------------


def last_correction_index(kappa: float, lag: float, M: int = 1) -> int:
    """Largest index whose correction term can be non-zero.

    For sub-grid points ``n lag - j delta`` the difference vanishes once
    ``(n-1) lag - (M-1) delta >= kappa``, hence
    ``floor((kappa + lag + (M-1) delta) / lag)``; with ``M = 1`` this is
    ``floor((kappa + lag) / lag)``. Computed in exact rational arithmetic and
    nudged up if float rounding of the grid would place a dropped point
    before ``kappa``.
    """
    lag_q = Fraction(lag)
    extra = lag_q * (M - 1) / M
    n = int((Fraction(kappa) + lag_q + extra) // lag_q)
    # the grid itself is evaluated in floats; make sure the first dropped
    # block really lies at or after kappa
    step = lag / M
    while n * lag - (M - 1) * step < kappa:
        n += 1
    return n


def required_time(cfg: EstimatorConfig, kappa: float) -> float:
    """Aligned time both trajectories must reach for every family."""
    m = cfg.m if cfg.m is not None else cfg.k
    n_last = max(last_correction_index(kappa, cfg.lag, cfg.M), m, cfg.k)
    # continuous family integrates Z1 up to stochastic (n+1) lag
    return n_last * cfg.lag


def _check(pair: CoupledPair, cfg: EstimatorConfig) -> float:
    kappa = require_coupled(pair)
    if pair.lag != cfg.lag:
        raise ValueError("estimator lag differs from the pair's lag")
    need = required_time(cfg, kappa)
    if pair.traj1.end < need or pair.traj2.end < need:
        raise ValueError(f"trajectories end before the required aligned time {need!r}")
    return kappa


def _report(pair: CoupledPair, value: float, correction: float, h: TestFunction, quad: bool = False) -> EstimatorReport:
    return EstimatorReport(
        value=float(value),
        correction=float(correction),
        kappa=float(pair.kappa),
        windows_used=pair.window,
        events_total=pair.events_before + pair.events_after,
        quadrature=quad and h.uses_quadrature,
    )


# discretised ---------------------------------------------------------------


def _grid_diff(pair, h, n: int) -> float:
    # h(Z1(n lag)) - h(Z2((n-1) lag)), both at aligned time (n-1) lag
    t = (n - 1) * pair.lag
    return h(pair.traj1.state(t).x) - h(pair.traj2.state(t).x)


def drg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """``h(Z1(k lag)) + sum_{n=k+1}^{N} [h(Z1(n lag)) - h(Z2((n-1) lag))]``."""
    kappa = _check(pair, cfg)
    k = cfg.k
    head = h(pair.traj1.state((k - 1) * pair.lag).x)
    corr = sum(_grid_diff(pair, h, n) for n in range(k + 1, last_correction_index(kappa, pair.lag) + 1))
    return _report(pair, head + corr, corr, h)


def adrg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """Mean of ``drg`` over burn-in indices ``k..m`` in closed form."""
    kappa = _check(pair, cfg)
    k, m = cfg.k, cfg.m if cfg.m is not None else cfg.k
    span = m - k + 1
    head = sum(h(pair.traj1.state((l - 1) * pair.lag).x) for l in range(k, m + 1)) / span
    corr = 0.0
    for l in range(k + 1, last_correction_index(kappa, pair.lag) + 1):
        corr += min(1.0, (l - k) / span) * _grid_diff(pair, h, l)
    return _report(pair, head + corr, corr, h)


# doubly discretised --------------------------------------------------------


def _block_values(traj: Trajectory, h, t_end: float, step: float, M: int) -> list[float]:
    return [h(traj.state(t_end - j * step).x) for j in range(M)]


def _block_mean(traj, h, t_end, step, M) -> float:
    if h.constant is not None:
        return h.constant
    return sum(_block_values(traj, h, t_end, step, M)) / M


def _block_diff_sum(pair, h, n, step, M) -> float:
    # sum_j h(Z1(n lag - j delta)) - h(Z2((n-1) lag - j delta))
    t = (n - 1) * pair.lag
    a = _block_values(pair.traj1, h, t, step, M)
    b = _block_values(pair.traj2, h, t, step, M)
    return sum(x - y for x, y in zip(a, b))


def ddrg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """Doubly discretised estimator with ``M`` sub-grid points per window."""
    kappa = _check(pair, cfg)
    if cfg.k < 1:
        raise ValueError("the doubly discretised family needs k >= 1")
    k, M, step = cfg.k, cfg.M, cfg.step
    head = _block_mean(pair.traj1, h, (k - 1) * pair.lag, step, M)
    corr = 0.0
    for n in range(k + 1, last_correction_index(kappa, pair.lag, M) + 1):
        corr += _block_diff_sum(pair, h, n, step, M)
    corr /= M
    return _report(pair, head + corr, corr, h)


def addrg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """Mean of ``ddrg`` over ``k..m`` with weights ``min(1/M, (l-k)/(M(m-k+1)))``."""
    kappa = _check(pair, cfg)
    if cfg.k < 1:
        raise ValueError("the doubly discretised family needs k >= 1")
    k, m, M, step = cfg.k, cfg.m if cfg.m is not None else cfg.k, cfg.M, cfg.step
    span = m - k + 1
    if h.constant is not None:
        head = h.constant
    else:
        head = sum(sum(_block_values(pair.traj1, h, (l - 1) * pair.lag, step, M)) for l in range(k, m + 1)) / (M * span)
    corr = 0.0
    for l in range(k + 1, last_correction_index(kappa, pair.lag, M) + 1):
        corr += min(1.0 / M, (l - k) / (M * span)) * _block_diff_sum(pair, h, l, step, M)
    return _report(pair, head + corr, corr, h)


# continuous ----------------------------------------------------------------


def _window_diff(pair, h, n) -> float:
    # (1/lag) int_{n lag}^{(n+1) lag} h(Z1(s)) - h(Z2(s - lag)) ds,
    # i.e. aligned window [(n-1) lag, n lag] on both trajectories
    a, b = (n - 1) * pair.lag, n * pair.lag
    return h.window_mean(pair.traj1, a, b) - h.window_mean(pair.traj2, a, b)


def crg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """Window average of ``h(Z1)`` over ``[k lag, (k+1) lag]`` plus telescoping corrections."""
    kappa = _check(pair, cfg)
    k, lag = cfg.k, pair.lag
    head = h.window_mean(pair.traj1, (k - 1) * lag, k * lag)
    corr = sum(_window_diff(pair, h, n) for n in range(k + 1, last_correction_index(kappa, lag) + 1))
    return _report(pair, head + corr, corr, h, quad=True)


def acrg(pair: CoupledPair, h: TestFunction, cfg: EstimatorConfig) -> EstimatorReport:
    """Time average of ``h(Z1)`` over ``[k lag, (m+1) lag]`` plus weighted corrections."""
    kappa = _check(pair, cfg)
    k, m, lag = cfg.k, cfg.m if cfg.m is not None else cfg.k, pair.lag
    span = m - k + 1
    head = h.window_mean(pair.traj1, (k - 1) * lag, m * lag)
    corr = 0.0
    for l in range(k + 1, last_correction_index(kappa, lag) + 1):
        corr += min(1.0, (l - k) / span) * _window_diff(pair, h, l)
    return _report(pair, head + corr, corr, h, quad=True)


ESTIMATORS = {
    "drg": drg,
    "adrg": adrg,
    "ddrg": ddrg,
    "addrg": addrg,
    "crg": crg,
    "acrg": acrg,
}
