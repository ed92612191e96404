"""Target distributions and the event-rate channels they induce.

A target is ``pi(x) ∝ exp(-U(x))`` for the bouncy particle and coordinate
samplers. For the boomerang sampler the same object is read as the
perturbation ``exp(-U(x))`` of the Gaussian reference ``N(x_star, Sigma)``
with ``Sigma = cov_root @ cov_root.T``.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy import stats

from .events import AffineRate, Bound, RateChannel


class Target:
    """Base class; subclasses provide ``potential`` and ``grad``."""

    dim: int
    x_star: np.ndarray
    cov_root: Optional[np.ndarray] = None

    def potential(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # rate channels -------------------------------------------------------

    def bounce_channel(self, x: np.ndarray, v: np.ndarray, start: float) -> RateChannel:
        """Rate ``<grad U(x + t v), v>_+`` along a straight line."""
        raise NotImplementedError

    def elliptic_channel(self, x: np.ndarray, v: np.ndarray, start: float) -> RateChannel:
        """Rate ``<grad U(x(t)), v(t)>_+`` along the boomerang flow."""
        raise NotImplementedError

    def coordinate_channel(
        self, x: np.ndarray, j: int, sign: float, start: float, refresh: float
    ) -> RateChannel:
        """Rate ``(sign * d_j U(x + t sign e_j))_+ + refresh``."""
        raise NotImplementedError

    def reference_cov(self) -> np.ndarray:
        if self.cov_root is None:
            return np.eye(self.dim)
        return self.cov_root @ self.cov_root.T


def _elliptic_path(x, v, x_star):
    dx = x - x_star

    def at(t):
        c, s = np.cos(t), np.sin(t)
        return x_star + dx * c + v * s, v * c - dx * s

    return at


class GaussianTarget(Target):
    """``U(x) = (x - mean)^T P (x - mean) / 2`` for a precision matrix ``P``.

    Straight-line and coordinate rates are affine in time and are simulated
    exactly. Along the boomerang flow the rate is bounded by the constant
    ``||P|| (E/2 + ||x_star - mean|| sqrt(E))`` with the conserved energy
    ``E = ||x - x_star||^2 + ||v||^2``.
    """

    def __init__(self, mean, precision=None, cov=None, x_star=None, cov_root=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.dim = self.mean.size
        if precision is None and cov is None:
            precision = np.eye(self.dim)
        if precision is None:
            precision = np.linalg.inv(np.asarray(cov, dtype=float))
        self.precision = np.atleast_2d(np.asarray(precision, dtype=float))
        if self.precision.shape != (self.dim, self.dim):
            raise ValueError("precision has the wrong shape")
        self.x_star = np.zeros(self.dim) if x_star is None else np.asarray(x_star, dtype=float)
        self.cov_root = None if cov_root is None else np.atleast_2d(np.asarray(cov_root, dtype=float))
        self._op_norm = float(np.linalg.norm(self.precision, 2))
        self._offset = float(np.linalg.norm(self.x_star - self.mean))

    @classmethod
    def standard(cls, dim: int) -> "GaussianTarget":
        return cls(np.zeros(dim))

    def potential(self, x):
        r = np.asarray(x, dtype=float) - self.mean
        return 0.5 * float(r @ self.precision @ r)

    def grad(self, x):
        return self.precision @ (np.asarray(x, dtype=float) - self.mean)

    def bounce_channel(self, x, v, start):
        a = float(self.grad(x) @ v)
        b = float(v @ self.precision @ v)
        return RateChannel.affine(a, b, 0.0, start)

    def elliptic_channel(self, x, v, start):
        energy = float((x - self.x_star) @ (x - self.x_star) + v @ v)
        bound = self._op_norm * (0.5 * energy + self._offset * np.sqrt(energy))
        at = _elliptic_path(x, v, self.x_star)

        def rate(t):
            xt, vt = at(t)
            return max(float(self.grad(xt) @ vt), 0.0)

        return RateChannel(rate=rate, bound=bound, start=start)

    def coordinate_channel(self, x, j, sign, start, refresh):
        a = sign * float(self.grad(x)[j])
        return RateChannel.affine(a, float(self.precision[j, j]), refresh, start)


class ZeroPotential(Target):
    """``U = 0``: for the boomerang this is exactly its Gaussian reference."""

    def __init__(self, dim: int, x_star=None, cov_root=None):
        self.dim = int(dim)
        self.x_star = np.zeros(self.dim) if x_star is None else np.asarray(x_star, dtype=float)
        self.cov_root = None if cov_root is None else np.atleast_2d(np.asarray(cov_root, dtype=float))

    def potential(self, x):
        return 0.0

    def grad(self, x):
        return np.zeros(self.dim)

    def bounce_channel(self, x, v, start):
        return RateChannel.affine(0.0, 0.0, 0.0, start)

    def elliptic_channel(self, x, v, start):
        return RateChannel.affine(0.0, 0.0, 0.0, start)

    def coordinate_channel(self, x, j, sign, start, refresh):
        return RateChannel.affine(0.0, 0.0, refresh, start)


BoundFn = Callable[[np.ndarray, np.ndarray], Bound]


class PotentialTarget(Target):
    """User-supplied potential with a thinning bound.

    ``bound(x, v)`` must return a constant or an :class:`AffineRate` that
    dominates the straight-line rate from ``(x, v)``; ``elliptic_bound``
    plays the same role along the boomerang flow.
    """

    def __init__(
        self,
        dim: int,
        potential: Callable[[np.ndarray], float],
        grad: Callable[[np.ndarray], np.ndarray],
        bound: BoundFn,
        elliptic_bound: Optional[BoundFn] = None,
        x_star=None,
        cov_root=None,
    ):
        self.dim = int(dim)
        self._potential = potential
        self._grad = grad
        self._bound = bound
        self._elliptic_bound = elliptic_bound
        self.x_star = np.zeros(self.dim) if x_star is None else np.asarray(x_star, dtype=float)
        self.cov_root = None if cov_root is None else np.atleast_2d(np.asarray(cov_root, dtype=float))

    def potential(self, x):
        return float(self._potential(np.asarray(x, dtype=float)))

    def grad(self, x):
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)

    def bounce_channel(self, x, v, start):
        def rate(t):
            return max(float(self.grad(x + t * v) @ v), 0.0)

        return RateChannel(rate=rate, bound=self._bound(x, v), start=start)

    def elliptic_channel(self, x, v, start):
        if self._elliptic_bound is None:
            raise ValueError("no bound supplied for the elliptic flow")
        at = _elliptic_path(x, v, self.x_star)

        def rate(t):
            xt, vt = at(t)
            return max(float(self.grad(xt) @ vt), 0.0)

        return RateChannel(rate=rate, bound=self._elliptic_bound(x, v), start=start)

    def coordinate_channel(self, x, j, sign, start, refresh):
        e = np.zeros(self.dim)
        e[j] = sign
        inner = self._bound(x, e)
        if isinstance(inner, AffineRate):
            bound = AffineRate(inner.a, inner.b, inner.c + refresh)
        else:
            bound = float(inner) + refresh

        def rate(t):
            return max(sign * float(self.grad(x + t * e)[j]), 0.0) + refresh

        return RateChannel(rate=rate, bound=bound, start=start)


def wishart_initial_law(dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Offset initial law ``N(Sigma^{1/2} 1, Sigma)`` with ``Sigma = inv(W)``.

    ``W ~ Wishart(df=dim, scale=I)``. Returns the mean and the symmetric
    square root of ``Sigma``.
    """
    w = np.atleast_2d(stats.wishart(df=dim, scale=np.eye(dim)).rvs(random_state=rng))
    sigma = np.linalg.inv(w)
    sigma = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(sigma)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return root @ np.ones(dim), root
