"""Independent reference computations used by the tests.

Nothing here imports the package's own probability formulas; each value
is obtained by direct numerical integration or an elementary formula.
"""
from __future__ import annotations

import numpy as np
from scipy import integrate, stats


def binomial_band(p: float, n: int, width: float = 3.0) -> float:
    """Half-width of a ``width``-SE band around a binomial proportion."""
    return width * np.sqrt(max(p * (1 - p), 1e-12) / n)


def within_se(hits: int, n: int, p: float, width: float = 3.0) -> bool:
    return abs(hits / n - p) <= binomial_band(p, n, width)


def overlap_1d(pdf1, pdf2, lo=-np.inf, hi=np.inf, points=None) -> float:
    """``int min(p1, p2)`` by adaptive quadrature."""
    val, _ = integrate.quad(lambda x: min(pdf1(x), pdf2(x)), lo, hi, points=points, limit=400, epsabs=1e-12)
    return float(val)


def gaussian_overlap_quadrature(m1, m2, s1, s2) -> float:
    """Overlap of ``N(m1, s1^2 I)`` and ``N(m2, s2^2 I)`` in one or two dimensions."""
    m1, m2 = np.atleast_1d(m1).astype(float), np.atleast_1d(m2).astype(float)
    if m1.size == 1:
        p = stats.norm(m1[0], s1).pdf
        q = stats.norm(m2[0], s2).pdf
        pts = [m1[0], m2[0]]
        return overlap_1d(p, q, -50, 50, points=pts)
    p = stats.multivariate_normal(m1, s1**2 * np.eye(2)).pdf
    q = stats.multivariate_normal(m2, s2**2 * np.eye(2)).pdf
    r = 12 * max(s1, s2) + np.abs(m1 - m2).max()
    c = (m1 + m2) / 2
    val, _ = integrate.dblquad(
        lambda y, x: min(p([x, y]), q([x, y])),
        c[0] - r,
        c[0] + r,
        c[1] - r,
        c[1] + r,
        epsabs=1e-10,
    )
    return float(val)


def modified_antithetic_meet(p1, p2) -> float:
    """Meeting probability of the modified antithetic coupling.

    ``alpha * E[min(1, p2(X)/p1(X), p1(Y)/p2(Y))]`` with
    ``X = F1^-1(U)``, ``Y = F2^-1(1-U)``; ``alpha`` and the expectation
    are both one-dimensional integrals.
    """

    def r21(x):
        return np.exp(p2.logpdf(x) - p1.logpdf(x))

    def r12(y):
        return np.exp(p1.logpdf(y) - p2.logpdf(y))

    alpha = overlap_1d(p1.pdf, p2.pdf, -60, 60)
    inner, _ = integrate.quad(
        lambda u: min(1.0, r21(p1.ppf(u)), r12(p2.ppf(1 - u))), 0, 1, limit=400, epsabs=1e-12
    )
    return alpha * inner


def affine_cdf(a: float, b: float, c: float, t: float) -> float:
    """First-event CDF of intensity ``(a + b s)_+ + c`` by quadrature."""
    if t <= 0:
        return 0.0
    kink = -a / b if b != 0 and 0 < -a / b < t else None
    lam, _ = integrate.quad(lambda s: max(a + b * s, 0.0) + c, 0, t, points=[kink] if kink else None)
    return 1.0 - np.exp(-lam)


def effective_sample_size(x: np.ndarray) -> float:
    """Geyer's initial positive sequence estimate."""
    x = np.asarray(x, float) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2 * pair
    return n / tau
