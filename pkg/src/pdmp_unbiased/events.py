"""First-event simulation for Poisson processes.

Rates are functions of the time elapsed since a channel's ``start``; all
returned event times are absolute (``start + duration``) so that a shared
draw in a coupled pair is one float on both sides.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .couplings import (
    CoupleDraw,
    ShiftedExpParams,
    couple_modified_antithetic,
    couple_shifted_exponentials,
)
from .errors import BoundViolationError, IterationCapError

DEFAULT_MAX_PROPOSALS = 1_000_000
DOMINATION_TOL = 1e-9


@dataclass(frozen=True)
class AffineRate:
    """Intensity ``t -> (a + b t)_+ + c`` with ``c >= 0``."""

    a: float
    b: float
    c: float = 0.0

    def __call__(self, t: float) -> float:
        return max(self.a + self.b * t, 0.0) + self.c

    def shifted(self, s: float) -> "AffineRate":
        """The same intensity seen from time ``s`` onwards."""
        return AffineRate(self.a + self.b * s, self.b, self.c)

    def total_mass(self) -> float:
        """Integrated intensity over ``[0, inf)``."""
        if self.c > 0 or self.b > 0 or (self.b == 0 and self.a > 0):
            return np.inf
        if self.a <= 0:
            return 0.0
        return self.a * self.a / (2.0 * -self.b)

    def cumulative(self, t: float) -> float:
        """``int_0^t rate(s) ds``."""
        a, b, c = self.a, self.b, self.c
        if t <= 0:
            return 0.0
        out = c * t
        if b == 0:
            return out + max(a, 0.0) * t
        if b > 0:
            t0 = max(0.0, -a / b)
            if t > t0:
                u = t - t0
                out += max(a, 0.0) * u + 0.5 * b * u * u
            return out
        t1 = max(0.0, a / -b)
        u = min(t, t1)
        return out + a * u + 0.5 * b * u * u

    def inverse_cumulative(self, e: float) -> float:
        """Smallest ``t`` with ``cumulative(t) = e``; ``inf`` if never reached."""
        a, b, c = self.a, self.b, self.c
        if e <= 0:
            return 0.0
        if b == 0:
            r = max(a, 0.0) + c
            return e / r if r > 0 else np.inf
        if b > 0:
            t0 = max(0.0, -a / b)
            if c * t0 >= e:
                return e / c
            rest = e - c * t0
            lin = max(a, 0.0) + c
            return t0 + 2.0 * rest / (lin + np.sqrt(lin * lin + 2.0 * b * rest))
        t1 = max(0.0, a / -b)
        head = (a + c) * t1 + 0.5 * b * t1 * t1
        if e <= head:
            lin = a + c
            disc = max(lin * lin + 2.0 * b * e, 0.0)
            return 2.0 * e / (lin + np.sqrt(disc))
        return t1 + (e - head) / c if c > 0 else np.inf


class FirstEventDistribution:
    """Law of the first event after ``origin`` of an :class:`AffineRate`.

    Exposes ``ppf``/``logpdf``/``cdf`` on absolute times. The law may put
    mass at ``+inf`` when the integrated intensity is finite.
    """

    def __init__(self, rate: AffineRate, origin: float = 0.0):
        self.rate = rate
        self.origin = float(origin)

    @property
    def defective(self) -> bool:
        return not np.isinf(self.rate.total_mass())

    def ppf(self, u: float) -> float:
        return self.origin + self.rate.inverse_cumulative(-np.log1p(-u))

    def cdf(self, t):
        t = np.asarray(t, dtype=float) - self.origin
        return -np.expm1(-np.vectorize(self.rate.cumulative)(t))

    def logpdf(self, t: float) -> float:
        s = t - self.origin
        if s < 0 or not np.isfinite(s):
            return -np.inf
        lam = self.rate(s)
        if lam <= 0:
            return -np.inf
        return float(np.log(lam) - self.rate.cumulative(s))


def first_event_exact_affine(a: float, b: float, start: float, rng: np.random.Generator, c: float = 0.0) -> float:
    """First event after ``start`` for intensity ``(a + b t)_+ + c``.

    Inverts the integrated intensity in closed form. Returns ``inf`` when
    the process never fires.
    """
    e = rng.exponential()
    return start + AffineRate(a, b, c).inverse_cumulative(e)


Bound = Union[float, AffineRate]


@dataclass
class RateChannel:
    """An event intensity together with a dominating bound.

    ``rate(t)`` and ``bound`` are expressed in time since ``start``.
    ``exact`` holds the affine form when ``rate`` itself is invertible in
    closed form, in which case no thinning is needed.
    """

    rate: Callable[[float], float]
    bound: Bound
    start: float = 0.0
    exact: Optional[AffineRate] = None

    @classmethod
    def affine(cls, a: float, b: float, c: float = 0.0, start: float = 0.0) -> "RateChannel":
        r = AffineRate(a, b, c)
        return cls(rate=r, bound=r, start=start, exact=r)

    @classmethod
    def constant(cls, rate: float, start: float = 0.0) -> "RateChannel":
        return cls.affine(rate, 0.0, 0.0, start)

    def bound_rate(self) -> AffineRate:
        if isinstance(self.bound, AffineRate):
            return self.bound
        return AffineRate(float(self.bound), 0.0)

    def bound_law(self, now: float) -> FirstEventDistribution:
        """First-event law of the bound process from absolute time ``now``."""
        return FirstEventDistribution(self.bound_rate().shifted(now - self.start), now)

    def acceptance(self, when: float) -> float:
        s = when - self.start
        lam = float(self.rate(s))
        lam_bar = self.bound_rate()(s)
        if lam < 0:
            raise BoundViolationError(f"negative rate {lam!r}")
        if lam_bar <= 0:
            if lam > 0:
                raise BoundViolationError("bound vanishes where the rate does not")
            return 0.0
        ratio = lam / lam_bar
        if ratio > 1.0 + DOMINATION_TOL:
            raise BoundViolationError(f"rate {lam!r} exceeds bound {lam_bar!r} at t={s!r}")
        return min(ratio, 1.0)


@dataclass
class ThinningResult:
    time: float
    proposals: int


def _first_event(rate: AffineRate, now: float, rng: np.random.Generator) -> float:
    return first_event_exact_affine(rate.a, rate.b, now, rng, rate.c)


def _propose(ch: RateChannel, now: float, rng: np.random.Generator) -> float:
    return _first_event(ch.bound_rate().shifted(now - ch.start), now, rng)


def thin(
    ch: RateChannel,
    rng: np.random.Generator,
    now: Optional[float] = None,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> ThinningResult:
    """Thinning with a global bound, resumed from absolute time ``now``.

    Returns the accepted time and the number of proposals made.
    """
    tau = ch.start if now is None else now
    if ch.exact is not None:
        return ThinningResult(_first_event(ch.exact.shifted(tau - ch.start), tau, rng), 1)
    for n in range(1, max_proposals + 1):
        tau = _propose(ch, tau, rng)
        if np.isinf(tau):
            return ThinningResult(tau, n)
        if rng.random() < ch.acceptance(tau):
            return ThinningResult(tau, n)
    raise IterationCapError(f"thinning exceeded {max_proposals} proposals")


def first_event_thinning(
    ch: RateChannel,
    start: Optional[float],
    rng: np.random.Generator,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> float:
    """First event of ``ch`` after ``start`` (defaults to ``ch.start``).

    Proposals come from the bound and are accepted with probability
    ``rate / bound``. The closed form is *not* used even when available,
    so this is a genuine rejection sampler.
    """
    tau = ch.start if start is None else start
    for _ in range(max_proposals):
        tau = _propose(ch, tau, rng)
        if np.isinf(tau):
            return tau
        if rng.random() < ch.acceptance(tau):
            return tau
    raise IterationCapError(f"thinning exceeded {max_proposals} proposals")


@dataclass
class EventTimePair:
    """Absolute event times of two clocks started at ``start1``/``start2``.

    ``met_shifted`` is true iff both times come from one shared draw, i.e.
    the events are aligned once the lag is accounted for.
    """

    end1: float
    end2: float
    start1: float
    start2: float
    met_shifted: bool
    proposals1: int = 1
    proposals2: int = 1

    @property
    def t1(self) -> float:
        return self.end1 - self.start1

    @property
    def t2(self) -> float:
        return self.end2 - self.start2


Gamma = Callable[[float, float, np.random.Generator], CoupleDraw]


def default_gamma(ch1: RateChannel, ch2: RateChannel) -> Gamma:
    """Diagonal coupling of the two bound processes.

    Equal constant bounds use the shifted-exponential maximal coupling with
    antithetic residuals; anything else uses the modified antithetic
    coupling of the bound first-event laws.
    """
    r1, r2 = ch1.bound_rate(), ch2.bound_rate()
    if r1.b == 0 and r2.b == 0 and r1(0) == r2(0) and r1(0) > 0:
        rate = r1(0)

        def gamma(now1, now2, rng):
            return couple_shifted_exponentials(ShiftedExpParams(rate, now1, now2), rng)

        return gamma

    def gamma(now1, now2, rng):
        p1, p2 = ch1.bound_law(now1), ch2.bound_law(now2)
        if p1.defective or p2.defective:
            return CoupleDraw(p1.ppf(rng.random()), p2.ppf(rng.random()), False)
        return couple_modified_antithetic(p1, p2, rng)

    return gamma


def couple_first_events(
    ch1: RateChannel,
    ch2: RateChannel,
    rng: np.random.Generator,
    gamma: Optional[Gamma] = None,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> EventTimePair:
    """Coupled thinning of two channels.

    Each round draws the next bound events from ``gamma`` and tests both
    with one uniform. Joint acceptance of a met proposal returns a met
    pair; if only one side accepts, the other continues by plain thinning.
    """
    gamma = gamma or default_gamma(ch1, ch2)
    tau1, tau2 = ch1.start, ch2.start
    for n in range(1, max_proposals + 1):
        draw = gamma(tau1, tau2, rng)
        tau1, tau2 = draw.x, draw.y
        a1 = _acceptance(ch1, tau1)
        a2 = _acceptance(ch2, tau2)
        u = rng.random()
        ok1, ok2 = u < a1, u < a2
        if ok1 and ok2:
            return EventTimePair(tau1, tau2, ch1.start, ch2.start, draw.met, n, n)
        # a side whose bound never fires again is finished at +inf
        done1 = ok1 or np.isinf(tau1)
        done2 = ok2 or np.isinf(tau2)
        if done1 and done2:
            return EventTimePair(tau1, tau2, ch1.start, ch2.start, False, n, n)
        if done1:
            rest = thin(ch2, rng, tau2, max_proposals)
            return EventTimePair(tau1, rest.time, ch1.start, ch2.start, False, n, n + rest.proposals)
        if done2:
            rest = thin(ch1, rng, tau1, max_proposals)
            return EventTimePair(rest.time, tau2, ch1.start, ch2.start, False, n + rest.proposals, n)
    raise IterationCapError(f"coupled thinning exceeded {max_proposals} rounds")


def _acceptance(ch: RateChannel, when: float) -> float:
    if np.isinf(when):
        return 0.0
    if ch.exact is not None:
        return 1.0
    return ch.acceptance(when)


def sync_refreshment_clocks(
    s1: float, s2: float, lag: float, rate: float, rng: np.random.Generator
) -> EventTimePair:
    """Couple two ``Exp(rate)`` clocks started at ``s1`` and ``s2``.

    Maximises ``P(s1 + t1 = s2 + t2 + lag)``. ``end2`` is reported on the
    second clock; with ``lag = 0`` a met pair has bit-identical ends.
    """
    if not rate > 0:
        raise ValueError("refreshment rate must be positive")
    draw = couple_shifted_exponentials(ShiftedExpParams(rate, s1, s2 + lag), rng)
    end2 = draw.y if lag == 0 else draw.y - lag
    return EventTimePair(draw.x, end2, s1, s2, draw.met)
