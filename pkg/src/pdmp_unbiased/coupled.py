"""Lagged couplings of two PDMPs.

Both processes live on one *aligned* clock: process 1 at stochastic time
``s`` sits at aligned time ``s - lag`` and process 2 at aligned time ``s``.
Process 1 alone covers the aligned lead-in ``[-lag, 0]``; afterwards both
are advanced window by window over ``[k lag, (k+1) lag]``. The pair is
coupled at aligned time ``kappa`` once positions, velocities and clocks agree
structurally, i.e. ``Z1(kappa + lag + t) = Z2(kappa + t)`` for all ``t >= 0``.

From ``kappa`` on a single process is simulated and its segments are shared
by both trajectories, so evaluating either trajectory at the same aligned
time gives bit-identical states.

Inside a window the two processes move in lockstep: every iteration each
process jumps to its own next event. Refreshment clocks and, optionally,
bounce clocks are drawn from couplings that put mass on equal aligned event
times. Each process only ever discards its own pending clocks, and every
draw has the single-process law given the joint past, so each marginal is
an exact sampler.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .couplings import (
    IsoGaussianPair,
    couple_discrete,
    couple_modified_antithetic,
    couple_reflection_maximal,
    couple_scaled_gaussians,
)
from .errors import NotCoupledError
from .events import (
    CoupleDraw,
    FirstEventDistribution,
    RateChannel,
    couple_first_events,
    sync_refreshment_clocks,
    thin,
)
from .pdmp import (
    BPS,
    IOCS,
    Boomerang,
    EventCounts,
    PhaseState,
    Sampler,
    Trajectory,
    advance,
    iocs_index,
    iocs_velocity,
)

MODES = ("durmus-only", "resync", "resync+bounce-coupling")
DEFAULT_MODE = "resync+bounce-coupling"


@dataclass
class WindowReport:
    """Event counts of one window; ``shared`` counts post-coupling events once."""

    index: int
    coupled: bool
    events_1: int = 0
    events_2: int = 0
    shared: int = 0

    @property
    def total(self) -> int:
        return self.events_1 + self.events_2 + self.shared


@dataclass
class CoupledPair:
    """Two lagged trajectories on the aligned clock."""

    lag: float
    traj1: Trajectory
    traj2: Trajectory
    x1: np.ndarray
    v1: np.ndarray
    x2: np.ndarray
    v2: np.ndarray
    window: int = 0
    kappa: Optional[float] = None
    f_x: bool = False
    f_v: bool = False
    shared_counts: EventCounts = field(default_factory=EventCounts)
    reports: List[WindowReport] = field(default_factory=list)

    @property
    def coupled(self) -> bool:
        return self.kappa is not None

    @property
    def now(self) -> float:
        return self.window * self.lag

    def state1(self, s: float) -> PhaseState:
        """Process 1 at its own stochastic time ``s``."""
        st = self.traj1.state(s - self.lag)
        return PhaseState(st.x, st.v, s)

    def state2(self, s: float) -> PhaseState:
        return self.traj2.state(s)

    def aligned1(self, t: float) -> PhaseState:
        """Process 1 at aligned time ``t`` (stochastic time ``t + lag``)."""
        return self.traj1.state(t)

    @property
    def events_before(self) -> int:
        return self.traj1.counts.total + self.traj2.counts.total

    @property
    def events_after(self) -> int:
        return self.shared_counts.total


def start_pair(
    sampler: Sampler,
    init1: PhaseState,
    init2: PhaseState,
    lag: float,
    rng: np.random.Generator,
) -> CoupledPair:
    """Draw process 1's lead-in over aligned ``[-lag, 0]`` and set up the pair."""
    if not lag > 0:
        raise ValueError("lag must be positive")
    traj1 = Trajectory(-lag)
    x1, v1 = advance(sampler, traj1, np.asarray(init1.x, float), np.asarray(init1.v, float), 0.0, rng)
    traj2 = Trajectory(0.0)
    return CoupledPair(
        lag=float(lag),
        traj1=traj1,
        traj2=traj2,
        x1=x1,
        v1=v1,
        x2=np.asarray(init2.x, float),
        v2=np.asarray(init2.v, float),
    )


def _shared_advance(pair: CoupledPair, sampler: Sampler, t_end: float, rng, pending=None) -> int:
    """Advance the coupled single process and share its segments."""
    tmp = Trajectory(pair.traj1.end)
    x, v = advance(sampler, tmp, pair.x1, pair.v1, t_end, rng, pending=pending)
    for seg in tmp.segments:
        pair.traj1.append(seg)
        pair.traj2.append(seg)
    pair.shared_counts.add(tmp.counts)
    pair.x1 = pair.x2 = x
    pair.v1 = pair.v2 = v
    return tmp.counts.total


def _declare_coupled(pair: CoupledPair, when: float, x, v) -> None:
    pair.kappa = when
    pair.x1 = pair.x2 = x
    pair.v1 = pair.v2 = v
    pair.f_x = pair.f_v = True


def _segment_pair(pair, sampler, c1, c2, e1, e2, k1, k2):
    s1 = sampler.segment(c1, e1, pair.x1, pair.v1, k1)
    s2 = sampler.segment(c2, e2, pair.x2, pair.v2, k2)
    return s1, s2


def _count(counts: EventCounts, kind: str) -> None:
    if kind == "bounce":
        counts.bounces += 1
    else:
        counts.refreshes += 1


# bouncy particle and boomerang ---------------------------------------------


def _position_target(sampler: Sampler, x: np.ndarray, tau: float):
    """Mean and signed scale of the position reached after ``tau``.

    With a velocity ``v = L z`` the position at the next refreshment is
    ``mean + scale * v``.
    """
    if isinstance(sampler, Boomerang):
        return sampler.x_star + (x - sampler.x_star) * np.cos(tau), np.sin(tau)
    return x, tau


def _couple_refresh_velocities(sampler, x1, x2, tau1, tau2, rng) -> tuple[np.ndarray, np.ndarray, Optional[CoupleDraw]]:
    """Velocities at a joint refreshment aiming both positions at one point.

    Returns the velocities and the position draw (``None`` when no
    position coupling was attempted).
    """
    m1, s1 = _position_target(sampler, x1, tau1)
    if x1 is x2 and tau1 == tau2:
        # identical targets: one shared velocity
        v = sampler.refresh_velocity(rng)
        u = m1 + s1 * v
        return v, v, CoupleDraw(u, u, True)
    m2, s2 = _position_target(sampler, x2, tau2)
    if s1 == 0.0 or s2 == 0.0:
        v = sampler.refresh_velocity(rng)
        return v, v, None
    cov_root = getattr(sampler, "cov_root", None)
    g = IsoGaussianPair(m1, m2, abs(s1), abs(s2), cov_root)
    if abs(s1) == abs(s2):
        draw = couple_reflection_maximal(g, rng)
    else:
        draw = couple_scaled_gaussians(g, rng)
    return (draw.x - m1) / s1, (draw.y - m2) / s2, draw


def _finish(pair: CoupledPair, side: int, sampler, w_end, pending, rng) -> int:
    """Independent single-process run of one side up to ``w_end``."""
    traj = pair.traj1 if side == 1 else pair.traj2
    x, v = (pair.x1, pair.v1) if side == 1 else (pair.x2, pair.v2)
    before = traj.counts.total
    x, v = advance(sampler, traj, x, v, w_end, rng, pending=pending)
    if side == 1:
        pair.x1, pair.v1 = x, v
    else:
        pair.x2, pair.v2 = x, v
    return traj.counts.total - before


def _flow_window(pair: CoupledPair, sampler: Sampler, mode: str, rng) -> WindowReport:
    if mode not in MODES:
        raise ValueError(f"unknown coupling mode {mode!r}")
    start = pair.now
    w_end = (pair.window + 1) * pair.lag
    report = WindowReport(pair.window, pair.coupled)
    if pair.coupled:
        report.shared = _shared_advance(pair, sampler, w_end, rng)
        pair.window += 1
        pair.reports.append(report)
        return report

    lam = sampler.refresh_rate
    cnt1, cnt2 = EventCounts(), EventCounts()
    c1 = c2 = start
    f_x = f_v = False
    meet_at = None  # shared position planned for the next joint refreshment
    planned = None  # refreshment clocks drawn at the last joint refreshment
    pending1 = pending2 = None
    failed = False
    while True:
        if planned is None:
            clocks = sync_refreshment_clocks(c1, c2, 0.0, lam, rng)
        else:
            clocks = planned
        planned = None
        r1, r2 = clocks.end1, clocks.end2
        ch1 = sampler.bounce_channel(pair.x1, pair.v1, c1)
        ch2 = sampler.bounce_channel(pair.x2, pair.v2, c2)
        if mode == "resync+bounce-coupling":
            bp = couple_first_events(ch1, ch2, rng)
            b1, b2 = bp.end1, bp.end2
            cnt1.rejected += bp.proposals1 - 1
            cnt2.rejected += bp.proposals2 - 1
        else:
            b1 = sampler.draw_bounce(ch1, cnt1, rng)
            b2 = sampler.draw_bounce(ch2, cnt2, rng)
        e1, k1 = (b1, "bounce") if b1 < r1 else (r1, "refresh")
        e2, k2 = (b2, "bounce") if b2 < r2 else (r2, "refresh")
        if max(e1, e2) >= w_end:
            pending1, pending2 = (e1, k1), (e2, k2)
            break
        s1, s2 = _segment_pair(pair, sampler, c1, c2, e1, e2, k1, k2)
        pair.traj1.append(s1)
        pair.traj2.append(s2)
        _count(cnt1, k1)
        _count(cnt2, k2)
        x1, u1 = s1.at(e1)
        x2, u2 = s2.at(e2)
        c1, c2 = e1, e2
        if k1 == "refresh" and k2 == "refresh":
            if f_x and clocks.met_shifted:
                # both positions reach the planned meeting point
                x1 = x2 = meet_at
            nxt = sync_refreshment_clocks(c1, c2, 0.0, lam, rng)
            if nxt.met_shifted:
                v1, v2, draw = _couple_refresh_velocities(sampler, x1, x2, nxt.end1 - c1, nxt.end2 - c2, rng)
                success = draw is not None and draw.met
            else:
                v1, v2 = sampler.refresh_velocity(rng), sampler.refresh_velocity(rng)
                draw, success = None, False
            if success:
                f_v, f_x = f_x, True
                meet_at = draw.x
            else:
                f_x = f_v = False
                meet_at = None
            planned = nxt
            pair.x1, pair.v1, pair.x2, pair.v2 = x1, v1, x2, v2
            if f_x and f_v:
                _declare_coupled(pair, c1, x1, v1)
                break
            continue
        # at least one bounce: positions no longer on course to meet
        f_x = f_v = False
        meet_at = None
        pair.x1, pair.v1 = x1, sampler.apply(k1, x1, u1, rng)
        pair.x2, pair.v2 = x2, sampler.apply(k2, x2, u2, rng)
        if mode == "durmus-only":
            failed = True
            break

    if pair.coupled:
        report.shared = _shared_advance(pair, sampler, w_end, rng)
        report.coupled = True
    else:
        # finish the window independently, keeping each side's drawn event
        report.events_1 += _finish(pair, 1, sampler, w_end, None if failed else pending1, rng)
        report.events_2 += _finish(pair, 2, sampler, w_end, None if failed else pending2, rng)
    pair.traj1.counts.add(cnt1)
    pair.traj2.counts.add(cnt2)
    report.events_1 += cnt1.total
    report.events_2 += cnt2.total
    pair.f_x, pair.f_v = f_x, f_v
    pair.window += 1
    pair.reports.append(report)
    return report


def coupled_bps_window(pair: CoupledPair, target, refresh_rate: float, rng, mode: str = DEFAULT_MODE):
    """Advance a bouncy-particle pair by one window.

    ``mode`` selects the coupling of the event clocks: ``durmus-only``
    abandons the window at the first bounce, ``resync`` keeps coupling
    refreshment clocks after bounces, and ``resync+bounce-coupling`` also
    couples bounce times through coupled thinning.
    """
    return pair, _flow_window(pair, BPS(target, refresh_rate), mode, rng)


def coupled_boomerang_window(pair: CoupledPair, target, refresh_rate: float, rng, mode: str = DEFAULT_MODE):
    """Boomerang analogue of :func:`coupled_bps_window`."""
    return pair, _flow_window(pair, Boomerang(target, refresh_rate), mode, rng)


# on-and-off coordinate sampler --------------------------------------------


class _PositionLaw:
    """Law of ``x_j + sign (T - origin)`` for a first-event time ``T``."""

    def __init__(self, times: FirstEventDistribution, origin: float, pos: float, sign: float):
        self.times, self.origin, self.pos, self.sign = times, origin, pos, sign

    def ppf(self, u):
        if self.sign > 0:
            return self.pos + (self.times.ppf(u) - self.origin)
        return self.pos - (self.times.ppf(1.0 - u) - self.origin)

    def logpdf(self, y):
        return self.times.logpdf(self.origin + self.sign * (y - self.pos))

    def time_of(self, y):
        return self.origin + self.sign * (y - self.pos)


def _colinear_gamma(ch1: RateChannel, ch2: RateChannel, x1j, x2j, sign1, sign2):
    """Coupling of the bound processes in position space along one axis."""

    def gamma(now1, now2, rng):
        p1 = _PositionLaw(ch1.bound_law(now1), ch1.start, x1j, sign1)
        p2 = _PositionLaw(ch2.bound_law(now2), ch2.start, x2j, sign2)
        draw = couple_modified_antithetic(p1, p2, rng)
        return CoupleDraw(p1.time_of(draw.x), p2.time_of(draw.y), draw.met)

    return gamma


def _axis(k: int, dim: int) -> tuple[int, float]:
    return (k - 1) % dim, (1.0 if k <= dim else -1.0)


def _couple_iocs_velocities(sampler: IOCS, x1, x2, rng) -> tuple[int, int]:
    """Maximal coupling of the folded directions, then a common sign draw."""
    d = sampler.dim
    w1 = sampler.velocity_weights(x1)
    w2 = sampler.velocity_weights(x2)
    f1 = np.concatenate(([w1[0]], w1[1 : d + 1] + w1[d + 1 :]))
    f2 = np.concatenate(([w2[0]], w2[1 : d + 1] + w2[d + 1 :]))
    a1, a2 = couple_discrete(f1 / f1.sum(), f2 / f2.sum(), rng)
    u = rng.random()

    def signed(a, w):
        if a == 0:
            return 0
        plus = w[a] / (w[a] + w[a + d])
        return a if u < plus else a + d

    return signed(a1, w1), signed(a2, w2)


def coupled_iocs_step(pair: CoupledPair, target, refresh_rate: float, lag: Optional[float] = None, rng=None):
    """Advance an on-and-off coordinate sampler pair by one window.

    Frozen pairs get maximally coupled event clocks, pairs moving along the
    same axis get their event *positions* coupled on that axis, and other
    pairs evolve independently. Velocities are redrawn with a maximal
    coupling of the folded directions and a common uniform for the sign.
    """
    if lag is not None and lag != pair.lag:
        raise ValueError("lag differs from the pair's lag")
    sampler = IOCS(target, refresh_rate)
    d = sampler.dim
    start = pair.now
    w_end = (pair.window + 1) * pair.lag
    report = WindowReport(pair.window, pair.coupled)
    if pair.coupled:
        report.shared = _shared_advance(pair, sampler, w_end, rng)
        pair.window += 1
        pair.reports.append(report)
        return pair, report

    cnt1, cnt2 = EventCounts(), EventCounts()
    c1 = c2 = start
    pending1 = pending2 = None
    if np.array_equal(pair.x1, pair.x2) and np.array_equal(pair.v1, pair.v2):
        # equal states at a window boundary: clocks are synchronised here
        _declare_coupled(pair, start, pair.x1, pair.v1)
    while not pair.coupled:
        k1, k2 = iocs_index(pair.v1), iocs_index(pair.v2)
        ch1 = sampler.channel(pair.x1, pair.v1, c1)
        ch2 = sampler.channel(pair.x2, pair.v2, c2)
        snap = None
        if k1 == 0 and k2 == 0:
            clocks = sync_refreshment_clocks(c1, c2, 0.0, refresh_rate, rng)
            e1, e2 = clocks.end1, clocks.end2
        elif k1 != 0 and k2 != 0 and _axis(k1, d)[0] == _axis(k2, d)[0]:
            j = _axis(k1, d)[0]
            gamma = _colinear_gamma(ch1, ch2, pair.x1[j], pair.x2[j], _axis(k1, d)[1], _axis(k2, d)[1])
            ev = couple_first_events(ch1, ch2, rng, gamma=gamma)
            e1, e2 = ev.end1, ev.end2
            cnt1.rejected += ev.proposals1 - 1
            cnt2.rejected += ev.proposals2 - 1
            if ev.met_shifted:
                snap = (j, _met_position(ch1, ch2, e1, pair.x1[j], _axis(k1, d)[1]))
        else:
            e1 = sampler.draw_bounce(ch1, cnt1, rng)
            e2 = sampler.draw_bounce(ch2, cnt2, rng)
        if max(e1, e2) >= w_end:
            pending1, pending2 = (e1, "refresh"), (e2, "refresh")
            break
        s1 = sampler.segment(c1, e1, pair.x1, pair.v1, "refresh")
        s2 = sampler.segment(c2, e2, pair.x2, pair.v2, "refresh")
        x1, _ = s1.at(e1)
        x2, _ = s2.at(e2)
        if snap is not None:
            j, y = snap
            x1 = x1.copy()
            x2 = x2.copy()
            x1[j] = x2[j] = y
        n1, n2 = _couple_iocs_velocities(sampler, x1, x2, rng)
        v1, v2 = iocs_velocity(d, n1), iocs_velocity(d, n2)
        s1.event = IOCS.event_label(v1)
        s2.event = IOCS.event_label(v2)
        pair.traj1.append(s1)
        pair.traj2.append(s2)
        cnt1.refreshes += 1
        cnt2.refreshes += 1
        c1, c2 = e1, e2
        pair.x1, pair.v1, pair.x2, pair.v2 = x1, v1, x2, v2
        # equal clocks, velocities and positions (as floats) can only come
        # from shared draws
        if c1 == c2 and n1 == n2 and np.array_equal(x1, x2):
            _declare_coupled(pair, c1, x1, v1)

    if pair.coupled:
        report.shared = _shared_advance(pair, sampler, w_end, rng)
        report.coupled = True
    else:
        report.events_1 += _finish(pair, 1, sampler, w_end, pending1, rng)
        report.events_2 += _finish(pair, 2, sampler, w_end, pending2, rng)
    pair.traj1.counts.add(cnt1)
    pair.traj2.counts.add(cnt2)
    report.events_1 += cnt1.total
    report.events_2 += cnt2.total
    pair.window += 1
    pair.reports.append(report)
    return pair, report


def _met_position(ch1, ch2, e1, x1j, sign1):
    # position on the coupled axis reached by process 1; shared by construction
    return x1j + sign1 * (e1 - ch1.start)


# drivers -------------------------------------------------------------------

Window = Callable[[CoupledPair, np.random.Generator], WindowReport]


@dataclass
class CouplingResult:
    kappa: Optional[float]
    reports: List[WindowReport]
    coupled: bool


def window_driver(sampler_name: str, target, refresh_rate: float, mode: str = DEFAULT_MODE) -> Window:
    """Window function ``(pair, rng) -> WindowReport`` for a sampler name."""
    if sampler_name == "bps":
        return lambda pair, rng: coupled_bps_window(pair, target, refresh_rate, rng, mode)[1]
    if sampler_name == "boomerang":
        return lambda pair, rng: coupled_boomerang_window(pair, target, refresh_rate, rng, mode)[1]
    if sampler_name == "iocs":
        return lambda pair, rng: coupled_iocs_step(pair, target, refresh_rate, None, rng)[1]
    raise ValueError(f"unknown sampler {sampler_name!r}")


def run_until_coupled(pair: CoupledPair, window: Window, max_windows: int, rng) -> CouplingResult:
    """Run windows until the pair couples or ``max_windows`` is exhausted."""
    if max_windows < 1:
        raise ValueError("max_windows must be at least 1")
    reports = []
    while not pair.coupled and len(reports) < max_windows:
        reports.append(window(pair, rng))
    return CouplingResult(pair.kappa, reports, pair.coupled)


def extend_to(pair: CoupledPair, window: Window, aligned_time: float, rng) -> None:
    """Keep simulating whole windows until both trajectories reach ``aligned_time``."""
    while pair.traj2.end < aligned_time:
        window(pair, rng)


def require_coupled(pair: CoupledPair) -> float:
    if pair.kappa is None:
        raise NotCoupledError("the pair has not coupled")
    return pair.kappa
