"""Single-process PDMP dynamics: flows, reflections, samplers, trajectories.

Trajectories store absolute times. A :class:`Segment` knows its own start
state and flow, so evaluating a trajectory never replays earlier segments
and two trajectories holding the same segment object evaluate it
identically.
"""
from __future__ import annotations

import bisect
import io
from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .events import RateChannel, first_event_exact_affine, thin
from .targets import Target

AFFINE = "affine"
ELLIPTIC = "elliptic"
EVENT_KINDS = ("bounce", "refresh", "grid-boundary", "freeze")


@dataclass
class PhaseState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0


@dataclass(eq=False)
class Segment:
    """Deterministic flow from ``(x0, v0)`` over ``[t0, t1]``.

    ``event`` names what happens at ``t1``: a bounce, a refreshment, a cut
    at a grid boundary or horizon, or a switch to the zero velocity.
    """

    kind: str
    t0: float
    t1: float
    x0: np.ndarray
    v0: np.ndarray
    event: str
    x_star: Optional[np.ndarray] = None

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        s = t - self.t0
        if self.kind == AFFINE:
            return self.x0 + s * self.v0, self.v0
        c, sn = np.cos(s), np.sin(s)
        dx = self.x0 - self.x_star
        return self.x_star + dx * c + self.v0 * sn, self.v0 * c - dx * sn

    def end(self) -> tuple[np.ndarray, np.ndarray]:
        return self.at(self.t1)


@dataclass
class EventCounts:
    """Bounces, refreshments and rejected thinning proposals."""

    bounces: int = 0
    refreshes: int = 0
    rejected: int = 0

    @property
    def total(self) -> int:
        return self.bounces + self.refreshes + self.rejected

    def add(self, other: "EventCounts") -> None:
        self.bounces += other.bounces
        self.refreshes += other.refreshes
        self.rejected += other.rejected


class Trajectory:
    """Ordered, contiguous segments starting at ``start``."""

    def __init__(self, start: float = 0.0):
        self.start = float(start)
        self.end = float(start)
        self.segments: List[Segment] = []
        self._starts: List[float] = []
        self.counts = EventCounts()

    @property
    def total_time(self) -> float:
        return self.end - self.start

    def append(self, seg: Segment) -> None:
        if seg.t0 != self.end:
            raise ValueError("segments must be contiguous")
        if seg.t1 < seg.t0:
            raise ValueError("negative segment duration")
        self.segments.append(seg)
        self._starts.append(seg.t0)
        self.end = seg.t1

    def segment_at(self, t: float) -> Segment:
        if not (self.start <= t <= self.end) or not self.segments:
            raise ValueError(f"time {t!r} outside [{self.start!r}, {self.end!r}]")
        i = bisect.bisect_right(self._starts, t) - 1
        return self.segments[max(i, 0)]

    def state(self, t: float) -> PhaseState:
        x, v = self.segment_at(t).at(t)
        return PhaseState(x, v, t)

    def segments_between(self, a: float, b: float) -> Iterable[tuple[Segment, float, float]]:
        """Yield ``(segment, lo, hi)`` covering ``[a, b]`` with ``lo < hi``."""
        if a < self.start or b > self.end:
            raise ValueError("interval outside the trajectory")
        i = max(bisect.bisect_right(self._starts, a) - 1, 0)
        while i < len(self.segments):
            seg = self.segments[i]
            if seg.t0 >= b:
                break
            lo, hi = max(seg.t0, a), min(seg.t1, b)
            if hi > lo:
                yield seg, lo, hi
            i += 1

    def max_discontinuity(self) -> float:
        gap = 0.0
        for prev, nxt in zip(self.segments, self.segments[1:]):
            gap = max(gap, float(np.max(np.abs(prev.end()[0] - nxt.x0))))
        return gap


def eval_trajectory(traj: Trajectory, t: float) -> PhaseState:
    """Exact state at time ``t``; velocities are right-continuous."""
    return traj.state(t)


def discretise(traj: Trajectory, delta: float) -> List[PhaseState]:
    """States at ``start, start + delta, ..., start + floor(T / delta) delta``."""
    if not delta > 0:
        raise ValueError("grid step must be positive")
    n = int(np.floor(traj.total_time / delta))
    return [traj.state(min(traj.start + i * delta, traj.end)) for i in range(n + 1)]


# flows and reflections -----------------------------------------------------


def flow_affine(state: PhaseState, tau: float) -> PhaseState:
    if tau < 0:
        raise ValueError("negative flow time")
    return PhaseState(state.x + tau * state.v, state.v, state.t + tau)


def flow_elliptic(state: PhaseState, x_star: np.ndarray, tau: float) -> PhaseState:
    if tau < 0:
        raise ValueError("negative flow time")
    c, s = np.cos(tau), np.sin(tau)
    dx = state.x - x_star
    return PhaseState(x_star + dx * c + state.v * s, state.v * c - dx * s, state.t + tau)


def reflect_bps(target: Target, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Reflect ``v`` against the hyperplane orthogonal to ``grad U(x)``."""
    g = target.grad(x)
    gg = float(g @ g)
    if gg == 0.0:
        raise ValueError("cannot reflect at a critical point of the potential")
    return v - 2.0 * float(g @ v) / gg * g


def reflect_boomerang(target: Target, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``v - 2 <g, v> / ||Sigma^{1/2} g||^2 Sigma g`` with ``g = grad U(x)``."""
    g = target.grad(x)
    if target.cov_root is None:
        sg = g
    else:
        sg = target.cov_root @ (target.cov_root.T @ g)
    norm2 = float(g @ sg)
    if norm2 == 0.0:
        raise ValueError("cannot reflect at a critical point of the potential")
    return v - 2.0 * float(g @ v) / norm2 * sg


# samplers ------------------------------------------------------------------


class Sampler:
    """Event mechanics shared by the single-process and coupled drivers."""

    kind = AFFINE

    def __init__(self, target: Target, refresh_rate: float):
        if not refresh_rate > 0:
            raise ValueError("refreshment rate must be positive")
        self.target = target
        self.refresh_rate = float(refresh_rate)
        self.dim = target.dim

    x_star: Optional[np.ndarray] = None

    def segment(self, t0, t1, x, v, event) -> Segment:
        return Segment(self.kind, t0, t1, x, v, event, self.x_star)

    def bounce_channel(self, x, v, start) -> RateChannel:
        raise NotImplementedError

    def reflect(self, x, v) -> np.ndarray:
        raise NotImplementedError

    def refresh_velocity(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def draw_bounce(self, ch: RateChannel, counts: EventCounts, rng) -> float:
        res = thin(ch, rng)
        counts.rejected += res.proposals - 1 if np.isfinite(res.time) else res.proposals
        return res.time

    def next_event(self, x, v, t, rng, counts: EventCounts) -> tuple[float, str]:
        """Time and kind of the next event from ``(x, v)`` at time ``t``."""
        ch = self.bounce_channel(x, v, t)
        if ch.exact is not None:
            # superposition of the bounce rate and the refreshment rate
            r = ch.exact
            total = first_event_exact_affine(r.a, r.b, t, rng, r.c + self.refresh_rate)
            if np.isinf(total):
                return total, "refresh"
            lam = r(total - t) - r.c
            if rng.random() * (lam + r.c + self.refresh_rate) < lam:
                return total, "bounce"
            return total, "refresh"
        refresh = t + rng.exponential(1.0 / self.refresh_rate)
        bounce = self.draw_bounce(ch, counts, rng)
        return (bounce, "bounce") if bounce < refresh else (refresh, "refresh")

    def apply(self, kind, x, v, rng) -> np.ndarray:
        if kind == "bounce":
            return self.reflect(x, v)
        return self.refresh_velocity(rng)

    def initial_velocity(self, rng) -> np.ndarray:
        return self.refresh_velocity(rng)


class BPS(Sampler):
    """Bouncy particle sampler with ``N(0, I)`` refreshments."""

    def bounce_channel(self, x, v, start):
        return self.target.bounce_channel(x, v, start)

    def reflect(self, x, v):
        return reflect_bps(self.target, x, v)

    def refresh_velocity(self, rng):
        return rng.standard_normal(self.dim)


class Boomerang(Sampler):
    """Boomerang sampler around the target's Gaussian reference."""

    kind = ELLIPTIC

    def __init__(self, target: Target, refresh_rate: float):
        super().__init__(target, refresh_rate)
        self.x_star = np.asarray(target.x_star, dtype=float)
        self.cov_root = target.cov_root

    def bounce_channel(self, x, v, start):
        return self.target.elliptic_channel(x, v, start)

    def reflect(self, x, v):
        return reflect_boomerang(self.target, x, v)

    def colour(self, z):
        return z if self.cov_root is None else self.cov_root @ z

    def refresh_velocity(self, rng):
        return self.colour(rng.standard_normal(self.dim))


def iocs_velocity(dim: int, index: int) -> np.ndarray:
    """Velocity for index 0 (frozen), ``1..d`` (``+e_j``), ``d+1..2d`` (``-e_j``)."""
    v = np.zeros(dim)
    if index == 0:
        return v
    j = (index - 1) % dim
    v[j] = 1.0 if index <= dim else -1.0
    return v


def iocs_index(v: np.ndarray) -> int:
    nz = np.flatnonzero(v)
    if nz.size == 0:
        return 0
    if nz.size > 1 or abs(v[nz[0]]) != 1.0:
        raise ValueError("not an on-and-off coordinate velocity")
    j = int(nz[0])
    return j + 1 if v[j] > 0 else j + 1 + v.size


class IOCS(Sampler):
    """On-and-off coordinate sampler on ``{0, +-e_1, ..., +-e_d}``.

    The event rate is ``<v, grad U(x)>_+ + refresh_rate``; at an event the
    new velocity ``w`` is drawn with weight ``<-w, grad U(x)>_+ + refresh_rate``.
    """

    def velocity_weights(self, x) -> np.ndarray:
        g = self.target.grad(x)
        lam = self.refresh_rate
        return np.concatenate(([lam], np.maximum(-g, 0.0) + lam, np.maximum(g, 0.0) + lam))

    def channel(self, x, v, start) -> RateChannel:
        k = iocs_index(v)
        if k == 0:
            return RateChannel.constant(self.refresh_rate, start)
        j = (k - 1) % self.dim
        sign = 1.0 if k <= self.dim else -1.0
        return self.target.coordinate_channel(x, j, sign, start, self.refresh_rate)

    def next_event(self, x, v, t, rng, counts):
        return self.draw_bounce(self.channel(x, v, t), counts, rng), "refresh"

    def apply(self, kind, x, v, rng):
        w = self.velocity_weights(x)
        return iocs_velocity(self.dim, int(rng.choice(w.size, p=w / w.sum())))

    def initial_velocity(self, rng):
        return iocs_velocity(self.dim, int(rng.integers(2 * self.dim + 1)))

    @staticmethod
    def event_label(v_new) -> str:
        return "freeze" if not np.any(v_new) else "refresh"


def _count(counts: EventCounts, kind: str) -> None:
    if kind == "bounce":
        counts.bounces += 1
    else:
        counts.refreshes += 1


def advance(
    sampler: Sampler,
    traj: Trajectory,
    x: np.ndarray,
    v: np.ndarray,
    t_end: float,
    rng: np.random.Generator,
    pending: Optional[tuple[float, str]] = None,
    max_events: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate from ``(x, v)`` at ``traj.end`` up to ``t_end``.

    ``pending`` is an already drawn next event. Events at or beyond
    ``t_end`` are discarded and the last segment is cut there. With
    ``max_events`` the run stops early at the event that exhausts it.
    """
    t = traj.end
    while True:
        if pending is None:
            pending = sampler.next_event(x, v, t, rng, traj.counts)
        when, kind = pending
        pending = None
        if when >= t_end:
            traj.append(sampler.segment(t, t_end, x, v, "grid-boundary"))
            return traj.segments[-1].end()
        x_new, v_old = sampler.segment(t, when, x, v, kind).at(when)
        v_new = sampler.apply(kind, x_new, v_old, rng)
        label = IOCS.event_label(v_new) if isinstance(sampler, IOCS) else kind
        traj.append(sampler.segment(t, when, x, v, label))
        _count(traj.counts, kind)
        x, v, t = x_new, v_new, when
        if max_events is not None and traj.counts.total >= max_events:
            return x, v


def _simulate(sampler: Sampler, init: PhaseState, horizon: float, rng, max_events=None) -> Trajectory:
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    traj = Trajectory(init.t)
    advance(sampler, traj, np.asarray(init.x, float), np.asarray(init.v, float), init.t + horizon, rng,
            max_events=max_events)
    return traj


def simulate_bps(target, init, refresh_rate, horizon, rng, max_events=None) -> Trajectory:
    """Bouncy particle sampler trajectory of length ``horizon``.

    Stops earlier if ``max_events`` (bounces, refreshments and rejected
    proposals) is reached.
    """
    return _simulate(BPS(target, refresh_rate), init, horizon, rng, max_events)


def simulate_boomerang(target, init, refresh_rate, horizon, rng, max_events=None) -> Trajectory:
    return _simulate(Boomerang(target, refresh_rate), init, horizon, rng, max_events)


def simulate_iocs(target, init, refresh_rate, horizon, rng, max_events=None) -> Trajectory:
    iocs_index(np.asarray(init.v))
    return _simulate(IOCS(target, refresh_rate), init, horizon, rng, max_events)


def frozen_fraction(traj: Trajectory) -> float:
    """Fraction of time spent with zero velocity."""
    frozen = sum(s.duration for s in traj.segments if not np.any(s.v0))
    return frozen / traj.total_time


# text serialisation --------------------------------------------------------


def _fmt(a) -> str:
    return ",".join(repr(float(u)) for u in np.atleast_1d(a))


def dump_trajectory(traj: Trajectory) -> str:
    """One line per segment: ``kind t x v duration event``."""
    out = io.StringIO()
    out.write(f"# trajectory start={float(traj.start)!r} end={float(traj.end)!r}\n")
    for s in traj.segments:
        line = f"{s.kind} {float(s.t0)!r} {_fmt(s.x0)} {_fmt(s.v0)} {float(s.duration)!r} {s.event}"
        if s.kind == ELLIPTIC:
            line += f" {_fmt(s.x_star)}"
        out.write(line + "\n")
    return out.getvalue()


def load_trajectory(text: str) -> Trajectory:
    """Inverse of :func:`dump_trajectory` up to rounding of segment ends."""
    start = None
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            start = float(line.split("start=")[1].split()[0])
        elif line.strip():
            rows.append(line.split())
    if not rows:
        raise ValueError("empty trajectory text")
    segs = []
    for parts in rows:
        kind, t0, dur, event = parts[0], float(parts[1]), float(parts[4]), parts[5]
        x = np.array([float(u) for u in parts[2].split(",")])
        v = np.array([float(u) for u in parts[3].split(",")])
        x_star = np.array([float(u) for u in parts[6].split(",")]) if kind == ELLIPTIC else None
        segs.append(Segment(kind, t0, t0 + dur, x, v, event, x_star))
    # snap each end onto the next start so the segments stay contiguous
    for prev, nxt in zip(segs, segs[1:]):
        prev.t1 = nxt.t0
    traj = Trajectory(segs[0].t0 if start is None else start)
    for seg in segs:
        traj.append(seg)
    return traj
