import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from oracles import affine_cdf, within_se
from pdmp_unbiased.errors import BoundViolationError, IterationCapError
from pdmp_unbiased.events import (
    AffineRate,
    FirstEventDistribution,
    RateChannel,
    couple_first_events,
    first_event_exact_affine,
    first_event_thinning,
    sync_refreshment_clocks,
    thin,
)

N = 20_000
# slopes and floors either vanish or are large enough to keep times moderate
SLOPES = st.one_of(st.just(0.0), st.floats(1e-3, 5), st.floats(-5, -1e-3))
FLOORS = st.one_of(st.just(0.0), st.floats(1e-3, 3))


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), SLOPES, FLOORS, st.floats(1e-3, 20))
def test_inverse_cumulative_round_trip(a, b, c, e):
    r = AffineRate(a, b, c)
    t = r.inverse_cumulative(e)
    if np.isfinite(t):
        assert r.cumulative(t) == pytest.approx(e, rel=1e-8, abs=1e-10)
    else:
        assert r.total_mass() <= e + 1e-9


@pytest.mark.parametrize("a, b, c", [(1.0, 0.0, 0.0), (-1.0, 2.0, 0.0), (2.0, -1.0, 0.5), (0.3, 1.5, 0.2)])
def test_cumulative_matches_quadrature(a, b, c):
    r = AffineRate(a, b, c)
    for t in (0.1, 0.7, 2.5):
        ref, _ = integrate.quad(lambda s: max(a + b * s, 0) + c, 0, t, points=[-a / b] if b else None)
        assert r.cumulative(t) == pytest.approx(ref, rel=1e-10)


def test_total_mass_of_decreasing_rate():
    assert AffineRate(2.0, -1.0).total_mass() == pytest.approx(2.0)
    assert AffineRate(-1.0, -1.0).total_mass() == 0.0
    assert np.isinf(AffineRate(0.0, 0.0, 1.0).total_mass())


@pytest.mark.parametrize("a, b, c", [(1.0, 0.0, 0.0), (-1.0, 2.0, 0.0), (0.5, 1.0, 0.3)])
def test_exact_affine_first_event_cdf(rng, a, b, c):
    ts = np.array([first_event_exact_affine(a, b, 1.0, rng, c) for _ in range(N)]) - 1.0
    assert stats.kstest(ts, lambda t: np.vectorize(affine_cdf)(a, b, c, t)).pvalue > 1e-3


def test_decreasing_rate_can_never_fire(rng):
    ts = np.array([first_event_exact_affine(1.0, -1.0, 0.0, rng) for _ in range(N)])
    assert within_se(int(np.isinf(ts).sum()), N, np.exp(-0.5))


def test_first_event_distribution_ppf_matches_cdf():
    law = FirstEventDistribution(AffineRate(0.5, 2.0), origin=3.0)
    for u in (0.1, 0.5, 0.9):
        assert float(law.cdf(law.ppf(u))) == pytest.approx(u, rel=1e-10)
    assert law.logpdf(2.0) == -np.inf


def test_thinning_constant_bound_matches_affine_law(rng):
    # rate (t - 1)_+ on [0, 3] dominated by the constant 3, used as a first event
    ch = RateChannel(rate=lambda t: max(t - 1.0, 0.0) + 0.2, bound=AffineRate(0.2, 1.0))
    ts = [first_event_thinning(ch, None, rng) for _ in range(N)]
    assert stats.kstest(ts, lambda t: np.vectorize(affine_cdf)(-1.0, 1.0, 0.2, t)).pvalue > 1e-3


def test_thinning_constant_rate(rng):
    ch = RateChannel(rate=lambda t: 0.5 + 0.5 * np.sin(t) ** 2, bound=1.0)
    ts = [first_event_thinning(ch, None, rng) for _ in range(N)]

    def cdf(t):
        lam = 0.5 * t + 0.5 * (t / 2 - np.sin(2 * t) / 4)
        return 1 - np.exp(-lam)

    assert stats.kstest(ts, cdf).pvalue > 1e-3


def test_thin_uses_closed_form_when_exact(rng):
    res = thin(RateChannel.affine(1.0, 1.0), rng)
    assert res.proposals == 1


def test_bound_violation_is_reported(rng):
    ch = RateChannel(rate=lambda t: 2.0, bound=1.0)
    with pytest.raises(BoundViolationError):
        first_event_thinning(ch, None, rng)


def test_thinning_iteration_cap(rng):
    ch = RateChannel(rate=lambda t: 0.0, bound=1.0)
    with pytest.raises(IterationCapError):
        first_event_thinning(ch, None, rng, max_proposals=5)


def test_coupled_thinning_marginals(rng):
    ch1 = RateChannel(rate=lambda t: max(t - 1.0, 0.0) + 0.2, bound=AffineRate(0.2, 1.0), start=0.0)
    ch2 = RateChannel.affine(0.5, 1.0, 0.0, start=0.3)
    pairs = [couple_first_events(ch1, ch2, rng) for _ in range(N)]
    t1 = [p.t1 for p in pairs]
    t2 = [p.t2 for p in pairs]
    assert stats.kstest(t1, lambda t: np.vectorize(affine_cdf)(-1.0, 1.0, 0.2, t)).pvalue > 1e-3
    assert stats.kstest(t2, lambda t: np.vectorize(affine_cdf)(0.5, 1.0, 0.0, t)).pvalue > 1e-3
    met = [p for p in pairs if p.met_shifted]
    assert met and all(p.end1 == p.end2 for p in met)


def test_coupled_thinning_equal_constant_channels_always_meet(rng):
    ch = RateChannel.constant(2.0, start=1.0)
    pairs = [couple_first_events(ch, ch, rng) for _ in range(200)]
    assert all(p.met_shifted and p.end1 == p.end2 for p in pairs)


def test_coupled_thinning_with_a_side_that_never_fires(rng):
    ch1 = RateChannel.affine(-1.0, -1.0)
    ch2 = RateChannel.constant(1.0)
    p = couple_first_events(ch1, ch2, rng)
    assert np.isinf(p.end1) and np.isfinite(p.end2) and not p.met_shifted


@pytest.mark.parametrize("offset", [0.0, 0.2, 1.0])
def test_refreshment_clock_synchronisation(rng, offset):
    lam = 1.5
    pairs = [sync_refreshment_clocks(0.0, offset, 0.0, lam, rng) for _ in range(N)]
    assert within_se(sum(p.met_shifted for p in pairs), N, np.exp(-lam * offset))
    assert stats.kstest([p.t1 for p in pairs], stats.expon(scale=1 / lam).cdf).pvalue > 1e-3
    assert stats.kstest([p.t2 for p in pairs], stats.expon(scale=1 / lam).cdf).pvalue > 1e-3


def test_refreshment_clocks_with_lag_align_shifted_times(rng):
    p = next(p for p in (sync_refreshment_clocks(1.0, 0.0, 1.0, 2.0, rng) for _ in range(100)) if p.met_shifted)
    assert p.end1 == pytest.approx(p.end2 + 1.0)


def test_refreshment_rate_must_be_positive(rng):
    with pytest.raises(ValueError):
        sync_refreshment_clocks(0.0, 0.0, 0.0, 0.0, rng)
