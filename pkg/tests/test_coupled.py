import numpy as np
import pytest
from scipy import stats

from oracles import within_se
from pdmp_unbiased.coupled import (
    MODES,
    _couple_refresh_velocities,
    extend_to,
    require_coupled,
    run_until_coupled,
    start_pair,
    window_driver,
)
from pdmp_unbiased.errors import NotCoupledError
from pdmp_unbiased.pdmp import BPS, IOCS, Boomerang, PhaseState, simulate_bps
from pdmp_unbiased.targets import GaussianTarget, ZeroPotential


def _sampler(name, d):
    lam = np.sqrt(d)
    if name == "bps":
        return BPS(GaussianTarget.standard(d), lam), lam
    if name == "iocs":
        return IOCS(GaussianTarget.standard(d), 1.0), 1.0
    return Boomerang(GaussianTarget(np.zeros(d), precision=0.5 * np.eye(d), cov_root=np.sqrt(2) * np.eye(d)), lam), lam


def _pair(name, d, lag, rng, mode="resync+bounce-coupling"):
    sampler, lam = _sampler(name, d)
    init = [PhaseState(rng.standard_normal(d), sampler.initial_velocity(rng)) for _ in range(2)]
    pair = start_pair(sampler, init[0], init[1], lag, rng)
    return pair, window_driver(name, sampler.target, lam, mode)


@pytest.mark.parametrize("name, d, lag", [("bps", 3, 2.0), ("boomerang", 2, 2.0), ("iocs", 1, 0.5)])
def test_coupled_trajectories_agree_bitwise(rng, name, d, lag):
    for _ in range(10):
        pair, window = _pair(name, d, lag, rng)
        res = run_until_coupled(pair, window, 5000, rng)
        assert res.coupled
        kappa = require_coupled(pair)
        extend_to(pair, window, kappa + 3 * lag, rng)
        for t in np.linspace(kappa, pair.traj2.end, 50):
            a, b = pair.aligned1(t), pair.state2(t)
            assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
        assert pair.traj1.max_discontinuity() <= 1e-9
        assert pair.traj2.max_discontinuity() <= 1e-9
        assert pair.f_x and pair.f_v


def test_process_one_is_lagged_in_its_own_clock(rng):
    pair, window = _pair("bps", 2, 1.5, rng)
    run_until_coupled(pair, window, 5000, rng)
    s = pair.kappa + pair.lag + 0.3
    assert np.array_equal(pair.state1(s).x, pair.state2(s - pair.lag).x)
    assert pair.traj1.start == -1.5 and pair.traj2.start == 0.0


def test_identical_starts_need_no_windows(rng):
    sampler, lam = _sampler("iocs", 2)
    init = PhaseState(np.zeros(2), np.zeros(2))
    pair = start_pair(sampler, init, init, 0.5, rng)
    # force process 1 back onto process 2's start
    pair.x1, pair.v1 = pair.x2.copy(), pair.v2.copy()
    window = window_driver("iocs", sampler.target, lam)
    res = run_until_coupled(pair, window, 10, rng)
    assert res.coupled and res.kappa == 0.0 and len(res.reports) == 1
    assert res.reports[0].events_1 == res.reports[0].events_2 == 0


def test_boomerang_refresh_velocity_meeting_probability(rng):
    sampler = Boomerang(ZeroPotential(2), 1.0)
    x1, x2 = np.array([0.0, 0.0]), np.array([1.0, 0.5])
    tau = 0.8
    n = 20_000
    met = 0
    vs = []
    for _ in range(n):
        v1, v2, draw = _couple_refresh_velocities(sampler, x1, x2, tau, tau, rng)
        met += draw.met
        vs.append(v2)
        if draw.met:
            p1 = x1 * np.cos(tau) + v1 * np.sin(tau)
            p2 = x2 * np.cos(tau) + v2 * np.sin(tau)
            assert np.allclose(p1, p2, atol=1e-12)
    z = np.cos(tau) * np.linalg.norm(x2 - x1) / np.sin(tau)
    assert within_se(met, n, 2 * stats.norm.cdf(-z / 2))
    vs = np.array(vs)
    for k in range(2):
        assert stats.kstest(vs[:, k], "norm").pvalue > 1e-3


def test_bps_refresh_velocities_with_unequal_clocks(rng):
    sampler = BPS(GaussianTarget.standard(1), 1.0)
    x1, x2 = np.array([0.0]), np.array([0.4])
    vs = np.array([_couple_refresh_velocities(sampler, x1, x2, 1.0, 1.7, rng)[:2] for _ in range(20_000)])
    assert stats.kstest(vs[:, 0, 0], "norm").pvalue > 1e-3
    assert stats.kstest(vs[:, 1, 0], "norm").pvalue > 1e-3


def test_iocs_one_dimensional_pairs_all_couple(rng):
    kappas = []
    for _ in range(50):
        pair, window = _pair("iocs", 1, 0.5, rng)
        res = run_until_coupled(pair, window, 5000, rng)
        assert res.coupled
        kappas.append(res.kappa)
    assert np.mean(kappas) < 500


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_couples_in_low_dimension(rng, mode):
    for _ in range(5):
        pair, window = _pair("bps", 2, 5.0, rng, mode)
        assert run_until_coupled(pair, window, 5000, rng).coupled


def test_unknown_mode_rejected(rng):
    pair, window = _pair("bps", 2, 1.0, rng, "nope")
    with pytest.raises(ValueError):
        window(pair, rng)


def test_window_cap_records_non_coupling(rng):
    pair, window = _pair("bps", 30, 0.1, rng)
    res = run_until_coupled(pair, window, 2, rng)
    assert not res.coupled and res.kappa is None and len(res.reports) == 2
    with pytest.raises(NotCoupledError):
        require_coupled(pair)
    with pytest.raises(ValueError):
        run_until_coupled(pair, window, 0, rng)


def test_window_reports_add_up_to_event_counts(rng):
    pair, window = _pair("bps", 5, 1.0, rng)
    lead_in = pair.traj1.counts.total
    res = run_until_coupled(pair, window, 5000, rng)
    extend_to(pair, window, pair.kappa + 4.0, rng)
    total = sum(r.total for r in pair.reports)
    assert total + lead_in == pair.events_before + pair.events_after
    assert res.reports == pair.reports[: len(res.reports)]


def test_lag_must_be_positive(rng):
    sampler, _ = _sampler("bps", 1)
    init = PhaseState(np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        start_pair(sampler, init, init, 0.0, rng)


def test_coupled_marginal_matches_single_chain(rng):
    # process 2 from a fixed non-stationary start vs independent single runs at t = 3
    d, lag, t = 2, 1.0, 3.0
    sampler, lam = _sampler("bps", d)
    start = PhaseState(np.array([3.0, -2.0]), np.array([1.0, 0.0]))
    coupled, single = [], []
    for _ in range(1500):
        other = PhaseState(rng.standard_normal(d), sampler.initial_velocity(rng))
        pair = start_pair(sampler, other, start, lag, rng)
        window = window_driver("bps", sampler.target, lam)
        extend_to(pair, window, t, rng)
        coupled.append(pair.state2(t).x[0])
        single.append(simulate_bps(sampler.target, start, lam, t + 0.1, rng).state(t).x[0])
    assert stats.ks_2samp(coupled, single).pvalue > 1e-3
