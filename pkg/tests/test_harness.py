import math
import os

import numpy as np
import pytest
import yaml

from pdmp_unbiased.cli import main
from pdmp_unbiased.estimators import coordinate_moment
from pdmp_unbiased.harness import (
    Cell,
    ExperimentConfig,
    emit_csv,
    initial_law,
    loglog_slope,
    make_sampler,
    nearest_rank_quantile,
    ratio_se,
    replicate_rng,
    run_inefficiency,
    run_meeting_times,
    select_k_m,
    single_chain_estimate,
    summarise_inefficiency,
    summarise_meeting_times,
    write_inefficiency,
    write_meeting_times,
)
from pdmp_unbiased.pdmp import PhaseState, Trajectory, advance, load_trajectory


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [ln for ln in fh.read().split("\n") if ln and not ln.startswith("#")]


# (k, m) selection ---------------------------------------------------------------


@pytest.mark.parametrize("lag", [1.0, 0.1, 0.7])
def test_select_k_m_examples(lag):
    kappas = [i * lag for i in range(1, 11)]
    assert select_k_m(kappas, 0.9, 10, lag) == (9, 90)


def test_select_k_m_constant_list():
    assert select_k_m([2.5] * 7, 0.9, 10, 1.0) == (3, 30)
    assert select_k_m([3.0] * 7, 0.9, 10, 1.0) == (3, 30)
    assert select_k_m([0.0] * 3, 0.9, 10, 1.0) == (1, 10)
    with pytest.raises(ValueError):
        select_k_m([], 0.9, 10, 1.0)


def test_nearest_rank_quantile():
    assert nearest_rank_quantile([5, 1, 3, 2, 4], 0.5) == 3
    assert nearest_rank_quantile([1, 2, 3, 4], 0.5) == 2
    assert nearest_rank_quantile([7], 0.99) == 7


def test_loglog_slope_recovers_power():
    d = np.array([2, 5, 10, 20, 50])
    assert loglog_slope(d, 3 * d**0.8) == pytest.approx(0.8)


# CSV ---------------------------------------------------------------------------


def test_emit_csv_lines_and_determinism(tmp_path):
    cols = ["a", "b", "c"]
    empty = emit_csv([], str(tmp_path / "e.csv"), cols, "x")
    assert _data_lines(empty) == ["a,b,c"]
    one = emit_csv([{"a": 1, "b": 0.1, "c": True}], str(tmp_path / "o.csv"), cols, "x", {"k": "v"})
    assert _data_lines(one) == ["a,b,c", "1,0.1,1"]
    raw = open(one, "rb").read()
    assert b"\r" not in raw and raw.startswith(b"# schema: x v1\n")
    emit_csv([{"a": 1, "b": 0.1, "c": True}], str(tmp_path / "o.csv"), cols, "x", {"k": "v"})
    assert open(one, "rb").read() == raw


def test_emit_csv_round_trips_floats(tmp_path):
    x = 1 / 3
    path = emit_csv([{"v": x, "n": None}], str(tmp_path / "f.csv"), ["v", "n"], "x")
    assert float(_data_lines(path)[1].split(",")[0]) == x
    assert _data_lines(path)[1].endswith(",")


def test_emit_csv_surfaces_io_errors(tmp_path):
    with pytest.raises(OSError):
        emit_csv([], str(tmp_path / "missing" / "x.csv"), ["a"], "x")


# configuration -------------------------------------------------------------------


def test_config_from_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"sampler": "boomerang", "dims": [1, 3], "lags": 0.5, "replicates": 4}))
    cfg = ExperimentConfig.load(str(path), {"seed": 9})
    assert (cfg.sampler, cfg.dims, cfg.lags, cfg.replicates, cfg.seed) == ("boomerang", [1, 3], [0.5], 4, 9)
    assert cfg.refresh_rate(4) == 2.0
    assert cfg.replace(refresh_policy="constant").refresh_rate(4) == 1.5


@pytest.mark.parametrize(
    "bad",
    [
        {"colour": "red"},
        {"replicates": 0},
        {"dims": [0]},
        {"quantile": 1.0},
        {"sampler": "zigzag"},
        {"init": "far"},
        {"mode": "magic"},
        {"lags": [-1.0]},
        {"estimator": "xyz"},
    ],
)
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping(bad)


def test_offset_wishart_law_fixed_per_dimension():
    cfg = ExperimentConfig(init="offset-wishart", wishart_seed=3)
    m1, r1 = initial_law(cfg, 4)
    m2, r2 = initial_law(cfg, 4)
    assert np.array_equal(m1, m2) and np.array_equal(r1, r2)
    assert np.allclose(m1, r1 @ np.ones(4))
    m0, r0 = initial_law(ExperimentConfig(), 4)
    assert np.array_equal(m0, np.zeros(4)) and np.array_equal(r0, np.eye(4))


def test_replicate_streams_differ():
    a = replicate_rng(1, 0, 0, 0).random()
    assert a == replicate_rng(1, 0, 0, 0).random()
    assert len({a, replicate_rng(1, 0, 0, 1).random(), replicate_rng(1, 1, 0, 0).random(), replicate_rng(2, 0, 0, 0).random()}) == 4


# experiments --------------------------------------------------------------------


def test_single_replicate_meeting_time(tmp_path):
    cfg = ExperimentConfig(dims=[1], lags=[1.0], replicates=1)
    recs = run_meeting_times(cfg)
    assert len(recs) == 1 and recs[0].coupled and math.isfinite(recs[0].kappa)
    assert recs[0].events_to_couple >= 0 and recs[0].events_after_couple >= 0
    runs, summary = write_meeting_times(recs, cfg, str(tmp_path))
    assert len(_data_lines(runs)) == 2 and len(_data_lines(summary)) == 2
    assert "# quantile: nearest-rank" in open(summary).read()


def test_failures_are_recorded_not_dropped():
    cfg = ExperimentConfig(dims=[30], lags=[0.05], replicates=3, max_windows=1)
    recs = run_meeting_times(cfg)
    assert len(recs) == 3 and not any(r.coupled for r in recs)
    s = summarise_meeting_times(recs, 0.9)[0]
    assert s.n_failed == 3 and math.isnan(s.mean_kappa)


@pytest.mark.parametrize("sampler", ["bps", "boomerang", "iocs"])
def test_meeting_times_independent_of_worker_count(sampler):
    cfg = ExperimentConfig(sampler=sampler, dims=[1, 2], lags=[1.0], replicates=3, seed=5)
    a = run_meeting_times(cfg, threads=1)
    b = run_meeting_times(cfg, threads=2)
    assert a == b


def test_single_chain_budget_and_burn_in():
    sampler = make_sampler("bps", 1, 1.0)
    h = coordinate_moment(0, 2)
    init = PhaseState(np.array([0.3]), np.array([1.0]))
    # all of the budget spent on burn-in: the estimate is h at the last state
    warm = Trajectory(0.0)
    x, _ = advance(sampler, warm, init.x, init.v, np.inf, np.random.default_rng(1), max_events=5)
    assert single_chain_estimate(sampler, init, h, 5, 5, np.random.default_rng(1)) == h(x)
    rng = np.random.default_rng(2)
    vals = [single_chain_estimate(sampler, init, h, 2000, 100, rng) for _ in range(50)]
    assert abs(np.mean(vals) - 1.0) < 0.1


def test_degenerate_inefficiency_ratio_is_one():
    rows = [
        {"dim": 1, "lag": 1.0, "k": 1, "m": 10, "coupled": True, "coupled_m1": x, "single_m1": x, "coupled_m2": x * x, "single_m2": x * x}
        for x in (0.1, -0.4, 0.25)
    ]
    for s in summarise_inefficiency(rows):
        assert s["inefficiency"] == 1.0


def test_small_inefficiency_run(tmp_path):
    cfg = ExperimentConfig(dims=[2], lags=[2.0], replicates=6, pilot_replicates=6, M=2, seed=3)
    rows, summary = run_inefficiency(cfg)
    assert len(rows) == 6 and len(summary) == 2
    for r in rows:
        assert r["coupled"] and r["m"] == 10 * r["k"]
    for s in summary:
        assert s["inefficiency"] > 0 and math.isfinite(s["inefficiency"])
    a, b = write_inefficiency(rows, summary, cfg, str(tmp_path))
    assert len(_data_lines(a)) == 7 and len(_data_lines(b)) == 3


def test_ratio_se_matches_bootstrap():
    rng = np.random.default_rng(8)
    a, b = rng.exponential(2.0, 400), rng.exponential(1.0, 400)
    boot = []
    for _ in range(2000):
        i = rng.integers(0, 400, 400)
        boot.append(a[i].mean() / b[i].mean())
    assert ratio_se(a, b) == pytest.approx(np.std(boot), rel=0.1)
    assert math.isnan(ratio_se(a[:1], b[:1]))


def test_inefficiency_across_lags_in_ten_dimensions():
    # finite, positive, and no significant worsening as the lag grows
    cfg = ExperimentConfig(dims=[10], lags=[0.5, 1.0, 2.0], replicates=100, pilot_replicates=100, M=10, seed=11)
    rows, summary = run_inefficiency(cfg)
    assert all(r["coupled"] for r in rows)
    for p in (1, 2):
        cells = sorted((s for s in summary if s["moment"] == p), key=lambda s: s["lag"])
        for s in cells:
            assert 0 < s["inefficiency"] < math.inf
        for lo, hi in zip(cells, cells[1:]):
            band = 2 * math.hypot(lo["inefficiency_se"], hi["inefficiency_se"])
            assert hi["inefficiency"] - lo["inefficiency"] <= band, (p, lo, hi)


# command line ---------------------------------------------------------------------


def test_cli_sample_writes_trajectory(tmp_path, capsys):
    assert main(["sample", "--out", str(tmp_path), "--set", "dims=[2]", "--horizon", "5"]) == 0
    traj = load_trajectory(open(tmp_path / "trajectory.txt").read())
    assert traj.end == pytest.approx(5.0)


def test_cli_couple_prints_report(capsys):
    assert main(["couple", "--seed", "4", "--set", "dims=1"]) == 0
    out = capsys.readouterr().out
    assert '"coupled": true' in out


def test_cli_meeting_times_is_reproducible(tmp_path):
    args = ["meeting-times", "--seed", "2", "--set", "dims=[1,2]", "--set", "replicates=3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("meeting_times_runs.csv", "meeting_times_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_bad_config_returns_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("replicates: 0\n")
    assert main(["meeting-times", "--config", str(bad)]) == 2
    assert main(["meeting-times", "--config", str(tmp_path / "none.yaml")]) == 2
    assert main(["meeting-times", "--set", "nope=1"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_writes_to_out_dir(tmp_path):
    out = tmp_path / "deep" / "dir"
    assert main(["meeting-times", "--set", "dims=1", "--set", "replicates=1", "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["meeting_times_runs.csv", "meeting_times_summary.csv"]


def test_cell_indices_cover_grid():
    from pdmp_unbiased.harness import cells

    cs = cells(ExperimentConfig(dims=[1, 2], lags=[0.5, 1.0]))
    assert [c.index for c in cs] == [0, 1, 2, 3]
    assert {(c.dim, c.lag) for c in cs} == {(1, 0.5), (1, 1.0), (2, 0.5), (2, 1.0)}
    assert isinstance(cs[0], Cell)
