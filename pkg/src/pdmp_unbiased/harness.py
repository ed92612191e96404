"""Experiment harness: configuration, seeded replicates and CSV output.

Every replicate draws its randomness from
``SeedSequence(master_seed, spawn_key=(stream, cell, replicate))`` so the
results depend only on the configuration, never on how replicates are
scheduled across workers.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np
import yaml

from .coupled import DEFAULT_MODE, MODES, CoupledPair, extend_to, run_until_coupled, start_pair, window_driver
from .estimators import ESTIMATORS, EstimatorConfig, coordinate_moment, required_time
from .pdmp import BPS, IOCS, Boomerang, PhaseState, Trajectory, advance
from .targets import GaussianTarget, wishart_initial_law

SCHEMA_VERSION = 1
QUANTILE_METHOD = "nearest-rank"
SAMPLERS = ("bps", "boomerang", "iocs")
INITS = ("stationary", "offset-wishart")
REFRESH_POLICIES = ("sqrt-dim", "constant")

# stream tags keep the seed trees of different experiment stages apart
STREAM_MEETING, STREAM_PILOT, STREAM_COUPLED, STREAM_SINGLE = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    """Flat experiment configuration, loadable from a YAML mapping.

    The target is the standard Gaussian ``N(0, I)`` in each dimension of
    ``dims``. For the boomerang it is written as the reference
    ``N(0, 2 I)`` times ``exp(-|x|^2 / 4)`` so that bounces do occur.
    """

    sampler: str = "bps"
    dims: list = field(default_factory=lambda: [2, 5, 10, 20, 50])
    refresh_policy: str = "sqrt-dim"
    refresh_constant: float = 1.5
    lags: list = field(default_factory=lambda: [1.0])
    M: int = 10
    replicates: int = 100
    pilot_replicates: Optional[int] = None
    init: str = "stationary"
    wishart_seed: int = 0
    estimator: str = "acrg"
    quantile: float = 0.9
    m_multiplier: float = 10.0
    k: Optional[int] = None
    m: Optional[int] = None
    mode: str = DEFAULT_MODE
    max_windows: int = 100_000
    seed: int = 0

    def __post_init__(self):
        self.dims = [int(d) for d in _as_list(self.dims)]
        self.lags = [float(x) for x in _as_list(self.lags)]
        self.validate()

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.refresh_policy not in REFRESH_POLICIES:
            raise ValueError(f"refresh_policy must be one of {REFRESH_POLICIES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {tuple(ESTIMATORS)}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.dims or min(self.dims) < 1:
            raise ValueError("dimensions must be positive")
        if not self.lags or min(self.lags) <= 0:
            raise ValueError("lags must be positive")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if self.M < 1:
            raise ValueError("M must be at least 1")

    def refresh_rate(self, dim: int) -> float:
        if self.refresh_policy == "sqrt-dim":
            return math.sqrt(dim)
        return float(self.refresh_constant)

    @property
    def n_pilot(self) -> int:
        return self.pilot_replicates or self.replicates

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str, overrides: Optional[dict] = None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must hold a mapping")
        data.update(overrides or {})
        return cls.from_mapping(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _as_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


# building blocks -----------------------------------------------------------


def make_sampler(name: str, dim: int, refresh_rate: float):
    """Sampler targeting the standard Gaussian in ``dim`` dimensions."""
    if name == "bps":
        return BPS(GaussianTarget.standard(dim), refresh_rate)
    if name == "iocs":
        return IOCS(GaussianTarget.standard(dim), refresh_rate)
    if name == "boomerang":
        target = GaussianTarget(np.zeros(dim), precision=0.5 * np.eye(dim), cov_root=np.sqrt(2.0) * np.eye(dim))
        return Boomerang(target, refresh_rate)
    raise ValueError(f"unknown sampler {name!r}")


def replicate_rng(master: int, stream: int, cell: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(stream, cell, rep)))


def initial_law(cfg: ExperimentConfig, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and square root of the position law at time zero."""
    if cfg.init == "stationary":
        return np.zeros(dim), np.eye(dim)
    # one covariance per dimension, shared by all replicates
    rng = np.random.default_rng(np.random.SeedSequence(cfg.wishart_seed, spawn_key=(dim,)))
    return wishart_initial_law(dim, rng)


def draw_initial(sampler, mean, root, rng) -> PhaseState:
    x = mean + root @ rng.standard_normal(mean.size)
    return PhaseState(x, sampler.initial_velocity(rng), 0.0)


@dataclass
class Cell:
    index: int
    dim: int
    lag: float


def cells(cfg: ExperimentConfig) -> list[Cell]:
    out = []
    for d in cfg.dims:
        for lag in cfg.lags:
            out.append(Cell(len(out), d, lag))
    return out


def coupled_run(cfg: ExperimentConfig, cell: Cell, rng: np.random.Generator) -> CoupledPair:
    """One coupled pair run until it couples (or ``max_windows`` elapse)."""
    lam = cfg.refresh_rate(cell.dim)
    sampler = make_sampler(cfg.sampler, cell.dim, lam)
    mean, root = initial_law(cfg, cell.dim)
    init1 = draw_initial(sampler, mean, root, rng)
    init2 = draw_initial(sampler, mean, root, rng)
    pair = start_pair(sampler, init1, init2, cell.lag, rng)
    window = window_driver(cfg.sampler, sampler.target, lam, cfg.mode)
    run_until_coupled(pair, window, cfg.max_windows, rng)
    return pair


# records and CSV -----------------------------------------------------------


@dataclass
class RunRecord:
    """One replicate of a coupled experiment."""

    dim: int
    lag: float
    replicate: int
    coupled: bool
    kappa: Optional[float]
    events_to_couple: int
    events_after_couple: int
    values: dict = field(default_factory=dict)


def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def emit_csv(rows: Sequence[dict], path: str, columns: Sequence[str], schema: str, meta: Optional[dict] = None) -> str:
    """Write ``rows`` as CSV preceded by ``#`` metadata lines.

    Floats use the shortest round-trip representation; the file is UTF-8
    with LF line endings. Returns the path.
    """
    buf = io.StringIO()
    buf.write(f"# schema: {schema} v{SCHEMA_VERSION}\n")
    for key, val in (meta or {}).items():
        buf.write(f"# {key}: {val}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def _map(fn: Callable, tasks: Iterable, threads: int) -> list:
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


# meeting times -------------------------------------------------------------


def _meeting_task(args) -> RunRecord:
    cfg, cell, rep, stream = args
    pair = coupled_run(cfg, cell, replicate_rng(cfg.seed, stream, cell.index, rep))
    return RunRecord(cell.dim, cell.lag, rep, pair.coupled, pair.kappa, pair.events_before, pair.events_after)


def nearest_rank_quantile(values: Sequence[float], level: float) -> float:
    """Smallest value with at least ``level`` of the sample at or below it."""
    if len(values) == 0:
        raise ValueError("empty sample")
    xs = sorted(values)
    return xs[max(math.ceil(level * len(xs)) - 1, 0)]


@dataclass
class CellSummary:
    dim: int
    lag: float
    n: int
    n_failed: int
    mean_kappa: float
    median_kappa: float
    q_kappa: float
    mean_events: float


def summarise_meeting_times(records: Sequence[RunRecord], level: float) -> list[CellSummary]:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.dim, r.lag), []).append(r)
    out = []
    for (d, lag), rs in groups.items():
        ks = [r.kappa for r in rs if r.coupled]
        nan = float("nan")
        out.append(
            CellSummary(
                dim=d,
                lag=lag,
                n=len(rs),
                n_failed=sum(not r.coupled for r in rs),
                mean_kappa=float(np.mean(ks)) if ks else nan,
                median_kappa=float(np.median(ks)) if ks else nan,
                q_kappa=nearest_rank_quantile(ks, level) if ks else nan,
                mean_events=float(np.mean([r.events_to_couple for r in rs])),
            )
        )
    return out


def run_meeting_times(cfg: ExperimentConfig, threads: int = 1, stream: int = STREAM_MEETING) -> list[RunRecord]:
    """``cfg.replicates`` coupled runs in every (dimension, lag) cell."""
    n = cfg.replicates if stream != STREAM_PILOT else cfg.n_pilot
    tasks = [(cfg, c, rep, stream) for c in cells(cfg) for rep in range(n)]
    return _map(_meeting_task, tasks, threads)


RUN_COLUMNS = ["dim", "lag", "replicate", "coupled", "kappa", "events_to_couple", "events_after_couple"]
SUMMARY_COLUMNS = ["dim", "lag", "n", "n_failed", "mean_kappa", "median_kappa", "q_kappa", "mean_events"]


def write_meeting_times(records: Sequence[RunRecord], cfg: ExperimentConfig, out_dir: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    meta = _meta(cfg)
    runs = emit_csv(
        [dataclasses.asdict(r) for r in records],
        os.path.join(out_dir, "meeting_times_runs.csv"),
        RUN_COLUMNS,
        "meeting-times-runs",
        meta,
    )
    summary = emit_csv(
        [dataclasses.asdict(s) for s in summarise_meeting_times(records, cfg.quantile)],
        os.path.join(out_dir, "meeting_times_summary.csv"),
        SUMMARY_COLUMNS,
        "meeting-times-summary",
        meta,
    )
    return runs, summary


def _meta(cfg: ExperimentConfig) -> dict:
    return {
        "quantile": f"{QUANTILE_METHOD} at level {cfg.quantile!r}",
        "sampler": cfg.sampler,
        "init": cfg.init,
        "refresh": cfg.refresh_policy if cfg.refresh_policy == "sqrt-dim" else f"constant {cfg.refresh_constant!r}",
        "mode": cfg.mode,
        "seed": cfg.seed,
    }


# (k, m) selection and inefficiency ------------------------------------------


def select_k_m(meeting_times: Sequence[float], quantile: float, multiplier: float, lag: float) -> tuple[int, int]:
    """Burn-in ``k = ceil(q / lag)`` windows from the nearest-rank quantile ``q``.

    ``m = round(multiplier * k)``. ``k`` is at least one so that every
    estimator family is defined.
    """
    q = nearest_rank_quantile(list(meeting_times), quantile)
    # tolerate representation error when q is a multiple of lag
    k = max(1, math.ceil(q / lag * (1.0 - 1e-12)))
    m = max(k, int(round(multiplier * k)))
    return k, m


def single_chain_estimate(sampler, init: PhaseState, h, budget: int, burn_in: int, rng) -> float:
    """Time average of ``h`` along one chain after ``burn_in`` events, ``budget`` events in all."""
    x, v = np.asarray(init.x, float), np.asarray(init.v, float)
    if burn_in > 0:
        warm = Trajectory(0.0)
        x, v = advance(sampler, warm, x, v, np.inf, rng, max_events=burn_in)
        start = warm.end
    else:
        start = 0.0
    rest = budget - burn_in
    if rest <= 0:
        return h(x)
    traj = Trajectory(start)
    advance(sampler, traj, x, v, np.inf, rng, max_events=rest)
    if traj.end <= start:
        return h(x)
    return h.integral(traj, start, traj.end) / (traj.end - start)


MOMENTS = {1: 0.0, 2: 1.0}  # moments of the first coordinate under N(0, I)


def _inefficiency_task(args) -> dict:
    cfg, cell, rep, k, m = args
    rng = replicate_rng(cfg.seed, STREAM_COUPLED, cell.index, rep)
    pair = coupled_run(cfg, cell, rng)
    row = {"dim": cell.dim, "lag": cell.lag, "replicate": rep, "k": k, "m": m, "coupled": pair.coupled}
    if not pair.coupled:
        return row
    est_cfg = EstimatorConfig(cell.lag, k, m, cfg.M)
    lam = cfg.refresh_rate(cell.dim)
    window = window_driver(cfg.sampler, pair_target(cfg, cell.dim, lam), lam, cfg.mode)
    before = pair.events_before
    extend_to(pair, window, required_time(est_cfg, pair.kappa), rng)
    estimator = ESTIMATORS[cfg.estimator]
    row.update(kappa=pair.kappa, events_to_couple=before, events_after_couple=pair.events_after)
    budget = before + pair.events_after
    srng = replicate_rng(cfg.seed, STREAM_SINGLE, cell.index, rep)
    sampler = make_sampler(cfg.sampler, cell.dim, lam)
    mean, root = initial_law(cfg, cell.dim)
    init = draw_initial(sampler, mean, root, srng)
    for p in MOMENTS:
        h = coordinate_moment(0, p)
        rep_ = estimator(pair, h, est_cfg)
        row[f"coupled_m{p}"] = rep_.value
        row[f"correction_m{p}"] = rep_.correction
        row[f"single_m{p}"] = single_chain_estimate(sampler, init, h, budget, before, srng)
    return row


def pair_target(cfg: ExperimentConfig, dim: int, lam: float):
    return make_sampler(cfg.sampler, dim, lam).target


def run_inefficiency(
    cfg: ExperimentConfig,
    k: Optional[int] = None,
    m: Optional[int] = None,
    threads: int = 1,
) -> tuple[list[dict], list[dict]]:
    """Budget-matched comparison of a coupled estimator with a single chain.

    Without ``k``/``m`` each cell picks them from a pilot of meeting times.
    Returns per-replicate rows and per-(cell, moment) summaries with the
    inefficiency ``MSE(coupled) / MSE(single)``.
    """
    k = cfg.k if k is None else k
    m = cfg.m if m is None else m
    tasks = []
    chosen = {}
    for cell in cells(cfg):
        if k is None:
            pilot_cfg = cfg.replace(dims=[cell.dim], lags=[cell.lag])
            pilot = _map(
                _meeting_task,
                [(pilot_cfg, Cell(cell.index, cell.dim, cell.lag), r, STREAM_PILOT) for r in range(cfg.n_pilot)],
                threads,
            )
            ks = [r.kappa for r in pilot if r.coupled]
            chosen[cell.index] = select_k_m(ks, cfg.quantile, cfg.m_multiplier, cell.lag)
        else:
            chosen[cell.index] = (int(k), int(m if m is not None else round(cfg.m_multiplier * k)))
        ck, cm = chosen[cell.index]
        tasks += [(cfg, cell, rep, ck, cm) for rep in range(cfg.replicates)]
    rows = _map(_inefficiency_task, tasks, threads)
    return rows, summarise_inefficiency(rows)


def summarise_inefficiency(rows: Sequence[dict]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["dim"], r["lag"]), []).append(r)
    out = []
    for (d, lag), rs in groups.items():
        ok = [r for r in rs if r["coupled"]]
        for p, truth in MOMENTS.items():
            a = np.array([(r[f"coupled_m{p}"] - truth) ** 2 for r in ok])
            b = np.array([(r[f"single_m{p}"] - truth) ** 2 for r in ok])
            mse_c = float(a.mean()) if ok else float("nan")
            mse_s = float(b.mean()) if ok else float("nan")
            out.append(
                {
                    "dim": d,
                    "lag": lag,
                    "moment": p,
                    "k": rs[0]["k"],
                    "m": rs[0]["m"],
                    "n": len(rs),
                    "n_failed": len(rs) - len(ok),
                    "mse_coupled": mse_c,
                    "mse_single": mse_s,
                    "inefficiency": mse_c / mse_s if mse_s > 0 else float("nan"),
                    "inefficiency_se": ratio_se(a, b),
                }
            )
    return out


def ratio_se(a: np.ndarray, b: np.ndarray) -> float:
    """Delta-method standard error of ``mean(a) / mean(b)`` over paired samples."""
    n = len(a)
    if n < 2 or not b.mean() > 0:
        return float("nan")
    A, B = a.mean(), b.mean()
    c = np.cov(a, b)
    var = (c[0, 0] / B**2 + A**2 * c[1, 1] / B**4 - 2 * A * c[0, 1] / B**3) / n
    return float(np.sqrt(max(var, 0.0)))


INEFF_RUN_COLUMNS = [
    "dim", "lag", "replicate", "k", "m", "coupled", "kappa", "events_to_couple", "events_after_couple",
    "coupled_m1", "correction_m1", "single_m1", "coupled_m2", "correction_m2", "single_m2",
]
INEFF_SUMMARY_COLUMNS = [
    "dim", "lag", "moment", "k", "m", "n", "n_failed", "mse_coupled", "mse_single", "inefficiency", "inefficiency_se",
]


def write_inefficiency(rows, summary, cfg: ExperimentConfig, out_dir: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    meta = _meta(cfg)
    meta["estimator"] = cfg.estimator
    meta["budget"] = "events = bounces + refreshments + rejected proposals"
    a = emit_csv(rows, os.path.join(out_dir, "inefficiency_runs.csv"), INEFF_RUN_COLUMNS, "inefficiency-runs", meta)
    b = emit_csv(summary, os.path.join(out_dir, "inefficiency_summary.csv"), INEFF_SUMMARY_COLUMNS, "inefficiency-summary", meta)
    return a, b


def loglog_slope(dims: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(dims)``."""
    return float(np.polyfit(np.log(dims), np.log(values), 1)[0])
