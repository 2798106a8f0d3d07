"""Evaluation harness: grid dumps, oracle comparison, filtered rollouts, diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import critic as cr
from .dynamics import PlantSpec, constraint, step
from .explore import ou_sample_params, ou_step
from .oracle import GridSpec, ValueTable, interp_weights
from .qpsolve import LP_FALLBACK, FilterConfig, FilterResult, feasibility_rate, qp_filter
from .trainer import episode_reset

DEAD_BAND = 0.02


@dataclass
class GridDump:
    grid: GridSpec
    nodes: np.ndarray
    v: np.ndarray
    b: np.ndarray
    a: np.ndarray

    def __len__(self):
        return self.nodes.shape[0]


@dataclass
class CompareReport:
    sign_agreement: float
    safe_set_iou: float
    rmse_safe_region: float


def eval_grid(bundle: cr.CriticBundle, grid: GridSpec) -> GridDump:
    nodes = grid.nodes()
    v = cr.value_of(bundle, "online1", nodes)
    a, b = cr.ab_of(bundle, "online", nodes)
    return GridDump(grid, nodes, v, b, a)


def write_grid_csv(path, dump: GridDump) -> None:
    n, m = dump.nodes.shape[1], dump.a.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(n)] + ["v", "b"] + [f"a{j}" for j in range(m)])
        for k in range(len(dump)):
            row = list(dump.nodes[k]) + [dump.v[k], dump.b[k]] + list(dump.a[k])
            w.writerow([repr(float(x)) for x in row])


def read_grid_csv(path, grid: GridSpec) -> GridDump:
    with open(path) as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = header.index("v")
    return GridDump(grid, data[:, :n], data[:, n], data[:, n + 1], data[:, n + 2:])


def resample(table: ValueTable, grid: GridSpec) -> ValueTable:
    """Interpolate an oracle table onto another grid's nodes."""
    idx, w = interp_weights(table.grid, grid.nodes())
    vals = (table.flat[idx] * w).sum(axis=1)
    return ValueTable(grid, vals.reshape(grid.cells), table.lam, table.dt, table.iterations, table.residual)


def compare_oracle(dump: GridDump, oracle: ValueTable, dead_band: float = DEAD_BAND) -> CompareReport:
    """Agreement of the learned value with an oracle table on the same grid.

    The oracle is divided by its maximum to match the learner's c_max scaling.
    Nodes whose normalized oracle value lies within ``dead_band`` of zero are
    left out of the sign agreement.
    """
    if not dump.grid.same_as(oracle.grid):
        raise ValueError("dump and oracle grids differ")
    ref = oracle.flat / np.max(oracle.flat)
    v = dump.v
    decided = np.abs(ref) > dead_band
    agree = np.sign(v[decided]) == np.sign(ref[decided])
    sign_agreement = float(np.mean(agree)) if agree.size else 1.0
    safe_l, safe_o = v >= 0, ref >= 0
    union = np.count_nonzero(safe_l | safe_o)
    iou = np.count_nonzero(safe_l & safe_o) / union if union else 1.0
    region = safe_o
    rmse = float(np.sqrt(np.mean((v[region] - ref[region]) ** 2))) if np.any(region) else 0.0
    return CompareReport(sign_agreement, float(iou), rmse)


class Reference:
    """Raw-input generators for rollouts."""

    @staticmethod
    def bang_bang(period: float):
        def gen(plant, t, rng):
            lo, hi = plant.input_set.bounds()
            return hi.copy() if int(np.floor(t / (0.5 * period))) % 2 == 0 else lo.copy()
        return gen

    @staticmethod
    def constant(u):
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        return lambda plant, t, rng: u.copy()

    @staticmethod
    def ou(seed: int = 0):
        state = {}

        def gen(plant, t, rng):
            if "proc" not in state:
                state["proc"] = ou_sample_params(rng, plant.input_set)
            return ou_step(state["proc"], plant.dt, rng)
        return gen


@dataclass
class RolloutLog:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u_raw: list = field(default_factory=list)
    u: list = field(default_factory=list)
    status: list = field(default_factory=list)
    c: list = field(default_factory=list)
    v: list = field(default_factory=list)
    results: list = field(default_factory=list)

    @property
    def min_c(self) -> float:
        return float(np.min(self.c))

    @property
    def violations(self) -> int:
        return int(np.sum(np.asarray(self.c) < 0))

    @property
    def fallback_rate(self) -> float:
        return feasibility_rate(self.results) if self.results else 0.0

    def summary(self) -> dict:
        return {"min_c": self.min_c, "violations": self.violations, "fallback_rate": self.fallback_rate,
                "steps": len(self.results)}


def filter_rollout(bundle: cr.CriticBundle, plant: PlantSpec, x0, reference, alpha: float,
                   horizon: float, seed: int = 0) -> RolloutLog:
    """Closed-loop rollout of the learned filter for ``horizon`` seconds.

    Row k holds the state at t_k, the raw and filtered inputs applied from
    t_k, and c, v at t_k; the final row carries the terminal state only.
    """
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(alpha)
    x = np.asarray(x0, dtype=np.float64)
    logr = RolloutLog()
    steps = int(round(horizon / plant.dt))
    nan_u = np.full(plant.m, np.nan)
    for k in range(steps + 1):
        t = k * plant.dt
        v = cr.value_of(bundle, "online1", x)
        c = constraint(plant, x)
        logr.t.append(t)
        logr.x.append(x)
        logr.c.append(c)
        logr.v.append(v)
        if k == steps:
            logr.u_raw.append(nan_u)
            logr.u.append(nan_u)
            logr.status.append("")
            break
        u_raw = plant.input_set.clip(reference(plant, t, rng))
        a, b = cr.ab_of(bundle, "online", x)
        res = qp_filter(u_raw, a, b, v, cfg, bundle.input_set)
        logr.u_raw.append(u_raw)
        logr.u.append(res.u)
        logr.status.append(res.status)
        logr.results.append(res)
        x = step(plant, x, res.u)
    return logr


def write_rollout_csv(path, logr: RolloutLog) -> None:
    n, m = len(logr.x[0]), len(logr.u[0])
    header = (["t"] + [f"x{i}" for i in range(n)] + [f"u_raw{j}" for j in range(m)]
              + [f"u{j}" for j in range(m)] + ["status", "c", "v"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(logr.t)):
            row = ([repr(float(logr.t[k]))] + [repr(float(a)) for a in logr.x[k]]
                   + [repr(float(a)) for a in logr.u_raw[k]] + [repr(float(a)) for a in logr.u[k]]
                   + [logr.status[k], repr(float(logr.c[k])), repr(float(logr.v[k]))])
            w.writerow(row)


def diagnose_infeasibility(bundle: cr.CriticBundle, plant: PlantSpec, calls: int, alpha: float = 1.0,
                           seed: int = 0, episode_cap: int = 400) -> float:
    """LP-fallback fraction over ``calls`` filter invocations along OU-driven rollouts.

    Returns 0.0 for ``calls == 0``.
    """
    if calls <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(alpha)
    fallbacks = 0
    done = 0
    while done < calls:
        x = episode_reset(plant, rng)
        proc = ou_sample_params(rng, plant.input_set)
        for _ in range(episode_cap):
            if done >= calls:
                break
            u_raw = ou_step(proc, plant.dt, rng)
            v = cr.value_of(bundle, "online1", x)
            a, b = cr.ab_of(bundle, "online", x)
            res = qp_filter(u_raw, a, b, v, cfg, bundle.input_set)
            fallbacks += res.status == LP_FALLBACK
            done += 1
            x = step(plant, x, res.u)
            if constraint(plant, x) < 0:
                break
    return fallbacks / calls


def ou_violation_study(bundle: cr.CriticBundle, plant: PlantSpec, episodes: int, alpha: float = 1.0,
                       seed: int = 0, episode_cap: int = 400) -> dict:
    """Filtered OU episodes from reset states: fraction of episodes with a violation."""
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(alpha)
    violated = 0
    results: list[FilterResult] = []
    for _ in range(episodes):
        x = episode_reset(plant, rng)
        proc = ou_sample_params(rng, plant.input_set)
        for _ in range(episode_cap):
            u_raw = ou_step(proc, plant.dt, rng)
            v = cr.value_of(bundle, "online1", x)
            a, b = cr.ab_of(bundle, "online", x)
            res = qp_filter(u_raw, a, b, v, cfg, bundle.input_set)
            results.append(res)
            x = step(plant, x, res.u)
            if constraint(plant, x) < 0:
                violated += 1
                break
    return {"episodes": episodes, "violation_rate": violated / max(episodes, 1),
            "fallback_rate": feasibility_rate(results) if results else 0.0}
