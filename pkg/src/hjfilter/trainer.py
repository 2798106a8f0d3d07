"""Online safety-filter learning loop.

Per environment step: draw a raw OU input, filter it through the QP with the
current critic, apply it, store the (normalized) transition, take one
gradient step on both losses, Polyak-average the targets and advance the
discount and learning-rate schedules. Episodes end on a constraint violation
or after ``episode_cap`` steps.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import critic as cr
from . import nn
from .dynamics import PlantSpec, Transition, constraint, make_plant, step
from .explore import ReplayBuffer, ou_sample_params, ou_step
from .qpsolve import LP_FALLBACK, FilterConfig, qp_filter

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss_v", "loss_dv", "lambda", "lr", "violations", "fallback_rate",
                 "episode_return_min_c")

RESET_BOXES = {
    "double_integrator": ([-1.2, -1.0], [1.2, 1.0]),
    "inverted_pendulum": ([-0.5, -0.2, -0.1, -0.2], [0.5, 0.2, 0.1, 0.2]),
    "bouncing_mass": ([0.2, -1.0], [1.5, 1.0]),
}


@dataclass(frozen=True)
class ScheduleSpec:
    start: float
    end: float
    horizon: int
    power: int = 5

    def __post_init__(self):
        if self.horizon <= 0 or self.power < 1:
            raise ValueError("schedule needs horizon > 0 and power >= 1")


def schedule_value(spec: ScheduleSpec, step_idx: int) -> float:
    """Polynomial decay from ``start`` to ``end`` over ``horizon`` steps."""
    if step_idx < 0:
        raise ValueError("step must be non-negative")
    frac = 1.0 - min(step_idx, spec.horizon) / spec.horizon
    return spec.end + (spec.start - spec.end) * frac**spec.power


@dataclass
class CMaxTracker:
    c_max: float = 1e-6

    def __post_init__(self):
        if not self.c_max > 0:
            raise ValueError("c_max floor must be positive")


def normalize_c(tracker: CMaxTracker, c_raw: float) -> float:
    if c_raw > tracker.c_max:
        tracker.c_max = float(c_raw)
    return c_raw / tracker.c_max


@dataclass
class TrainConfig:
    plant: str = "double_integrator"
    dt: float = 0.1
    seed: int = 0
    batch: int = 256
    tau: float = 0.005
    alpha: float = 1.0
    total_steps: int = 300_000
    episode_cap: int = 400
    hidden: tuple = (256, 256)
    lr_start: float = 3e-4
    lr_end: float = 1e-6
    # discount endpoints are in units of 1/dt
    lambda_start_dt: float = 0.1
    lambda_end_dt: float = 1e-4
    schedule_power: int = 5
    schedule_horizon: int = 0  # 0 means total_steps
    buffer_capacity: int = 1_000_000
    log_every: int = 1000
    c_floor: float = 1e-6
    advantage: str = "centered"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.schedule_horizon or max(self.total_steps, 1)

    def lambda_schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.lambda_start_dt / self.dt, self.lambda_end_dt / self.dt,
                            self.horizon, self.schedule_power)

    def lr_schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.lr_start, self.lr_end, self.horizon, self.schedule_power)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, val)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)


def _coerce(key, val):
    if key in ("plant", "advantage"):
        return val
    if key == "hidden":
        return tuple(int(v) for v in val.split(",") if v.strip())
    default = getattr(TrainConfig, key)
    if isinstance(default, int) and not isinstance(default, bool):
        return int(float(val)) if "e" in val.lower() else int(val)
    return float(val)


def load_config(path, **overrides) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def episode_reset(plant: PlantSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = RESET_BOXES[plant.id]
    return rng.uniform(lo, hi)


@dataclass
class TrainState:
    bundle: cr.CriticBundle
    opt_v1: nn.AdamState
    opt_v2: nn.AdamState
    opt_d: nn.AdamState
    tracker: CMaxTracker
    buffer: ReplayBuffer
    step: int = 0
    metrics: list = field(default_factory=list)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def filter_action(bundle: cr.CriticBundle, x: np.ndarray, u_raw: np.ndarray, alpha: float):
    v = cr.value_of(bundle, "online1", x)
    a, b = cr.ab_of(bundle, "online", x)
    return qp_filter(u_raw, a, b, v, FilterConfig(alpha), bundle.input_set), v


def update_critic(state: TrainState, batch: cr.Batch, lr: float, tau: float) -> cr.LossResult:
    """One Adam step on both losses followed by Polyak target updates."""
    b = state.bundle
    res = cr.losses(b, batch)
    b.v1, state.opt_v1 = nn.adam_step(b.v1, res.grad_v1, state.opt_v1, lr)
    b.v2, state.opt_v2 = nn.adam_step(b.v2, res.grad_v2, state.opt_v2, lr)
    b.dnet, state.opt_d = nn.adam_step(b.dnet, res.grad_dnet, state.opt_d, lr)
    b.v1_target = nn.polyak_update(b.v1_target, b.v1, tau)
    b.v2_target = nn.polyak_update(b.v2_target, b.v2, tau)
    b.dnet_target = nn.polyak_update(b.dnet_target, b.dnet, tau)
    return res


def init_state(cfg: TrainConfig, plant: PlantSpec) -> TrainState:
    lam0 = schedule_value(cfg.lambda_schedule(), 0)
    bundle = cr.make_bundle(plant.n, plant.input_set, plant.dt, lam0, cfg.hidden, seed=cfg.seed,
                            advantage=cfg.advantage)
    return TrainState(bundle, nn.adam_init(bundle.v1), nn.adam_init(bundle.v2), nn.adam_init(bundle.dnet),
                      CMaxTracker(cfg.c_floor),
                      ReplayBuffer(min(cfg.buffer_capacity, max(cfg.total_steps, 1)), plant.n, plant.m))


def train(cfg: TrainConfig, out_dir=None, stop_after: int | None = None) -> TrainState:
    """Run the learning loop for ``cfg.total_steps`` environment steps.

    ``stop_after`` truncates the run without changing the schedules, so the
    metrics of a truncated run are a prefix of the full run's metrics.
    """
    plant = make_plant(cfg.plant, cfg.dt)
    state = init_state(cfg, plant)
    rng = np.random.default_rng(cfg.seed + 1)
    lam_spec, lr_spec = cfg.lambda_schedule(), cfg.lr_schedule()
    limit = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)

    win = {"loss_v": 0.0, "loss_dv": 0.0, "n": 0, "violations": 0, "fallbacks": 0, "ep_min": []}
    bundle = state.bundle
    while state.step < limit:
        x = episode_reset(plant, rng)
        c_raw = constraint(plant, x)
        c = normalize_c(state.tracker, c_raw)
        ou = ou_sample_params(rng, plant.input_set)
        ep_min = c_raw
        for _ in range(cfg.episode_cap):
            if state.step >= limit:
                break
            u_raw = ou_step(ou, plant.dt, rng)
            res, _ = filter_action(bundle, x, u_raw, cfg.alpha)
            x_next = step(plant, x, res.u)
            c_next_raw = constraint(plant, x_next)
            c_next = normalize_c(state.tracker, c_next_raw)
            state.buffer.push(Transition(x, res.u, c, x_next, c_next))

            lr = schedule_value(lr_spec, state.step)
            batch = state.buffer.sample(cfg.batch, rng)
            try:
                loss = update_critic(state, batch, lr, cfg.tau)
            except (FloatingPointError, cr.NonFiniteLoss):
                if out_dir is not None:
                    cr.save_bundle(os.path.join(out_dir, "crash"), bundle, state.step, state.tracker.c_max)
                raise
            state.step += 1
            bundle.lam = schedule_value(lam_spec, state.step)

            win["loss_v"] += loss.loss_v
            win["loss_dv"] += loss.loss_dv
            win["n"] += 1
            win["fallbacks"] += res.status == LP_FALLBACK
            ep_min = min(ep_min, c_next_raw)
            violated = c_next < 0
            if state.step % cfg.log_every == 0:
                _emit(state, win, bundle.lam, lr)
            if violated:
                win["violations"] += 1
                break
            x, c = x_next, c_next
        win["ep_min"].append(ep_min)
    if win["n"]:
        _emit(state, win, bundle.lam, schedule_value(lr_spec, max(state.step - 1, 0)))
    if out_dir is not None:
        save_run(out_dir, state, cfg)
    return state


def _emit(state, win, lam, lr):
    n = max(win["n"], 1)
    row = {
        "step": state.step,
        "loss_v": win["loss_v"] / n,
        "loss_dv": win["loss_dv"] / n,
        "lambda": lam,
        "lr": lr,
        "violations": win["violations"],
        "fallback_rate": win["fallbacks"] / n,
        "episode_return_min_c": float(np.mean(win["ep_min"])) if win["ep_min"] else float("nan"),
    }
    state.metrics.append(row)
    log.info("step %d loss_v %.3e loss_dv %.3e lambda %.4g violations %d fallback %.4f",
             row["step"], row["loss_v"], row["loss_dv"], lam, row["violations"], row["fallback_rate"])
    win.update({"loss_v": 0.0, "loss_dv": 0.0, "n": 0, "violations": 0, "fallbacks": 0, "ep_min": []})


def save_run(out_dir, state: TrainState, cfg: TrainConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cr.save_bundle(out_dir, state.bundle, state.step, state.tracker.c_max, seed=cfg.seed,
                   extra={"plant": cfg.plant, "alpha": cfg.alpha})
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(state.metrics))
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
