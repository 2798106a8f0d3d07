"""Tabular ground truth for the discounted safety value on a state grid.

Value iteration runs the semi-Lagrangian recursion

    V(x) <- max_u min{ c(x), int(c, lam, dt) + exp(-lam dt) V(step(x, u)) }

with multilinear interpolation (queries outside the grid clamp to the
boundary) and a uniform control grid. Everything here is independent of the
neural critic and serves as its reference.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dynamics import PlantSpec, constraint, step


class NonConvergence(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned node grid; ``cells`` counts nodes per dimension."""

    lo: np.ndarray
    hi: np.ndarray
    cells: tuple
    u_samples: int = 21

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        if not (self.lo.shape == self.hi.shape == (len(self.cells),)):
            raise ValueError("lo, hi and cells must share the state dimension")
        if np.any(self.lo >= self.hi):
            raise ValueError("grid requires lo < hi")
        if min(self.cells) < 2 or self.u_samples < 2:
            raise ValueError("need at least 2 nodes per axis and 2 control samples")

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.cells) - 1)

    def axes(self) -> list:
        return [np.linspace(l, h, c) for l, h, c in zip(self.lo, self.hi, self.cells)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "cells": list(self.cells),
                "u_samples": self.u_samples}

    @classmethod
    def parse(cls, text: str, u_samples: int = 21) -> "GridSpec":
        """Parse ``"lo:hi:cells,lo:hi:cells"``."""
        lo, hi, cells = [], [], []
        for part in text.split(","):
            a, b, c = part.split(":")
            lo.append(float(a))
            hi.append(float(b))
            cells.append(int(c))
        return cls(np.array(lo), np.array(hi), tuple(cells), u_samples)

    def same_as(self, other: "GridSpec") -> bool:
        return (self.cells == other.cells and np.array_equal(self.lo, other.lo)
                and np.array_equal(self.hi, other.hi))


def interp_weights(grid: GridSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner node indices and multilinear weights, shape (P, 2^n) each."""
    pts = np.atleast_2d(pts)
    cells = np.asarray(grid.cells)
    frac = (pts - grid.lo) / grid.spacing
    frac = np.clip(frac, 0.0, cells - 1)
    base = np.minimum(np.floor(frac).astype(np.int64), cells - 2)
    t = frac - base
    strides = np.array([int(np.prod(cells[i + 1:])) for i in range(grid.n)])
    idx_cols, w_cols = [], []
    for corner in itertools.product((0, 1), repeat=grid.n):
        corner = np.asarray(corner)
        idx_cols.append(((base + corner) * strides).sum(axis=1))
        w_cols.append(np.prod(np.where(corner == 1, t, 1.0 - t), axis=1))
    return np.stack(idx_cols, axis=1), np.stack(w_cols, axis=1)


def control_grid(plant: PlantSpec, u_samples: int) -> np.ndarray:
    lo, hi = plant.input_set.bounds()
    axes = [np.linspace(l, h, u_samples) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    us = np.stack([m.ravel() for m in mesh], axis=-1)
    if not plant.input_set.is_box:
        us = us[[plant.input_set.contains(u) for u in us]]
    return us


@dataclass(eq=False)
class GridModel:
    """Precomputed one-step transitions of every node under every sampled control."""

    plant: PlantSpec
    grid: GridSpec
    controls: np.ndarray
    nodes: np.ndarray
    c: np.ndarray
    c_next: np.ndarray
    next_idx: np.ndarray
    next_w: np.ndarray
    x_next: np.ndarray
    interp: sparse.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.interp is None:
            rows = np.repeat(np.arange(self.next_idx.shape[0]), self.next_idx.shape[1])
            self.interp = sparse.csr_matrix((self.next_w.ravel(), (rows, self.next_idx.ravel())),
                                            shape=(self.next_idx.shape[0], self.nodes.shape[0]))

    @classmethod
    def build(cls, plant: PlantSpec, grid: GridSpec) -> "GridModel":
        if grid.n != plant.n:
            raise ValueError("grid dimension does not match plant")
        nodes = grid.nodes()
        controls = control_grid(plant, grid.u_samples)
        N, K = nodes.shape[0], controls.shape[0]
        xs = np.repeat(nodes, K, axis=0)
        us = np.tile(controls, (N, 1))
        x_next = step(plant, xs, us)
        idx, w = interp_weights(grid, x_next)
        return cls(plant, grid, controls, nodes, constraint(plant, nodes),
                   constraint(plant, x_next).reshape(N, K), idx, w, x_next.reshape(N, K, plant.n))

    @property
    def N(self) -> int:
        return self.nodes.shape[0]

    @property
    def K(self) -> int:
        return self.controls.shape[0]

    def lookup_next(self, flat_values: np.ndarray) -> np.ndarray:
        """Interpolated node function at every (node, control) successor, shape (N, K)."""
        return (self.interp @ flat_values).reshape(self.N, self.K)


def discounted_int(c, lam, dt):
    return -np.expm1(-lam * dt) * c


@dataclass(eq=False)
class ValueTable:
    grid: GridSpec
    values: np.ndarray
    lam: float
    dt: float
    iterations: int = 0
    residual: float = 0.0
    policy: np.ndarray | None = None
    model: GridModel | None = field(default=None, repr=False)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        idx, w = interp_weights(self.grid, x)
        out = (self.flat[idx] * w).sum(axis=1)
        return float(out[0]) if x.ndim == 1 else out

    def metadata(self) -> dict:
        return {"grid": self.grid.to_dict(), "lambda": self.lam, "dt": self.dt,
                "iterations": self.iterations, "residual": self.residual}


def bellman_q_table(model: GridModel, flat_values: np.ndarray, lam: float) -> np.ndarray:
    """min{c, int(c) + e^{-lam dt} V(x')} at every (node, control)."""
    dt = model.plant.dt
    cnode = model.c[:, None]
    return np.minimum(cnode, discounted_int(cnode, lam, dt) + np.exp(-lam * dt) * model.lookup_next(flat_values))


def value_iteration(plant: PlantSpec, grid: GridSpec, lam: float, tol: float = 1e-9,
                    max_iters: int = 100_000, model: GridModel | None = None,
                    init: np.ndarray | None = None) -> ValueTable:
    """Fixed point of the discounted safety recursion, started from V = c."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    model = model or GridModel.build(plant, grid)
    V = model.c.copy() if init is None else np.asarray(init, dtype=np.float64).ravel().copy()
    residual = np.inf
    for it in range(1, max_iters + 1):
        Q = bellman_q_table(model, V, lam)
        V_new = Q.max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if residual < tol:
            policy = Q.argmax(axis=1)
            return ValueTable(grid, V.reshape(grid.cells), float(lam), plant.dt, it, residual, policy, model)
    raise NonConvergence(f"value iteration did not converge in {max_iters} sweeps", residual)


def tabular_q(V: ValueTable, plant: PlantSpec, x, u, s: float | None = None) -> float:
    """min{c(x), int(c, lam, s) + e^{-lam s} V(x_s)} with the control held for s (default dt)."""
    s = plant.dt if s is None else float(s)
    x = np.asarray(x, dtype=np.float64)
    c = constraint(plant, x)
    xs = step(plant.with_dt(s), x, u)
    return float(min(c, discounted_int(c, V.lam, s) + np.exp(-V.lam * s) * V(xs)))


def value_gradient(V: ValueTable, x) -> np.ndarray:
    """Central differences of the interpolated table with one grid spacing."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = V.grid.spacing
    grads = np.empty_like(x)
    for i in range(V.grid.n):
        e = np.zeros(V.grid.n)
        e[i] = h[i]
        grads[:, i] = (V(x + e) - V(x - e)) / (2.0 * h[i])
    return grads


def advantage_closed_form(c, v, dirderiv, lam):
    """min{c - V, dV.(f + g u) + lam (c - V)}."""
    return np.minimum(c - v, dirderiv + lam * (c - v))


def tabular_advantage(V: ValueTable, plant: PlantSpec, x, u, derivative: str = "gradient") -> float:
    """Closed-form advantage at (x, u).

    ``derivative="gradient"`` uses central differences of V dotted with
    (step(x, u) - x)/dt; ``"transition"`` uses (V(step(x, u)) - V(x))/dt,
    which stays consistent with the grid recursion across kinks of V.
    """
    x = np.asarray(x, dtype=np.float64)
    x_next = step(plant, x, u)
    c = constraint(plant, x)
    v = V(x)
    if derivative == "gradient":
        dd = value_gradient(V, x)[0] @ ((x_next - x) / plant.dt)
    elif derivative == "transition":
        dd = (V(x_next) - v) / plant.dt
    else:
        raise ValueError(f"unknown derivative method {derivative!r}")
    return float(advantage_closed_form(c, v, dd, V.lam))


@dataclass
class TabularAdvantage:
    """q over (node, control); ``behavior`` names the control recorded per node."""

    values: np.ndarray
    controls: np.ndarray
    behavior: np.ndarray


def advantage_table(V: ValueTable, plant: PlantSpec, derivative: str = "gradient") -> TabularAdvantage:
    """Closed-form advantage at every (node, sampled control); see ``tabular_advantage``."""
    model = V.model if V.model is not None else GridModel.build(plant, V.grid)
    nodes = model.nodes
    if derivative == "gradient":
        grad = value_gradient(V, nodes)
        vel = (model.x_next - nodes[:, None, :]) / plant.dt
        dirderiv = np.einsum("nd,nkd->nk", grad, vel)
    elif derivative == "transition":
        dirderiv = (model.lookup_next(V.flat) - V.flat[:, None]) / plant.dt
    else:
        raise ValueError(f"unknown derivative method {derivative!r}")
    cnode = model.c[:, None]
    q = advantage_closed_form(cnode, V.flat[:, None], dirderiv, V.lam)
    return TabularAdvantage(q, model.controls, np.argmax(q, axis=1))


def bellman_v_pointwise(table: ValueTable, q_fixed: TabularAdvantage, model: GridModel) -> np.ndarray:
    """T_v[V](x, u) = min{c, int + e^{-lam dt} V(x')} - dt q(x, u) at every (node, control)."""
    if q_fixed.values.shape != (model.N, model.K):
        raise ValueError("advantage table is not shape-compatible with the grid model")
    return bellman_q_table(model, table.flat, table.lam) - model.plant.dt * q_fixed.values


def apply_bellman_v(table: ValueTable, q_fixed: TabularAdvantage, plant: PlantSpec) -> ValueTable:
    """One sweep of T_v with q held fixed, reduced per node at the behavior control."""
    model = table.model if table.model is not None else GridModel.build(plant, table.grid)
    full = bellman_v_pointwise(table, q_fixed, model)
    vals = full[np.arange(model.N), q_fixed.behavior]
    return ValueTable(table.grid, vals.reshape(table.grid.cells), table.lam, table.dt, model=model)


def bellman_dv_pointwise(dv: np.ndarray, V: ValueTable, model: GridModel) -> np.ndarray:
    """T_dv[dV](x, u) with V fixed; dV is a (node, control) table.

    The successor's maximal derivative is interpolated from the per-node max.
    """
    lam, dt = V.lam, model.plant.dt
    disc = np.exp(-lam * dt)
    best = dv.max(axis=1)
    b_next = model.lookup_next(best)
    v_next = model.lookup_next(V.flat)
    inner = np.minimum(model.c_next, discounted_int(model.c_next, lam, dt) + disc * v_next + dt * disc * b_next)
    return (inner - V.flat[:, None]) / dt


def write_table_csv(path, table: ValueTable) -> None:
    nodes = table.grid.nodes()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(table.grid.n)] + ["V"])
        for x, v in zip(nodes, table.flat):
            w.writerow([repr(float(a)) for a in x] + [repr(float(v))])
    with open(str(path) + ".json", "w") as fh:
        json.dump(table.metadata(), fh, indent=2)


def read_table_csv(path) -> ValueTable:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    g = meta["grid"]
    grid = GridSpec(np.array(g["lo"]), np.array(g["hi"]), tuple(g["cells"]), g.get("u_samples", 21))
    vals = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, -1]
    return ValueTable(grid, vals.reshape(grid.cells), meta["lambda"], meta["dt"],
                      meta.get("iterations", 0), meta.get("residual", 0.0))
