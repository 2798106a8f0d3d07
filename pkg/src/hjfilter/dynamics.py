"""Black-box plants: control-affine ODEs stepped at a fixed interval.

Every plant is simulated with classical RK4 under a zero-order-hold input,
sub-stepping at ``min(dt, 0.005)``. The bouncing mass additionally resets
its velocity at ground contact; the contact time is located by bisection.

All functions accept a single state of shape ``(n,)`` or a batch of shape
``(B, n)`` (with controls of shape ``(m,)`` or ``(B, m)``).
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PLANT_IDS = ("double_integrator", "inverted_pendulum", "bouncing_mass")

MAX_SUBSTEP = 0.005
BISECTION_TOL = 1e-10


class SimulationDivergence(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True, eq=False)
class InputPolytope:
    """The input set ``{u : A u <= b}``; box sets also carry their bounds."""

    A: np.ndarray
    b: np.ndarray
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    _vertices: list = field(default_factory=list, repr=False)

    @classmethod
    def box(cls, lo, hi) -> "InputPolytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("box requires lo < hi componentwise")
        m = lo.size
        eye = np.eye(m)
        return cls(A=np.vstack([eye, -eye]), b=np.concatenate([hi, -lo]), box_lo=lo, box_hi=hi)

    @classmethod
    def from_halfspaces(cls, A, b) -> "InputPolytope":
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).ravel()
        if A.shape[0] != b.size:
            raise ValueError("A and b row counts differ")
        poly = cls(A=A, b=b)
        if poly.vertices().shape[0] == 0:
            raise ValueError("polytope is empty")
        return poly

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def is_box(self) -> bool:
        return self.box_lo is not None

    def vertices(self) -> np.ndarray:
        """Vertex list by enumerating all m-subsets of facets (m <= 3 intended)."""
        if self._vertices:
            return self._vertices[0]
        m = self.m
        verts = []
        for rows in itertools.combinations(range(self.A.shape[0]), m):
            sub = self.A[list(rows)]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            p = np.linalg.solve(sub, self.b[list(rows)])
            if np.all(self.A @ p <= self.b + 1e-9):
                verts.append(p)
        out = np.unique(np.round(np.array(verts).reshape(-1, m), 12), axis=0)
        if out.shape[0] and not self._bounded():
            raise ValueError("polytope is unbounded")
        self._vertices.append(out)
        return out

    def _bounded(self) -> bool:
        # bounded iff no nonzero direction d has A d <= 0; probe with the LP over each axis
        from scipy.optimize import linprog

        for j in range(self.m):
            for s in (1.0, -1.0):
                c = np.zeros(self.m)
                c[j] = -s
                res = linprog(c, A_ub=self.A, b_ub=self.b, bounds=[(None, None)] * self.m)
                if res.status == 3:
                    return False
        return True

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box."""
        if self.is_box:
            return self.box_lo, self.box_hi
        v = self.vertices()
        return v.min(axis=0), v.max(axis=0)

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=np.float64)
        return bool(np.all(u @ self.A.T <= self.b + tol))

    def clip(self, u) -> np.ndarray:
        """Componentwise clamp to the bounding box (exact projection for boxes)."""
        lo, hi = self.bounds()
        return np.clip(u, lo, hi)

    def to_dict(self) -> dict:
        d = {"A": self.A.tolist(), "b": self.b.tolist()}
        if self.is_box:
            d["box_lo"] = self.box_lo.tolist()
            d["box_hi"] = self.box_hi.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InputPolytope":
        if "box_lo" in d:
            return cls.box(d["box_lo"], d["box_hi"])
        return cls.from_halfspaces(d["A"], d["b"])


@dataclass(frozen=True)
class PlantSpec:
    id: str
    n: int
    m: int
    dt: float
    input_set: InputPolytope
    params: dict

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.input_set.m != self.m:
            raise ValueError("input set dimension does not match m")

    def with_dt(self, dt: float) -> "PlantSpec":
        return dataclasses.replace(self, dt=float(dt))


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    c: float
    x_next: np.ndarray
    c_next: float


def make_plant(plant_id: str, dt: float = 0.1, **overrides) -> PlantSpec:
    """Build one of the in-repo plants with its default physical constants."""
    if plant_id == "double_integrator":
        params = {"p_max": 1.4}
        params.update(overrides)
        return PlantSpec(plant_id, 2, 1, float(dt), InputPolytope.box([-1.0], [1.0]), params)
    if plant_id == "inverted_pendulum":
        params = {
            "cart_mass": 1.0,
            "pole_mass": 0.1,
            "pole_length": 1.0,
            "gravity": 9.81,
            "base_limit": 1.0,
            "tip_limit": 0.2,
        }
        params.update(overrides)
        return PlantSpec(plant_id, 4, 1, float(dt), InputPolytope.box([-10.0], [10.0]), params)
    if plant_id == "bouncing_mass":
        params = {"gravity": 9.81, "restitution": 0.8, "ceiling": 2.0}
        params.update(overrides)
        return PlantSpec(plant_id, 2, 1, float(dt), InputPolytope.box([0.0], [15.0]), params)
    raise ValueError(f"unknown plant {plant_id!r}; expected one of {PLANT_IDS}")


def vector_field(plant: PlantSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Continuous-time right-hand side f(x) + g(x) u (flow part only)."""
    p = plant.params
    if plant.id == "double_integrator":
        return np.stack([x[..., 1], u[..., 0]], axis=-1)
    if plant.id == "bouncing_mass":
        return np.stack([x[..., 1], u[..., 0] - p["gravity"]], axis=-1)
    if plant.id == "inverted_pendulum":
        mc, mp, g = p["cart_mass"], p["pole_mass"], p["gravity"]
        half = 0.5 * p["pole_length"]
        total = mc + mp
        xdot, th, thdot = x[..., 1], x[..., 2], x[..., 3]
        sin, cos = np.sin(th), np.cos(th)
        tmp = (u[..., 0] + mp * half * thdot**2 * sin) / total
        thacc = (g * sin - cos * tmp) / (half * (4.0 / 3.0 - mp * cos**2 / total))
        xacc = tmp - mp * half * thacc * cos / total
        return np.stack([xdot, xacc, thdot, thacc], axis=-1)
    raise ValueError(f"unknown plant {plant.id!r}")


def _rk4(plant, x, u, h):
    k1 = vector_field(plant, x, u)
    k2 = vector_field(plant, x + 0.5 * h * k1, u)
    k3 = vector_field(plant, x + 0.5 * h * k2, u)
    k4 = vector_field(plant, x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _bounce_substep(plant, x, u, h):
    """One RK4 substep with ground-contact handling; x, u are 2-D batches."""
    out = _rk4(plant, x, u, h)
    hit = (out[:, 0] < 0.0) & (x[:, 0] >= 0.0)
    if not np.any(hit):
        return out
    xs, us = x[hit], u[hit]
    lo = np.zeros(xs.shape[0])
    hi = np.full(xs.shape[0], h)
    while np.max(hi - lo) > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        z = _rk4(plant, xs, us, mid[:, None])[:, 0]
        below = z < 0.0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    pre = _rk4(plant, xs, us, hi[:, None])
    rho = plant.params["restitution"]
    post = np.stack([np.zeros_like(lo), -rho * pre[:, 1]], axis=-1)
    rest = h - hi
    after = _rk4(plant, post, us, rest[:, None])
    # a second contact inside the remaining sliver means the mass has come to rest
    settled = after[:, 0] < 0.0
    after[settled] = 0.0
    out[hit] = after
    return out


def step(plant: PlantSpec, x, u) -> np.ndarray:
    """State after exactly ``plant.dt`` seconds with ``u`` held constant."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x).copy()
    ub = np.broadcast_to(np.atleast_2d(u), (xb.shape[0], plant.m))
    nsub = max(1, int(np.ceil(plant.dt / MAX_SUBSTEP - 1e-9)))
    h = plant.dt / nsub
    for _ in range(nsub):
        if plant.id == "bouncing_mass":
            xb = _bounce_substep(plant, xb, ub, h)
        else:
            xb = _rk4(plant, xb, ub, h)
    if not np.all(np.isfinite(xb)):
        raise SimulationDivergence(f"non-finite state after step of {plant.id}")
    return xb[0] if single else xb


def constraint(plant: PlantSpec, x) -> np.ndarray | float:
    """Measured constraint signal c(x); safe iff c >= 0."""
    x = np.asarray(x, dtype=np.float64)
    p = plant.params
    if plant.id == "double_integrator":
        c = p["p_max"] - np.abs(x[..., 0])
    elif plant.id == "inverted_pendulum":
        c = np.minimum(p["base_limit"] - np.abs(x[..., 0]), p["tip_limit"] - np.abs(x[..., 2]))
    elif plant.id == "bouncing_mass":
        c = p["ceiling"] - x[..., 0]
    else:
        raise ValueError(f"unknown plant {plant.id!r}")
    return float(c) if np.ndim(c) == 0 else c


def rollout(plant: PlantSpec, x0, controls: Sequence) -> list[tuple[np.ndarray, float]]:
    x = np.asarray(x0, dtype=np.float64)
    out = [(x, constraint(plant, x))]
    for u in controls:
        x = step(plant, x, u)
        out.append((x, constraint(plant, x)))
    return out


def write_rollout_csv(path, plant: PlantSpec, records, controls) -> None:
    """Export ``rollout`` output; the final row repeats no control and leaves u blank."""
    header = ["t"] + [f"x{i}" for i in range(plant.n)] + [f"u{j}" for j in range(plant.m)] + ["c"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, (x, c) in enumerate(records):
            u = list(np.atleast_1d(controls[k])) if k < len(controls) else [""] * plant.m
            w.writerow([repr(k * plant.dt)] + [repr(float(v)) for v in x]
                       + [repr(float(v)) if v != "" else "" for v in u] + [repr(float(c))])
