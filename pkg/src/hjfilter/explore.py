"""Raw-input generation and the replay buffer."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dynamics import InputPolytope, Transition
from .qpsolve import FilterConfig, qp_filter

KAPPA_RANGE = (0.5, 5.0)
SIGMA_RANGE = (0.1, 1.0)


@dataclass
class OuProcess:
    """Ornstein-Uhlenbeck raw input du = kappa (mu - u) dt + sigma dW, clamped to the input box."""

    kappa: float
    mu: np.ndarray
    sigma: float | np.ndarray
    state: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    poly: InputPolytope | None = None  # set only for non-box input sets


def ou_sample_params(rng: np.random.Generator, input_set: InputPolytope,
                     kappa_range=KAPPA_RANGE, sigma_range=SIGMA_RANGE) -> OuProcess:
    lo, hi = input_set.bounds()
    kappa = rng.uniform(*kappa_range)
    if input_set.is_box:
        mu = rng.uniform(lo, hi)
    else:
        # rejection sampling from the bounding box
        while True:
            mu = rng.uniform(lo, hi)
            if input_set.contains(mu):
                break
    sigma = rng.uniform(*sigma_range) * 0.5 * (hi - lo)
    return OuProcess(float(kappa), mu, sigma, mu.copy(), lo, hi, None if input_set.is_box else input_set)


def ou_step(proc: OuProcess, dt: float, rng: np.random.Generator, clamp: bool = True) -> np.ndarray:
    """Euler-Maruyama step; the internal state is replaced by the clamped value."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xi = rng.standard_normal(proc.state.shape)
    u = proc.state + proc.kappa * (proc.mu - proc.state) * dt + proc.sigma * np.sqrt(dt) * xi
    if clamp and proc.poly is not None:
        u = _project(u, proc.poly)
    elif clamp and proc.lo is not None:
        u = np.clip(u, proc.lo, proc.hi)
    proc.state = u
    return u.copy()


def _project(u: np.ndarray, poly: InputPolytope) -> np.ndarray:
    if poly.contains(u):
        return u
    # zero safety direction with a nonnegative offset: plain Euclidean projection
    return qp_filter(u, np.zeros(poly.m), 0.0, 0.0, FilterConfig(1.0), poly).u


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions stored column-wise."""

    def __init__(self, capacity: int, n: int, m: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.n, self.m = n, m
        self.x = np.zeros((self.capacity, n))
        self.u = np.zeros((self.capacity, m))
        self.c = np.zeros(self.capacity)
        self.x_next = np.zeros((self.capacity, n))
        self.c_next = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.x[i] = t.x
        self.u[i] = np.atleast_1d(t.u)
        self.c[i] = t.c
        self.x_next[i] = t.x_next
        self.c_next[i] = t.c_next
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        # logical order: oldest first
        j = (self.cursor - self.size + i) % self.capacity
        return Transition(self.x[j].copy(), self.u[j].copy(), float(self.c[j]),
                          self.x_next[j].copy(), float(self.c_next[j]))

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        size = self.size
        if size == 0:
            raise IndexError("cannot sample from an empty replay buffer")
        return rng.integers(0, size, size=n)

    def sample(self, n: int, rng: np.random.Generator):
        """Uniform sample with replacement, returned as a ``critic.Batch``."""
        from .critic import Batch

        idx = self.sample_indices(n, rng)
        return Batch(self.x[idx], self.u[idx], self.c[idx], self.x_next[idx], self.c_next[idx])

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(self.size):
                t = self[i]
                fh.write(json.dumps({"x": t.x.tolist(), "u": t.u.tolist(), "c": t.c,
                                     "x_next": t.x_next.tolist(), "c_next": t.c_next}) + "\n")

    @classmethod
    def load_jsonl(cls, path, capacity: int | None = None) -> "ReplayBuffer":
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rows.append(json.loads(line))
        if not rows:
            raise ValueError("empty transition file")
        n, m = len(rows[0]["x"]), len(rows[0]["u"])
        buf = cls(capacity or max(len(rows), 1), n, m)
        for d in rows:
            buf.push(Transition(np.asarray(d["x"]), np.asarray(d["u"]), d["c"],
                                np.asarray(d["x_next"]), d["c_next"]))
        return buf


def buffer_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    idx = buffer.sample_indices(n, rng)
    # indices address physical slots; map to Transition objects directly
    return [Transition(buffer.x[j].copy(), buffer.u[j].copy(), float(buffer.c[j]),
                       buffer.x_next[j].copy(), float(buffer.c_next[j])) for j in idx]
