"""Small dense LP/QP solvers for the safety filter.

The filter projects a raw input onto the input polytope intersected with the
safety halfspace

    a . u - max_{u' in U} a . u' + b_val + alpha * v >= 0

and falls back to the LP maximizer of ``a . u`` when that intersection is
empty.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dynamics import InputPolytope

FEAS_TOL = 1e-9
QP_OK = "qp_ok"
LP_FALLBACK = "lp_fallback"


class QPSolverError(RuntimeError):
    def __init__(self, message, iterates=()):
        super().__init__(message)
        self.iterates = list(iterates)


@dataclass(frozen=True)
class FilterConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass
class FilterResult:
    u: np.ndarray
    status: str
    slack: float


def lp_max(a, poly: InputPolytope) -> tuple[np.ndarray, float]:
    """Maximize ``a . u`` over the polytope.

    Boxes use the per-coordinate sign rule (zero components pick the interval
    midpoint); general sets enumerate vertices and average tied maximizers.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != poly.m:
        raise ValueError("objective dimension does not match input set")
    if poly.is_box:
        lo, hi = poly.box_lo, poly.box_hi
        u = np.where(a > 0, hi, np.where(a < 0, lo, 0.5 * (lo + hi)))
        return u, float(a @ u)
    verts = poly.vertices()
    if verts.shape[0] == 0:
        raise ValueError("empty input set")
    scores = verts @ a
    best = scores.max()
    tied = verts[scores >= best - 1e-12 * max(1.0, abs(best))]
    u = tied.mean(axis=0)
    return u, float(best)


def lp_max_batch(a: np.ndarray, poly: InputPolytope) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``lp_max`` for a batch of objectives of shape (B, m)."""
    a = np.asarray(a, dtype=np.float64)
    if poly.is_box:
        lo, hi = poly.box_lo, poly.box_hi
        u = np.where(a > 0, hi, np.where(a < 0, lo, 0.5 * (lo + hi)))
        return u, np.einsum("ij,ij->i", a, u)
    verts = poly.vertices()
    scores = a @ verts.T
    best = scores.max(axis=1)
    mask = scores >= (best - 1e-12 * np.maximum(1.0, np.abs(best)))[:, None]
    u = (mask @ verts) / mask.sum(axis=1, keepdims=True)
    return u, best


def _project_interval(u_raw, lo, hi):
    return np.array([min(max(u_raw, lo), hi)])


def _active_set_projection(u_raw, G, h, x0, max_iter=200):
    """Primal active-set method for min ||u - u_raw||^2 s.t. G u <= h, from feasible x0."""
    m = u_raw.size
    x = x0.copy()
    work: list[int] = []
    for i in np.flatnonzero(np.abs(G @ x - h) <= 1e-10):
        cand = work + [int(i)]
        if len(cand) <= m and np.linalg.matrix_rank(G[cand], tol=1e-10) == len(cand):
            work = cand
    history = []
    for _ in range(max_iter):
        history.append((x.copy(), list(work)))
        grad = x - u_raw
        if work:
            Aw = G[work]
            # null-space projection of the steepest-descent direction
            coef = np.linalg.lstsq(Aw.T, grad, rcond=None)[0]
            # a full-rank working set pins the vertex; skip the noisy projection
            p = np.zeros(m) if len(work) >= m else -(grad - Aw.T @ coef)
        else:
            p = -grad
        if np.linalg.norm(p) <= 1e-12 * max(1.0, np.linalg.norm(grad)):
            if not work:
                return x
            mult = -coef
            j = int(np.argmin(mult))
            if mult[j] >= -1e-12:
                return x
            work.pop(j)
            continue
        step = 1.0
        block = None
        Gp = G @ p
        for i in range(G.shape[0]):
            if i in work or Gp[i] <= 1e-14:
                continue
            t = (h[i] - G[i] @ x) / Gp[i]
            if t < step:
                step, block = max(t, 0.0), i
        x = x + step * p
        if block is not None:
            work.append(block)
    raise QPSolverError("active-set QP did not converge", history)


def qp_filter(u_raw, a, b_val: float, v: float, cfg: FilterConfig, poly: InputPolytope) -> FilterResult:
    u_raw = np.asarray(u_raw, dtype=np.float64).ravel()
    a = np.asarray(a, dtype=np.float64).ravel()
    u_star, lp_val = lp_max(a, poly)
    offset = b_val + cfg.alpha * v
    # safety constraint: a . u >= lp_val - offset; feasible iff offset >= 0
    if offset < -FEAS_TOL:
        return FilterResult(u_star, LP_FALLBACK, float(a @ u_star - lp_val + offset))
    thr = lp_val - offset

    def slack_of(u):
        return float(a @ u - lp_val + offset)

    if slack_of(u_raw) >= 0.0 and poly.contains(u_raw, FEAS_TOL):
        return FilterResult(u_raw.copy(), QP_OK, slack_of(u_raw))
    if poly.m == 1:
        lo, hi = poly.bounds()
        lo, hi = float(lo[0]), float(hi[0])
        if a[0] > 0:
            lo = max(lo, thr / a[0])
        elif a[0] < 0:
            hi = min(hi, thr / a[0])
        if lo > hi:
            # rounding at a single-point intersection
            lo = hi = float(u_star[0])
        u = _project_interval(float(u_raw[0]), lo, hi)
        return FilterResult(u, QP_OK, slack_of(u))
    G = np.vstack([poly.A, -a[None, :]])
    h = np.concatenate([poly.b, [-thr]])
    if not np.any(a):
        G, h = poly.A, poly.b
    # the LP maximizer is feasible whenever offset >= 0
    u = _active_set_projection(u_raw, G, h, u_star)
    return FilterResult(u, QP_OK, slack_of(u))


def feasibility_rate(log: Sequence[FilterResult]) -> float:
    """Fraction of filter calls that fell back to the LP maximizer."""
    if len(log) == 0:
        raise ValueError("empty filter log")
    return sum(r.status == LP_FALLBACK for r in log) / len(log)


def write_filter_log(path, results: Iterable[FilterResult]) -> None:
    with open(path, "w") as fh:
        for k, r in enumerate(results):
            fh.write(json.dumps({"step": k, "status": r.status, "slack": r.slack,
                                 "u": [float(x) for x in r.u]}) + "\n")


def read_filter_log(path) -> list[FilterResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(FilterResult(np.asarray(d["u"]), d["status"], d["slack"]))
    return out
