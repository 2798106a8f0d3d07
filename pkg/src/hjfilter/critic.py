"""Safety critic: twin value networks, the derivative network and their losses.

The derivative network outputs ``(a(x), b(x))`` and represents the
directional derivative of the safety value along ``f + g u`` as

    dv(x, u) = a(x) . u - max_{u' in U} a(x) . u' + b(x),

so that ``max_u dv(x, u) == b(x)`` by construction.

All regression targets are built from the target networks only. The pure
helpers ``value_target_from`` / ``deriv_target_from`` take already-evaluated
quantities so the same code path can be driven by lookup tables in tests.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .dynamics import InputPolytope, Transition
from .qpsolve import lp_max_batch

VALUE_KINDS = ("online1", "online2", "target1", "target2", "target_min")
ADVANTAGE_MODES = ("centered", "raw")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, index: int, what: str):
        super().__init__(f"non-finite {what} at transition {index}")
        self.index = index


@dataclass
class Batch:
    x: np.ndarray
    u: np.ndarray
    c: np.ndarray
    x_next: np.ndarray
    c_next: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_transitions(cls, ts) -> "Batch":
        return cls(
            np.array([t.x for t in ts], dtype=np.float64),
            np.array([np.atleast_1d(t.u) for t in ts], dtype=np.float64),
            np.array([t.c for t in ts], dtype=np.float64),
            np.array([t.x_next for t in ts], dtype=np.float64),
            np.array([t.c_next for t in ts], dtype=np.float64),
        )


@dataclass
class TargetPack:
    value_target: np.ndarray
    deriv_target: np.ndarray


@dataclass
class CriticBundle:
    v1: nn.MlpParams
    v2: nn.MlpParams
    dnet: nn.MlpParams
    v1_target: nn.MlpParams
    v2_target: nn.MlpParams
    dnet_target: nn.MlpParams
    lam: float
    dt: float
    input_set: InputPolytope
    advantage: str = "centered"

    def __post_init__(self):
        if self.advantage not in ADVANTAGE_MODES:
            raise ValueError(f"advantage must be one of {ADVANTAGE_MODES}")

    @property
    def m(self) -> int:
        return self.input_set.m


def make_bundle(n: int, input_set: InputPolytope, dt: float, lam: float,
                hidden=(256, 256), seed: int = 0, layernorm: bool = True,
                advantage: str = "centered") -> CriticBundle:
    """Fresh networks; targets start as exact copies of the online networks."""
    rng = np.random.default_rng(seed)
    m = input_set.m
    v1 = nn.init_mlp((n, *hidden, 1), rng, layernorm)
    v2 = nn.init_mlp((n, *hidden, 1), rng, layernorm)
    dnet = nn.init_mlp((n, *hidden, m + 1), rng, layernorm)
    return CriticBundle(v1, v2, dnet, v1.copy(), v2.copy(), dnet.copy(), float(lam), float(dt), input_set,
                        advantage)


def int_approx(c, lam: float, dt: float):
    """Zero-order-hold value of the integral of lam*exp(-lam*t)*c over [0, dt]."""
    if lam < 0 or dt <= 0:
        raise ValueError("need lam >= 0 and dt > 0")
    return -np.expm1(-lam * dt) * c


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def value_of(bundle: CriticBundle, which: str, x):
    xb, single = _rows(x)
    if which == "target_min":
        out = np.minimum(nn.forward(bundle.v1_target, xb)[:, 0], nn.forward(bundle.v2_target, xb)[:, 0])
    else:
        net = {"online1": bundle.v1, "online2": bundle.v2,
               "target1": bundle.v1_target, "target2": bundle.v2_target}.get(which)
        if net is None:
            raise ValueError(f"unknown value network {which!r}")
        out = nn.forward(net, xb)[:, 0]
    return float(out[0]) if single else out


def ab_of(bundle: CriticBundle, which: str, x):
    """Raw heads (a(x), b(x)) of the online or target derivative network."""
    net = bundle.dnet if which == "online" else bundle.dnet_target
    xb, single = _rows(x)
    out = nn.forward(net, xb)
    a, b = out[:, : bundle.m], out[:, bundle.m]
    return (a[0], float(b[0])) if single else (a, b)


def reparam(a: np.ndarray, b: np.ndarray, u: np.ndarray, input_set: InputPolytope):
    """dv = a.u - max_u' a.u' + b for batches a (B, m), b (B,), u (B, m)."""
    _, lpval = lp_max_batch(a, input_set)
    return np.einsum("ij,ij->i", a, u) - lpval + b


def deriv_of(bundle: CriticBundle, which: str, x, u):
    xb, single = _rows(x)
    ub = np.asarray(u, dtype=np.float64).reshape(xb.shape[0], bundle.m)
    a, b = ab_of(bundle, which, xb)
    out = reparam(a, b, ub, bundle.input_set)
    return float(out[0]) if single else out


def advantage_from(c, v, dv, lam: float):
    """min{c - v, dv + lam (c - v)}: the closed-form advantage."""
    gap = c - v
    return np.minimum(gap, dv + lam * gap)


def centered_advantage(c, v, dv, b, lam: float):
    """Closed-form advantage shifted so that its maximum over u is exactly zero.

    ``min`` is monotone in ``dv`` and ``max_u dv = b``, so the maximum of the
    raw advantage is ``min{c - v, b + lam (c - v)}``. Where the second branch
    is active the result reduces to ``a.u - max_u a.u``, independent of v(x).
    """
    return advantage_from(c, v, dv, lam) - advantage_from(c, v, b, lam)


def _advantage(mode: str, c, v, dv, b, lam: float):
    if mode == "centered":
        return centered_advantage(c, v, dv, b, lam)
    return advantage_from(c, v, dv, lam)


def q_lambda(bundle: CriticBundle, x, u, c):
    xb, single = _rows(x)
    ub = np.asarray(u, dtype=np.float64).reshape(xb.shape[0], bundle.m)
    v = value_of(bundle, "target1", xb)
    a, b = ab_of(bundle, "target", xb)
    dv = reparam(a, b, ub, bundle.input_set)
    out = _advantage(bundle.advantage, np.asarray(c, dtype=np.float64), v, dv, b, bundle.lam)
    return float(out[0]) if single else out


def value_target_from(c, v_next, q, lam: float, dt: float):
    """min{c, int(c) + e^{-lam dt} v(x')} - dt q."""
    return np.minimum(c, int_approx(c, lam, dt) + np.exp(-lam * dt) * v_next) - dt * q


def enforce_b(b_next, c_next, v_next, lam: float):
    """Replace b(x') by -lam (c' - v(x')) wherever v(x') < c'."""
    return np.where(v_next < c_next, -lam * (c_next - v_next), b_next)


def deriv_target_from(c_next, v_next, v_cur, b_next, lam: float, dt: float):
    """(min{c', int(c') + e^{-lam dt} (v(x') + dt B(x'))} - v(x)) / dt with B enforced."""
    disc = np.exp(-lam * dt)
    big_b = enforce_b(b_next, c_next, v_next, lam)
    inner = np.minimum(c_next, int_approx(c_next, lam, dt) + disc * v_next + dt * disc * big_b)
    return (inner - v_cur) / dt


def compute_targets(bundle: CriticBundle, batch: Batch) -> TargetPack:
    """Regression targets for a batch, from target networks only."""
    B = len(batch)
    lam, dt = bundle.lam, bundle.dt
    both = np.concatenate([batch.x, batch.x_next], axis=0)
    v1t = nn.forward(bundle.v1_target, both)[:, 0]
    v1t_x, v1t_xn = v1t[:B], v1t[B:]
    v2t_xn = nn.forward(bundle.v2_target, batch.x_next)[:, 0]
    d_out = nn.forward(bundle.dnet_target, both)
    a_x, b_x = d_out[:B, : bundle.m], d_out[:B, bundle.m]
    b_xn = d_out[B:, bundle.m]

    dv_x = reparam(a_x, b_x, batch.u, bundle.input_set)
    q = _advantage(bundle.advantage, batch.c, v1t_x, dv_x, b_x, lam)
    y_v = value_target_from(batch.c, np.minimum(v1t_xn, v2t_xn), q, lam, dt)
    y_d = deriv_target_from(batch.c_next, v1t_xn, v1t_x, b_xn, lam, dt)
    return TargetPack(y_v, y_d)


def value_target(bundle: CriticBundle, t: Transition) -> float:
    return float(compute_targets(bundle, Batch.from_transitions([t])).value_target[0])


def deriv_target(bundle: CriticBundle, t: Transition) -> float:
    return float(compute_targets(bundle, Batch.from_transitions([t])).deriv_target[0])


@dataclass
class LossResult:
    loss_v: float
    loss_dv: float
    grad_v1: nn.MlpParams
    grad_v2: nn.MlpParams
    grad_dnet: nn.MlpParams
    targets: TargetPack


def losses(bundle: CriticBundle, batch: Batch, targets: TargetPack | None = None) -> LossResult:
    """Mean squared Bellman residuals and their parameter gradients.

    ``loss_v`` averages the two value networks' MSEs; targets are constants.
    """
    B = len(batch)
    if B < 1:
        raise ValueError("empty batch")
    if targets is None:
        targets = compute_targets(bundle, batch)
    for what, arr in (("value target", targets.value_target), ("derivative target", targets.deriv_target)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteLoss(int(bad[0]), what)

    out1, cache1 = nn.forward_with_cache(bundle.v1, batch.x)
    out2, cache2 = nn.forward_with_cache(bundle.v2, batch.x)
    e1 = out1[:, 0] - targets.value_target
    e2 = out2[:, 0] - targets.value_target
    loss_v = 0.5 * (np.mean(e1 * e1) + np.mean(e2 * e2))

    dout, cached = nn.forward_with_cache(bundle.dnet, batch.x)
    a, b = dout[:, : bundle.m], dout[:, bundle.m]
    u_star, lpval = lp_max_batch(a, bundle.input_set)
    dv = np.einsum("ij,ij->i", a, batch.u) - lpval + b
    ed = dv - targets.deriv_target
    loss_dv = np.mean(ed * ed)

    for what, err in (("value loss", e1 + e2), ("derivative loss", ed)):
        bad = np.flatnonzero(~np.isfinite(err))
        if bad.size:
            raise NonFiniteLoss(int(bad[0]), what)

    g1, _ = nn.backward_from_cache(bundle.v1, cache1, (e1 / B)[:, None])
    g2, _ = nn.backward_from_cache(bundle.v2, cache2, (e2 / B)[:, None])
    scale = (2.0 / B) * ed
    up = np.concatenate([scale[:, None] * (batch.u - u_star), scale[:, None]], axis=1)
    gd, _ = nn.backward_from_cache(bundle.dnet, cached, up)
    return LossResult(float(loss_v), float(loss_dv), g1, g2, gd, targets)


_NETS = ("v1", "v2", "dnet", "v1_target", "v2_target", "dnet_target")


def save_bundle(directory, bundle: CriticBundle, step: int = 0, c_max: float = 1.0,
                seed: int | None = None, extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for name in _NETS:
        nn.save_mlp(os.path.join(directory, f"{name}.bin"), getattr(bundle, name), seed=seed, step=step)
    manifest = {
        "lambda": bundle.lam,
        "dt": bundle.dt,
        "step": step,
        "c_max": c_max,
        "input_set": bundle.input_set.to_dict(),
        "advantage": bundle.advantage,
        "networks": [f"{name}.bin" for name in _NETS],
    }
    manifest.update(extra or {})
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_bundle(directory) -> tuple[CriticBundle, dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    nets = {name: nn.load_mlp(os.path.join(directory, f"{name}.bin"))[0] for name in _NETS}
    bundle = CriticBundle(lam=manifest["lambda"], dt=manifest["dt"],
                          input_set=InputPolytope.from_dict(manifest["input_set"]),
                          advantage=manifest.get("advantage", "centered"), **nets)
    return bundle, manifest
