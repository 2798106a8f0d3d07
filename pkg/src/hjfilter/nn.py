"""Fully-connected networks in float64 numpy: forward, backward, Adam, Polyak.

Hidden layers run linear -> layernorm -> ELU; the output layer is linear.
Inputs are batches of shape ``(B, d_in)``; a 1-D input is treated as B = 1
and the output is returned 1-D.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

LN_EPS = 1e-5


@dataclass
class MlpParams:
    """Weights are stored ``(d_in, d_out)`` so a layer is ``x @ W + b``."""

    sizes: tuple
    weights: list
    biases: list
    ln_gain: list = field(default_factory=list)
    ln_bias: list = field(default_factory=list)
    layernorm: bool = True

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def tensors(self) -> list:
        """All parameter arrays in declaration order."""
        out = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if self.layernorm and i < self.n_hidden:
                out.append(self.ln_gain[i])
                out.append(self.ln_bias[i])
        return out

    def with_tensors(self, tensors) -> "MlpParams":
        it = iter(tensors)
        w, b, g, o = [], [], [], []
        for i in range(len(self.weights)):
            w.append(next(it))
            b.append(next(it))
            if self.layernorm and i < self.n_hidden:
                g.append(next(it))
                o.append(next(it))
        return MlpParams(self.sizes, w, b, g, o, self.layernorm)

    def copy(self) -> "MlpParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> "MlpParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])


Grads = MlpParams


def init_mlp(sizes, rng: np.random.Generator, layernorm: bool = True) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layernorm gains."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases, gains, offs = [], [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        if layernorm and i < len(sizes) - 2:
            gains.append(np.ones(fan_out))
            offs.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases, gains, offs, layernorm)


def _elu(y):
    neg = np.minimum(y, 0.0)
    np.expm1(neg, out=neg)
    out = np.maximum(y, 0.0)
    out += neg
    return out


@njit(cache=True)
def _layernorm(z, bias, eps):
    """Row-wise normalization of (z + bias); returns normalized rows and 1/std."""
    rows, width = z.shape
    zhat = np.empty_like(z)
    inv = np.empty(rows)
    for i in range(rows):
        mu = 0.0
        for j in range(width):
            mu += z[i, j] + bias[j]
        mu /= width
        var = 0.0
        for j in range(width):
            d = z[i, j] + bias[j] - mu
            zhat[i, j] = d
            var += d * d
        s = 1.0 / np.sqrt(var / width + eps)
        inv[i] = s
        for j in range(width):
            zhat[i, j] *= s
    return zhat, inv


@njit(cache=True)
def _ln_elu_backward(g, act, zhat, inv, gain):
    """Gradient through ELU and layernorm; returns (dz, dgain, doffset)."""
    rows, width = g.shape
    gz = np.empty_like(g)
    dgain = np.zeros(width)
    doff = np.zeros(width)
    tmp = np.empty(width)
    for i in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(width):
            a = act[i, j]
            gy = g[i, j] * (1.0 if a > 0.0 else a + 1.0)
            dgain[j] += gy * zhat[i, j]
            doff[j] += gy
            t = gy * gain[j]
            tmp[j] = t
            s1 += t
            s2 += t * zhat[i, j]
        s1 /= width
        s2 /= width
        for j in range(width):
            gz[i, j] = inv[i] * (tmp[j] - s1 - zhat[i, j] * s2)
    return gz, dgain, doff


def _forward_cached(params: MlpParams, x: np.ndarray):
    cache = []
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        if i == last:
            cache.append((h, None))
            return h @ W + b, cache
        if params.layernorm:
            zhat, inv = _layernorm(h @ W, b, LN_EPS)
            y = zhat * params.ln_gain[i]
            y += params.ln_bias[i]
            act = _elu(y)
            cache.append((h, (act, zhat, inv)))
        else:
            z = h @ W + b
            act = _elu(z)
            cache.append((h, (act, None, None)))
        h = act
    raise AssertionError("unreachable")


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.sizes[0]:
        raise ValueError(f"input dimension {xb.shape[-1]} != {params.sizes[0]}")
    return xb, single


def forward(params: MlpParams, x) -> np.ndarray:
    xb, single = _as_batch(params, x)
    out, _ = _forward_cached(params, xb)
    return out[0] if single else out


def forward_with_cache(params: MlpParams, x):
    xb, _ = _as_batch(params, x)
    return _forward_cached(params, xb)


def backward_from_cache(params: MlpParams, cache, upstream: np.ndarray):
    """Gradients of ``sum(out * upstream)`` given the cache of ``forward_with_cache``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape[1] != params.sizes[-1]:
        raise ValueError("upstream gradient has wrong output dimension")
    nl = len(params.weights)
    gW, gb = [None] * nl, [None] * nl
    gg, go = [None] * params.n_hidden, [None] * params.n_hidden
    g = upstream
    for i in range(nl - 1, -1, -1):
        h_in, extra = cache[i]
        if extra is not None:
            act, zhat, inv = extra
            if zhat is not None:
                g, gg[i], go[i] = _ln_elu_backward(np.ascontiguousarray(g), act, zhat, inv, params.ln_gain[i])
            else:
                g = g * np.where(act > 0, 1.0, act + 1.0)
        gW[i] = h_in.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    if not params.layernorm:
        gg, go = [], []
    grads = MlpParams(params.sizes, gW, gb, gg, go, params.layernorm)
    return grads, g


def backward(params: MlpParams, x, upstream_grad):
    """Return (Grads, input_grad) for the scalar ``sum(forward(x) * upstream_grad)``."""
    xb, single = _as_batch(params, x)
    _, cache = _forward_cached(params, xb)
    grads, gx = backward_from_cache(params, cache, upstream_grad)
    return grads, (gx[0] if single else gx)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams) -> AdamState:
    return AdamState([np.zeros_like(t) for t in params.tensors()],
                     [np.zeros_like(t) for t in params.tensors()])


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    gs = grads.tensors()
    if not all(np.all(np.isfinite(g)) for g in gs):
        raise FloatingPointError("non-finite gradient; Adam update rejected")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), gs, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), AdamState(new_m, new_v, t, b1, b2, state.eps)


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    tt, ot = target.tensors(), online.tensors()
    if len(tt) != len(ot) or any(a.shape != b.shape for a, b in zip(tt, ot)):
        raise ValueError("target and online parameters are not congruent")
    return target.with_tensors([(1.0 - tau) * a + tau * b for a, b in zip(tt, ot)])


# checkpoint: 8-byte little-endian header length, JSON header, raw '<f8' tensors

def save_mlp(path, params: MlpParams, seed: int | None = None, step: int = 0) -> None:
    header = {
        "sizes": list(params.sizes),
        "activation": "elu",
        "layernorm": params.layernorm,
        "seed": seed,
        "step": step,
        "shapes": [list(t.shape) for t in params.tensors()],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_mlp(path) -> tuple[MlpParams, dict]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        tensors = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            tensors.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    sizes = tuple(header["sizes"])
    skeleton = MlpParams(sizes, [None] * (len(sizes) - 1), [None] * (len(sizes) - 1),
                         layernorm=header["layernorm"])
    return skeleton.with_tensors(tensors), header
