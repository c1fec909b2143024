"""Minimal dense-layer library with explicit backward passes.

Every layer is a plain object holding Param leaves. forward() returns
(output, cache); backward(grad, cache) accumulates parameter gradients and
returns the input gradient. Caches are explicit so forward passes are
reentrant for frozen weights. All math is float64 numpy; matrix products are
metered in multiply-accumulates when the global flop meter is active.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


class FlopMeter:
    """Counts multiply-accumulates executed by metered operations."""

    def __init__(self):
        self.active = False
        self.macs = 0

    def add(self, n: int):
        if self.active:
            self.macs += int(n)

    def reset(self):
        self.macs = 0

    @contextmanager
    def measure(self):
        prev = self.active
        self.active = True
        try:
            yield self
        finally:
            self.active = prev


flop_meter = FlopMeter()


def init_normal(rng, shape, std=0.02) -> np.ndarray:
    return rng.standard_normal(shape) * std


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximation GELU; returns (output, cache for backward)."""
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    di = _GELU_K * (1.0 + 3 * 0.044715 * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * di)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, std: float = 0.02):
        self.w = Param(init_normal(rng, (n_in, n_out), std))
        self.b = Param(np.zeros(n_out))

    def forward(self, x: np.ndarray):
        flop_meter.add(x.size // x.shape[-1] * self.w.value.size)
        return x @ self.w.value + self.b.value, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.w.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return dy @ self.w.value.T

    def params(self) -> dict:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return xhat * self.gamma.value + self.beta.value, (xhat, inv)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv = cache
        axes = tuple(range(dy.ndim - 1))
        self.beta.grad += dy.sum(axis=axes)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        dxhat = dy * self.gamma.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) * inv

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    """Scaled dot-product attention; q and kv sources may differ (cross-attention)."""

    def __init__(self, dim: int, heads: int, rng):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, h, T, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * d)

    def forward(self, q_in: np.ndarray, kv_in: np.ndarray, mask: np.ndarray | None = None):
        """mask: optional (Tq, Tk) boolean array, True where attention is allowed."""
        q_full, cq = self.wq.forward(q_in)
        k_full, ck = self.wk.forward(kv_in)
        v_full, cv = self.wv.forward(kv_in)
        q, k, v = self._split(q_full), self._split(k_full), self._split(v_full)
        B, h, Tq, d = q.shape
        Tk = k.shape[2]
        flop_meter.add(2 * B * h * Tq * Tk * d)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
        if mask is not None:
            scores = np.where(mask[None, None, :, :], scores, -np.inf)
        attn = softmax(scores, axis=-1)
        ctx = attn @ v
        out, co = self.wo.forward(self._merge(ctx))
        cache = (cq, ck, cv, co, q, k, v, attn)
        return out, cache

    def backward(self, dout: np.ndarray, cache):
        cq, ck, cv, co, q, k, v, attn = cache
        d = self.head_dim
        dctx = self._split(self.wo.backward(dout, co))
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dscores /= math.sqrt(d)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dq_in = self.wq.backward(self._merge(dq), cq)
        dkv_in = self.wk.backward(self._merge(dk), ck)
        dkv_in = dkv_in + self.wv.backward(self._merge(dv), cv)
        return dq_in, dkv_in

    def params(self) -> dict:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k2, p in lin.params().items():
                out[f"{name}.{k2}"] = p
        return out


class FeedForward:
    def __init__(self, dim: int, hidden: int, rng, activation: str = "relu"):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)
        self.activation = activation

    def forward(self, x: np.ndarray):
        h, c1 = self.lin1.forward(x)
        if self.activation == "gelu":
            a, t = gelu(h)
            act_cache = (h, t)
        else:
            a = np.maximum(h, 0.0)
            act_cache = h
        out, c2 = self.lin2.forward(a)
        return out, (c1, act_cache, c2)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        c1, act_cache, c2 = cache
        da = self.lin2.backward(dy, c2)
        if self.activation == "gelu":
            h, t = act_cache
            dh = gelu_backward(da, h, t)
        else:
            dh = da * (act_cache > 0)
        return self.lin1.backward(dh, c1)

    def params(self) -> dict:
        out = {}
        for name, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            for k, p in lin.params().items():
                out[f"{name}.{k}"] = p
        return out


def collect_params(prefix: str, obj) -> dict[str, Param]:
    """Flatten an object exposing params() into {prefix + name: Param}."""
    return {f"{prefix}.{k}" if prefix else k: p for k, p in obj.params().items()}


def global_grad_norm(params: dict[str, Param]) -> float:
    total = 0.0
    for p in params.values():
        g = p.grad.ravel()
        total += float(np.dot(g, g))
    return math.sqrt(total)


class AdamW:
    """Adam with decoupled weight decay and a global gradient-norm clip.

    Parameters are organized into named groups with independent learning
    rates so the backbone, refiner, and scorer can follow their own schedules.
    """

    def __init__(self, groups: dict[str, tuple[dict[str, Param], float]],
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip_norm: float = 1.0):
        self.groups = {name: (dict(sorted(params.items())), lr) for name, (params, lr) in groups.items()}
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {g: {k: np.zeros_like(p.value) for k, p in ps.items()} for g, (ps, _) in self.groups.items()}
        self.v = {g: {k: np.zeros_like(p.value) for k, p in ps.items()} for g, (ps, _) in self.groups.items()}

    def set_lr(self, group: str, lr: float):
        params, _ = self.groups[group]
        self.groups[group] = (params, lr)

    def lr(self, group: str) -> float:
        return self.groups[group][1]

    def zero_grad(self):
        for params, _ in self.groups.values():
            for p in params.values():
                p.zero_grad()

    def step(self):
        all_params = {f"{g}/{k}": p for g, (ps, _) in self.groups.items() for k, p in ps.items()}
        if self.clip_norm > 0:
            norm = global_grad_norm(all_params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                for p in all_params.values():
                    p.grad *= scale
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = math.sqrt(1.0 - b2 ** self.step_count)
        for g, (params, lr) in self.groups.items():
            for k, p in params.items():
                m = self.m[g][k]
                v = self.v[g][k]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * (p.grad * p.grad)
                denom = np.sqrt(v)
                denom *= 1.0 / bc2
                denom += self.eps
                update = m / denom
                update *= 1.0 / bc1
                if self.weight_decay > 0 and p.value.ndim >= 2:
                    update += self.weight_decay * p.value
                p.value -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array(self.step_count)}
        for g in self.groups:
            for k in self.m[g]:
                out[f"m/{g}/{k}"] = self.m[g][k]
                out[f"v/{g}/{k}"] = self.v[g][k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["step_count"])
        for g in self.groups:
            for k in self.m[g]:
                self.m[g][k][...] = arrays[f"m/{g}/{k}"]
                self.v[g][k][...] = arrays[f"v/{g}/{k}"]
