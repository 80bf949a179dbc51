"""Dense layers with hand-written backward passes.

Every layer works on arrays with arbitrary leading batch axes and keeps the
activations of its most recent ``forward`` call; ``backward`` consumes them,
accumulates parameter gradients and returns the gradient w.r.t. the input.
Parameters live in ``params`` and gradients in ``grads`` under the same name.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterator

import numpy as np

LN_EPS = 1e-5


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.add_param("W", glorot(rng, d_in, d_out))
        if bias:
            self.add_param("b", np.zeros(d_out))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        self._x = x
        y = x @ self.params["W"]
        if "b" in self.params:
            y = y + self.params["b"]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        self.grads["W"] += x.reshape(-1, self.d_in).T @ dy.reshape(-1, self.d_out)
        if "b" in self.params:
            self.grads["b"] += dy.reshape(-1, self.d_out).sum(axis=0)
        return dy @ self.params["W"].T


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab = vocab
        self.add_param("W", glorot(rng, vocab, dim))
        self._idx = None

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise IndexError("token id outside the embedding table")
        self._idx = idx
        return self.params["W"][idx]

    def backward(self, dy: np.ndarray) -> None:
        np.add.at(self.grads["W"], self._idx.reshape(-1), dy.reshape(-1, dy.shape[-1]))
        return None


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, inv = self._cache
        d = xhat.shape[-1]
        self.grads["gamma"] += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.grads["beta"] += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


# -- attention ---------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def attention_forward(q, k, v, d_k: int | None = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key and value lengths differ")
    d_k = q.shape[-1] if d_k is None else d_k
    if d_k != q.shape[-1]:
        raise ValueError(f"d_k={d_k} but queries have width {q.shape[-1]}")
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d_k)
    weights = softmax(scores)
    return weights @ v, weights


def attention(q, k, v, d_k: int | None = None) -> np.ndarray:
    return attention_forward(q, k, v, d_k)[0]


def attention_backward(dout, q, k, v, weights):
    d_k = q.shape[-1]
    dv = np.swapaxes(weights, -1, -2) @ dout
    dw = dout @ np.swapaxes(v, -1, -2)
    ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
    ds /= math.sqrt(d_k)
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


class SelfAttention(Module):
    """Single-head self-attention with Q/K/V projections from d_in to d_out."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.q = self.add_child("q", Linear(d_in, d_out, rng))
        self.k = self.add_child("k", Linear(d_in, d_out, rng))
        self.v = self.add_child("v", Linear(d_in, d_out, rng))

    def forward(self, x):
        q, k, v = self.q.forward(x), self.k.forward(x), self.v.forward(x)
        out, w = attention_forward(q, k, v)
        self._cache = (q, k, v, w)
        return out

    def backward(self, dy):
        dq, dk, dv = attention_backward(dy, *self._cache)
        return self.q.backward(dq) + self.k.backward(dk) + self.v.backward(dv)


class MultiHeadAttention(Module):
    """Concat(head_1..head_H) W^O with per-head Q/K/V projections of width d/H."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = self.add_child("q", Linear(d, d, rng))
        self.k = self.add_child("k", Linear(d, d, rng))
        self.v = self.add_child("v", Linear(d, d, rng))
        self.o = self.add_child("o", Linear(d, d, rng))

    def _split(self, x):
        *lead, n, d = x.shape
        return np.swapaxes(x.reshape(*lead, n, self.heads, d // self.heads), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        *lead, n, h, dh = x.shape
        return x.reshape(*lead, n, h * dh)

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ValueError(f"expected width {self.d}, got {x.shape[-1]}")
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        heads, w = attention_forward(q, k, v)
        self._cache = (q, k, v, w)
        return self.o.forward(self._merge(heads))

    def backward(self, dy):
        dheads = self._split(self.o.backward(dy))
        dq, dk, dv = attention_backward(dheads, *self._cache)
        return (self.q.backward(self._merge(dq)) + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class FeedForward(Module):
    """max(0, x W1 + b1) W2 + b2, applied per position."""

    def __init__(self, d: int, d_hidden: int, rng: np.random.Generator, d_out: int | None = None):
        super().__init__()
        self.l1 = self.add_child("l1", Linear(d, d_hidden, rng))
        self.act = ReLU()
        self.l2 = self.add_child("l2", Linear(d_hidden, d_out or d, rng))

    def forward(self, x):
        return self.l2.forward(self.act.forward(self.l1.forward(x)))

    def backward(self, dy):
        return self.l1.backward(self.act.backward(self.l2.backward(dy)))


class Residual(Module):
    """LayerNorm(x + sublayer(x))."""

    def __init__(self, sublayer: Module, dim: int):
        super().__init__()
        self.sub = self.add_child("sub", sublayer)
        self.norm = self.add_child("norm", LayerNorm(dim))

    def forward(self, x):
        return self.norm.forward(x + self.sub.forward(x))

    def backward(self, dy):
        d = self.norm.backward(dy)
        return d + self.sub.backward(d)


class TransformerLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.attn = self.add_child("attn", Residual(MultiHeadAttention(d, heads, rng), d))
        self.ffn = self.add_child("ffn", Residual(FeedForward(d, d_ff, rng), d))

    def forward(self, x):
        return self.ffn.forward(self.attn.forward(x))

    def backward(self, dy):
        return self.attn.backward(self.ffn.backward(dy))


# -- losses ------------------------------------------------------------------

PROB_CLAMP = 1e-7


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy over all elements; returns (loss, dloss/dp)."""
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (pc - y) / (pc * (1.0 - pc)) / p.size
    # no gradient flows through the clamp
    grad = np.where((p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP), grad, 0.0)
    return float(loss), grad


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE of sigmoid(z) computed stably; gradient w.r.t. the logits."""
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(loss), (sigmoid(z) - y) / z.size


def cce_loss(p: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of -ln p[target]; returns (loss, dloss/dp)."""
    target = np.asarray(target, dtype=np.int64)
    n, c = p.shape
    if target.min() < 0 or target.max() >= c:
        raise IndexError("target class out of range")
    rows = np.arange(n)
    picked = np.clip(p[rows, target], PROB_CLAMP, None)
    grad = np.zeros_like(p)
    grad[rows, target] = -1.0 / picked / n
    return float(-np.mean(np.log(picked))), grad


def softmax_cce(z: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """CCE of softmax(z) with the fused gradient w.r.t. the logits."""
    target = np.asarray(target, dtype=np.int64)
    n, c = z.shape
    if target.min() < 0 or target.max() >= c:
        raise IndexError("target class out of range")
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return float(-logp[rows, target].mean()), grad / n


def soft_target_cce(z: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross entropy of softmax(z) against a full target distribution q."""
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    n = z.shape[0]
    return float(-(q * logp).sum() / n), (np.exp(logp) - q) / n


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, module: Module, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p, _ in module.named_parameters()}
        self.v = {name: np.zeros_like(p) for name, p, _ in module.named_parameters()}

    def step(self) -> None:
        self.t += 1
        adam_step(self.module, self.m, self.v, self.lr, (self.b1, self.b2), self.t, self.eps)


def adam_step(module: Module, m: dict, v: dict, lr: float, betas, t: int, eps: float = 1e-8) -> None:
    b1, b2 = betas
    for name, p, g in module.named_parameters():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1**t)
        vhat = v[name] / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# -- gradient checking -----------------------------------------------------------


def grad_check(module: Module, loss_fn: Callable[[], float], eps: float = 1e-5,
               max_entries: int | None = 40, rng: np.random.Generator | None = None,
               abs_floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference parameter gradients.

    ``loss_fn`` must run forward + backward (populating ``module.grads``) and
    return the scalar loss. Large tensors are probed at ``max_entries``
    random positions. Gradients that are zero in exact arithmetic (e.g. key
    biases, which softmax cancels) leave pure round-off in the difference
    quotient, so the relative error is taken against ``max(|num|, |ana|, abs_floor)``.
    """
    rng = rng or np.random.default_rng(0)
    module.zero_grad()
    loss_fn()
    analytic = {name: g.copy() for name, _, g in module.named_parameters()}
    worst = 0.0
    for name, p, _ in module.named_parameters():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana), abs_floor)
            worst = max(worst, abs(num - ana) / denom)
    module.zero_grad()
    return worst


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Little-endian binary: magic, version, meta pairs, then (name, shape, float64 data) per tensor."""
    meta = meta or {}
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)

    def put_str(s: str):
        b = s.encode("utf-8")
        out.extend(struct.pack("<I", len(b)))
        out.extend(b)

    out += struct.pack("<I", len(meta))
    for k in sorted(meta):
        put_str(k)
        put_str(str(meta[k]))
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        put_str(name)
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    try:
        (version,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")

        def get_str():
            nonlocal pos
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            s = buf[pos:pos + n].decode("utf-8")
            if len(s.encode("utf-8")) != n:
                raise CheckpointError("truncated string")
            pos += n
            return s

        (nmeta,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = {}
        for _ in range(nmeta):
            k = get_str()
            meta[k] = get_str()
        (ntens,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(ntens):
            name = get_str()
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError("truncated tensor data")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors, meta
