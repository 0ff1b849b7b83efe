"""Transformer building blocks in float64 numpy with hand-written backward passes.

Models are stored as one flat float64 parameter vector described by a
`ParamSpec` (ordered name -> shape/offset).  Forward passes optionally
collect caches; backward passes accumulate into a flat gradient vector of
the same layout.  Pre-norm residual blocks, learned absolute positions (in
the model wrappers), tanh-approximate GELU with its exact derivative.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ParamSpec:
    """Ordered directory of named tensors inside one flat vector."""

    def __init__(self, entries: list[tuple[str, tuple[int, ...], str]]):
        # entry kinds: "gauss" (scaled normal init), "zero", "one"
        self.entries = list(entries)
        self.offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        off = 0
        for name, shape, kind in self.entries:
            if name in self.offsets:
                raise ShapeError(f"duplicate parameter name {name!r}")
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self.offsets[name] = (off, n, tuple(shape))
            off += n
        self.total = off

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off, n, shape = self.offsets[name]
        return flat[off:off + n].reshape(shape)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.total,):
            raise ShapeError(f"parameter vector has length {flat.shape}, expected ({self.total},)")
        return {name: self.view(flat, name) for name, _, _ in self.entries}

    def init(self, seed_gen: np.random.Generator, std: float) -> np.ndarray:
        flat = np.empty(self.total)
        for name, shape, kind in self.entries:
            v = self.view(flat, name)
            if kind == "gauss":
                v[...] = seed_gen.standard_normal(shape) * std
            elif kind == "zero":
                v[...] = 0.0
            elif kind == "one":
                v[...] = 1.0
            else:
                raise ShapeError(f"unknown init kind {kind!r} for {name!r}")
        return flat


class CoreDims(NamedTuple):
    n_layers: int
    n_heads: int
    d_model: int
    d_ffn: int


def core_entries(dims: CoreDims) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = dims.d_model, dims.d_ffn
    out: list[tuple[str, tuple[int, ...], str]] = []
    for i in range(dims.n_layers):
        p = f"l{i}."
        out += [
            (p + "ln1.g", (d,), "one"), (p + "ln1.b", (d,), "zero"),
            (p + "attn.wq", (d, d), "gauss"), (p + "attn.wk", (d, d), "gauss"),
            (p + "attn.wv", (d, d), "gauss"), (p + "attn.wo", (d, d), "gauss"),
            (p + "ln2.g", (d,), "one"), (p + "ln2.b", (d,), "zero"),
            (p + "ffn.w1", (d, f), "gauss"), (p + "ffn.b1", (f,), "zero"),
            (p + "ffn.w2", (f, d), "gauss"), (p + "ffn.b2", (d,), "zero"),
        ]
    out += [("ln_f.g", (d,), "one"), ("ln_f.b", (d,), "zero")]
    return out


# --- primitives -------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(xn, v, prefix, n_heads, causal):
    wq, wk, wv, wo = (v[prefix + n] for n in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"))
    q = _split_heads(xn @ wq, n_heads)
    k = _split_heads(xn @ wk, n_heads)
    val = _split_heads(xn @ wv, n_heads)
    dh = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
    if causal:
        t = scores.shape[-1]
        mask = np.tril(np.ones((t, t), dtype=bool))
        scores = np.where(mask, scores, -np.inf)
    attn = softmax(scores)
    ctx = _merge_heads(attn @ val)
    out = ctx @ wo
    return out, (xn, q, k, val, attn, ctx)


def attention_backward(dout, v, g, prefix, cache):
    xn, q, k, val, attn, ctx = cache
    wq, wk, wv, wo = (v[prefix + n] for n in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"))
    b, t, d = xn.shape
    n_heads = q.shape[1]
    dh = q.shape[-1]
    xn2 = xn.reshape(-1, d)
    g[prefix + "attn.wo"] += ctx.reshape(-1, d).T @ dout.reshape(-1, d)
    dctx = _split_heads(dout @ wo.T, n_heads)
    dattn = dctx @ val.transpose(0, 1, 3, 2)
    dval = attn.transpose(0, 1, 3, 2) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    ds /= np.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq2 = _merge_heads(dq).reshape(-1, d)
    dk2 = _merge_heads(dk).reshape(-1, d)
    dv2 = _merge_heads(dval).reshape(-1, d)
    g[prefix + "attn.wq"] += xn2.T @ dq2
    g[prefix + "attn.wk"] += xn2.T @ dk2
    g[prefix + "attn.wv"] += xn2.T @ dv2
    dxn = (dq2 @ wq.T + dk2 @ wk.T + dv2 @ wv.T).reshape(b, t, d)
    return dxn


def ffn_forward(xn, v, prefix):
    w1, b1, w2, b2 = (v[prefix + n] for n in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"))
    h1 = xn @ w1 + b1
    a, t = gelu(h1)
    return a @ w2 + b2, (xn, h1, a, t)


def ffn_backward(dy, v, g, prefix, cache):
    xn, h1, a, t = cache
    w1, w2 = v[prefix + "ffn.w1"], v[prefix + "ffn.w2"]
    b, tt, d = xn.shape
    f = h1.shape[-1]
    dy2 = dy.reshape(-1, d)
    g[prefix + "ffn.b2"] += dy2.sum(axis=0)
    g[prefix + "ffn.w2"] += a.reshape(-1, f).T @ dy2
    da = dy @ w2.T
    dh1 = da * gelu_grad(h1, t)
    dh12 = dh1.reshape(-1, f)
    g[prefix + "ffn.b1"] += dh12.sum(axis=0)
    g[prefix + "ffn.w1"] += xn.reshape(-1, d).T @ dh12
    return (dh12 @ w1.T).reshape(b, tt, d)


def core_forward(v, dims: CoreDims, x0, causal: bool, need_cache: bool):
    """Pre-norm residual stack + final layernorm over embedded input x0."""
    h = x0
    caches = [] if need_cache else None
    for i in range(dims.n_layers):
        p = f"l{i}."
        xn1, ln1c = layernorm_forward(h, v[p + "ln1.g"], v[p + "ln1.b"])
        att, attc = attention_forward(xn1, v, p, dims.n_heads, causal)
        h1 = h + att
        xn2, ln2c = layernorm_forward(h1, v[p + "ln2.g"], v[p + "ln2.b"])
        ff, ffc = ffn_forward(xn2, v, p)
        h2 = h1 + ff
        if need_cache:
            caches.append((ln1c, attc, ln2c, ffc))
        h = h2
    hf, lnfc = layernorm_forward(h, v["ln_f.g"], v["ln_f.b"])
    if need_cache:
        return hf, (caches, lnfc)
    return hf, None


def core_backward(v, g, dims: CoreDims, cache, dhf):
    """Backward through the residual stack; returns gradient w.r.t. x0."""
    caches, lnfc = cache
    dh, dg_f, db_f = layernorm_backward(dhf, v["ln_f.g"], lnfc)
    g["ln_f.g"] += dg_f
    g["ln_f.b"] += db_f
    for i in reversed(range(dims.n_layers)):
        p = f"l{i}."
        ln1c, attc, ln2c, ffc = caches[i]
        dff = ffn_backward(dh, v, g, p, ffc)
        dxn2, dg2, db2 = layernorm_backward(dff, v[p + "ln2.g"], ln2c)
        g[p + "ln2.g"] += dg2
        g[p + "ln2.b"] += db2
        dh1 = dh + dxn2
        datt = attention_backward(dh1, v, g, p, attc)
        dxn1, dg1, db1 = layernorm_backward(datt, v[p + "ln1.g"], ln1c)
        g[p + "ln1.g"] += dg1
        g[p + "ln1.b"] += db1
        dh = dh1 + dxn1
    return dh


# --- optimizer ---------------------------------------------------------------

class AdamState:
    def __init__(self, n: int):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam; mutates state, returns the updated parameter vector."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"adam shapes differ: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    return params - lr * mhat / (np.sqrt(vhat) + eps)
