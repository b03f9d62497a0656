"""Small numpy neural kernel with hand-written backward passes.

Everything runs in float64.  Layers come in two flavours:

* pure forward functions (``dense_forward``, ``layernorm_forward``,
  ``multihead_attention_forward``, ``recurrent_stack_step``) for inference,
  safe to call concurrently over shared parameters;
* :class:`Layer` subclasses bound to a :class:`ParamSet`.  While recording,
  each ``forward`` pushes its context on a per-layer tape and each
  ``backward`` pops it, so backward calls must mirror forward calls in
  reverse order.  Parameter gradients are accumulated into the ParamSet.
"""

from __future__ import annotations

import logging
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_MAGIC = b"NNC1"


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


class UsageError(RuntimeError):
    """Raised on API misuse, e.g. backward without a recorded forward."""


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Named float64 parameters with same-shape gradient accumulators."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, arr in self.params.items():
            src = np.asarray(state[name], dtype=DTYPE)
            if src.size != arr.size:
                raise ShapeError(f"{name}: checkpoint has {src.shape}, model has {arr.shape}")
            # in place so layers holding views keep seeing current values
            arr[...] = src.reshape(arr.shape)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.params)

    def load(self, path: str | Path) -> None:
        self.load_state_dict(load_checkpoint(path))


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Write parameters in the NNC1 layout (little endian, f64 payload)."""
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=DTYPE)
        rows, cols = (1, arr.size) if arr.ndim < 2 else (int(np.prod(arr.shape[:-1])), arr.shape[-1])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read an NNC1 file; every entry comes back as a rows x cols matrix."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NNC1 checkpoint")
    pos = 4
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = 8 * rows * cols
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated entry {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(DTYPE)
        pos += nbytes
    return out


# ---------------------------------------------------------------------------
# functional kernels: *_fwd returns (output, cache), *_bwd consumes the cache


def _dense_fwd(x, W, b):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input has {x.shape[-1]} features, weight expects {W.shape[0]}")
    if b is not None and b.shape[-1] != W.shape[1]:
        raise ShapeError(f"dense: bias has {b.shape[-1]} entries, weight produces {W.shape[1]}")
    y = x @ W
    if b is not None:
        y = y + b
    return y, (x, W)


def _dense_bwd(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def dense_forward(x, W, b=None) -> np.ndarray:
    """y = xW + b."""
    return _dense_fwd(x, W, b)[0]


def _layernorm_fwd(x, gain, bias, eps):
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[-1]
    if n == 0:
        raise ShapeError("layernorm over zero columns")
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise ShapeError(f"layernorm: gain/bias length {gain.shape[-1]} != {n}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layernorm_bwd(dy, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dy2 = dy.reshape(-1, n)
    return dx, (dy2 * xhat.reshape(-1, n)).sum(0), dy2.sum(0)


def layernorm_forward(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    return _layernorm_fwd(x, gain, bias, eps)[0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def log_softmax_backward(dy: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dy - np.exp(out) * dy.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def _mha_fwd(q_src, k_src, v_src, p, heads, mask):
    q_src = np.asarray(q_src, dtype=DTYPE)
    k_src = np.asarray(k_src, dtype=DTYPE)
    v_src = np.asarray(v_src, dtype=DTYPE)
    d = p["Wq"].shape[1]
    if heads < 1 or d % heads:
        raise ShapeError(f"attention dim {d} not divisible by {heads} heads")
    if p["Wk"].shape[1] != d or p["Wv"].shape[1] != d:
        raise ShapeError("query, key and value projections must share the attention dim")
    tq, tk = q_src.shape[0], k_src.shape[0]
    if v_src.shape[0] != tk:
        raise ShapeError(f"key source has {tk} rows, value source has {v_src.shape[0]}")
    if mask is None:
        mask = np.ones((tq, tk), dtype=bool)
    elif mask.shape != (tq, tk):
        raise ShapeError(f"mask shape {mask.shape} != ({tq}, {tk})")
    dh = d // heads
    Q, cq = _dense_fwd(q_src, p["Wq"], p["bq"])
    K, ck = _dense_fwd(k_src, p["Wk"], p["bk"])
    V, cv = _dense_fwd(v_src, p["Wv"], p["bv"])
    Qh = Q.reshape(tq, heads, dh).transpose(1, 0, 2)
    Kh = K.reshape(tk, heads, dh).transpose(1, 0, 2)
    Vh = V.reshape(tk, heads, dh).transpose(1, 0, 2)
    scale = 1.0 / np.sqrt(dh)
    scores = np.where(mask, Qh @ Kh.transpose(0, 2, 1) * scale, -np.inf)
    live = mask.any(axis=1)
    if not live.all():
        log.warning("attention: %d query rows see no keys; emitting zeros", int((~live).sum()))
    m = np.where(live[:, None], scores.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(scores - m)
    s = e.sum(axis=-1, keepdims=True)
    A = e / np.where(s > 0, s, 1.0)
    ctx = (A @ Vh).transpose(1, 0, 2).reshape(tq, d)
    out, co = _dense_fwd(ctx, p["Wo"], p["bo"])
    out = np.where(live[:, None], out, 0.0)
    return out, (cq, ck, cv, co, Qh, Kh, Vh, A, scale, live, heads)


def _mha_bwd(dout, cache):
    cq, ck, cv, co, Qh, Kh, Vh, A, scale, live, heads = cache
    dout = np.where(live[:, None], dout, 0.0)
    dctx, dWo, dbo = _dense_bwd(dout, co)
    tq, d = dctx.shape
    dh = d // heads
    dctx_h = dctx.reshape(tq, heads, dh).transpose(1, 0, 2)
    dA = dctx_h @ Vh.transpose(0, 2, 1)
    dVh = A.transpose(0, 2, 1) @ dctx_h
    dscores = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQh = dscores @ Kh
    dKh = dscores.transpose(0, 2, 1) @ Qh
    merge = lambda g: g.transpose(1, 0, 2).reshape(g.shape[1], d)  # noqa: E731
    dq, dWq, dbq = _dense_bwd(merge(dQh), cq)
    dk, dWk, dbk = _dense_bwd(merge(dKh), ck)
    dv, dWv, dbv = _dense_bwd(merge(dVh), cv)
    grads = {"Wq": dWq, "bq": dbq, "Wk": dWk, "bk": dbk, "Wv": dWv, "bv": dbv, "Wo": dWo, "bo": dbo}
    return dq, dk, dv, grads


def multihead_attention_forward(query_src, key_src, value_src, params: dict, heads: int, mask=None) -> np.ndarray:
    """Scaled dot-product attention with separate query/key/value sources.

    ``params`` maps the names in ``ATTENTION_KEYS`` to arrays.  ``mask`` is a
    boolean ``(T_q, T_k)`` visibility matrix; rows with no visible key yield
    zero vectors.
    """
    return _mha_fwd(query_src, key_src, value_src, params, heads, mask)[0]


def attention_weights(query_src, key_src, params: dict, heads: int, mask=None) -> np.ndarray:
    """Per-head attention weights, shape ``(heads, T_q, T_k)``."""
    v_dummy = np.zeros((np.asarray(key_src).shape[0], params["Wv"].shape[0]))
    return _mha_fwd(query_src, key_src, v_dummy, params, heads, mask)[1][7]


def _lstm_cell_fwd(x, h, c, W, b):
    xh = np.concatenate([x, h], axis=-1)
    if xh.shape[-1] != W.shape[0]:
        raise ShapeError(f"lstm: input+hidden width {xh.shape[-1]} != {W.shape[0]}")
    n = h.shape[-1]
    z = xh @ W + b
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n : 2 * n])
    g = np.tanh(z[..., 2 * n : 3 * n])
    o = sigmoid(z[..., 3 * n :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, g, o, tc, W)


def _lstm_cell_bwd(dh, dc, cache):
    xh, c, i, f, g, o, tc, W = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i), dc * c * f * (1.0 - f), dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)],
        axis=-1,
    )
    dxh = dz @ W.T
    d_in = W.shape[0] - c.shape[-1]
    dW = np.outer(xh, dz) if xh.ndim == 1 else xh.T @ dz
    db = dz if dz.ndim == 1 else dz.sum(0)
    return dxh[..., :d_in], dxh[..., d_in:], dc * f, dW, db


def recurrent_stack_step(x, state, layers: list[tuple[np.ndarray, np.ndarray]]):
    """One step of a stacked LSTM.

    ``layers`` holds ``(W, b)`` per layer with gate order input, forget,
    cell, output; ``state`` holds ``(h, c)`` per layer.  Returns the top
    layer's hidden vector and the new state.
    """
    if len(state) != len(layers):
        raise ShapeError(f"state has {len(state)} layers, stack has {len(layers)}")
    inp = np.asarray(x, dtype=DTYPE)
    new_state = []
    for (W, b), (h, c) in zip(layers, state):
        h, c, _ = _lstm_cell_fwd(inp, h, c, W, b)
        new_state.append((h, c))
        inp = h
    return inp, new_state


# ---------------------------------------------------------------------------
# parameter-bound layers


class Layer:
    """Base class: parameter lookup, gradient accumulation and the tape."""

    def __init__(self, params: ParamSet, name: str) -> None:
        self.params = params
        self.name = name
        self._tape: list | None = None

    def p(self, key: str) -> np.ndarray:
        return self.params[f"{self.name}.{key}"]

    def _new(self, key: str, value) -> None:
        self.params.add(f"{self.name}.{key}", value)

    def _acc(self, key: str, grad) -> None:
        self.params.accumulate(f"{self.name}.{key}", grad)

    def _push(self, ctx) -> None:
        if self._tape is not None:
            self._tape.append(ctx)

    def _pop(self):
        if not self._tape:
            raise UsageError(f"{self.name}: backward called without a recorded forward")
        return self._tape.pop()

    def sublayers(self) -> list[Layer]:
        out = []
        for v in vars(self).values():
            if isinstance(v, Layer):
                out.append(v)
            elif isinstance(v, (list, tuple)):
                out.extend(x for x in v if isinstance(x, Layer))
        return out

    def set_recording(self, on: bool) -> None:
        self._tape = [] if on else None
        for sub in self.sublayers():
            sub.set_recording(on)

    @contextmanager
    def recording(self):
        self.set_recording(True)
        try:
            yield self
        finally:
            self.set_recording(False)


class Dense(Layer):
    def __init__(self, params, name, d_in, d_out, rng, bias=True):
        super().__init__(params, name)
        self._new("W", uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = bias
        if bias:
            self._new("b", uniform_init(rng, d_in, (d_out,)))

    def forward(self, x):
        y, cache = _dense_fwd(x, self.p("W"), self.p("b") if self.bias else None)
        self._push(cache)
        return y

    def backward(self, dy):
        dx, dW, db = _dense_bwd(dy, self._pop())
        self._acc("W", dW)
        if self.bias:
            self._acc("b", db)
        return dx


class LayerNorm(Layer):
    def __init__(self, params, name, dim, eps=1e-5):
        super().__init__(params, name)
        self.eps = eps
        self._new("gain", np.ones(dim))
        self._new("bias", np.zeros(dim))

    def forward(self, x):
        y, cache = _layernorm_fwd(x, self.p("gain"), self.p("bias"), self.eps)
        self._push(cache)
        return y

    def backward(self, dy):
        dx, dg, db = _layernorm_bwd(dy, self._pop())
        self._acc("gain", dg)
        self._acc("bias", db)
        return dx


class FeedForward(Layer):
    """Dense -> ReLU -> Dense."""

    def __init__(self, params, name, dim, hidden, rng):
        super().__init__(params, name)
        self.inner = Dense(params, f"{name}.inner", dim, hidden, rng)
        self.outer = Dense(params, f"{name}.outer", hidden, dim, rng)

    def forward(self, x):
        a = self.inner.forward(x)
        self._push(a > 0)
        return self.outer.forward(np.maximum(a, 0.0))

    def backward(self, dy):
        active = self._pop()
        return self.inner.backward(self.outer.backward(dy) * active)


class MultiHeadAttention(Layer):
    """Multi-head attention; query/key and value may come from different sources."""

    def __init__(self, params, name, d_qk_in, d_v_in, dim, heads, rng, d_out=None):
        super().__init__(params, name)
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        d_out = dim if d_out is None else d_out
        for key, fan_in, shape in (
            ("Wq", d_qk_in, (d_qk_in, dim)),
            ("Wk", d_qk_in, (d_qk_in, dim)),
            ("Wv", d_v_in, (d_v_in, dim)),
            ("Wo", dim, (dim, d_out)),
        ):
            self._new(key, uniform_init(rng, fan_in, shape))
            self._new("b" + key[1], uniform_init(rng, fan_in, shape[1]))

    def param_dict(self) -> dict:
        return {k: self.p(k) for k in ATTENTION_KEYS}

    def forward(self, q_src, k_src, v_src, mask=None):
        out, cache = _mha_fwd(q_src, k_src, v_src, self.param_dict(), self.heads, mask)
        self._push(cache)
        return out

    def backward(self, dout):
        dq, dk, dv, grads = _mha_bwd(dout, self._pop())
        for k, g in grads.items():
            self._acc(k, g)
        return dq, dk, dv


class Embedding(Layer):
    def __init__(self, params, name, vocab_size, dim, rng):
        super().__init__(params, name)
        self._new("table", rng.normal(0.0, 1.0, size=(vocab_size, dim)))

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        table = self.p("table")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"token index out of range for vocabulary of {table.shape[0]}")
        self._push(ids)
        return table[ids]

    def backward(self, dy):
        ids = self._pop()
        g = np.zeros_like(self.p("table"))
        np.add.at(g, ids, dy)
        self._acc("table", g)


class LSTMStack(Layer):
    """Stacked LSTM advanced one step at a time."""

    def __init__(self, params, name, d_in, hidden, n_layers, rng):
        super().__init__(params, name)
        self.hidden = hidden
        self.n_layers = n_layers
        for k in range(n_layers):
            fan = (d_in if k == 0 else hidden) + hidden
            self._new(f"W{k}", uniform_init(rng, hidden, (fan, 4 * hidden)))
            self._new(f"b{k}", uniform_init(rng, hidden, (4 * hidden,)))

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.p(f"W{k}"), self.p(f"b{k}")) for k in range(self.n_layers)]

    def initial_state(self, batch: int | None = None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return [(np.zeros(shape), np.zeros(shape)) for _ in range(self.n_layers)]

    def step(self, x, state):
        if len(state) != self.n_layers:
            raise ShapeError(f"state has {len(state)} layers, stack has {self.n_layers}")
        inp = np.asarray(x, dtype=DTYPE)
        caches, new_state = [], []
        for (W, b), (h, c) in zip(self.weights(), state):
            h, c, cache = _lstm_cell_fwd(inp, h, c, W, b)
            caches.append(cache)
            new_state.append((h, c))
            inp = h
        self._push(caches)
        return inp, new_state

    def step_backward(self, dy, dstate):
        """Backward through one step.

        ``dstate`` is the gradient w.r.t. the step's output state (``None``
        entries mean zero).  Returns ``(dx, dstate_in)``.
        """
        caches = self._pop()
        dstate_in = [None] * self.n_layers
        dh_from_above = dy
        for k in reversed(range(self.n_layers)):
            cache = caches[k]
            dh_next, dc_next = dstate[k] if dstate is not None and dstate[k] is not None else (0.0, 0.0)
            dx, dh, dc, dW, db = _lstm_cell_bwd(dh_from_above + dh_next, np.zeros_like(cache[1]) + dc_next, cache)
            self._acc(f"W{k}", dW)
            self._acc(f"b{k}", db)
            dstate_in[k] = (dh, dc)
            dh_from_above = dx
        return dh_from_above, dstate_in


def sinusoidal_positions(start: int, length: int, dim: int) -> np.ndarray:
    pos = np.arange(start, start + length, dtype=DTYPE)[:, None]
    idx = np.arange(0, dim, 2, dtype=DTYPE)
    angle = pos / np.power(10000.0, idx / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def unit_normalize_forward(z: np.ndarray):
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    y = z / norm
    return y, (y, norm)


def unit_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, norm = cache
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


class SGD:
    """Plain or momentum SGD with optional global-norm clipping."""

    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.0, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v) for k, v in params.params.items()}

    def step(self) -> float:
        grads = self.params.grads
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for k, p in self.params.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += scale * grads[k]
            p -= self.lr * v
        return norm


class Adam:
    """Adam with optional global-norm clipping."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.params.items()}

    def step(self) -> float:
        grads = self.params.grads
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.params.items():
            g = scale * grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        """Step count and moments, writable with ``save_checkpoint``."""
        out = {"step": np.array([float(self.t)])}
        for k in self.params.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = {"step"} | {f"{p}/{k}" for k in self.params.params for p in "mv"}
        missing -= set(state)
        if missing:
            raise KeyError(f"optimizer state lacks entries: {sorted(missing)[:5]}")
        self.t = int(np.asarray(state["step"]).ravel()[0])
        for k, p in self.params.params.items():
            for name, buf in (("m", self.m[k]), ("v", self.v[k])):
                src = np.asarray(state[f"{name}/{k}"], dtype=DTYPE)
                if src.size != p.size:
                    raise ShapeError(f"{name}/{k}: state has {src.shape}, parameter has {p.shape}")
                buf[...] = src.reshape(p.shape)
