"""Conv1D, MaxPool1D, LSTM and Dense layers with hand-written backward passes.

Every forward function accepts either a single sample (``[T, C]`` for
sequences, ``[D]`` for vectors) or a batch with one extra leading axis, and
returns ``(output, cache)``.  The matching ``*_backward`` takes the upstream
gradient and that cache and returns ``(grad_input, param_grads)`` where
``param_grads`` is a dict keyed like the parameter dataclass fields.

LSTM gates read the concatenation ``[h_{t-1}, x_t]`` (hidden state first).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_core import DTYPE, ShapeError, sigmoid

GATES = ("f", "i", "c", "o")


@dataclass
class ConvParams:
    weights: np.ndarray  # [F, K, C]
    bias: np.ndarray  # [F]
    padding: str = "same"

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class PoolParams:
    pool_size: int
    stride: int | None = None

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.stride is None:
            self.stride = self.pool_size
        if self.stride < 1:
            raise ValueError("pool stride must be >= 1")


@dataclass
class LstmParams:
    W_f: np.ndarray  # [H, H + D]
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray  # [H]
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    return_sequences: bool = True

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        # f/i/c/o weights, then f/i/c/o biases: this is also the checkpoint order
        out = {f"W_{g}": getattr(self, f"W_{g}") for g in GATES}
        out.update({f"b_{g}": getattr(self, f"b_{g}") for g in GATES})
        return out

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.concatenate([self.W_f, self.W_i, self.W_c, self.W_o], axis=0)
        b = np.concatenate([self.b_f, self.b_i, self.b_c, self.b_o])
        return W, b


@dataclass
class DenseParams:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class LayerCache:
    kind: str
    batched: bool
    data: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------- initialisers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_conv(rng, num_filters, kernel_width, in_channels, padding="same") -> ConvParams:
    fan_in = kernel_width * in_channels
    fan_out = kernel_width * num_filters
    w = glorot_uniform(rng, (num_filters, kernel_width, in_channels), fan_in, fan_out)
    return ConvParams(w, np.zeros(num_filters, dtype=DTYPE), padding)


def init_lstm(rng, input_dim, hidden_dim, return_sequences=True, forget_bias=1.0) -> LstmParams:
    limit = np.sqrt(1.0 / hidden_dim)
    mats = {
        g: rng.uniform(-limit, limit, size=(hidden_dim, hidden_dim + input_dim)).astype(DTYPE)
        for g in GATES
    }
    zeros = lambda: np.zeros(hidden_dim, dtype=DTYPE)  # noqa: E731
    return LstmParams(
        mats["f"], mats["i"], mats["c"], mats["o"],
        np.full(hidden_dim, forget_bias, dtype=DTYPE), zeros(), zeros(), zeros(),
        return_sequences=return_sequences,
    )


def init_dense(rng, in_dim, out_dim, activation="linear") -> DenseParams:
    w = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
    return DenseParams(w, np.zeros(out_dim, dtype=DTYPE), activation)


# ---------------------------------------------------------------- helpers


def _batch(x: np.ndarray, sample_ndim: int, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == sample_ndim:
        return x[None], False
    if x.ndim == sample_ndim + 1:
        return x, True
    raise ShapeError(f"{name}: expected {sample_ndim}-d sample or batch, got shape {list(x.shape)}")


def _unbatch(x: np.ndarray, batched: bool) -> np.ndarray:
    return x if batched else x[0]


def _check_grad(grad_out, cache: LayerCache, kind: str) -> np.ndarray:
    if cache.kind != kind:
        raise ShapeError(f"cache from a {cache.kind} forward passed to {kind} backward")
    g = np.asarray(grad_out, dtype=DTYPE)
    if not cache.batched:
        g = g[None]
    if g.shape != cache.data["out_shape"]:
        raise ShapeError(
            f"{kind} backward: grad shape {list(g.shape)} != output shape {list(cache.data['out_shape'])}"
        )
    return g


def same_padding(kernel_width: int) -> tuple[int, int]:
    """Zero-padding (left, right) that preserves length; odd remainder goes right."""
    total = kernel_width - 1
    left = total // 2
    return left, total - left


# ---------------------------------------------------------------- conv1d


def conv1d_forward(x, p: ConvParams):
    xb, batched = _batch(x, 2, "conv1d")
    B, T, C = xb.shape
    if C != p.in_channels:
        raise ShapeError(f"conv1d: input has {C} channels, kernel expects {p.in_channels}")
    K = p.kernel_width
    if p.padding == "same":
        left, right = same_padding(K)
    elif p.padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {p.padding!r}")
    t_out = T + left + right - K + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: kernel width {K} longer than input length {T}")
    padded = np.pad(xb, ((0, 0), (left, right), (0, 0)))
    # [B, T_out, C, K] -> [B, T_out, K, C]
    cols = sliding_window_view(padded, K, axis=1).transpose(0, 1, 3, 2)
    out = np.einsum("btkc,fkc->btf", cols, p.weights, optimize=True) + p.bias
    cache = LayerCache("conv1d", batched, {
        "cols": cols, "pad": (left, right), "in_shape": xb.shape, "out_shape": out.shape,
    })
    return _unbatch(out, batched), cache


def conv1d_backward(grad_out, cache: LayerCache, p: ConvParams):
    g = _check_grad(grad_out, cache, "conv1d")
    cols = cache.data["cols"]
    left, _ = cache.data["pad"]
    B, T, C = cache.data["in_shape"]
    K = p.kernel_width
    t_out = g.shape[1]
    dw = np.einsum("btf,btkc->fkc", g, cols, optimize=True)
    db = g.sum(axis=(0, 1))
    dcols = np.einsum("btf,fkc->btkc", g, p.weights, optimize=True)
    dpad = np.zeros((B, t_out + K - 1, C), dtype=DTYPE)
    for k in range(K):
        dpad[:, k:k + t_out, :] += dcols[:, :, k, :]
    dx = dpad[:, left:left + T, :]
    return _unbatch(dx, cache.batched), {"weights": dw, "bias": db}


# ---------------------------------------------------------------- maxpool1d


def pooled_length(T: int, pool_size: int, stride: int) -> int:
    return (T - pool_size) // stride + 1


def maxpool1d_forward(x, p: PoolParams):
    xb, batched = _batch(x, 2, "maxpool1d")
    B, T, F = xb.shape
    if T < p.pool_size:
        raise ShapeError(f"maxpool1d: input length {T} shorter than pool size {p.pool_size}")
    n_out = pooled_length(T, p.pool_size, p.stride)
    # [B, n_out, F, P]
    windows = sliding_window_view(xb, p.pool_size, axis=1)[:, ::p.stride][:, :n_out]
    arg = windows.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    idx = arg + (np.arange(n_out) * p.stride)[None, :, None]
    cache = LayerCache("maxpool1d", batched, {
        "idx": idx, "in_shape": xb.shape, "out_shape": out.shape,
    })
    return _unbatch(out, batched), cache


def maxpool1d_backward(grad_out, cache: LayerCache, p: PoolParams | None = None):
    g = _check_grad(grad_out, cache, "maxpool1d")
    B, T, F = cache.data["in_shape"]
    idx = cache.data["idx"]
    dx = np.zeros((B, T, F), dtype=DTYPE)
    b_ix = np.arange(B)[:, None, None]
    f_ix = np.arange(F)[None, None, :]
    np.add.at(dx, (b_ix, idx, f_ix), g)
    return _unbatch(dx, cache.batched), {}


# ---------------------------------------------------------------- lstm


def lstm_step(x_t, h_prev, c_prev, p: LstmParams):
    """One cell update for a single sample; returns ``(h_t, c_t)``."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    H, D = p.hidden_dim, p.input_dim
    if x_t.shape != (D,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError(
            f"lstm_step: got x {list(x_t.shape)}, h {list(h_prev.shape)}, c {list(c_prev.shape)}; "
            f"expected x [{D}], h/c [{H}]"
        )
    z = np.concatenate([h_prev, x_t])
    f = sigmoid(p.W_f @ z + p.b_f)
    i = sigmoid(p.W_i @ z + p.b_i)
    c_hat = np.tanh(p.W_c @ z + p.b_c)
    o = sigmoid(p.W_o @ z + p.b_o)
    c_t = f * c_prev + i * c_hat
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def lstm_forward(seq, p: LstmParams):
    xb, batched = _batch(seq, 2, "lstm")
    B, T, D = xb.shape
    H = p.hidden_dim
    if T < 1:
        raise ShapeError("lstm: empty sequence")
    if D != p.input_dim:
        raise ShapeError(f"lstm: input dim {D} != parameter input dim {p.input_dim}")
    W, b = p.stacked()
    Wh, Wx = W[:, :H], W[:, H:]
    # input projection for every step at once
    xproj = np.einsum("btd,gd->btg", xb, Wx, optimize=True) + b
    h = np.zeros((B, H), dtype=DTYPE)
    c = np.zeros((B, H), dtype=DTYPE)
    hs = np.empty((B, T, H), dtype=DTYPE)
    cs = np.empty((B, T + 1, H), dtype=DTYPE)
    gates = np.empty((B, T, 4 * H), dtype=DTYPE)
    cs[:, 0] = c
    for t in range(T):
        a = xproj[:, t] + h @ Wh.T
        act = np.empty_like(a)
        act[:, :2 * H] = sigmoid(a[:, :2 * H])
        act[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        act[:, 3 * H:] = sigmoid(a[:, 3 * H:])
        f, i, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = act
        cs[:, t + 1] = c
        hs[:, t] = h
    out = hs if p.return_sequences else hs[:, -1]
    cache = LayerCache("lstm", batched, {
        "x": xb, "hs": hs, "cs": cs, "gates": gates, "out_shape": out.shape,
    })
    return _unbatch(out, batched), cache


def lstm_backward(grad_out, cache: LayerCache, p: LstmParams):
    g = _check_grad(grad_out, cache, "lstm")
    xb = cache.data["x"]
    hs, cs, gates = cache.data["hs"], cache.data["cs"], cache.data["gates"]
    B, T, D = xb.shape
    H = p.hidden_dim
    if p.return_sequences:
        dh_out = g
    else:
        dh_out = np.zeros((B, T, H), dtype=DTYPE)
        dh_out[:, -1] = g
    W, _ = p.stacked()
    dW = np.zeros_like(W)
    db = np.zeros(4 * H, dtype=DTYPE)
    dx = np.empty((B, T, D), dtype=DTYPE)
    dh_next = np.zeros((B, H), dtype=DTYPE)
    dc_next = np.zeros((B, H), dtype=DTYPE)
    zeros_h = np.zeros((B, H), dtype=DTYPE)
    da = np.empty((B, 4 * H), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        act = gates[:, t]
        f, i, gg, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c_prev, c = cs[:, t], cs[:, t + 1]
        tc = np.tanh(c)
        dh = dh_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da[:, :H] = dc * c_prev * f * (1.0 - f)
        da[:, H:2 * H] = dc * gg * i * (1.0 - i)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        h_prev = hs[:, t - 1] if t > 0 else zeros_h
        z = np.concatenate([h_prev, xb[:, t]], axis=1)
        dW += da.T @ z
        db += da.sum(axis=0)
        dz = da @ W
        dh_next = dz[:, :H]
        dx[:, t] = dz[:, H:]
        dc_next = dc * f
    grads = {}
    for k, gate in enumerate(GATES):
        grads[f"W_{gate}"] = dW[k * H:(k + 1) * H].copy()
    for k, gate in enumerate(GATES):
        grads[f"b_{gate}"] = db[k * H:(k + 1) * H].copy()
    return _unbatch(dx, cache.batched), grads


# ---------------------------------------------------------------- dense


def dense_forward(x, p: DenseParams):
    xb, batched = _batch(x, 1, "dense")
    if xb.shape[1] != p.in_dim:
        raise ShapeError(f"dense: input dim {xb.shape[1]} != weights in_dim {p.in_dim}")
    pre = xb @ p.weights.T + p.bias
    if p.activation == "relu":
        out = np.maximum(pre, 0.0)
    elif p.activation == "linear":
        out = pre
    else:
        raise ValueError(f"unknown activation {p.activation!r}")
    cache = LayerCache("dense", batched, {"x": xb, "pre": pre, "out_shape": out.shape})
    return _unbatch(out, batched), cache


def dense_backward(grad_out, cache: LayerCache, p: DenseParams):
    g = _check_grad(grad_out, cache, "dense")
    if p.activation == "relu":
        # subgradient 0 at pre-activation == 0
        g = g * (cache.data["pre"] > 0.0)
    x = cache.data["x"]
    dw = g.T @ x
    db = g.sum(axis=0)
    dx = g @ p.weights
    return _unbatch(dx, cache.batched), {"weights": dw, "bias": db}


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0), LayerCache("relu", True, {"mask": x > 0.0, "out_shape": x.shape})


def relu_backward(grad_out, cache: LayerCache):
    return np.asarray(grad_out, dtype=DTYPE) * cache.data["mask"]


_BACKWARD = {
    "conv1d": conv1d_backward,
    "maxpool1d": maxpool1d_backward,
    "lstm": lstm_backward,
    "dense": dense_backward,
}


def layer_backward(grad_out, cache: LayerCache, params=None):
    """Dispatch to the backward pass matching ``cache.kind``."""
    try:
        fn = _BACKWARD[cache.kind]
    except KeyError:
        raise ShapeError(f"no backward registered for cache kind {cache.kind!r}") from None
    return fn(grad_out, cache, params)
