"""The CNN-LSTM disaggregation network and its checkpoint format.

Pipeline (default sizes)::

    mains window [100, 1]
      -> Conv1D 48 filters, width 4, same padding   [100, 48]
      -> MaxPool 3 (stride 3)                       [33, 48]
      -> LSTM 256, full sequence                     [33, 256]
      -> LSTM 128, last state                        [128]
      -> Dense 128 relu                              [128]
      -> Dense 100 linear                            [100]

Setting ``lstm2_returns_sequences`` keeps the second LSTM's full sequence and
flattens it (``33 * 128``) before the first dense layer.

Checkpoint layout (``.nilm`` files)::

    magic      8 bytes   b"NILMCKPT"
    version    uint32 LE
    hdr_len    uint32 LE
    header     hdr_len bytes of UTF-8 JSON: config, block names/shapes,
               sha256 of the payload, free-form metadata
    payload    float64 LE arrays, concatenated in ``Model.parameters()`` order
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .tensor_core import DTYPE, ShapeError

MAGIC = b"NILMCKPT"
FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".nilm"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 100
    conv_filters: int = 48
    conv_kernel_width: int = 4
    conv_padding: str = "same"
    conv_relu: bool = False
    pool_size: int = 3
    pool_stride: int | None = None
    lstm1_hidden: int = 256
    lstm2_hidden: int = 128
    lstm2_returns_sequences: bool = False
    dense1_units: int = 128
    dense1_activation: str = "relu"
    output_units: int | None = None
    forget_bias: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.output_units is None:
            object.__setattr__(self, "output_units", self.window_len)
        self.validate()

    @property
    def effective_pool_stride(self) -> int:
        return self.pool_stride if self.pool_stride is not None else self.pool_size

    @property
    def conv_out_len(self) -> int:
        if self.conv_padding == "same":
            return self.window_len
        return self.window_len - self.conv_kernel_width + 1

    @property
    def pooled_len(self) -> int:
        return L.pooled_length(self.conv_out_len, self.pool_size, self.effective_pool_stride)

    @property
    def dense1_in(self) -> int:
        if self.lstm2_returns_sequences:
            return self.pooled_len * self.lstm2_hidden
        return self.lstm2_hidden

    def validate(self) -> None:
        ints = ("window_len", "conv_filters", "conv_kernel_width", "pool_size",
                "lstm1_hidden", "lstm2_hidden", "dense1_units", "output_units")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.output_units != self.window_len:
            raise ValueError(
                f"output_units ({self.output_units}) must equal window_len ({self.window_len})"
            )
        if self.conv_padding not in ("same", "valid"):
            raise ValueError(f"conv_padding must be 'same' or 'valid', got {self.conv_padding!r}")
        if self.dense1_activation not in ("relu", "linear"):
            raise ValueError("dense1_activation must be relu or linear")
        if self.conv_out_len < 1:
            raise ValueError("conv kernel wider than the window under valid padding")
        if self.conv_out_len < self.pool_size or self.pooled_len < 1:
            raise ValueError(
                f"pooled length < 1 (conv output {self.conv_out_len}, pool {self.pool_size})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes from the input window through the output layer."""
        lstm2 = ((self.pooled_len, self.lstm2_hidden) if self.lstm2_returns_sequences
                 else (self.lstm2_hidden,))
        return [
            (self.window_len, 1),
            (self.conv_out_len, self.conv_filters),
            (self.pooled_len, self.conv_filters),
            (self.pooled_len, self.lstm1_hidden),
            lstm2,
            (self.dense1_units,),
            (self.output_units,),
        ]


def param_count(config: ModelConfig) -> int:
    conv = config.conv_filters * config.conv_kernel_width * 1 + config.conv_filters
    lstm1 = 4 * (config.lstm1_hidden * (config.conv_filters + config.lstm1_hidden) + config.lstm1_hidden)
    lstm2 = 4 * (config.lstm2_hidden * (config.lstm1_hidden + config.lstm2_hidden) + config.lstm2_hidden)
    dense1 = config.dense1_units * config.dense1_in + config.dense1_units
    dense2 = config.output_units * config.dense1_units + config.output_units
    return conv + lstm1 + lstm2 + dense1 + dense2


@dataclass
class ForwardCache:
    window_len: int
    batched: bool
    caches: dict = field(default_factory=dict)


class Model:
    """Conv1D -> MaxPool -> LSTM -> LSTM -> Dense -> Dense."""

    BLOCKS = ("conv", "lstm1", "lstm2", "dense1", "dense2")

    def __init__(self, config: ModelConfig, conv: L.ConvParams, lstm1: L.LstmParams,
                 lstm2: L.LstmParams, dense1: L.DenseParams, dense2: L.DenseParams):
        self.config = config
        self.conv = conv
        self.pool = L.PoolParams(config.pool_size, config.effective_pool_stride)
        self.lstm1 = lstm1
        self.lstm2 = lstm2
        self.dense1 = dense1
        self.dense2 = dense2
        self._check_shapes()

    def _check_shapes(self):
        expected = expected_shapes(self.config)
        actual = OrderedDict((k, v.shape) for k, v in self.parameters().items())
        if list(expected.items()) != list(actual.items()):
            raise ShapeError(f"parameter shapes {dict(actual)} do not match config {dict(expected)}")

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Named parameter arrays in checkpoint order (live references)."""
        out = OrderedDict()
        for block in self.BLOCKS:
            for name, arr in getattr(self, block).arrays().items():
                out[f"{block}.{name}"] = arr
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the live arrays, in place."""
        params = self.parameters()
        for name, arr in values.items():
            target = params[name]
            if target.shape != np.shape(arr):
                raise ShapeError(f"{name}: shape {np.shape(arr)} != {target.shape}")
            target[...] = arr

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.parameters().values()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for arr in self.parameters().values():
            n = arr.size
            arr[...] = flat[offset:offset + n].reshape(arr.shape)
            offset += n
        if offset != flat.size:
            raise ShapeError(f"flat vector has {flat.size} values, model has {offset}")

    def copy(self) -> "Model":
        return Model(
            self.config,
            L.ConvParams(self.conv.weights.copy(), self.conv.bias.copy(), self.conv.padding),
            L.LstmParams(**{k: v.copy() for k, v in self.lstm1.arrays().items()},
                         return_sequences=self.lstm1.return_sequences),
            L.LstmParams(**{k: v.copy() for k, v in self.lstm2.arrays().items()},
                         return_sequences=self.lstm2.return_sequences),
            L.DenseParams(self.dense1.weights.copy(), self.dense1.bias.copy(), self.dense1.activation),
            L.DenseParams(self.dense2.weights.copy(), self.dense2.bias.copy(), self.dense2.activation),
        )

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def forward(self, window):
        return model_forward(self, window)

    def backward(self, cache, grad_out):
        return model_backward(self, cache, grad_out)

    def predict(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        windows = np.asarray(windows, dtype=DTYPE)
        if windows.ndim == 1:
            return model_forward(self, windows)[0]
        out = np.empty((windows.shape[0], self.config.output_units), dtype=DTYPE)
        for s in range(0, windows.shape[0], batch_size):
            out[s:s + batch_size] = model_forward(self, windows[s:s + batch_size])[0]
        return out


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    F, K = config.conv_filters, config.conv_kernel_width
    H1, H2 = config.lstm1_hidden, config.lstm2_hidden
    out = OrderedDict()
    out["conv.weights"] = (F, K, 1)
    out["conv.bias"] = (F,)
    for block, H, D in (("lstm1", H1, F), ("lstm2", H2, H1)):
        for g in L.GATES:
            out[f"{block}.W_{g}"] = (H, H + D)
        for g in L.GATES:
            out[f"{block}.b_{g}"] = (H,)
    out["dense1.weights"] = (config.dense1_units, config.dense1_in)
    out["dense1.bias"] = (config.dense1_units,)
    out["dense2.weights"] = (config.output_units, config.dense1_units)
    out["dense2.bias"] = (config.output_units,)
    return out


def build_model(config: ModelConfig) -> Model:
    """Initialise a model deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    conv = L.init_conv(rng, config.conv_filters, config.conv_kernel_width, 1, config.conv_padding)
    lstm1 = L.init_lstm(rng, config.conv_filters, config.lstm1_hidden, True, config.forget_bias)
    lstm2 = L.init_lstm(rng, config.lstm1_hidden, config.lstm2_hidden,
                        config.lstm2_returns_sequences, config.forget_bias)
    dense1 = L.init_dense(rng, config.dense1_in, config.dense1_units, config.dense1_activation)
    dense2 = L.init_dense(rng, config.dense1_units, config.output_units, "linear")
    return Model(config, conv, lstm1, lstm2, dense1, dense2)


def zero_model(config: ModelConfig) -> Model:
    model = build_model(config)
    for arr in model.parameters().values():
        arr[...] = 0.0
    return model


def model_forward(model: Model, window):
    """Map one normalized mains window ``[W]`` (or a batch ``[B, W]``) to the
    predicted appliance window of the same length."""
    cfg = model.config
    x = np.asarray(window, dtype=DTYPE)
    batched = x.ndim == 2
    xb = x if batched else x[None]
    if xb.ndim != 2 or xb.shape[1] != cfg.window_len:
        raise ShapeError(f"expected window of length {cfg.window_len}, got shape {list(x.shape)}")
    cache = ForwardCache(cfg.window_len, batched)
    h, cache.caches["conv"] = L.conv1d_forward(xb[:, :, None], model.conv)
    if cfg.conv_relu:
        h, cache.caches["conv_relu"] = L.relu_forward(h)
    h, cache.caches["pool"] = L.maxpool1d_forward(h, model.pool)
    h, cache.caches["lstm1"] = L.lstm_forward(h, model.lstm1)
    h, cache.caches["lstm2"] = L.lstm_forward(h, model.lstm2)
    if cfg.lstm2_returns_sequences:
        cache.caches["flatten_shape"] = h.shape
        h = h.reshape(h.shape[0], -1)
    h, cache.caches["dense1"] = L.dense_forward(h, model.dense1)
    out, cache.caches["dense2"] = L.dense_forward(h, model.dense2)
    return (out if batched else out[0]), cache


def model_backward(model: Model, cache: ForwardCache, grad_out) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``sum(output * grad_out)`` for every parameter, keyed
    like ``Model.parameters()``.  Batched caches sum over the batch."""
    if not isinstance(cache, ForwardCache) or cache.window_len != model.config.window_len:
        raise ShapeError("cache does not come from this model's forward pass")
    g = np.asarray(grad_out, dtype=DTYPE)
    if not cache.batched:
        g = g[None]
    c = cache.caches
    grads = {}
    g, grads["dense2"] = L.dense_backward(g, c["dense2"], model.dense2)
    g, grads["dense1"] = L.dense_backward(g, c["dense1"], model.dense1)
    if model.config.lstm2_returns_sequences:
        g = g.reshape(c["flatten_shape"])
    g, grads["lstm2"] = L.lstm_backward(g, c["lstm2"], model.lstm2)
    g, grads["lstm1"] = L.lstm_backward(g, c["lstm1"], model.lstm1)
    g, _ = L.maxpool1d_backward(g, c["pool"])
    if "conv_relu" in c:
        g = L.relu_backward(g, c["conv_relu"])
    _, grads["conv"] = L.conv1d_backward(g, c["conv"], model.conv)
    out = OrderedDict()
    for block in Model.BLOCKS:
        for name in getattr(model, block).arrays():
            out[f"{block}.{name}"] = grads[block][name]
    return out


# ---------------------------------------------------------------- persistence


def save_model(model: Model, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    params = model.parameters()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.values())
    header = {
        "config": model.config.to_dict(),
        "blocks": [[name, list(a.shape)] for name, a in params.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> dict:
    return _read(path)[0]


def load_model(path) -> Model:
    header, payload = _read(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointShapeError(f"invalid config in checkpoint header: {exc}") from exc
    expected = expected_shapes(config)
    stored = [(name, tuple(shape)) for name, shape in header["blocks"]]
    if stored != list(expected.items()):
        raise CheckpointShapeError(
            "block shapes in checkpoint do not match its config: "
            f"stored {stored}, config implies {list(expected.items())}"
        )
    n = sum(int(np.prod(s)) for _, s in stored)
    if len(payload) != 8 * n:
        raise CheckpointShapeError(f"payload holds {len(payload) // 8} values, shapes need {n}")
    flat = np.frombuffer(payload, dtype="<f8").astype(DTYPE)
    model = build_model(config)
    model.set_flat(flat)
    return model


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = raw[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch (truncated or altered)")
    return header, payload


def scaled_config(**overrides) -> ModelConfig:
    """Default config with selected fields replaced (``output_units`` follows
    ``window_len`` unless given)."""
    base = ModelConfig()
    if "window_len" in overrides and "output_units" not in overrides:
        overrides["output_units"] = overrides["window_len"]
    return replace(base, **overrides)
