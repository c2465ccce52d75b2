"""The Multi-Slice Network aggregator.

Pipeline for one patient volume ``x`` of shape ``(l, input_channels)``::

    h = conv_k(x)                                   # input projection -> block_channels
    for d in dilations:                             # dilated residual blocks
        h = h + conv_1(relu(conv_3,d(h)))
    v = max_t h[t]                                  # global max-pool, kernel l
    probs = softmax(dense(relu(dense(v))))          # block_channels -> dense_hidden -> classes

All trainable values live in one flat vector. Its layout, in order, is::

    init.w (k_init, input_channels, C)   init.b (C,)
    per block i:
      block{i}.dilated.w (block_kernel, C, C)   block{i}.dilated.b (C,)
      block{i}.pointwise.w (1, C, C)            block{i}.pointwise.b (C,)
    dense1.w (C, dense_hidden)   dense1.b (dense_hidden,)
    dense2.w (dense_hidden, classes)   dense2.b (classes,)

Convolution kernels are stored ``(k, cin, cout)`` and dense weights ``(n_in, n_out)``,
all row-major.
"""

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError, ConfigError, EmptyVolumeError, ParamLengthError, ShapeError, StaleCacheError,
    TruncatedFileError, VersionMismatchError,
)
from .loss import adam_step, softmax

REPORTED_PARAM_COUNT = 207_683

CHECKPOINT_MAGIC = b"MSNT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MsNetArch:
    input_channels: int = 2048
    initial_conv_kernel: int = 1
    block_count: int = 4
    block_channels: int = 64
    block_kernel: int = 3
    dilations: tuple = None
    dense_hidden: int = 32
    classes: int = 3

    def __post_init__(self):
        if self.dilations is None:
            object.__setattr__(self, "dilations", tuple(2 ** i for i in range(self.block_count)))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        for name in ("input_channels", "initial_conv_kernel", "block_channels",
                     "block_kernel", "dense_hidden", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.block_count < 0:
            raise ConfigError(f"block_count must be >= 0, got {self.block_count}")
        if self.initial_conv_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ConfigError("convolution kernels must have odd size")
        if len(self.dilations) != self.block_count:
            raise ConfigError(
                f"{len(self.dilations)} dilations given for {self.block_count} blocks")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")


def param_layout(arch):
    """``[(name, shape), ...]`` in flat-vector order."""
    C, H = arch.block_channels, arch.dense_hidden
    layout = [("init.w", (arch.initial_conv_kernel, arch.input_channels, C)), ("init.b", (C,))]
    for i in range(arch.block_count):
        layout += [
            (f"block{i}.dilated.w", (arch.block_kernel, C, C)), (f"block{i}.dilated.b", (C,)),
            (f"block{i}.pointwise.w", (1, C, C)), (f"block{i}.pointwise.b", (C,)),
        ]
    layout += [("dense1.w", (C, H)), ("dense1.b", (H,)),
               ("dense2.w", (H, arch.classes)), ("dense2.b", (arch.classes,))]
    return layout


def param_count(arch):
    """Closed-form number of trainable parameters."""
    C, H, K = arch.block_channels, arch.dense_hidden, arch.classes
    initial = arch.initial_conv_kernel * arch.input_channels * C + C
    block = (arch.block_kernel * C * C + C) + (C * C + C)
    return initial + arch.block_count * block + (C * H + H) + (H * K + K)


def receptive_field(arch):
    """Number of consecutive slices that can influence one pooled position."""
    return arch.initial_conv_kernel + sum((arch.block_kernel - 1) * d for d in arch.dilations)


def _split(flat, arch):
    views, offset = {}, 0
    for name, shape in param_layout(arch):
        n = int(np.prod(shape))
        views[name] = flat[offset:offset + n].reshape(shape)
        offset += n
    return views


@dataclass
class ForwardCache:
    model_id: int
    version: int
    x: np.ndarray
    blocks: list
    h_last: np.ndarray
    pool_idx: np.ndarray
    pooled: np.ndarray
    z1: np.ndarray
    u: np.ndarray
    probs: np.ndarray


class MsNetModel:
    """Parameters plus architecture of one aggregation network.

    ``params`` is read-only; change it through :meth:`set_params` or
    :meth:`apply_adam` so forward caches can detect staleness. The dtype of
    ``params`` selects the compute precision (float64 for training,
    see :meth:`astype` for the float32 inference path).
    """

    def __init__(self, arch, params, seed=None):
        params = np.array(params, copy=True)
        if params.ndim != 1 or params.shape[0] != param_count(arch):
            raise ParamLengthError(
                f"expected {param_count(arch)} parameters, got shape {params.shape}")
        params.flags.writeable = False
        self.arch = arch
        self.params = params
        self.seed = seed
        self.version = 0
        self._views = _split(params, arch)

    def __repr__(self):
        return f"MsNetModel({self.arch}, n_params={self.params.size}, dtype={self.params.dtype})"

    @property
    def layers(self):
        return self._views

    @contextmanager
    def _writable(self):
        self.params.flags.writeable = True
        try:
            yield self.params
        finally:
            self.params.flags.writeable = False
            self.version += 1

    def set_params(self, values):
        values = np.asarray(values)
        if values.shape != self.params.shape:
            raise ParamLengthError(f"expected shape {self.params.shape}, got {values.shape}")
        with self._writable() as p:
            p[...] = values

    def apply_adam(self, grads, state):
        with self._writable() as p:
            adam_step(p, grads, state)

    def astype(self, dtype):
        return MsNetModel(self.arch, self.params.astype(dtype), seed=self.seed)

    def copy(self):
        return MsNetModel(self.arch, self.params, seed=self.seed)

    def _input(self, volume):
        x = np.asarray(getattr(volume, "features", volume))
        if x.ndim != 2:
            raise ShapeError(f"volume must be 2-D (l, d), got shape {x.shape}")
        if x.shape[1] != self.arch.input_channels:
            raise ShapeError(
                f"volume has feature dimension {x.shape[1]}, model expects {self.arch.input_channels}")
        if x.shape[0] == 0:
            raise EmptyVolumeError("volume has zero slices")
        return x.astype(self.params.dtype, copy=False)

    def logits(self, volume):
        """Forward pass without keeping intermediates."""
        return self._run(self._input(volume), keep=False)[0]

    def forward(self, volume):
        """Class probabilities and the cache :meth:`backward` needs."""
        x = self._input(volume)
        logits, cache = self._run(x, keep=True)
        probs = softmax(logits)
        cache.probs = probs
        return probs, cache

    def _run(self, x, keep):
        p = self._views
        h = T.conv1d_forward(x, p["init.w"], p["init.b"], 1)
        blocks = []
        for i, d in enumerate(self.arch.dilations):
            a = T.conv1d_forward(h, p[f"block{i}.dilated.w"], p[f"block{i}.dilated.b"], d)
            r = T.relu_forward(a)
            out = T.conv1d_forward(r, p[f"block{i}.pointwise.w"], p[f"block{i}.pointwise.b"], 1)
            if keep:
                blocks.append((h, a, r))
            h = h + out
        pooled, idx = T.global_maxpool_forward(h)
        z1 = T.dense_forward(pooled, p["dense1.w"], p["dense1.b"])
        u = T.relu_forward(z1)
        logits = T.dense_forward(u, p["dense2.w"], p["dense2.b"])
        if not keep:
            return logits, None
        return logits, ForwardCache(id(self), self.version, x, blocks, h, idx, pooled, z1, u, None)

    def backward(self, cache, d_logits):
        """Flat parameter gradient given the loss gradient w.r.t. the logits.

        For softmax followed by weighted cross-entropy ``d_logits`` is
        ``w[label] * (probs - onehot(label))``.
        """
        if cache.model_id != id(self) or cache.version != self.version:
            raise StaleCacheError("forward cache does not belong to the current parameters")
        d_logits = np.asarray(d_logits, dtype=self.params.dtype)
        if d_logits.shape != (self.arch.classes,):
            raise ShapeError(f"d_logits must have shape ({self.arch.classes},)")
        p = self._views
        grad = np.zeros_like(self.params)
        g = _split(grad, self.arch)

        g2 = T.dense_backward(cache.u, p["dense2.w"], d_logits)
        g["dense2.w"][...], g["dense2.b"][...] = g2.d_weight, g2.d_bias
        dz1 = T.relu_backward(cache.z1, g2.d_input)
        g1 = T.dense_backward(cache.pooled, p["dense1.w"], dz1)
        g["dense1.w"][...], g["dense1.b"][...] = g1.d_weight, g1.d_bias

        dh = T.global_maxpool_backward(cache.pool_idx, g1.d_input, cache.h_last.shape[0])
        for i in reversed(range(self.arch.block_count)):
            h_in, a, r = cache.blocks[i]
            gp = T.conv1d_backward(r, p[f"block{i}.pointwise.w"], 1, dh)
            g[f"block{i}.pointwise.w"][...], g[f"block{i}.pointwise.b"][...] = gp.d_weight, gp.d_bias
            da = T.relu_backward(a, gp.d_input)
            gd = T.conv1d_backward(h_in, p[f"block{i}.dilated.w"], self.arch.dilations[i], da)
            g[f"block{i}.dilated.w"][...], g[f"block{i}.dilated.b"][...] = gd.d_weight, gd.d_bias
            dh = dh + gd.d_input
        gi = T.conv1d_backward(cache.x, p["init.w"], 1, dh, need_input_grad=False)
        g["init.w"][...], g["init.b"][...] = gi.d_weight, gi.d_bias
        return grad


def init_model(arch=None, seed=0):
    """Fresh model with fan-in scaled weights and zero biases.

    Convolution kernels are drawn from N(0, 2/fan_in) with
    ``fan_in = k * cin``; dense weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    arch = arch or MsNetArch()
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in param_layout(arch):
        if name.endswith(".b"):
            chunks.append(np.zeros(shape))
        elif name.startswith("dense"):
            bound = 1.0 / np.sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, size=shape))
        else:
            fan_in = shape[0] * shape[1]
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return MsNetModel(arch, np.concatenate([c.ravel() for c in chunks]), seed=seed)


_ARCH_FIELDS = ("input_channels", "initial_conv_kernel", "block_count", "block_channels",
                "block_kernel", "dense_hidden", "classes")


def checkpoint_bytes(model):
    arch = model.arch
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack(f"<{len(_ARCH_FIELDS)}I", *(getattr(arch, f) for f in _ARCH_FIELDS)),
             struct.pack(f"<I{len(arch.dilations)}I", len(arch.dilations), *arch.dilations),
             struct.pack("<Q", model.params.size),
             model.params.astype("<f8").tobytes()]
    return b"".join(parts)


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(buf):
    def take(fmt, offset):
        size = struct.calcsize(fmt)
        if offset + size > len(buf):
            raise TruncatedFileError(f"checkpoint ends at byte {len(buf)} inside the header")
        return struct.unpack_from(fmt, buf, offset), offset + size

    if len(buf) >= 4 and buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not an MSNT checkpoint (magic {bytes(buf[:4])!r})")
    (magic, version), off = take("<4sI", 0)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not an MSNT checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    fields, off = take(f"<{len(_ARCH_FIELDS)}I", off)
    (n_dil,), off = take("<I", off)
    dilations, off = take(f"<{n_dil}I", off)
    (n_params,), off = take("<Q", off)
    try:
        arch = MsNetArch(**dict(zip(_ARCH_FIELDS, fields)), dilations=dilations)
    except ConfigError as e:
        raise ParamLengthError(f"checkpoint architecture is invalid: {e}") from e
    if n_params != param_count(arch):
        raise ParamLengthError(
            f"checkpoint declares {n_params} parameters, architecture needs {param_count(arch)}")
    payload = len(buf) - off
    if payload < 8 * n_params:
        raise TruncatedFileError(f"checkpoint holds {payload} of {8 * n_params} parameter bytes")
    if payload > 8 * n_params:
        raise ParamLengthError(f"{payload - 8 * n_params} trailing bytes after parameters")
    params = np.frombuffer(buf, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    return MsNetModel(arch, params)


def load_checkpoint(path):
    return model_from_bytes(Path(path).read_bytes())
