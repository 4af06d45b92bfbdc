"""Differentiable layer primitives with explicit forward caches and exact adjoints.

Every layer follows the same contract: ``forward`` caches what the adjoint
needs, ``backward(grad_out)`` accumulates into the parameter gradient buffers
and returns the gradient with respect to the layer input. Gradients are
accumulated (never overwritten); call ``zero_grads`` between optimization
steps. Double precision is the reference dtype; single precision is accepted
for speed at looser tolerances.

Spatial layers operate on ``(B, C, D, H, W)`` arrays and also accept a single
unbatched ``(C, D, H, W)`` volume, returning outputs and input-gradients in
the same form they were given.
"""
from __future__ import annotations

import base64
import json
import math

import numpy as np

from .errors import ConfigurationError, StateError

CHECKPOINT_VERSION = 1


class Param:
    """A named parameter array paired with a same-shape gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Layer:
    """Base class: parameter bookkeeping shared by all layers."""

    def params(self) -> list[Param]:
        return []

    def zero_grads(self):
        for p in self.params():
            p.grad[...] = 0.0


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def _ensure_batched(x: np.ndarray, unbatched_ndim: int):
    x = np.asarray(x)
    if x.ndim == unbatched_ndim:
        return x[None], True
    if x.ndim == unbatched_ndim + 1:
        return x, False
    raise ConfigurationError(
        f"expected {unbatched_ndim}-d or {unbatched_ndim + 1}-d input, got shape {x.shape}"
    )


class Dense(Layer):
    """Affine map y = x W^T + b with weight shape (n_out, n_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True, dtype=np.float64, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.n_out = n_out
        self.weight = Param(f"{name}.weight", he_normal(rng, (n_out, n_in), n_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(n_out, dtype=dtype)) if bias else None
        self._x = None
        self._unbatched = False

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x, self._unbatched = _ensure_batched(x, 1)
        if x.shape[1] != self.n_in:
            raise ConfigurationError(
                f"dense input axis has length {x.shape[1]}, weight expects {self.n_in}"
            )
        self._x = x
        out = x @ self.weight.value.T
        if self.bias is not None:
            out = out + self.bias.value
        return out[0] if self._unbatched else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("dense backward called before forward")
        g, _ = _ensure_batched(grad_out, 1)
        self.weight.grad += g.T @ self._x
        if self.bias is not None:
            self.bias.grad += g.sum(axis=0)
        gx = g @ self.weight.value
        return gx[0] if self._unbatched else gx


def conv3d_output_shape(spatial, kernel, stride, padding):
    """Output spatial dims: floor((S + 2p - k)/stride) + 1 per axis."""
    out = []
    for s, k, st, p in zip(spatial, kernel, (stride,) * 3, (padding,) * 3):
        o = (s + 2 * p - k) // st + 1
        if o < 1:
            raise ConfigurationError(
                f"conv output dim {o} < 1 for input {s}, kernel {k}, stride {st}, pad {p}"
            )
        out.append(o)
    return tuple(out)


class Conv3d(Layer):
    """3D cross-correlation with odd cubic kernels."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float64, name: str = "conv"):
        if kernel % 2 == 0 or kernel < 1:
            raise ConfigurationError(f"conv kernel must be odd and positive, got {kernel}")
        if padding < 0:
            raise ConfigurationError(f"conv padding must be >= 0, got {padding}")
        if stride < 1:
            raise ConfigurationError(f"conv stride must be >= 1, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel ** 3
        self.weight = Param(f"{name}.weight",
                            he_normal(rng, (c_out, c_in, kernel, kernel, kernel), fan_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=dtype)) if bias else None
        self._windows = None
        self._in_spatial = None
        self._unbatched = False

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x, self._unbatched = _ensure_batched(x, 4)
        if x.shape[1] != self.c_in:
            raise ConfigurationError(
                f"conv input channel axis has length {x.shape[1]}, expected {self.c_in}"
            )
        k, st, p = self.kernel, self.stride, self.padding
        conv3d_output_shape(x.shape[2:], (k, k, k), st, p)
        self._in_spatial = x.shape[2:]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::st, ::st, ::st]
        self._windows = win
        out = np.einsum("bcdhwijk,ocijk->bodhw", win, self.weight.value, optimize=True)
        if self.bias is not None:
            out += self.bias.value[None, :, None, None, None]
        return out[0] if self._unbatched else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._windows is None:
            raise StateError("conv backward called before forward")
        g, _ = _ensure_batched(grad_out, 4)
        self.weight.grad += np.einsum("bodhw,bcdhwijk->ocijk", g, self._windows, optimize=True)
        if self.bias is not None:
            self.bias.grad += g.sum(axis=(0, 2, 3, 4))

        k, st, p = self.kernel, self.stride, self.padding
        B = g.shape[0]
        padded = tuple(s + 2 * p for s in self._in_spatial)
        # Scatter grad_out onto the stride grid, then full-correlate with the
        # spatially flipped kernel to get the padded-input gradient.
        gd_shape = tuple((go - 1) * st + 1 for go in g.shape[2:])
        gd = np.zeros((B, self.c_out) + gd_shape, dtype=g.dtype)
        gd[:, :, ::st, ::st, ::st] = g
        gdp = np.pad(gd, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
        win = np.lib.stride_tricks.sliding_window_view(gdp, (k, k, k), axis=(2, 3, 4))
        wflip = self.weight.value[:, :, ::-1, ::-1, ::-1]
        core = np.einsum("bodhwijk,ocijk->bcdhw", win, wflip, optimize=True)
        gx = np.zeros((B, self.c_in) + padded, dtype=g.dtype)
        gx[:, :, :core.shape[2], :core.shape[3], :core.shape[4]] = core
        if p:
            gx = gx[:, :, p:-p, p:-p, p:-p]
        return gx[0] if self._unbatched else gx


class BatchNorm3d(Layer):
    """Per-channel standardization over (batch, D, H, W) with learned scale/shift.

    Training mode needs batch size >= 2 and updates running statistics;
    eval mode standardizes with the running statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64, name: str = "bn"):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None
        self._unbatched = False

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        x, self._unbatched = _ensure_batched(x, 4)
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"batchnorm channel axis has length {x.shape[1]}, expected {self.channels}"
            )
        if training:
            if x.shape[0] < 2:
                raise ConfigurationError("batchnorm training mode needs batch size >= 2")
            mean = x.mean(axis=(0, 2, 3, 4))
            var = x.var(axis=(0, 2, 3, 4))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        self._cache = (xhat, inv_std, training, x.shape)
        out = self.gamma.value[None, :, None, None, None] * xhat \
            + self.beta.value[None, :, None, None, None]
        return out[0] if self._unbatched else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("batchnorm backward called before forward")
        g, _ = _ensure_batched(grad_out, 4)
        xhat, inv_std, training, shape = self._cache
        self.gamma.grad += (g * xhat).sum(axis=(0, 2, 3, 4))
        self.beta.grad += g.sum(axis=(0, 2, 3, 4))
        gamma = self.gamma.value[None, :, None, None, None]
        if not training:
            gx = g * gamma * inv_std[None, :, None, None, None]
            return gx[0] if self._unbatched else gx
        n = shape[0] * shape[2] * shape[3] * shape[4]
        gxhat = g * gamma
        mean_g = gxhat.mean(axis=(0, 2, 3, 4))[None, :, None, None, None]
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3, 4))[None, :, None, None, None]
        gx = inv_std[None, :, None, None, None] * (gxhat - mean_g - xhat * mean_gx)
        del n
        return gx[0] if self._unbatched else gx


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return np.where(self._mask, np.asarray(grad_out), 0.0)


class Dropout(Layer):
    """Inverted dropout: surviving units scaled by 1/(1-p) at train time."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x)
        if not training or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ConfigurationError("dropout in training mode needs an rng")
        keep = 1.0 - self.p
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return np.asarray(grad_out)
        return np.asarray(grad_out) * self._mask


class GlobalAvgPool3d(Layer):
    """Reduce each channel to its spatial mean: (B, C, D, H, W) -> (B, C)."""

    def __init__(self):
        self._shape = None
        self._unbatched = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        x, self._unbatched = _ensure_batched(x, 4)
        self._shape = x.shape
        out = x.mean(axis=(2, 3, 4))
        return out[0] if self._unbatched else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise StateError("pool backward called before forward")
        g, _ = _ensure_batched(grad_out, 1)
        B, C, D, H, W = self._shape
        gx = np.broadcast_to(g[:, :, None, None, None], self._shape) / (D * H * W)
        gx = np.ascontiguousarray(gx)
        return gx[0] if self._unbatched else gx


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus skip, then relu.

    The skip path is identity when shapes match; a 1x1x1 strided projection
    (with its own norm) otherwise. Mismatched channels with projection
    disabled is a configuration error.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, project: bool | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64, name: str = "block"):
        rng = rng if rng is not None else np.random.default_rng(0)
        needs_projection = (c_in != c_out) or (stride != 1)
        if project is None:
            project = needs_projection
        if needs_projection and not project:
            raise ConfigurationError(
                f"residual skip needs a projection for {c_in}->{c_out} channels at stride {stride}"
            )
        self.conv1 = Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False,
                            rng=rng, dtype=dtype, name=f"{name}.conv1")
        self.bn1 = BatchNorm3d(c_out, dtype=dtype, name=f"{name}.bn1")
        self.relu1 = ReLU()
        self.conv2 = Conv3d(c_out, c_out, 3, stride=1, padding=1, bias=False,
                            rng=rng, dtype=dtype, name=f"{name}.conv2")
        self.bn2 = BatchNorm3d(c_out, dtype=dtype, name=f"{name}.bn2")
        if project:
            self.proj = Conv3d(c_in, c_out, 1, stride=stride, padding=0, bias=False,
                               rng=rng, dtype=dtype, name=f"{name}.proj")
            self.proj_bn = BatchNorm3d(c_out, dtype=dtype, name=f"{name}.proj_bn")
        else:
            self.proj = None
            self.proj_bn = None
        self.relu_out = ReLU()

    def params(self):
        out = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.proj is not None:
            out += self.proj.params() + self.proj_bn.params()
        return out

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        y = self.conv1.forward(x)
        y = self.bn1.forward(y, training)
        y = self.relu1.forward(y)
        y = self.conv2.forward(y)
        y = self.bn2.forward(y, training)
        skip = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x), training)
        return self.relu_out.forward(y + skip)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.relu_out.backward(grad_out)
        if self.proj is None:
            gskip = g
        else:
            gskip = self.proj.backward(self.proj_bn.backward(g))
        gy = self.bn2.backward(g)
        gy = self.conv2.backward(gy)
        gy = self.relu1.backward(gy)
        gy = self.bn1.backward(gy)
        gy = self.conv1.backward(gy)
        return gy + gskip


def save_checkpoint(path, named_arrays: dict[str, np.ndarray], extra: dict | None = None):
    """Write arrays to a self-describing JSON container.

    Values are stored as base64 little-endian bytes, so doubles round-trip
    bit-exactly.
    """
    layers = {}
    for name, arr in named_arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        layers[name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "data": base64.b64encode(le.tobytes()).decode("ascii"),
        }
    doc = {"version": CHECKPOINT_VERSION, "layers": layers}
    if extra:
        doc["extra"] = extra
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for name, entry in doc["layers"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        out[name] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return out, doc.get("extra", {})
