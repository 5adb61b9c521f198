"""Layer objects with cached forward state and explicit backward passes."""

from __future__ import annotations

import contextlib
import zlib
from typing import Iterator

import numpy as np

from . import functional as F
from .functional import ConvGeometry, ShapeError

_kink_log: list | None = None


def note_kinks(pre_activation: np.ndarray) -> None:
    """Record the sign pattern at a non-differentiable point (relu, abs).

    Only active inside :func:`kink_recording`; the gradient checker uses it to
    detect finite-difference steps that straddle a kink.
    """
    if _kink_log is not None:
        _kink_log.append(np.packbits(pre_activation > 0))


@contextlib.contextmanager
def kink_recording():
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Param:
    """A learnable array and its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param(shape={self.value.shape}, dtype={self.value.dtype})"


def layer_rng(seed: int, path: str, *extra: int) -> np.random.Generator:
    """Independent PCG64 stream for one layer, keyed by (seed, path, extra...).

    Keying on the layer path keeps initialization stable when unrelated layers
    are added or change kind.
    """
    key = zlib.crc32(path.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key, *extra])))


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Base class: discovers params, buffers and children from attributes."""

    training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _members(self):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, (Param, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, val in self._members():
            if isinstance(val, Param):
                yield prefix + name, val
            else:
                yield from val.named_params(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, val in self._members():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + name + ".")

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        head, _, rest = path.partition(".")
        if not rest:
            setattr(self, head, value)
            return
        target = getattr(self, head)
        if isinstance(target, (list, tuple)):
            idx, _, rest = rest.partition(".")
            target = target[int(idx)]
        target.set_buffer(rest, value)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._members():
            if isinstance(val, Module):
                yield from val.modules()

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def cost(self, in_shape, path, counter):
        """Symbolic dry run: record operation counts, return the output shape."""
        raise NotImplementedError(f"{path}: no cost model for {type(self).__name__}")


class ReLU(Module):
    def forward(self, x):
        note_kinks(x)
        self._x = x
        return F.relu(x)

    def backward(self, grad):
        return F.relu_backward(self._x, grad)

    def cost(self, in_shape, path, counter):
        counter.add(path, b=int(np.prod(in_shape)))
        return in_shape


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(kaiming_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        self._x = x
        return F.dense(x, self.weight.value, None if self.bias is None else self.bias.value)

    def backward(self, grad):
        gx, gw, gb = F.dense_backward(self._x, self.weight.value, grad)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx

    def cost(self, in_shape, path, counter):
        counter.add(path, params=self.weight.value.size + (0 if self.bias is None else self.out_features),
                    madds=self.in_features * self.out_features,
                    b=0 if self.bias is None else self.out_features)
        return (*in_shape[:-1], self.out_features)


class Conv2d(Module):
    """Static convolution with optional bias."""

    def __init__(self, geom: ConvGeometry, rng: np.random.Generator, bias: bool = False, dtype=np.float64):
        self.geom = geom
        fan_in = (geom.in_channels // geom.groups) * geom.kernel_size ** 2
        self.weight = Param(kaiming_normal(rng, geom.weight_shape, fan_in, dtype))
        self.bias = Param(np.zeros(geom.out_channels, dtype=dtype)) if bias else None

    def forward(self, x):
        self._x = x
        self._cols = F.im2col(x, self.geom)
        return F.conv2d(x, self.weight.value, None if self.bias is None else self.bias.value,
                        self.geom, cols=self._cols)

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(self._x, self.weight.value, grad, self.geom, cols=self._cols)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        self._cols = None
        return gx

    def cost(self, in_shape, path, counter):
        from ..cost import conv_madds

        b, c, h, w = in_shape
        ho, wo = self.geom.output_size(h, w)
        counter.add(path, params=self.weight.value.size + (0 if self.bias is None else self.geom.out_channels),
                    madds=conv_madds(self.geom, ho, wo),
                    b=0 if self.bias is None else self.geom.out_channels * ho * wo)
        return (b, self.geom.out_channels, ho, wo)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.track_running_stats = True

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got shape {x.shape}")
        if not self.training:
            self._cache = None
            return F.batchnorm_eval(x, self.gamma.value, self.beta.value,
                                    self.running_mean, self.running_var, self.eps)
        y, self._cache = F.batchnorm_train(x, self.gamma.value, self.beta.value, self.eps)
        if self.track_running_stats:
            _, _, mean, var = self._cache
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            self.running_var = (1 - mom) * self.running_var + mom * unbiased
        return y

    def backward(self, grad):
        if self._cache is None:
            # eval mode: a fixed per-channel affine map
            scale = self.gamma.value / np.sqrt(self.running_var + self.eps)
            return grad * scale[None, :, None, None]
        gx, gg, gb = F.batchnorm_backward(grad, self.gamma.value, self._cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx

    def cost(self, in_shape, path, counter):
        counter.add(path, params=2 * self.channels, madds=int(np.prod(in_shape[1:])))
        return in_shape


class Upsample2x(Module):
    def forward(self, x):
        return F.upsample_nearest2x(x)

    def backward(self, grad):
        return F.upsample_nearest2x_backward(grad)

    def cost(self, in_shape, path, counter):
        b, c, h, w = in_shape
        return (b, c, 2 * h, 2 * w)
