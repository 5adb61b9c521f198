"""Stateless forward/backward primitives on dense (B, C, H, W) numpy arrays.

Convolution is cross-correlation with zero padding, lowered to a batched
GEMM over an explicit column buffer. Every backward is exact for its forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel_size - 1) + 1
        ho = (h + 2 * self.padding - span) // self.stride + 1
        wo = (w + 2 * self.padding - span) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for {self}: output would be {ho}x{wo}")
        return ho, wo


def _check_input(x: np.ndarray, geom: ConvGeometry) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) input, got shape {x.shape}")
    if x.shape[1] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects {geom.in_channels}")


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Column buffer of shape (B, groups, Cin/groups * k * k, Ho * Wo)."""
    b, c, h, w = x.shape
    k, s, d, p = geom.kernel_size, geom.stride, geom.dilation, geom.padding
    ho, wo = geom.output_size(h, w)
    if p:
        xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x
        x = xp
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]
    g = geom.groups
    return cols.reshape(b, g, (c // g) * k * k, ho * wo)


def col2im(cols: np.ndarray, geom: ConvGeometry, h: int, w: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back into a (B, C, H, W) image."""
    b = cols.shape[0]
    c = geom.in_channels
    k, s, d, p = geom.kernel_size, geom.stride, geom.dilation, geom.padding
    ho, wo = geom.output_size(h, w)
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def _grouped_weight(w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    # (..., Cout, Cin/g, k, k) -> (..., g, Cout/g, Cin/g*k*k)
    lead = w.shape[:-4]
    g = geom.groups
    return w.reshape(*lead, g, geom.out_channels // g, -1)


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None,
    geom: ConvGeometry,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Cross-correlate ``x`` with ``w``.

    ``w`` is either one kernel ``(Cout, Cin/g, k, k)`` shared by the batch or
    one kernel per sample ``(B, Cout, Cin/g, k, k)``; ``bias`` is ``(Cout,)``
    or ``(B, Cout)`` correspondingly. A precomputed column buffer may be passed.
    """
    _check_input(x, geom)
    per_sample = w.ndim == 5
    expected = geom.weight_shape
    if w.shape[-4:] != expected or (per_sample and w.shape[0] != x.shape[0]):
        raise ShapeError(f"weight shape {w.shape} does not match geometry {expected} for batch {x.shape[0]}")
    b, _, h, wd = x.shape
    ho, wo = geom.output_size(h, wd)
    if cols is None:
        cols = im2col(x, geom)
    wg = _grouped_weight(w, geom)
    if not per_sample:
        wg = wg[None]
    y = np.matmul(wg, cols).reshape(b, geom.out_channels, ho, wo)
    if bias is not None:
        if per_sample:
            if bias.shape != (b, geom.out_channels):
                raise ShapeError(f"per-sample bias shape {bias.shape}, expected {(b, geom.out_channels)}")
            y += bias[:, :, None, None]
        else:
            if bias.shape != (geom.out_channels,):
                raise ShapeError(f"bias shape {bias.shape}, expected {(geom.out_channels,)}")
            y += bias[None, :, None, None]
    return y


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    geom: ConvGeometry,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
):
    """Gradients ``(grad_x, grad_w, grad_bias)`` of :func:`conv2d`.

    For per-sample kernels, ``grad_w`` and ``grad_bias`` keep the leading
    batch axis.
    """
    _check_input(x, geom)
    b, _, h, wd = x.shape
    ho, wo = geom.output_size(h, wd)
    if grad_out.shape != (b, geom.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(b, geom.out_channels, ho, wo)}")
    per_sample = w.ndim == 5
    if cols is None:
        cols = im2col(x, geom)
    g = geom.groups
    go = grad_out.reshape(b, g, geom.out_channels // g, ho * wo)
    # transposed views go straight to GEMM; no column-buffer copies
    grad_w_b = np.matmul(go, cols.swapaxes(-1, -2))
    if per_sample:
        grad_w = grad_w_b.reshape(w.shape)
        grad_b = grad_out.sum(axis=(2, 3))
    else:
        grad_w = grad_w_b.sum(axis=0).reshape(w.shape)
        grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        k, pad = geom.kernel_size, geom.padding
        if geom.stride == 1 and geom.dilation == 1 and g == 1 and pad <= k - 1:
            # stride-1 adjoint is a convolution of grad_out with the flipped,
            # channel-transposed kernel
            wf = np.ascontiguousarray(np.swapaxes(w[..., ::-1, ::-1], -3, -4))
            adj = ConvGeometry(geom.out_channels, geom.in_channels, k, 1, k - 1 - pad)
            grad_x = conv2d(grad_out, wf, None, adj)
        else:
            wg = _grouped_weight(w, geom)
            if not per_sample:
                wg = wg[None]
            gcols = np.matmul(wg.swapaxes(-1, -2), go)
            grad_x = col2im(gcols, geom, h, wd)
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward given the forward *output* ``y``."""
    return grad_out * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward given the forward *output* ``y``."""
    return y * (grad_out - (grad_out * y).sum(axis=axis, keepdims=True))


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """Affine map on row vectors: ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weight {w.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Batch-statistics normalization over (B, H, W). Returns ``(y, cache)``."""
    axes = (0, 2, 3)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, mean, var)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps):
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv_std)[None, :, None, None]
    return (x - running_mean[None, :, None, None]) * scale + beta[None, :, None, None]


def batchnorm_backward(grad_out, gamma, cache):
    xhat, inv_std, _, _ = cache
    axes = (0, 2, 3)
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    g = grad_out * gamma[None, :, None, None]
    grad_x = (inv_std[None, :, None, None] / m) * (
        m * g - g.sum(axis=axes)[None, :, None, None] - xhat * (g * xhat).sum(axis=axes)[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Mean per-pixel softmax cross-entropy over (B, k, H, W) logits."""
    k = logits.shape[1]
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class index out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = np.moveaxis(np.eye(k, dtype=logits.dtype)[target], -1, 1)
    n = target.size
    loss = -(logp * onehot).sum() / n
    grad = (np.exp(logp) - onehot) / n
    return float(loss), grad


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy on single-channel (B, 1, H, W) logits."""
    if logits.shape[1] != 1:
        raise ShapeError(f"bce expects one logit channel, got {logits.shape[1]}")
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() > 1):
        raise ValueError("bce target must be binary")
    z = logits[:, 0]
    t = target.astype(logits.dtype)
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    loss_px = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = target.size
    grad = ((sigmoid(z) - t) / n)[:, None]
    return float(loss_px.sum() / n), grad


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_backward(grad_out: np.ndarray) -> np.ndarray:
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def loss(pred: np.ndarray, target: np.ndarray, kind: str = "cross_entropy"):
    """Dispatch to a mean-reduced pixel loss; returns ``(loss, grad_pred)``."""
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "bce":
        return bce_with_logits(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")
