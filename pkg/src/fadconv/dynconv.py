"""Expert kernel banks and attention-weighted dynamic convolution layers."""

from __future__ import annotations

import numpy as np

from .fat import FatParams, FrequencyAttention, GapAttention
from .nn import functional as F
from .nn.functional import ConvGeometry, ShapeError
from .nn.layers import BatchNorm2d, Conv2d, Module, Param, kaiming_normal, layer_rng, note_kinks

# stream ids for layer_rng; experts take ids 0..K-1
_ATTN_STREAM = 1000


class ExpertBank(Module):
    """K kernels of one geometry, each independently Kaiming-initialized."""

    def __init__(self, geom: ConvGeometry, num_experts: int, seed: int, path: str,
                 bias: bool = False, dtype=np.float64):
        if num_experts < 1:
            raise ValueError("an expert bank needs at least one expert")
        self.geom = geom
        self.num_experts = num_experts
        fan_in = (geom.in_channels // geom.groups) * geom.kernel_size ** 2
        kernels = [kaiming_normal(layer_rng(seed, path, e), geom.weight_shape, fan_in, dtype)
                   for e in range(num_experts)]
        self.experts = Param(np.stack(kernels))
        self.biases = Param(np.zeros((num_experts, geom.out_channels), dtype=dtype)) if bias else None


def aggregate(bank: ExpertBank, alphas: np.ndarray):
    """Per-sample kernels ``sum_e alphas[b, e] W_e`` and matching biases."""
    if alphas.ndim != 2 or alphas.shape[1] != bank.num_experts:
        raise ShapeError(f"alphas shape {alphas.shape} does not match {bank.num_experts} experts")
    w = np.tensordot(alphas, bank.experts.value, axes=(1, 0))
    b = None if bank.biases is None else alphas @ bank.biases.value
    return w, b


class ConvBNAct(Module):
    """Static conv -> batchnorm -> optional relu."""

    def __init__(self, geom: ConvGeometry, seed: int, path: str, activation: str = "relu",
                 dtype=np.float64):
        self.geom = geom
        self.path = path
        # expert-0 stream, so a K=1 dynamic layer at the same path starts identical
        self.conv = Conv2d(geom, layer_rng(seed, path, 0), dtype=dtype)
        self.bn = BatchNorm2d(geom.out_channels, dtype=dtype)
        self.activation = activation

    def forward(self, x):
        y = self.bn.forward(self.conv.forward(x))
        if self.activation == "relu":
            note_kinks(y)
            self._y = y
            y = F.relu(y)
        return y

    def backward(self, grad):
        if self.activation == "relu":
            grad = F.relu_backward(self._y, grad)
        return self.conv.backward(self.bn.backward(grad))

    def cost(self, in_shape, path, counter):
        shape = self.conv.cost(in_shape, path, counter)
        shape = self.bn.cost(shape, path + ".bn", counter)
        if self.activation == "relu":
            counter.add(path + ".bn", b=int(np.prod(shape[1:])))
        return shape


class DynamicConv2d(Module):
    """Attention -> kernel aggregation -> conv -> batchnorm -> activation.

    ``attention="fat"`` gives FADConv, ``attention="gap"`` the DYConv baseline.
    Setting ``fixed_alphas`` replaces the attention output with a constant
    (no gradient flows into the attention path); ``detach_attention`` keeps
    the computed alphas but blocks their gradient.
    """

    def __init__(self, geom: ConvGeometry, fat: FatParams, seed: int, path: str,
                 attention: str = "fat", activation: str = "relu", bias: bool = False,
                 use_bn: bool = True, dtype=np.float64):
        if fat.channels != geom.in_channels:
            raise ValueError("attention channels must equal conv input channels")
        self.geom = geom
        self.path = path
        self.bank = ExpertBank(geom, fat.num_experts, seed, path, bias=bias, dtype=dtype)
        rng = layer_rng(seed, path, _ATTN_STREAM)
        if attention == "fat":
            self.attn = FrequencyAttention(fat, rng, dtype)
        elif attention == "gap":
            self.attn = GapAttention(fat, rng, dtype)
        else:
            raise ValueError(f"unknown attention kind {attention!r}")
        self.attention_kind = attention
        self.bn = BatchNorm2d(geom.out_channels, dtype=dtype) if use_bn else None
        self.activation = activation
        self.fixed_alphas = None
        self.detach_attention = False

    @property
    def num_experts(self) -> int:
        return self.bank.num_experts

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.geom.in_channels:
            raise ShapeError(f"expected {self.geom.in_channels} input channels, got shape {x.shape}")
        if self.fixed_alphas is not None:
            alphas = np.broadcast_to(self.fixed_alphas, (x.shape[0], self.num_experts)).astype(x.dtype)
        else:
            alphas = self.attn.forward(x)
        w, b = aggregate(self.bank, alphas)
        cols = F.im2col(x, self.geom)
        z = F.conv2d(x, w, b, self.geom, cols=cols)
        self._cache = (x, alphas, w, cols)
        y = z if self.bn is None else self.bn.forward(z)
        if self.activation == "relu":
            note_kinks(y)
            self._y = y
            y = F.relu(y)
        return y

    def backward(self, grad):
        if getattr(self, "_cache", None) is None:
            raise RuntimeError("backward called without a cached forward pass")
        x, alphas, w, cols = self._cache
        self._cache = None
        if self.activation == "relu":
            grad = F.relu_backward(self._y, grad)
        if self.bn is not None:
            grad = self.bn.backward(grad)
        gx, gw, gb = F.conv2d_backward(x, w, grad, self.geom, cols=cols)
        k = self.num_experts
        experts = self.bank.experts
        experts.grad += np.tensordot(alphas, gw, axes=(0, 0))
        # d loss / d alpha_e = <grad W_final, W_e> + <grad b_final, b_e>
        g_alpha = gw.reshape(gw.shape[0], -1) @ experts.value.reshape(k, -1).T
        if self.bank.biases is not None:
            self.bank.biases.grad += alphas.T @ gb
            g_alpha += gb @ self.bank.biases.value.T
        if self.fixed_alphas is None and not self.detach_attention:
            gx = gx + self.attn.backward(g_alpha)
        return gx

    def cost(self, in_shape, path, counter):
        from .cost import conv_madds

        b, c, h, w = in_shape
        ho, wo = self.geom.output_size(h, w)
        g = self.geom
        k = self.num_experts
        kernel = g.out_channels * (g.in_channels // g.groups) * g.kernel_size ** 2
        counter.add(path, kind="fadconv" if self.attention_kind == "fat" else "dyconv",
                    params=k * kernel + (0 if self.bank.biases is None else k * g.out_channels),
                    madds=conv_madds(g, ho, wo), dyn_kernel=k * kernel,
                    b=0 if self.bank.biases is None else k * g.out_channels + g.out_channels * ho * wo)
        self.attn.cost(in_shape, path, counter)
        shape = (b, g.out_channels, ho, wo)
        if self.bn is not None:
            self.bn.cost(shape, path + ".bn", counter)
        if self.activation == "relu":
            counter.add(path + ".bn", b=int(np.prod(shape[1:])))
        return shape


def static_equivalent(layer: DynamicConv2d, expert: int) -> ConvBNAct:
    """A static layer sharing ``layer``'s geometry, expert kernel and BN state."""
    out = ConvBNAct.__new__(ConvBNAct)
    out.geom = layer.geom
    out.path = layer.path
    out.conv = Conv2d.__new__(Conv2d)
    out.conv.geom = layer.geom
    out.conv.weight = Param(layer.bank.experts.value[expert].copy())
    out.conv.bias = None if layer.bank.biases is None else Param(layer.bank.biases.value[expert].copy())
    out.bn = BatchNorm2d(layer.geom.out_channels, dtype=layer.bank.experts.value.dtype)
    if layer.bn is not None:
        out.bn.gamma = Param(layer.bn.gamma.value.copy())
        out.bn.beta = Param(layer.bn.beta.value.copy())
        out.bn.running_mean = layer.bn.running_mean.copy()
        out.bn.running_var = layer.bn.running_var.copy()
    out.activation = layer.activation
    return out
