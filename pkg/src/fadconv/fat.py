"""Expert-weight attention: frequency attention (FAT) and the GAP baseline.

Both produce a ``(B, K)`` softmax over experts from a per-channel descriptor.
FAT builds that descriptor from the top-left block of each channel's pooled
2D DCT; GAP uses the plain spatial mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import freq
from .nn import functional as F
from .nn.functional import ShapeError
from .nn.layers import Dense, Module, Param, note_kinks

FUSIONS = ("sum", "abs_sum", "learned", "fca")


@dataclass(frozen=True)
class FatParams:
    """Hyperparameters of one attention module."""

    channels: int
    num_experts: int = 4
    poolsize: int = 16
    freq_side: int = 4
    reduction: int = 4
    fusion: str = "learned"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        for name in ("channels", "num_experts", "poolsize", "freq_side", "reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.freq_side > self.poolsize:
            raise ValueError(f"freq_side {self.freq_side} exceeds poolsize {self.poolsize}")

    @property
    def hidden(self) -> int:
        return max(1, math.ceil(self.channels / self.reduction))


def default_fca_assignment(channels: int, n: int) -> np.ndarray:
    """Round-robin over the block's coefficients in zigzag (low-first) order."""
    order = freq.zigzag_order(n)
    return np.array([order[c % len(order)] for c in range(channels)], dtype=np.int64)


def fuse_frequencies(freq_vecs, strategy, weight=None, offset=None, assignment=None):
    """Collapse ``(B, C, n^2)`` coefficient vectors to a ``(B, C)`` descriptor."""
    if strategy == "sum":
        return freq_vecs.sum(axis=-1)
    if strategy == "abs_sum":
        return np.abs(freq_vecs).sum(axis=-1)
    if strategy == "learned":
        if weight is None or offset is None:
            raise ValueError("learned fusion requires initialized weights")
        return F.sigmoid(freq_vecs @ weight + offset)
    if strategy == "fca":
        if assignment is None:
            raise ValueError("fca fusion requires a per-channel coefficient assignment")
        c = freq_vecs.shape[1]
        return freq_vecs[:, np.arange(c), assignment]
    raise ValueError(f"unknown fusion strategy {strategy!r}")


class AttentionTail(Module):
    """descriptor -> dense(C, ceil(C/r)) -> relu -> dense(., K) -> softmax."""

    def __init__(self, channels, hidden, num_experts, rng, dtype=np.float64):
        self.fc1 = Dense(channels, hidden, rng, dtype=dtype)
        self.fc2 = Dense(hidden, num_experts, rng, dtype=dtype)

    def forward(self, desc):
        h = self.fc1.forward(desc)
        note_kinks(h)
        self._h = h
        self._alpha = F.softmax(self.fc2.forward(F.relu(h)), axis=-1)
        return self._alpha

    def backward(self, grad):
        g = F.softmax_backward(self._alpha, grad, axis=-1)
        g = self.fc2.backward(g)
        g = F.relu_backward(self._h, g)
        return self.fc1.backward(g)


class _Attention(Module):
    def __init__(self, params: FatParams, rng: np.random.Generator, dtype=np.float64):
        self.hp = params
        self.tail = AttentionTail(params.channels, params.hidden, params.num_experts, rng, dtype)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.hp.channels:
            raise ShapeError(f"attention expects {self.hp.channels} channels, got shape {x.shape}")

    def zero_expansion(self):
        self.tail.fc2.weight.value[...] = 0
        self.tail.fc2.bias.value[...] = 0

    def _tail_cost(self, path, counter, b_extra):
        p = self.hp
        h = p.hidden
        counter.add(path, params=h * (p.channels + 1) + p.num_experts * (h + 1),
                    fat=h * (p.channels + p.num_experts),
                    b=b_extra + h + p.num_experts + h + 3 * p.num_experts)


class FrequencyAttention(_Attention):
    """pool -> per-channel DCT -> top-left block -> fusion -> tail -> softmax."""

    def __init__(self, params: FatParams, rng: np.random.Generator, dtype=np.float64):
        super().__init__(params, rng, dtype)
        n2 = params.freq_side ** 2
        self.fusion_weight = self.fusion_offset = None
        self.fca_assignment = None
        if params.fusion == "learned":
            self.fusion_weight = Param(np.zeros(n2, dtype=dtype))
            self.fusion_offset = Param(np.zeros(1, dtype=dtype))
        elif params.fusion == "fca":
            self.fca_assignment = default_fca_assignment(params.channels, params.freq_side)

    def descriptor(self, x):
        self._check(x)
        p = self.hp
        pooled = freq.adaptive_avg_pool(x, p.poolsize)
        side = pooled.shape[-1]
        if p.freq_side > side:
            raise ShapeError(f"frequency side {p.freq_side} exceeds pooled size {side} for input {x.shape}")
        vecs = freq.extract_freq_block(freq.dct2d(pooled), p.freq_side)
        if p.fusion == "abs_sum":
            note_kinks(vecs)
        self._in_hw = x.shape[-2:]
        self._side = side
        self._vecs = vecs
        desc = fuse_frequencies(
            vecs, p.fusion,
            weight=None if self.fusion_weight is None else self.fusion_weight.value,
            offset=None if self.fusion_offset is None else self.fusion_offset.value,
            assignment=self.fca_assignment,
        )
        self._desc = desc
        return desc

    def forward(self, x):
        return self.tail.forward(self.descriptor(x))

    def backward(self, grad):
        gd = self.tail.backward(grad)
        vecs, fusion = self._vecs, self.hp.fusion
        if fusion == "sum":
            gv = np.broadcast_to(gd[..., None], vecs.shape)
        elif fusion == "abs_sum":
            gv = gd[..., None] * np.sign(vecs)
        elif fusion == "learned":
            gs = F.sigmoid_backward(self._desc, gd)
            self.fusion_weight.grad += np.einsum("bc,bcj->j", gs, vecs)
            self.fusion_offset.grad += gs.sum(keepdims=True).reshape(1)
            gv = gs[..., None] * self.fusion_weight.value
        else:
            gv = np.zeros_like(vecs)
            c = vecs.shape[1]
            gv[:, np.arange(c), self.fca_assignment] = gd
        gspec = freq.scatter_freq_block(np.ascontiguousarray(gv), self.hp.freq_side, self._side)
        return freq.adaptive_avg_pool_backward(freq.idct2d(gspec), *self._in_hw)

    def cost(self, in_shape, path, counter):
        _, c, h, w = in_shape
        p = self.hp
        q = freq.effective_poolsize(p.poolsize, h, w)
        n2 = p.freq_side ** 2
        counter.add(path, dct=2 * c * q ** 3)
        if p.fusion == "learned":
            # shared n^2 -> 1 dot product per channel; offset add and sigmoid go to b
            counter.add(path + ".fusion", kind="fusion", params=n2 + 1, madds=c * n2, b=4 * c)
        else:
            counter.add(path + ".fusion", kind="fusion", b={"sum": c * n2, "abs_sum": 2 * c * n2, "fca": 0}[p.fusion])
        # pooling window sums and the pooled-map divisions
        self._tail_cost(path, counter, c * h * w + c * q * q)
        return (in_shape[0], p.num_experts)


class GapAttention(_Attention):
    """Squeeze-and-excitation style attention over the spatial mean."""

    def descriptor(self, x):
        self._check(x)
        self._in_hw = x.shape[-2:]
        return x.mean(axis=(2, 3))

    def forward(self, x):
        return self.tail.forward(self.descriptor(x))

    def backward(self, grad):
        gd = self.tail.backward(grad)
        h, w = self._in_hw
        return np.broadcast_to((gd / (h * w))[:, :, None, None], (*gd.shape, h, w)).copy()

    def cost(self, in_shape, path, counter):
        _, c, h, w = in_shape
        self._tail_cost(path, counter, c * h * w + c)
        return (in_shape[0], self.hp.num_experts)


def fat_attention(x: np.ndarray, module: FrequencyAttention) -> np.ndarray:
    return module.forward(x)


def gap_attention(x: np.ndarray, module: GapAttention) -> np.ndarray:
    return module.forward(x)
