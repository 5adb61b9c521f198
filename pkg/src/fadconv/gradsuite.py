"""The standard gradient-check suite: primitives in isolation, one FADConv
layer, and a tiny end-to-end segmentation model, all in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynconv import DynamicConv2d
from .fat import FatParams
from .model import ModelConfig, build_model
from .nn import BatchNorm2d, Conv2d, ConvGeometry, Dense, GradCheckResult, grad_check, layer_rng

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class SuiteEntry:
    name: str
    tol: float
    result: GradCheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passes(self.tol)

    def line(self) -> str:
        r = self.result
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} {self.name}: max_rel_error={r.max_rel_error:.3e} tol={self.tol:.0e} " \
              f"checked={r.checked} skipped_kinks={r.skipped_kinks} worst={r.worst or '-'}"
        return msg if r.failure is None else f"{msg} failure={r.failure}"


def _cases(seed: int):
    rng = np.random.default_rng(seed)
    yield ("conv3x3", PRIMITIVE_TOL,
           Conv2d(ConvGeometry(3, 4, 3, 1, 1), layer_rng(seed, "conv3x3"), bias=True),
           rng.standard_normal((2, 3, 6, 6)), None)
    yield ("conv3x3_stride2_groups", PRIMITIVE_TOL,
           Conv2d(ConvGeometry(4, 6, 3, 2, 1, groups=2), layer_rng(seed, "conv_s2")),
           rng.standard_normal((2, 4, 7, 7)), None)
    yield ("dense", PRIMITIVE_TOL, Dense(5, 3, layer_rng(seed, "dense")), rng.standard_normal((4, 5)), None)
    bn = BatchNorm2d(3)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[:] = rng.standard_normal(3)
    yield ("batchnorm_train", PRIMITIVE_TOL, bn, rng.standard_normal((4, 3, 3, 3)), None)
    # abs_sum descriptors grow with input scale; a smaller input keeps the softmax unsaturated
    for fusion, x_scale in (("learned", 1.0), ("abs_sum", 0.2)):
        fat = FatParams(channels=4, num_experts=3, poolsize=4, freq_side=2, reduction=2, fusion=fusion)
        layer = DynamicConv2d(ConvGeometry(4, 5, 3, 1, 1), fat, seed, f"fadconv_{fusion}", bias=True)
        # move off the zero-initialised expansion map so the attention path is exercised
        for _, p in layer.attn.named_params():
            p.value += 0.3 * rng.standard_normal(p.value.shape)
        x = x_scale * rng.standard_normal((3, 4, 6, 6))
        yield (f"fadconv_layer_{fusion}", COMPOSITE_TOL, layer, x, None)
    cfg = ModelConfig(conv_kind="fadconv", num_experts=2, poolsize=8, freq_side=2, reduction=2,
                      encoder_channels=[4, 8], input_size=16, in_channels=3, num_classes=2, seed=seed)
    model = build_model(cfg)
    for name, p in model.named_params():
        if ".attn." in name:
            p.value += 0.3 * rng.standard_normal(p.value.shape)
    yield ("tiny_model", COMPOSITE_TOL, model, rng.standard_normal((2, 3, 16, 16)), 40)


def run_suite(seed: int = 0, eps: float = 1e-5, progress=None) -> list[SuiteEntry]:
    entries = []
    for name, tol, module, x, limit in _cases(seed):
        t0 = time.perf_counter()
        res = grad_check(module, x, eps=eps, seed=seed, max_per_tensor=limit)
        entry = SuiteEntry(name, tol, res, time.perf_counter() - t0)
        entries.append(entry)
        if progress is not None:
            progress(entry)
    return entries
