"""Central finite-difference verification of module backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Module, kink_recording


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int
    skipped_kinks: int
    failure: str | None = None
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failure is None

    def passes(self, tol: float) -> bool:
        return self.ok and self.max_rel_error <= tol


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    module: Module,
    x: np.ndarray,
    eps: float = 1e-5,
    seed: int = 0,
    max_per_tensor: int | None = None,
    check_input: bool = True,
) -> GradCheckResult:
    """Compare ``module.backward`` against central differences.

    The scalar objective is ``sum(R * module(x))`` for a fixed Gaussian ``R``.
    Entries whose +/-eps evaluations flip the sign pattern of any relu/abs input
    are skipped (the function is not differentiable across that step) and
    counted in ``skipped_kinks``. ``max_per_tensor`` samples a random subset of
    entries per tensor to bound runtime.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64, copy=True)
    saved_buffers = [(name, np.copy(buf)) for name, buf in module.named_buffers()]

    y = module.forward(x)
    weights = rng.standard_normal(np.shape(y))
    module.zero_grad()
    gx = module.backward(weights)

    targets = []
    if check_input:
        targets.append(("input", x, gx))
    targets += [(path, p.value, p.grad.copy()) for path, p in module.named_params()]

    def objective():
        with kink_recording() as log:
            out = module.forward(x)
        return float(np.sum(weights * out)), log

    _, base_kinks = objective()

    def same_kinks(log):
        return len(log) == len(base_kinks) and all(np.array_equal(a, b) for a, b in zip(log, base_kinks))

    worst, worst_at = 0.0, ""
    checked = skipped = 0
    per_tensor: dict[str, float] = {}
    failure = None
    for name, arr, analytic in targets:
        if analytic is None:
            continue
        if not np.all(np.isfinite(analytic)):
            failure = f"non-finite analytic gradient in {name}"
            break
        idx = np.arange(arr.size)
        if max_per_tensor is not None and arr.size > max_per_tensor:
            idx = np.sort(rng.choice(arr.size, size=max_per_tensor, replace=False))
        tensor_worst = 0.0
        for i in idx:
            orig = arr.flat[i]
            arr.flat[i] = orig + eps
            fp, kp = objective()
            arr.flat[i] = orig - eps
            fm, km = objective()
            arr.flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failure = f"non-finite objective while perturbing {name}[{i}]"
                break
            if not (same_kinks(kp) and same_kinks(km)):
                skipped += 1
                continue
            err = rel_error(float(analytic.flat[i]), (fp - fm) / (2 * eps))
            checked += 1
            tensor_worst = max(tensor_worst, err)
            if err > worst:
                worst, worst_at = err, f"{name}[{i}]"
        per_tensor[name] = tensor_worst
        if failure:
            break

    for name, buf in saved_buffers:
        module.set_buffer(name, buf)
    return GradCheckResult(
        max_rel_error=float("inf") if failure else worst,
        worst=worst_at,
        checked=checked,
        skipped_kinks=skipped,
        failure=failure,
        per_tensor=per_tensor,
    )
