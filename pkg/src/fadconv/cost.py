"""Parameter and multiply-add accounting.

One MAdd is one multiply plus one accumulate. Operations without a multiply
(pooling sums, softmax normalization, bias adds, activations) are tallied in
the separate ``b`` column. Counts are per sample.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

from .nn.functional import ConvGeometry

COLUMNS = ("layer_path", "params", "madds", "dct", "fat", "dyn_kernel", "b")


def conv_madds(geom: ConvGeometry, h_out: int, w_out: int) -> int:
    """``h w C_in C_out k^2 / groups`` for one sample."""
    k = geom.kernel_size
    return h_out * w_out * geom.in_channels * geom.out_channels * k * k // geom.groups


@dataclass
class ExtraMAdds:
    dct: int
    fat: int
    dynamic_kernel: int

    @property
    def total(self) -> int:
        return self.dct + self.fat + self.dynamic_kernel


def analytic_extra_madds(geom: ConvGeometry, num_experts: int, poolsize: int, reduction: int) -> ExtraMAdds:
    """Closed-form extra cost of a frequency-aware dynamic layer over a static one.

    ``dct = 2 C_in p^3``, ``fat = ceil(C_in / r) (C_in + K)`` and
    ``dynamic_kernel = K C_in C_out k^2 / groups``. The middle term is the
    ``(C_in^2 + C_in K) / r`` reduction-network cost evaluated with the
    hidden width rounded up, as the layer actually builds it.
    """
    c_in = geom.in_channels
    hidden = max(1, math.ceil(c_in / reduction))
    k = geom.kernel_size
    return ExtraMAdds(
        dct=2 * c_in * poolsize ** 3,
        fat=hidden * (c_in + num_experts),
        dynamic_kernel=num_experts * c_in * geom.out_channels * k * k // geom.groups,
    )


@dataclass
class LayerCost:
    layer_path: str
    kind: str = ""
    params: int = 0
    madds: int = 0
    dct: int = 0
    fat: int = 0
    dyn_kernel: int = 0
    b: int = 0

    @property
    def extra(self) -> int:
        return self.dct + self.fat + self.dyn_kernel

    @property
    def total_madds(self) -> int:
        return self.madds + self.extra


class CostCounter:
    """Accumulates per-path counts during a symbolic dry run."""

    def __init__(self):
        self.rows: dict[str, LayerCost] = {}

    def add(self, path: str, kind: str | None = None, **counts: int) -> None:
        row = self.rows.setdefault(path, LayerCost(path))
        if kind:
            row.kind = kind
        for key, val in counts.items():
            setattr(row, key, getattr(row, key) + int(val))


@dataclass
class CostReport:
    rows: list[LayerCost]

    def row(self, path: str) -> LayerCost:
        for r in self.rows:
            if r.layer_path == path:
                return r
        raise KeyError(path)

    def _sum(self, name: str) -> int:
        return sum(getattr(r, name) for r in self.rows)

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def madds(self) -> int:
        return self._sum("madds")

    @property
    def extra(self) -> int:
        return self._sum("dct") + self._sum("fat") + self._sum("dyn_kernel")

    @property
    def b(self) -> int:
        return self._sum("b")

    def totals(self) -> LayerCost:
        out = LayerCost("TOTAL")
        for f in fields(LayerCost):
            if f.name not in ("layer_path", "kind"):
                setattr(out, f.name, self._sum(f.name))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in [*self.rows, self.totals()]:
            d = asdict(r)
            writer.writerow([d[c] for c in COLUMNS])
        return buf.getvalue()

    def table(self) -> str:
        rows = [*self.rows, self.totals()]
        width = max(len(r.layer_path) for r in rows)
        head = f"{'layer':<{width}} {'params':>10} {'madds':>14} {'dct':>10} {'fat':>8} {'dyn_kernel':>11} {'b':>10}"
        lines = [head, "-" * len(head)]
        for r in rows:
            lines.append(f"{r.layer_path:<{width}} {r.params:>10} {r.madds:>14} {r.dct:>10} "
                         f"{r.fat:>8} {r.dyn_kernel:>11} {r.b:>10}")
        return "\n".join(lines)


def instrument(module, input_shape, path: str = "") -> CostReport:
    """Dry-run ``module`` symbolically on ``input_shape`` (batch of one assumed).

    Rows are named by ``path``, else the module's own build path, else its
    class name.
    """
    counter = CostCounter()
    shape = (1, *input_shape[1:])
    path = path or getattr(module, "path", "") or type(module).__name__
    try:
        module.cost(shape, path, counter)
    except NotImplementedError as exc:
        raise TypeError(f"unsupported layer kind at {exc}") from exc
    return CostReport([r for r in counter.rows.values()])
