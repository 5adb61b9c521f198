"""Desk-scale ResNet18-style encoder + U-Net decoder with pluggable convs.

Layout for ``encoder_channels = [c0, c1, c2, c3]`` and input side ``S``:

    stem    static 3x3 conv -> BN -> ReLU          c0 @ S
    stage i two residual blocks, first stride 2     ci @ S / 2^(i+1)
    up j    nearest x2 -> concat skip -> 3x3 conv  (mirrors the encoder)
    head    1x1 conv to class logits                   @ S

All non-stem encoder convs (including 1x1 projection shortcuts) use
``conv_kind``; the decoder does too when ``dynamic_decoder`` is set.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dynconv import ConvBNAct, DynamicConv2d
from .fat import FUSIONS, FatParams
from .metrics import ConfusionMatrix, MetricsReport
from .nn import functional as F
from .nn.functional import ConvGeometry
from .nn.layers import Conv2d, Module, layer_rng, note_kinks

CONV_KINDS = ("static", "dyconv", "fadconv")


@dataclass
class ModelConfig:
    conv_kind: str = "fadconv"
    num_experts: int = 4
    poolsize: int = 16
    freq_side: int = 4
    reduction: int = 4
    fusion: str = "learned"
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    input_size: int = 64
    in_channels: int = 3
    num_classes: int = 2
    loss: str = "cross_entropy"
    dynamic_decoder: bool = False
    expert_bias: bool = False
    seed: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    dtype: str = "float64"

    def __post_init__(self):
        self.encoder_channels = list(self.encoder_channels)
        self.validate()

    def validate(self) -> None:
        ch = self.encoder_channels
        if not ch or any(c < 1 for c in ch) or any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"encoder_channels must be positive and strictly increasing, got {ch}")
        if self.input_size % (2 ** len(ch)):
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{len(ch)}")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.loss not in ("cross_entropy", "bce"):
            raise ValueError(f"loss must be cross_entropy or bce, got {self.loss!r}")
        if self.loss == "bce" and self.num_classes != 2:
            raise ValueError("bce loss requires num_classes == 2")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        for name in ("num_experts", "poolsize", "freq_side", "reduction", "num_classes",
                     "batch_size", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def out_channels(self) -> int:
        return 1 if self.loss == "bce" else self.num_classes

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _relu_out(module, z):
    note_kinks(z)
    module._z = z
    return F.relu(z)


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, make, path, in_size):
        self.conv1 = make(ConvGeometry(cin, cout, 3, stride, 1), path + ".conv1", "relu", in_size)
        self.conv2 = make(ConvGeometry(cout, cout, 3, 1, 1), path + ".conv2", "none", in_size // stride)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = make(ConvGeometry(cin, cout, 1, stride, 0), path + ".shortcut", "none", in_size)

    def forward(self, x):
        h = self.conv2.forward(self.conv1.forward(x))
        s = x if self.shortcut is None else self.shortcut.forward(x)
        return _relu_out(self, h + s)

    def backward(self, grad):
        g = F.relu_backward(self._z, grad)
        gx = self.conv1.backward(self.conv2.backward(g))
        return gx + (g if self.shortcut is None else self.shortcut.backward(g))

    def cost(self, in_shape, path, counter):
        shape = self.conv1.cost(in_shape, path + ".conv1", counter)
        shape = self.conv2.cost(shape, path + ".conv2", counter)
        if self.shortcut is not None:
            self.shortcut.cost(in_shape, path + ".shortcut", counter)
        counter.add(path + ".add", b=2 * int(np.prod(shape[1:])))
        return shape


class Stage(Module):
    def __init__(self, cin, cout, make, path, in_size, blocks=2):
        self.blocks = [BasicBlock(cin, cout, 2, make, path + ".blocks.0", in_size)]
        for j in range(1, blocks):
            self.blocks.append(BasicBlock(cout, cout, 1, make, f"{path}.blocks.{j}", in_size // 2))

    def forward(self, x):
        for b in self.blocks:
            x = b.forward(x)
        return x

    def backward(self, grad):
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return grad

    def cost(self, in_shape, path, counter):
        for j, b in enumerate(self.blocks):
            in_shape = b.cost(in_shape, f"{path}.blocks.{j}", counter)
        return in_shape


class UpBlock(Module):
    def __init__(self, cin, cskip, cout, make, path, out_size):
        self.cin = cin
        self.conv = make(ConvGeometry(cin + cskip, cout, 3, 1, 1), path + ".conv", "relu", out_size)

    def forward(self, x, skip):
        return self.conv.forward(np.concatenate([F.upsample_nearest2x(x), skip], axis=1))

    def backward(self, grad):
        g = self.conv.backward(grad)
        return F.upsample_nearest2x_backward(g[:, :self.cin]), g[:, self.cin:]


class SegNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dt = cfg.np_dtype
        ch = cfg.encoder_channels
        s = cfg.input_size

        def make(geom, path, act, in_size, encoder=True):
            dynamic = cfg.conv_kind != "static" and (encoder or cfg.dynamic_decoder)
            if not dynamic:
                return ConvBNAct(geom, cfg.seed, path, act, dtype=dt)
            q = min(cfg.poolsize, in_size)
            fat = FatParams(channels=geom.in_channels, num_experts=cfg.num_experts, poolsize=cfg.poolsize,
                            freq_side=min(cfg.freq_side, q), reduction=cfg.reduction, fusion=cfg.fusion)
            attention = "fat" if cfg.conv_kind == "fadconv" else "gap"
            return DynamicConv2d(geom, fat, cfg.seed, path, attention=attention, activation=act,
                                 bias=cfg.expert_bias, dtype=dt)

        def make_decoder(geom, path, act, in_size):
            return make(geom, path, act, in_size, encoder=False)

        self.stem = ConvBNAct(ConvGeometry(cfg.in_channels, ch[0], 3, 1, 1), cfg.seed, "stem", "relu", dtype=dt)
        self.stages = []
        cin, size = ch[0], s
        for i, c in enumerate(ch):
            self.stages.append(Stage(cin, c, make, f"stages.{i}", size))
            cin, size = c, size // 2
        feat_ch = [ch[0], *ch]
        self.ups = []
        d = ch[-1]
        for j in range(len(ch)):
            skip = feat_ch[-2 - j]
            size *= 2
            self.ups.append(UpBlock(d, skip, skip, make_decoder, f"ups.{j}", size))
            d = skip
        self.head = Conv2d(ConvGeometry(d, cfg.out_channels, 1), layer_rng(cfg.seed, "head", 0),
                           bias=True, dtype=dt)

    def forward(self, x):
        x = np.asarray(x, dtype=self.cfg.np_dtype)
        feats = [self.stem.forward(x)]
        for st in self.stages:
            feats.append(st.forward(feats[-1]))
        d = feats[-1]
        for j, up in enumerate(self.ups):
            d = up.forward(d, feats[-2 - j])
        self._nfeats = len(feats)
        return self.head.forward(d)

    def backward(self, grad):
        g = self.head.backward(grad)
        feat_grads = [None] * self._nfeats
        for j in reversed(range(len(self.ups))):
            g, gs = self.ups[j].backward(g)
            idx = self._nfeats - 2 - j
            feat_grads[idx] = gs if feat_grads[idx] is None else feat_grads[idx] + gs
        feat_grads[-1] = g if feat_grads[-1] is None else feat_grads[-1] + g
        for i in reversed(range(len(self.stages))):
            gin = self.stages[i].backward(feat_grads[i + 1])
            feat_grads[i] = gin if feat_grads[i] is None else feat_grads[i] + gin
        return self.stem.backward(feat_grads[0])

    def cost(self, in_shape, path, counter):
        shapes = [self.stem.cost(in_shape, "stem", counter)]
        for i, st in enumerate(self.stages):
            shapes.append(st.cost(shapes[-1], f"stages.{i}", counter))
        d = shapes[-1]
        for j, up in enumerate(self.ups):
            skip = shapes[-2 - j]
            d = up.conv.cost((d[0], d[1] + skip[1], 2 * d[2], 2 * d[3]), f"ups.{j}.conv", counter)
        return self.head.cost(d, "head", counter)

    def predict(self, x):
        logits = self.forward(x)
        if self.cfg.loss == "bce":
            return (logits[:, 0] > 0).astype(np.int64)
        return logits.argmax(axis=1)


def build_model(cfg: ModelConfig) -> SegNet:
    cfg.validate()
    return SegNet(cfg)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with decoupled weight decay and a constant learning rate."""

    def __init__(self, named_params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in self.named}
        self.v = {n: np.zeros_like(p.value) for n, p in self.named}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.named:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= (self.lr * update).astype(p.value.dtype)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FADCKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]  # "param/...", "buffer/...", "adam_m/...", "adam_v/..."
    epoch: int = 0
    adam_step: int = 0
    rng_state: dict | None = None

    def to_bytes(self) -> bytes:
        header = {"config": self.config.to_json(), "epoch": self.epoch,
                  "adam_step": self.adam_step, "rng_state": self.rng_state}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
        if pos != len(buf):
            raise ValueError(f"trailing bytes in checkpoint at offset {pos}")
        return cls(ModelConfig.from_json(header["config"]), tensors, header["epoch"],
                   header["adam_step"], header["rng_state"])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def make_checkpoint(cfg, model, opt=None, epoch=0, rng=None) -> Checkpoint:
    tensors = {f"param/{n}": p.value for n, p in model.named_params()}
    tensors.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    if opt is not None:
        tensors.update({f"adam_m/{n}": m for n, m in opt.m.items()})
        tensors.update({f"adam_v/{n}": v for n, v in opt.v.items()})
    return Checkpoint(cfg, {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}, epoch,
                      0 if opt is None else opt.t, None if rng is None else rng.bit_generator.state)


def model_from_checkpoint(ckpt: Checkpoint) -> SegNet:
    model = build_model(ckpt.config)
    dt = ckpt.config.np_dtype
    for name, p in model.named_params():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise KeyError(f"checkpoint is missing {key}")
        if ckpt.tensors[key].shape != p.value.shape:
            raise ValueError(f"shape mismatch for {key}: {ckpt.tensors[key].shape} vs {p.value.shape}")
        p.value = ckpt.tensors[key].astype(dt)
        p.zero_grad()
    for name, _ in list(model.named_buffers()):
        model.set_buffer(name, ckpt.tensors[f"buffer/{name}"].astype(dt))
    return model


# ---------------------------------------------------------------- train / evaluate


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def evaluate_model(model: SegNet, images, labels, batch_size: int = 32) -> MetricsReport:
    cfg = model.cfg
    if labels.size and labels.max() >= cfg.num_classes:
        raise ValueError(f"labels contain class {labels.max()} but model has {cfg.num_classes} classes")
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(cfg.num_classes)
    for start in range(0, len(images), batch_size):
        cm.update(labels[start:start + batch_size], model.predict(images[start:start + batch_size]))
    model.train(was_training)
    return cm.compute()


def evaluate(ckpt: Checkpoint, images, labels, batch_size: int = 32) -> MetricsReport:
    return evaluate_model(model_from_checkpoint(ckpt), images, labels, batch_size)


def _batch_loss(cfg, logits, targets):
    return F.loss(logits, targets, cfg.loss)


def train(cfg: ModelConfig, train_images, train_labels, test_images=None, test_labels=None,
          progress=None):
    """Train from scratch; returns ``(Checkpoint, log)``.

    ``log`` has one dict per epoch with ``train_loss`` and, when a test set is
    given, the test metrics. ``progress`` is called with each log entry.
    """
    cfg.validate()
    dt = cfg.np_dtype
    x = np.asarray(train_images, dtype=dt)
    y = np.asarray(train_labels, dtype=np.int64)
    if x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"training images {x.shape[1:]} do not match config "
                         f"{(cfg.in_channels, cfg.input_size, cfg.input_size)}")
    model = build_model(cfg)
    opt = Adam(model.named_params(), cfg.lr, cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x5EED])))
    log = []
    n = len(x)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = model.forward(x[idx])
            loss, grad = _batch_loss(cfg, logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi, loss)
            model.zero_grad()
            model.backward(grad)
            opt.step()
            losses.append(loss)
        entry = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if test_images is not None:
            entry["metrics"] = evaluate_model(model, np.asarray(test_images, dtype=dt), np.asarray(test_labels))
        entry["seconds"] = time.perf_counter() - t0
        log.append(entry)
        if progress is not None:
            progress(entry)
    return make_checkpoint(cfg, model, opt, cfg.epochs, rng), log


def log_to_csv(log, num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["epoch", "train_loss", "oa", "miou"]
    header += [f"class_f1_{i}" for i in range(num_classes)] + [f"class_iou_{i}" for i in range(num_classes)]
    w.writerow(header)
    for e in log:
        row = [e["epoch"], repr(e["train_loss"])]
        m = e.get("metrics")
        if m is None:
            row += [""] * (2 + 2 * num_classes)
        else:
            row += [repr(m.oa), repr(m.miou)]
            row += ["" if c.f1 is None else repr(c.f1) for c in m.per_class]
            row += ["" if c.iou is None else repr(c.iou) for c in m.per_class]
        w.writerow(row)
    return buf.getvalue()
