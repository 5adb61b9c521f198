"""Synthetic frequency-textured segmentation data and PGM/PPM image I/O.

Each image is a Voronoi partition; every cell carries one class and is filled
with that class's texture: a few sinusoids whose radial frequency lies in the
class's band, over a base color, plus white noise. Classes share similar base
colors, so they are separable mainly by spatial frequency.

Randomness: every sample draws from its own PCG64 stream seeded with
``SeedSequence([seed, sample_id])``, so datasets are reproducible across
platforms and samples can be generated in any order.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import freq

# DCT leakage allowance (in DCT bins) around a declared band
BAND_MARGIN_BINS = 2.0


@dataclass(frozen=True)
class ClassProfile:
    base_color: tuple[float, float, float]
    band: tuple[float, float]  # radial frequency range, cycles per pixel
    amplitude: float = 0.18
    noise: float = 0.06


def default_profiles(num_classes: int) -> list[ClassProfile]:
    if num_classes == 2:
        return [
            ClassProfile((0.45, 0.50, 0.42), (0.03, 0.09)),
            ClassProfile((0.47, 0.50, 0.40), (0.13, 0.24)),
        ]
    if num_classes == 6:
        edges = np.linspace(0.02, 0.44, 7)
        colors = [(0.45, 0.48, 0.42), (0.60, 0.45, 0.40), (0.40, 0.55, 0.35),
                  (0.35, 0.50, 0.38), (0.52, 0.55, 0.40), (0.30, 0.40, 0.55)]
        return [ClassProfile(colors[i], (float(edges[i]) + 0.01, float(edges[i + 1]) - 0.01))
                for i in range(6)]
    raise ValueError("default profiles exist for 2 or 6 classes; pass profiles explicitly")


@dataclass
class DatasetSpec:
    seed: int = 0
    count: int = 640
    size: int = 64
    num_classes: int = 2
    splits: dict[str, float] = field(default_factory=lambda: {"train": 0.8, "test": 0.2})
    profiles: list[ClassProfile] | None = None
    min_cells: int = 3
    max_cells: int = 8
    waves_per_cell: int = 3

    def __post_init__(self):
        if self.profiles is None:
            self.profiles = default_profiles(self.num_classes)
        self.profiles = [p if isinstance(p, ClassProfile) else ClassProfile(
            tuple(p["base_color"]), tuple(p["band"]), p.get("amplitude", 0.18), p.get("noise", 0.06))
            for p in self.profiles]
        if len(self.profiles) != self.num_classes:
            raise ValueError(f"{len(self.profiles)} profiles for {self.num_classes} classes")
        if abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {sum(self.splits.values())}, expected 1")
        bands = sorted(p.band for p in self.profiles)
        if len(set(bands)) != len(bands):
            raise ValueError("class frequency bands must be distinct")
        if not 1 <= self.min_cells <= self.max_cells:
            raise ValueError("need 1 <= min_cells <= max_cells")

    def to_json(self) -> dict:
        d = asdict(self)
        d["profiles"] = [asdict(p) for p in self.profiles]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class Sample:
    id: int
    image: np.ndarray  # (3, H, W) in [0, 1], multiples of 1/255
    label: np.ndarray  # (H, W) int64


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, sample_id])))


def texture(rng: np.random.Generator, profile: ClassProfile, size: int, waves: int,
            with_noise: bool = True) -> np.ndarray:
    """Zero-mean-ish luminance texture (size x size) in the profile's band."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    lo, hi = profile.band
    for _ in range(waves):
        f = rng.uniform(lo, hi)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    out *= profile.amplitude / np.sqrt(waves)
    if with_noise and profile.noise > 0:
        out += rng.normal(0.0, profile.noise, (size, size))
    return out


def generate_sample(spec: DatasetSpec, sample_id: int) -> Sample:
    rng = sample_rng(spec.seed, sample_id)
    s = spec.size
    m = int(rng.integers(spec.min_cells, spec.max_cells + 1))
    seeds = rng.uniform(0, s, size=(m, 2))
    classes = rng.integers(0, spec.num_classes, size=m)
    if spec.num_classes > 1 and m > 1 and np.all(classes == classes[0]):
        # guarantee every image contains at least two classes
        classes[rng.integers(m)] = (classes[0] + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes
    yy, xx = np.mgrid[0:s, 0:s]
    d2 = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    cell = np.argmin(d2, axis=0)
    label = classes[cell].astype(np.int64)
    image = np.zeros((3, s, s))
    for c in range(m):
        prof = spec.profiles[classes[c]]
        lum = texture(rng, prof, s, spec.waves_per_cell)
        jitter = rng.uniform(-0.05, 0.05)
        color = np.asarray(prof.base_color) + jitter
        mask = cell == c
        image[:, mask] = color[:, None] + lum[mask][None, :]
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(sample_id, image, label)


def split_ids(spec: DatasetSpec) -> dict[str, list[int]]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 2 ** 31 - 1])))
    ids = rng.permutation(spec.count)
    out, start = {}, 0
    names = list(spec.splits)
    for i, name in enumerate(names):
        n = spec.count - start if i == len(names) - 1 else int(round(spec.splits[name] * spec.count))
        if spec.splits[name] > 0 and n < 1:
            raise ValueError(f"count {spec.count} too small for split {name!r}")
        out[name] = sorted(int(j) for j in ids[start:start + n])
        start += n
    return out


def generate(spec: DatasetSpec) -> dict[str, list[Sample]]:
    """Samples per split (``train``, ``test`` and optionally ``val``)."""
    return {name: [generate_sample(spec, i) for i in ids] for name, ids in split_ids(spec).items()}


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


def band_energy_fraction(patch: np.ndarray, band: tuple[float, float],
                         margin_bins: float = BAND_MARGIN_BINS) -> float:
    """Fraction of AC spectral energy of a square patch inside a radial band.

    DCT bin ``(u, v)`` of an N x N patch sits at radial frequency
    ``sqrt(u^2 + v^2) / 2N`` cycles per pixel.
    """
    n = patch.shape[0]
    spec = freq.dct2d(patch - patch.mean())
    u = np.arange(n)
    rho = np.sqrt(u[:, None] ** 2 + u[None, :] ** 2) / (2 * n)
    margin = margin_bins / (2 * n)
    inside = (rho >= band[0] - margin) & (rho <= band[1] + margin)
    energy = spec ** 2
    total = energy.sum()
    return float(energy[inside].sum() / total) if total > 0 else 1.0


def low_block_energy_fraction(patch: np.ndarray, n: int = 4) -> float:
    """Share of a patch's AC energy in the top-left ``n x n`` DCT block."""
    spec = freq.dct2d(patch - patch.mean())
    energy = spec ** 2
    total = energy.sum()
    return float(energy[:n, :n].sum() / total) if total > 0 else 0.0


# ---------------------------------------------------------------- PGM / PPM


class PnmError(ValueError):
    pass


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if np.issubdtype(img.dtype, np.integer):
        if img.min() < 0 or img.max() > 255:
            raise ValueError("integer image values must lie in [0, 255]")
        return img.astype(np.uint8)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img: np.ndarray) -> bytes:
    """P6 for (3, H, W) color, P5 for (H, W) gray. Floats are read as [0, 1]."""
    data = _to_uint8(img)
    if data.ndim == 2:
        h, w = data.shape
        return b"P5\n%d %d\n255\n" % (w, h) + data.tobytes()
    if data.ndim == 3 and data.shape[0] == 3:
        _, h, w = data.shape
        return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes()
    raise ValueError(f"cannot encode image of shape {data.shape}")


def decode_pnm(buf: bytes) -> np.ndarray:
    """Parse binary P5/P6 into uint8 ``(H, W)`` or ``(3, H, W)``."""
    if len(buf) < 2:
        raise PnmError("truncated header at byte 0")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r} at byte 0 (expected P5 or P6)")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            what = ("width", "height", "maxval")[len(values)]
            raise PnmError(f"malformed header: expected {what} at byte {start}")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError(f"malformed header: expected whitespace after maxval at byte {pos}")
    pos += 1
    w, h, maxval = values
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval} (only 255) at byte {pos - 1}")
    if w < 1 or h < 1:
        raise PnmError(f"invalid dimensions {w}x{h}")
    chans = 1 if magic == b"P5" else 3
    need = w * h * chans
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload: expected {need} bytes from byte {pos}, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8)
    if chans == 1:
        return data.reshape(h, w).copy()
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_image(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pnm(img))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pnm(f.read())


# ---------------------------------------------------------------- dataset dirs


def save_dataset(root, spec: DatasetSpec, splits: dict[str, list[Sample]]) -> None:
    if spec.num_classes > 256:
        raise ValueError("labels are stored as 8-bit PGM")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    rows = []
    for name, samples in splits.items():
        for s in samples:
            write_image(os.path.join(root, "images", f"{s.id:04d}.ppm"), s.image)
            write_image(os.path.join(root, "labels", f"{s.id:04d}.pgm"), s.label.astype(np.uint8))
            hist = np.bincount(s.label.ravel(), minlength=spec.num_classes)
            rows.append([s.id, name, *hist.tolist()])
    rows.sort()
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "split", *[f"class_{i}" for i in range(spec.num_classes)]])
        w.writerows(rows)
    with open(os.path.join(root, "spec.json"), "w") as f:
        json.dump(spec.to_json(), f, indent=2)  # split order decides sample assignment
        f.write("\n")


def load_dataset(root) -> tuple[DatasetSpec, dict[str, list[Sample]]]:
    with open(os.path.join(root, "spec.json")) as f:
        spec = DatasetSpec.from_json(json.load(f))
    splits: dict[str, list[Sample]] = {}
    with open(os.path.join(root, "manifest.csv"), newline="") as f:
        for row in csv.DictReader(f):
            sid = int(row["id"])
            img = read_image(os.path.join(root, "images", f"{sid:04d}.ppm")).astype(np.float64) / 255.0
            lab = read_image(os.path.join(root, "labels", f"{sid:04d}.pgm")).astype(np.int64)
            splits.setdefault(row["split"], []).append(Sample(sid, img, lab))
    return spec, splits
