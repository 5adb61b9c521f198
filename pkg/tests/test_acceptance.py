"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 9 train twelve models (about 80 minutes on one CPU core).
Finished runs are cached in ``.acceptance_cache/runs.json`` keyed by the run
config and a digest of the package source, so any code change retrains.
Set ``FADCONV_ACCEPTANCE_FRESH=1`` to ignore the cache.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fadconv import freq
from fadconv.cli import main as cli_main
from fadconv.cost import analytic_extra_madds, conv_madds, instrument
from fadconv.data import DatasetSpec, generate, read_image, stack, write_image
from fadconv.dynconv import ConvBNAct, DynamicConv2d, ExpertBank, aggregate, static_equivalent
from fadconv.fat import FatParams, FrequencyAttention, GapAttention, fat_attention, gap_attention
from fadconv.gradsuite import COMPOSITE_TOL, PRIMITIVE_TOL, run_suite
from fadconv.metrics import ConfusionMatrix, compute
from fadconv.model import ModelConfig, train
from fadconv.nn import ConvGeometry, conv2d, layer_rng

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance_cache" / "runs.json"
SEEDS = (0, 1, 2)

# final-epoch test mIoU of the reference runs, checked at abs 0.01
PINNED = {
    ("static", 0): 0.9578, ("static", 1): 0.9600, ("static", 2): 0.9669,
    ("fadconv", 0): 0.9710, ("fadconv", 1): 0.9759, ("fadconv", 2): 0.9750,
    ("dyconv", 0): 0.9707, ("dyconv", 1): 0.9795, ("dyconv", 2): 0.9757,
    ("fadconv_sum", 0): 0.9515, ("fadconv_sum", 1): 0.9508, ("fadconv_sum", 2): 0.9515,
}


# ---------------------------------------------------------------- 1, 2: DCT


def test_criterion_1_dct_round_trip_and_parseval(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_rt = worst_pv = 0.0
    for n in (2, 4, 8, 16, 32):
        x = rng.standard_normal((1000, n, n))
        spec = freq.dct2d(x)
        worst_rt = max(worst_rt, float(np.max(np.abs(freq.idct2d(spec) - x))))
        e_x, e_s = (x ** 2).sum(axis=(1, 2)), (spec ** 2).sum(axis=(1, 2))
        worst_pv = max(worst_pv, float(np.max(np.abs(e_s - e_x) / e_x)))
    secs = time.perf_counter() - t0
    ok = worst_rt <= 1e-12 and worst_pv <= 1e-9 and secs < 10
    assert verdict(1, ok, f"round_trip={worst_rt:.2e} parseval_rel={worst_pv:.2e} seconds={secs:.2f}")


def test_criterion_2_energy_identities(verdict):
    rng = np.random.default_rng(2)
    worst_dc = worst_e = worst_gap = 0.0
    for i in range(1000):
        n = (2, 4, 8, 16, 32)[i % 5]
        x = rng.standard_normal((n, n)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        f00 = freq.dct2d(x)[0, 0]
        mu = x.mean()
        worst_dc = max(worst_dc, abs(f00 - n * mu) / abs(n * mu))
        worst_e = max(worst_e, abs(f00 ** 2 - n * n * mu * mu) / (n * n * mu * mu))
        worst_gap = max(worst_gap, abs(mu - freq.extract_freq_block(freq.dct2d(x), 1)[0] / n))
    ok = worst_dc <= 1e-9 and worst_e <= 1e-9 and worst_gap <= 1e-12
    assert verdict(2, ok, f"dc_rel={worst_dc:.2e} energy_rel={worst_e:.2e} gap_abs={worst_gap:.2e}")


# ---------------------------------------------------------------- 3: attention


def test_criterion_3_attention_contract(verdict):
    rng = np.random.default_rng(3)
    worst, bounded, inputs, uniform = 0.0, True, 0, True
    shapes = [(4, 8, 8), (6, 11, 9), (16, 32, 32), (3, 5, 7), (8, 2, 2)]
    for i in range(100):
        c, h, w = shapes[i % len(shapes)]
        k = int(rng.integers(1, 9))
        p = int(rng.choice([2, 4, 8, 16]))
        n = int(rng.integers(1, min(p, h, w) + 1))
        fusion = ("sum", "abs_sum", "learned", "fca")[i % 4]
        hp = FatParams(c, k, p, min(n, p), int(rng.integers(1, 5)), fusion)
        mods = [FrequencyAttention(hp, layer_rng(i, "fat")), GapAttention(hp, layer_rng(i, "gap"))]
        for m in mods:
            for _, prm in m.named_params():
                prm.value += rng.standard_normal(prm.value.shape)
        x = rng.standard_normal((10, c, h, w)) * rng.uniform(0.1, 20)
        for a in (fat_attention(x, mods[0]), gap_attention(x, mods[1])):
            worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1))))
            bounded &= bool(np.all((a >= 0) & (a <= 1)))
        inputs += len(x)
        for m in mods:
            m.zero_expansion()
            uniform &= bool(np.array_equal(m.forward(x), np.full((10, k), 1 / k)))
    ok = worst <= 1e-6 and bounded and uniform and inputs >= 1000
    assert verdict(3, ok, f"inputs={inputs} max_row_sum_err={worst:.2e} in_unit_interval={bounded} "
                          f"zero_init_uniform={uniform}")


# ---------------------------------------------------------------- 4: aggregation


def test_criterion_4_aggregation_linearity(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(200):
        groups = int(rng.choice([1, 2]))
        c_in, c_out = groups * int(rng.integers(1, 5)), groups * int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        geom = ConvGeometry(c_in, c_out, k, int(rng.integers(1, 3)), k // 2, groups=groups)
        n_exp = int(rng.integers(1, 9))
        bank = ExpertBank(geom, n_exp, i, "bank", bias=True)
        bank.biases.value[:] = rng.standard_normal(bank.biases.value.shape)
        x = rng.standard_normal((int(rng.integers(1, 4)), c_in, int(rng.integers(4, 10)), int(rng.integers(4, 10))))
        a = rng.dirichlet(np.ones(n_exp), size=len(x))
        w, b = aggregate(bank, a)
        lhs = conv2d(x, w, b, geom)
        rhs = sum(a[:, e, None, None, None] * conv2d(x, bank.experts.value[e], bank.biases.value[e], geom)
                  for e in range(n_exp))
        worst = max(worst, float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs))))
    geom = ConvGeometry(4, 6, 3, 1, 1)
    x = rng.standard_normal((3, 4, 9, 9))
    k1 = DynamicConv2d(geom, FatParams(4, 1, 8, 4, 2), 7, "L")
    k1_err = float(np.max(np.abs(k1.forward(x) - ConvBNAct(geom, 7, "L").forward(x))))
    hot = DynamicConv2d(geom, FatParams(4, 4, 8, 4, 2), 7, "L")
    hot_err = 0.0
    for e in range(4):
        hot.fixed_alphas = np.eye(4)[e]
        hot_err = max(hot_err, float(np.max(np.abs(hot.forward(x) - static_equivalent(hot, e).forward(x)))))
    ok = worst <= 1e-10 and k1_err <= 1e-12 and hot_err <= 1e-12
    assert verdict(4, ok, f"instances=200 max_rel={worst:.2e} k1_abs={k1_err:.1e} one_hot_abs={hot_err:.1e}")


# ---------------------------------------------------------------- 5: gradients


def test_criterion_5_gradient_suite(verdict):
    t0 = time.perf_counter()
    entries = run_suite(seed=0, eps=1e-5)
    secs = time.perf_counter() - t0
    for e in entries:
        print(e.line())
    tols = {e.name: e.tol for e in entries}
    primitives = [n for n, t in tols.items() if t == PRIMITIVE_TOL]
    composites = [n for n, t in tols.items() if t == COMPOSITE_TOL]
    ok = (all(e.passed for e in entries) and secs < 300 and {"conv3x3", "dense", "batchnorm_train"} <= set(primitives)
          and "tiny_model" in composites and any(n.startswith("fadconv_layer") for n in composites))
    worst = max(entries, key=lambda e: e.result.max_rel_error)
    assert verdict(5, ok, f"checks={len(entries)} worst={worst.name}:{worst.result.max_rel_error:.2e} "
                          f"seconds={secs:.1f}")


# ---------------------------------------------------------------- 6: cost model


def test_criterion_6_cost_model(verdict):
    mismatches, cases = [], 0
    for c_in in (8, 16, 32):
        for c_out in (8, 16, 32):
            for k in (1, 3):
                for n_exp in (2, 4, 6, 8):
                    for p in (8, 16, 32):
                        geom = ConvGeometry(c_in, c_out, k, 1, k // 2)
                        layer = DynamicConv2d(geom, FatParams(c_in, n_exp, p, 4, 4), 0, "L")
                        row = instrument(layer, (1, c_in, 32, 32)).row("L")
                        e = analytic_extra_madds(geom, n_exp, p, 4)
                        cases += 1
                        if (row.dct, row.fat, row.dyn_kernel, row.madds) != (
                                e.dct, e.fat, e.dynamic_kernel, 32 * 32 * c_in * c_out * k * k):
                            mismatches.append((c_in, c_out, k, n_exp, p))
    static_bad = 0
    rng = np.random.default_rng(6)
    for _ in range(50):
        g = int(rng.choice([1, 2, 4]))
        geom = ConvGeometry(4 * int(rng.integers(1, 4)), g * int(rng.integers(1, 5)), int(rng.choice([1, 3, 5])),
                            int(rng.integers(1, 3)), int(rng.integers(0, 3)), groups=g)
        h, w = int(rng.integers(8, 20)), int(rng.integers(8, 20))
        ho, wo = (h + 2 * geom.padding - geom.kernel_size) // geom.stride + 1, (w + 2 * geom.padding - geom.kernel_size) // geom.stride + 1
        got = instrument(ConvBNAct(geom, 0, "c"), (1, geom.in_channels, h, w)).row("c").madds
        want = ho * wo * geom.in_channels * geom.out_channels * geom.kernel_size ** 2 // g
        static_bad += got != want or got != conv_madds(geom, ho, wo)
    ok = not mismatches and static_bad == 0
    assert verdict(6, ok, f"grid_cases={cases} grid_mismatches={len(mismatches)} static_mismatches={static_bad}/50")


# ---------------------------------------------------------------- 7: metrics


def _brute_force(true, pred, k):
    n = true.size
    per_class = []
    for c in range(k):
        tp = fp = fn = tn = 0
        for t, p in zip(true.ravel().tolist(), pred.ravel().tolist()):
            tp += t == c and p == c
            fp += t != c and p == c
            fn += t == c and p != c
            tn += t != c and p != c
        prec = tp / (tp + fp) if tp + fp else None
        rec = tp / (tp + fn) if tp + fn else None
        f1 = None if tp + fp + fn == 0 else 0.0 if tp == 0 else 2 / (1 / prec + 1 / rec)
        iou = tp / (tp + fp + fn) if tp + fp + fn else None
        per_class.append(((tp + tn) / n, prec, rec, f1, iou))
    oa = sum(t == p for t, p in zip(true.ravel().tolist(), pred.ravel().tolist())) / n
    ious = [c[4] for c in per_class if c[4] is not None]
    return oa, per_class, sum(ious) / len(ious)


def test_criterion_7_metrics_oracle(verdict):
    rng = np.random.default_rng(7)
    exact = 0
    for i in range(100):
        k = (2, 3, 6)[i % 3]
        t = rng.integers(0, k, (32, 32))
        p = np.where(rng.random((32, 32)) < 0.6, t, rng.integers(0, k, (32, 32)))
        rep = compute(ConfusionMatrix(k).update(t, p))
        oa, per, miou = _brute_force(t, p, k)
        got = [(c.acc, c.precision, c.recall, c.f1, c.iou) for c in rep.per_class]
        exact += rep.oa == oa and got == per and rep.miou == miou
    true = np.array([1, 1, 1, 0, 1, 1, 0, 0, 0, 0])
    pred = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    c1 = compute(ConfusionMatrix(2).update(true, pred)).per_class[1]
    hand = (c1.precision == 0.75 and c1.recall == 0.6 and abs(c1.f1 - 2 / 3) < 1e-12
            and c1.iou == 0.5 and c1.acc == 0.7)
    assert verdict(7, exact == 100 and hand, f"exact_pairs={exact}/100 hand_case={hand}")


# ---------------------------------------------------------------- 8, 9: training experiments


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "fadconv").rglob("*.py")):
        h.update(path.relative_to(ROOT).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _run_key(cfg: ModelConfig, spec: DatasetSpec, digest: str) -> str:
    blob = json.dumps({"model": cfg.to_json(), "data": spec.to_json(), "src": digest})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _experiment(kind: str, seed: int, fusion: str = "learned") -> dict:
    cfg = ModelConfig(conv_kind=kind, seed=seed, fusion=fusion, dtype="float32",
                      num_experts=4, poolsize=16, freq_side=4, epochs=20)
    spec = DatasetSpec(seed=seed, count=640, size=64)
    key = _run_key(cfg, spec, _source_digest())
    cache = json.loads(CACHE.read_text()) if CACHE.exists() else {}
    if key in cache and not os.environ.get("FADCONV_ACCEPTANCE_FRESH"):
        return cache[key]
    splits = generate(spec)
    (xtr, ytr), (xte, yte) = stack(splits["train"]), stack(splits["test"])
    assert (len(xtr), len(xte)) == (512, 128)
    t0 = time.perf_counter()
    _, log = train(cfg, xtr, ytr, xte, yte)
    m = log[-1]["metrics"]
    result = {"kind": kind, "seed": seed, "fusion": fusion, "miou": m.miou, "oa": m.oa,
              "seconds": time.perf_counter() - t0}
    cache = json.loads(CACHE.read_text()) if CACHE.exists() else {}
    cache[key] = result
    CACHE.parent.mkdir(exist_ok=True)
    CACHE.write_text(json.dumps(cache, indent=1) + "\n")
    return result


@pytest.fixture(scope="session")
def experiments():
    runs = {}
    for name, kind, fusion in (("static", "static", "learned"), ("fadconv", "fadconv", "learned"),
                               ("dyconv", "dyconv", "learned"), ("fadconv_sum", "fadconv", "sum")):
        runs[name] = [_experiment(kind, s, fusion) for s in SEEDS]
        for r in runs[name]:
            print(f"{name} seed={r['seed']} miou={r['miou']:.4f} oa={r['oa']:.4f} seconds={r['seconds']:.0f}")
    return runs


def _mean(runs):
    return float(np.mean([r["miou"] for r in runs]))


def _pins_hold(runs) -> bool:
    return all(abs(r["miou"] - PINNED[(name, r["seed"])]) <= 0.01
               for name, rs in runs.items() for r in rs if (name, r["seed"]) in PINNED)


@pytest.mark.slow
def test_criterion_8_fadconv_beats_static(verdict, experiments):
    static, fad = _mean(experiments["static"]), _mean(experiments["fadconv"])
    secs = sum(r["seconds"] for name in ("static", "fadconv") for r in experiments[name])
    pins = _pins_hold({k: experiments[k] for k in ("static", "fadconv")})
    ok = fad >= static + 0.005 and secs <= 45 * 60 and pins
    assert verdict(8, ok, f"fadconv_miou={fad:.4f} static_miou={static:.4f} delta={100 * (fad - static):+.2f}pts "
                          f"train_seconds={secs:.0f} pins_hold={pins}")


@pytest.mark.slow
def test_criterion_9_ablation_direction(verdict, experiments):
    fad, dy = _mean(experiments["fadconv"]), _mean(experiments["dyconv"])
    learned, summed = fad, _mean(experiments["fadconv_sum"])
    pins = _pins_hold({k: experiments[k] for k in ("dyconv", "fadconv_sum")})
    ok = fad >= dy - 0.002 and learned >= summed - 0.002 and pins
    assert verdict(9, ok, f"fat_miou={fad:.4f} gap_miou={dy:.4f} learned_miou={learned:.4f} "
                          f"sum_miou={summed:.4f} pins_hold={pins}")


# ---------------------------------------------------------------- 10: heatmaps


def _heatmap_images():
    rng = np.random.default_rng(10)
    yy, xx = np.mgrid[0:48, 0:48]
    sample = np.rint(generate(DatasetSpec(seed=10, count=5, size=48))["train"][0].image * 255)
    return {
        "noise": rng.integers(0, 256, (48, 48)),
        "ramp": (xx * 5 + yy) % 256,
        "disc": np.where((xx - 20) ** 2 + (yy - 28) ** 2 < 150, 220, 30),
        "texture": sample[0],
        "rgb": sample,
        "wide": rng.integers(0, 256, (3, 20, 36)),
    }


def test_criterion_10_heatmap(verdict, tmp_path, capsys):
    failures = []
    for name, img in _heatmap_images().items():
        path = tmp_path / f"{name}.{'ppm' if np.ndim(img) == 3 else 'pgm'}"
        write_image(path, np.asarray(img, dtype=np.uint8))
        if cli_main(["heatmap", "--image", str(path), "--n", "4", "--out", str(tmp_path)]) != 0:
            failures.append(f"{name}:exit")
            continue
        gap = read_image(tmp_path / f"{name}_gap_n4.pgm")
        fmap = read_image(tmp_path / f"{name}_freq_n4.pgm")
        if np.var(gap) != 0 or not np.var(fmap) > 0:
            failures.append(f"{name}:variance")
        channel = (read_image(path).astype(np.float64) / 255.0)
        channel = channel[0] if channel.ndim == 3 else channel
        side = min(channel.shape)
        full, _ = freq.attention_heatmap(channel, side)
        if np.max(np.abs(full - freq.resampled_channel(channel))) > 1e-9:
            failures.append(f"{name}:full_side")
    capsys.readouterr()
    ok = not failures
    assert verdict(10, ok, f"images={len(_heatmap_images())} failures={failures or 'none'}")
