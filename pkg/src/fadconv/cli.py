"""``fadconv`` command-line entry point.

Every subcommand takes ``--config PATH`` (JSON with optional ``model``,
``data`` and ``ablate`` sections), ``--seed``, ``--out`` and repeatable
``--set section.key=value`` overrides. Failures print one JSON line to stderr,
``{"error": kind, "key": path, "message": text}``, and exit 1. Usage errors
exit 2.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import freq
from .cost import instrument
from .data import DatasetSpec, PnmError, generate, load_dataset, read_image, save_dataset, stack, write_image
from .fat import FUSIONS
from .model import (
    Checkpoint,
    ModelConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    log_to_csv,
    train,
)

ABLATE_DEFAULTS = {
    "num_experts": [2, 4, 6, 8],
    "poolsize": [8, 16, 32],
    "fusion": list(FUSIONS),
    "attention": ["gap", "fat"],
    "seeds": [0],
    "sweeps": ["num_experts", "poolsize", "fusion", "attention"],
}
ABLATE_COLUMNS = ["config_hash", "seed", "sweep", "conv_kind", "num_experts", "poolsize", "fusion",
                  "epochs", "oa", "miou", "params", "madds", "extra_madds"]


class CliError(Exception):
    def __init__(self, kind: str, key: str, message: str):
        super().__init__(message)
        self.kind, self.key, self.message = kind, key, message


# ---------------------------------------------------------------- config


def _schema(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = default
    return out


SCHEMA = {
    "model": _schema(ModelConfig),
    "data": _schema(DatasetSpec),
    "ablate": ABLATE_DEFAULTS,
}


def _check_type(key: str, value, default):
    if default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise CliError("config", key, f"expected {type(default).__name__}, got {type(value).__name__}")


def resolve_config(raw: dict, overrides: list[str], seed: int | None) -> dict:
    """Merge defaults, file contents and overrides, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise CliError("config", "", "top level must be a JSON object")
    cfg = copy.deepcopy(SCHEMA)
    cfg["data"]["profiles"] = None
    for section, body in raw.items():
        if section not in SCHEMA:
            raise CliError("config", section, "unknown section")
        if not isinstance(body, dict):
            raise CliError("config", section, "section must be a JSON object")
        for key, value in body.items():
            _set(cfg, f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise CliError("usage", item, "override must look like section.key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set(cfg, key.strip(), value)
    if seed is not None:
        cfg["model"]["seed"] = seed
        cfg["data"]["seed"] = seed
    _validate(cfg)
    return cfg


def _set(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SCHEMA:
        raise CliError("config", key, "keys must be section.name with section in "
                       f"{sorted(SCHEMA)}")
    section, name = parts
    if name not in SCHEMA[section]:
        raise CliError("config", key, "unknown key")
    _check_type(key, value, SCHEMA[section][name])
    cfg[section][name] = value


def _validate(cfg: dict) -> None:
    for section, build in (("model", model_config), ("data", data_spec)):
        try:
            build(cfg)
        except (ValueError, TypeError, KeyError) as exc:
            msg = str(exc).strip("'\"")
            key = next((f"{section}.{k}" for k in cfg[section] if k in msg), section)
            raise CliError("config", key, msg) from exc
    ab = cfg["ablate"]
    for key, allowed in (("fusion", FUSIONS), ("attention", ("gap", "fat")), ("sweeps", tuple(ABLATE_DEFAULTS["sweeps"]))):
        for v in ab[key]:
            if v not in allowed:
                raise CliError("config", f"ablate.{key}", f"{v!r} not in {list(allowed)}")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_json(cfg["model"])


def data_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec.from_json(cfg["data"])


def canonical_json(obj) -> str:
    # key order comes from SCHEMA; split order is significant, so no sort_keys
    return json.dumps(obj, separators=(",", ":"))


def config_hash(model: dict, data: dict) -> str:
    return hashlib.sha256(canonical_json({"model": model, "data": data}).encode()).hexdigest()[:16]


def _echo(out: str, cfg: dict) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2)
        f.write("\n")


def _write(path: str, text: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(text)


def _load_config(args) -> dict:
    raw = {}
    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except OSError as exc:
            raise CliError("io", args.config, exc.strerror or str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise CliError("config", args.config, f"invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return resolve_config(raw, args.set, args.seed)


def _dataset(cfg: dict, data_dir: str | None):
    if data_dir:
        spec, splits = load_dataset(data_dir)
        # echo the dataset's own spec so the echoed config regenerates it
        cfg["data"] = spec.to_json()
    else:
        spec = data_spec(cfg)
        splits = generate(spec)
    for name in ("train", "test"):
        if name not in splits:
            raise CliError("data", name, "dataset has no such split")
    return spec, splits


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = data_spec(cfg)
    splits = generate(spec)
    save_dataset(args.out, spec, splits)
    _echo(args.out, cfg)
    print(f"wrote {sum(len(v) for v in splits.values())} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    mcfg = model_config(cfg)
    _, splits = _dataset(cfg, args.data)
    xtr, ytr = stack(splits["train"])
    xte, yte = stack(splits["test"])
    _echo(args.out, cfg)

    def progress(entry):
        m = entry.get("metrics")
        tail = "" if m is None else f" oa={m.oa:.4f} miou={m.miou:.4f}"
        print(f"epoch {entry['epoch']} loss={entry['train_loss']:.5f}{tail} ({entry['seconds']:.1f}s)", flush=True)

    try:
        ckpt, log = train(mcfg, xtr, ytr, xte, yte, progress=None if args.quiet else progress)
    except TrainingDiverged as exc:
        raise CliError("diverged", f"epoch={exc.epoch},batch={exc.batch}", str(exc)) from exc
    ckpt.save(os.path.join(args.out, "checkpoint.fadckpt"))
    _write(os.path.join(args.out, "log.csv"), log_to_csv(log, mcfg.num_classes))
    final = log[-1]["metrics"] if log else evaluate(ckpt, xte, yte)
    _write(os.path.join(args.out, "metrics.csv"), final.to_csv())
    print(final.table())
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("usage", "--checkpoint", "eval requires --checkpoint")
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise CliError("io", args.checkpoint, exc.strerror or str(exc)) from exc
    cfg = _load_config(args)
    if args.data is None and not args.config:
        cfg["data"].update(seed=ckpt.config.seed)
    _, splits = _dataset(cfg, args.data)
    x, y = stack(splits[args.split]) if args.split in splits else (None, None)
    if x is None:
        raise CliError("data", args.split, "dataset has no such split")
    report = evaluate(ckpt, x, y)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "metrics.csv"), report.to_csv())
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    entries = run_suite(seed=args.seed or 0, progress=lambda e: print(e.line(), flush=True))
    failed = [e.name for e in entries if not e.passed]
    if failed:
        raise CliError("gradcheck", ",".join(failed), f"{len(failed)} of {len(entries)} checks failed")
    return 0


def cmd_cost(args) -> int:
    cfg = _load_config(args)
    mcfg = model_config(cfg)
    model = build_model(mcfg)
    report = instrument(model, (1, mcfg.in_channels, mcfg.input_size, mcfg.input_size))
    text = report.to_csv()
    if args.out:
        _echo(args.out, cfg)
        _write(os.path.join(args.out, "cost.csv"), text)
    sys.stdout.write(text if args.format == "csv" else report.table() + "\n")
    return 0


def cmd_heatmap(args) -> int:
    if not args.image:
        raise CliError("usage", "--image", "heatmap requires --image")
    try:
        img = read_image(args.image).astype(np.float64) / 255.0
    except OSError as exc:
        raise CliError("io", args.image, exc.strerror or str(exc)) from exc
    except PnmError as exc:
        raise CliError("image", args.image, str(exc)) from exc
    if img.ndim == 3:
        if not 0 <= args.channel < img.shape[0]:
            raise CliError("usage", "--channel", f"channel {args.channel} outside [0, {img.shape[0]})")
        img = img[args.channel]
    try:
        freq_map, gap_map = freq.attention_heatmap(img, args.n)
    except ValueError as exc:
        raise CliError("usage", "--n", str(exc)) from exc
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    paths = {}
    for name, m in (("freq", freq_map), ("gap", gap_map)):
        paths[name] = os.path.join(out, f"{stem}_{name}_n{args.n}.pgm")
        pix = np.rint(freq.normalize01(m) * 255).astype(np.uint8)
        write_image(paths[name], pix)
        print(f"{name}: {paths[name]} variance={float(np.var(pix)):.6g}")
    return 0


def _read_done(path: str) -> set[tuple[str, str]]:
    if not os.path.exists(path):
        return set()
    with open(path, newline="") as f:
        return {(r["config_hash"], r["seed"]) for r in csv.DictReader(f)}


def ablation_runs(cfg: dict) -> list[tuple[str, dict]]:
    """One-factor-at-a-time variants of ``cfg['model']``, deduplicated."""
    base = dict(cfg["model"])
    if base["conv_kind"] == "static":
        base["conv_kind"] = "fadconv"
    ab = cfg["ablate"]
    runs, seen = [], set()
    for sweep in ab["sweeps"]:
        values = ab[sweep]
        for v in values:
            m = dict(base)
            if sweep == "attention":
                m["conv_kind"] = "fadconv" if v == "fat" else "dyconv"
            else:
                m[sweep] = v
            if m["conv_kind"] == "fadconv" and m["freq_side"] > m["poolsize"]:
                m["freq_side"] = m["poolsize"]
            key = canonical_json(m)
            if key not in seen:
                seen.add(key)
                runs.append((sweep, m))
    return runs


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = args.out or "."
    _echo(out, cfg)
    path = os.path.join(out, "ablate.csv")
    done = _read_done(path)
    new_file = not os.path.exists(path)
    seeds = [args.seed] if args.seed is not None else cfg["ablate"]["seeds"]
    cache = {}
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new_file:
            w.writerow(ABLATE_COLUMNS)
        for sweep, m in ablation_runs(cfg):
            for seed in seeds:
                m_seed = dict(m, seed=seed)
                d_seed = dict(cfg["data"], seed=seed)
                h = config_hash(m_seed, d_seed)
                if (h, str(seed)) in done:
                    print(f"skip {sweep} {h} seed={seed} (already recorded)")
                    continue
                if seed not in cache:
                    splits = generate(DatasetSpec.from_json(d_seed))
                    cache = {seed: (stack(splits["train"]), stack(splits["test"]))}
                (xtr, ytr), (xte, yte) = cache[seed]
                mcfg = ModelConfig.from_json(m_seed)
                _, log = train(mcfg, xtr, ytr, xte, yte)
                rep = log[-1]["metrics"] if log else evaluate_untrained(mcfg, xte, yte)
                cost = instrument(build_model(mcfg), (1, mcfg.in_channels, mcfg.input_size, mcfg.input_size))
                w.writerow([h, seed, sweep, mcfg.conv_kind, mcfg.num_experts, mcfg.poolsize, mcfg.fusion,
                            mcfg.epochs, repr(rep.oa), repr(rep.miou), cost.params, cost.madds, cost.extra])
                f.flush()
                done.add((h, str(seed)))
                print(f"{sweep} {mcfg.conv_kind} K={mcfg.num_experts} p={mcfg.poolsize} "
                      f"fusion={mcfg.fusion} seed={seed} miou={rep.miou:.4f}", flush=True)
    return 0


def evaluate_untrained(mcfg: ModelConfig, x, y):
    from .model import evaluate_model

    return evaluate_model(build_model(mcfg), x, y)


# ---------------------------------------------------------------- dispatch


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset into --out"),
    "train": (cmd_train, "train a model; writes checkpoint, per-epoch log and final metrics"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset split"),
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient suite"),
    "cost": (cmd_cost, "per-layer parameter and MAdds report for a model config"),
    "heatmap": (cmd_heatmap, "write GAP and low-frequency heatmaps for one image channel"),
    "ablate": (cmd_ablate, "sweep K, poolsize, fusion and attention kind; append results to ablate.csv"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fadconv", description="Frequency-aware dynamic convolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON config with model/data/ablate sections")
        p.add_argument("--seed", type=int, help="overrides model.seed and data.seed")
        p.add_argument("--out", metavar="DIR", help="output directory", required=name in ("gen-data", "train"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. model.num_experts=8 (repeatable)")
        if name in ("train", "eval"):
            p.add_argument("--data", metavar="DIR", help="dataset written by gen-data (default: generate in memory)")
        if name == "train":
            p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH")
            p.add_argument("--split", default="test")
        if name == "cost":
            p.add_argument("--format", choices=("csv", "table"), default="csv")
        if name == "heatmap":
            p.add_argument("--image", metavar="PATH", help="PGM or PPM image")
            p.add_argument("--channel", type=int, default=0)
            p.add_argument("--n", type=int, default=4, help="retained frequency side")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except CliError as exc:
        err = {"error": exc.kind, "key": exc.key, "message": exc.message}
    except (ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "key": "", "message": str(exc)}
    except OSError as exc:
        err = {"error": "io", "key": exc.filename or "", "message": exc.strerror or str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
