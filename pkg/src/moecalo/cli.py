"""Command-line entry point: ``moecalo {synth,train,eval,generate,bench,ablate}``.

Settings are resolved as command-line flags > TOML config > built-in defaults.
The config file may carry top-level ``seed`` and ``output_dir`` plus one table
per command (``[synth]``, ``[train]``, ``[eval]``, ``[bench]``, ``[ablate]``).
When no output directory is given anywhere, ``$MOECALO_OUTPUT_DIR`` is used.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from moecalo.dataset import CalorimeterSpec, SchemaError, load_dataset, save_dataset, split
from moecalo.losses import HyperParams
from moecalo.models import ModelConfig
from moecalo.synthgen import SynthConfig, synthesize

FORMAT_VERSION = 1
ENV_OUTPUT_DIR = "MOECALO_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "moecalo_out"

# rows of the router-weight grid: default, then one change at a time
LAMBDA_GRID = (
    (0.01, 1e-4),
    (0.1, 1e-4),
    (0.001, 1e-5),
    (0.01, 1e-3),
    (0.01, 1e-6),
    (0.01, 0.0),
    (0.0, 1e-4),
)

log = logging.getLogger("moecalo")


class ValidationError(Exception):
    """Bad user input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


# ----------------------------------------------------------------- config plumbing

def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from exc


def resolve(args: argparse.Namespace, config: dict, section: str, defaults: dict) -> dict:
    """Merge defaults, then the config section (and top-level globals), then flags."""
    out = dict(defaults)
    for key in ("seed", "output_dir"):
        if key in config and key in out:
            out[key] = config[key]
    scoped = config.get(section, {})
    if not isinstance(scoped, dict):
        raise ValidationError(f"config section [{section}] must be a table")
    for key, value in scoped.items():
        if key not in out:
            raise ValidationError(f"unknown key {key!r} in config section [{section}]")
        out[key] = value
    for key, value in vars(args).items():
        if key in out and value is not None:
            out[key] = value
    if "output_dir" in out and out["output_dir"] is None:
        out["output_dir"] = os.environ.get(ENV_OUTPUT_DIR, DEFAULT_OUTPUT_DIR)
    return out


def _plain(value):
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_effective_config(path: Path, section: str, settings: dict) -> Path:
    """Write the resolved settings as a config that can be passed back verbatim."""
    clean = {k: _plain(v) for k, v in settings.items() if v is not None}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps({section: clean}))
    return path


def _require(settings: dict, key: str, command: str):
    if settings.get(key) in (None, ""):
        raise ValidationError(f"{command}: missing required field {key!r}")
    return settings[key]


def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _spec(name: str, height=None, width=None) -> CalorimeterSpec:
    try:
        return CalorimeterSpec.from_name(name, height, width)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


# ----------------------------------------------------------------- synth

SYNTH_DEFAULTS = {
    "output_dir": None,
    "out": None,
    "seed": 0,
    "detector": "DESK",
    "height": 16,
    "width": 16,
    "n_samples": 6000,
    "mode_fractions": [1 / 3, 1 / 3, 1 / 3],
    "intensity_ranges": [list(r) for r in SynthConfig().intensity_ranges],
    "spread_ranges": [list(r) for r in SynthConfig().spread_ranges],
}


def cmd_synth(args, config) -> int:
    s = resolve(args, config, "synth", SYNTH_DEFAULTS)
    spec = _spec(s["detector"], s["height"], s["width"])
    try:
        cfg = SynthConfig(
            spec=spec,
            n_samples=int(s["n_samples"]),
            seed=int(s["seed"]),
            mode_fractions=tuple(s["mode_fractions"]),
            intensity_ranges=tuple(tuple(r) for r in s["intensity_ranges"]),
            spread_ranges=tuple(tuple(r) for r in s["spread_ranges"]),
        )
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"synth: {exc}") from exc
    out = Path(s["out"]) if s["out"] else Path(s["output_dir"]) / "synth.h5"
    cond, resp = synthesize(cfg)
    save_dataset(out, cond, resp, spec)
    if spec.name != "DESK":
        s["height"], s["width"] = spec.height, spec.width
    write_effective_config(out.with_suffix(".config.toml"), "synth", s)
    print(json.dumps({"format_version": FORMAT_VERSION, "archive": str(out), "n_samples": len(cond)}))
    return 0


# ----------------------------------------------------------------- train

_HP_KEYS = tuple(f.name for f in fields(HyperParams))
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))

def _train_defaults() -> dict:
    from moecalo.training import TrainConfig

    cfg = TrainConfig()
    keys = ("seed", "n_experts", "epochs", "batch_size", "lr_generator", "lr_discriminator",
            "lr_aux", "lr_router", "router_expert_loss", "freeze_router")
    return {
        "output_dir": None,
        "data": None,
        **{k: getattr(cfg, k) for k in keys},
        "split_ratio": 0.8,
        "split_seed": 0,
        **{k: getattr(cfg.hp, k) for k in _HP_KEYS},
        **{k: getattr(cfg.model, k) for k in _MODEL_KEYS},
    }


TRAIN_DEFAULTS = _train_defaults()


def _train_config(s: dict, spec: CalorimeterSpec):
    from moecalo.training import TrainConfig

    try:
        return TrainConfig(
            spec=spec,
            n_experts=int(s["n_experts"]),
            hp=HyperParams(**{k: float(s[k]) for k in _HP_KEYS}),
            model=ModelConfig(**{k: s[k] for k in _MODEL_KEYS}),
            batch_size=int(s["batch_size"]),
            epochs=int(s["epochs"]),
            lr_generator=float(s["lr_generator"]),
            lr_discriminator=float(s["lr_discriminator"]),
            lr_aux=float(s["lr_aux"]),
            lr_router=float(s["lr_router"]),
            seed=int(s["seed"]),
            freeze_router=bool(s["freeze_router"]),
            router_expert_loss=s["router_expert_loss"],
        )
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"train: {exc}") from exc


def _load_split(data_path: Path, ratio: float, seed: int, spec=None):
    try:
        cond, resp = load_dataset(data_path, spec)
        ids = split(len(cond), ratio, seed)
    except (SchemaError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    return cond, resp, ids


def run_training(s: dict, out_dir: Path, on_epoch=None):
    """Train from resolved settings and write checkpoint, report, metrics and config."""
    from moecalo.dataset import read_spec
    from moecalo.training import train

    data = _existing(_require(s, "data", "train"), "training archive")
    try:
        spec = read_spec(data)
    except SchemaError as exc:
        raise ValidationError(str(exc)) from exc
    cfg = _train_config(s, spec)
    cond, resp, ids = _load_split(data, float(s["split_ratio"]), int(s["split_seed"]))
    write_effective_config(out_dir / "train_config.toml", "train", s)
    model, report = train(cond[ids.train_ids], resp[ids.train_ids], cfg, out_dir=out_dir, on_epoch=on_epoch)
    metrics = {
        "format_version": FORMAT_VERSION,
        "final": report.final,
        "init_terms": report.init_terms,
        "counts_total": report.counts_total,
        "n_train": int(len(ids.train_ids)),
        "n_test": int(len(ids.test_ids)),
        "parameter_digest": _digest(model),
    }
    _dump(metrics, out_dir / "metrics.json")
    return model, report, (cond, resp, ids)


def _digest(model) -> str:
    from moecalo.training import parameter_digest

    return parameter_digest(model)


def cmd_train(args, config) -> int:
    s = resolve(args, config, "train", TRAIN_DEFAULTS)
    out_dir = Path(s["output_dir"])
    run_training(s, out_dir, on_epoch=lambda r: log.info("epoch %d %s", r["epoch"], r))
    print(json.dumps({"format_version": FORMAT_VERSION, "checkpoint": str(out_dir / "checkpoint.pt")}))
    return 0


# ----------------------------------------------------------------- eval / generate / bench

EVAL_DEFAULTS = {
    "output_dir": None,
    "checkpoint": None,
    "data": None,
    "seed": 0,
    "bins": 64,
    "split_ratio": 0.8,
    "split_seed": 0,
    "subset": "test",
    "plot": False,
}


def _load_model(path):
    from moecalo.training import MixtureOfExperts

    path = _existing(path, "checkpoint")
    try:
        return MixtureOfExperts.load(path)
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"unreadable checkpoint {path}: {exc}") from exc


def cmd_eval(args, config) -> int:
    from moecalo.evaluation import evaluate, export_histograms

    s = resolve(args, config, "eval", EVAL_DEFAULTS)
    ckpt = _require(s, "checkpoint", "eval")
    data = _existing(_require(s, "data", "eval"), "evaluation archive")
    if s["subset"] not in ("test", "all"):
        raise ValidationError("eval: subset must be 'test' or 'all'")
    model = _load_model(ckpt)
    cond, resp, ids = _load_split(data, float(s["split_ratio"]), int(s["split_seed"]))
    sel = ids.test_ids if s["subset"] == "test" else np.arange(len(cond))
    try:
        report = evaluate(model, cond[sel], resp[sel], seed=int(s["seed"]), bins=int(s["bins"]))
    except ValueError as exc:
        raise ValidationError(f"eval: {exc}") from exc
    out_dir = Path(s["output_dir"])
    report.save(out_dir / "eval.json")
    export_histograms(report, out_dir, plot=bool(s["plot"]))
    write_effective_config(out_dir / "eval_config.toml", "eval", s)
    print(json.dumps({"format_version": FORMAT_VERSION, "ws_mean": report.ws_mean,
                      "ws_per_channel": report.ws_per_channel}))
    return 0


GENERATE_DEFAULTS = {"output_dir": None, "checkpoint": None, "conditions": None, "out": None, "seed": 0}


def _read_conditions(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        cond = np.load(path)
    else:
        import h5py

        with h5py.File(path, "r") as f:
            if "conditions" not in f:
                raise ValidationError(f"{path} has no /conditions array")
            cond = f["conditions"][...]
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim != 2 or cond.shape[1] != 9 or not np.isfinite(cond).all():
        raise ValidationError(f"conditions must be a finite (N, 9) array, got shape {cond.shape}")
    return cond


def cmd_generate(args, config) -> int:
    s = resolve(args, config, "generate", GENERATE_DEFAULTS)
    model = _load_model(_require(s, "checkpoint", "generate"))
    cond = _read_conditions(_existing(_require(s, "conditions", "generate"), "conditions file"))
    out = Path(s["out"]) if s["out"] else Path(s["output_dir"]) / "generated.h5"
    resp, _ = model.generate(cond, seed=int(s["seed"]))
    save_dataset(out, cond, resp, model.spec)
    write_effective_config(out.with_suffix(".config.toml"), "generate", s)
    print(json.dumps({"format_version": FORMAT_VERSION, "archive": str(out), "n_samples": len(cond)}))
    return 0


BENCH_DEFAULTS = {"checkpoint": None, "n": 10_000, "device_label": "cpu", "seed": 0, "batch_size": 1024}


def cmd_bench(args, config) -> int:
    from moecalo.evaluation import benchmark_inference

    s = resolve(args, config, "bench", BENCH_DEFAULTS)
    model = _load_model(_require(s, "checkpoint", "bench"))
    if int(s["n"]) < 1:
        raise ValidationError("bench: n must be >= 1")
    result = benchmark_inference(model, int(s["n"]), s["device_label"], seed=int(s["seed"]),
                                 batch_size=int(s["batch_size"]))
    print(json.dumps(result))
    return 0


# ----------------------------------------------------------------- ablate

ABLATE_DEFAULTS = {
    **TRAIN_DEFAULTS,
    "experts": [1, 2, 3, 4, 5],
    "lambda_grid": [list(r) for r in LAMBDA_GRID],
}

ABLATE_COLUMNS = ("sweep", "n_experts", "lambda_util", "lambda_diff", "ws_mean", "min_util", "min_gap")


def cmd_ablate(args, config) -> int:
    from moecalo.evaluation import evaluate

    s = resolve(args, config, "ablate", ABLATE_DEFAULTS)
    base_dir = Path(s["output_dir"])
    runs = [("experts", int(n), s["lambda_util"], s["lambda_diff"]) for n in s["experts"]]
    runs += [("lambda", int(s["n_experts"]), float(lu), float(ld)) for lu, ld in s["lambda_grid"]]
    cache: dict[tuple, dict] = {}
    rows = []
    for sweep, n_exp, lu, ld in runs:
        key = (n_exp, lu, ld)
        if key not in cache:
            run = {**{k: s[k] for k in TRAIN_DEFAULTS}, "n_experts": n_exp, "lambda_util": lu, "lambda_diff": ld}
            run_dir = base_dir / f"e{n_exp}_u{lu:g}_d{ld:g}"
            model, report, (cond, resp, ids) = run_training(run, run_dir)
            ev = evaluate(model, cond[ids.test_ids], resp[ids.test_ids], seed=int(s["seed"]))
            means = sorted(m for m in report.final["mean_intensity_per_expert"] if m is not None)
            cache[key] = {
                "ws_mean": ev.ws_mean,
                "min_util": min(report.final["util_per_expert"]),
                "min_gap": min(np.diff(means)) if len(means) > 1 else float("nan"),
            }
        rows.append({"sweep": sweep, "n_experts": n_exp, "lambda_util": lu, "lambda_diff": ld, **cache[key]})
    base_dir.mkdir(parents=True, exist_ok=True)
    with open(base_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    write_effective_config(base_dir / "ablate_config.toml", "ablate", s)
    print(json.dumps({"format_version": FORMAT_VERSION, "summary": str(base_dir / "ablation.csv"), "rows": len(rows)}))
    return 0


# ----------------------------------------------------------------- parser

def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _add_train_flags(p):
    p.add_argument("--data", help="input HDF5 archive")
    p.add_argument("--n-experts", dest="n_experts", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    for name in ("lr_generator", "lr_discriminator", "lr_aux", "lr_router", *_HP_KEYS):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    for name in _MODEL_KEYS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--router-expert-loss", dest="router_expert_loss", choices=("detached", "assigned"))
    p.add_argument("--freeze-router", dest="freeze_router", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="moecalo",
        description="Mixture-of-generative-experts calorimeter simulation.",
        epilog="Precedence: command-line flags > config file > defaults. "
        f"Output directory falls back to ${ENV_OUTPUT_DIR}, then ./{DEFAULT_OUTPUT_DIR}.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, output=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int)
        if output:
            p.add_argument("--output-dir", dest="output_dir")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic training archive"))
    p.add_argument("--out", help="archive path (default: <output_dir>/synth.h5)")
    p.add_argument("--detector", choices=("ZP", "ZN", "DESK"))
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--mode-fractions", dest="mode_fractions", type=_floats)

    _add_train_flags(common(sub.add_parser("train", help="train a mixture of experts")))

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out data"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--bins", type=int)
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--subset", choices=("test", "all"))
    p.add_argument("--plot", action="store_true", default=None)

    p = common(sub.add_parser("generate", help="generate responses for given conditions"))
    p.add_argument("--checkpoint")
    p.add_argument("--conditions", help="HDF5 archive with /conditions or an (N, 9) .npy file")
    p.add_argument("--out")

    p = common(sub.add_parser("bench", help="time routing + generation"), output=False)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--device-label", dest="device_label")
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = common(sub.add_parser("ablate", help="expert-count and router-weight sweeps"))
    _add_train_flags(p)
    p.add_argument("--experts", type=_ints, help="comma-separated expert counts")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ValidationError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = load_config(args.config)
        return COMMANDS[args.command](args, config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
