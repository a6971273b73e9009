"""Command-line entry point: ``miat <subcommand> [--config FILE] [--section.key VALUE ...]``.

Configuration is one JSON object with the sections ``data``, ``model``,
``loss``, ``train``, ``eval`` and ``gradcheck``. Every leaf has an override
flag named after its dotted path (``--loss.lambda 200``,
``--model.grid.cell_length 5``). The effective configuration is written to
``<out-dir>/config.json``; passing that file back with ``--config``
reproduces the run.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import torch

from . import evaluation, ngsim, synthetic, training
from .model import ModelConfig, build_model, count_parameters

log = logging.getLogger("miat")

COMMANDS = ("preprocess", "synth", "train", "eval", "ablate", "gradcheck", "dump-trajectories")


class ConfigError(ValueError):
    """Invalid or incomplete configuration (exit code 1)."""


def default_config() -> dict:
    train = training.TrainConfig().to_dict()
    loss = {"lambda": train.pop("lambda"), "warmup_epochs": train.pop("warmup_epochs")}
    train.pop("seed")
    return {
        "seed": 0,
        "threads": 1,
        "data": {
            "dataset": None,
            "csv": None,
            "n_per_class": 30,
            "noise_sigma": 0.2,
            "n_neighbors": None,
            "n_anchors": 5,
            "stride": 1,
            "fractions": [0.7, 0.1, 0.2],
            "include_kinematics": False,
        },
        "model": ModelConfig().to_dict(),
        "loss": loss,
        "train": train,
        "eval": {
            "checkpoint": None,
            "split": "test",
            "cumulative": False,
            "lambdas": [1, 10, 50, 80, 100, 200],
            "seeds": None,
            "include_vanilla": False,
            "n_samples": 8,
        },
        "gradcheck": {"n_params": 200, "step": 1e-4, "seed": 0, "epoch": None},
    }


def _flatten(d: dict, prefix: str = "") -> Dict[str, object]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(d: dict, dotted: str, value) -> None:
    *path, leaf = dotted.split(".")
    for p in path:
        d = d.setdefault(p, {})
    d[leaf] = value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config field: {prefix}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config field {prefix}{k} must be an object")
            _merge(base[k], v, f"{prefix}{k}.")
        else:
            base[k] = v


def _parse_value(text: str, default):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(text).lower() in ("true", "1", "yes"):
            return True
        if str(text).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"expected an integer, got {text!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        return text
    return value


def build_parser() -> argparse.ArgumentParser:
    defaults = _flatten(default_config())
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("general")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--out-dir", type=Path, default=Path("."), help="directory for every output (default: .)")
    g.add_argument("--seed", type=int, help="seed for data generation, splitting and training")
    g.add_argument("--threads", type=int, help="cap on worker processes and torch threads")
    g.add_argument("--n-per-class", type=int, help="synthetic episodes per maneuver class")
    g.add_argument("--dataset", help="dataset file (same as --data.dataset)")
    g.add_argument("--checkpoint", help="checkpoint file (same as --eval.checkpoint)")
    g.add_argument("-v", "--verbose", action="store_true")
    o = common.add_argument_group("config overrides")
    for key, value in defaults.items():
        if key in ("seed", "threads"):
            continue
        o.add_argument(f"--{key}", dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="VALUE",
                       help=f"default: {json.dumps(value)}")

    parser = argparse.ArgumentParser(prog="miat", description="Maneuver-aware trajectory prediction toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "preprocess": "NGSIM-style CSV -> dataset file + stats",
        "synth": "generate a synthetic dataset",
        "train": "train a model on a dataset",
        "eval": "evaluate a checkpoint on a dataset split",
        "ablate": "lambda sweep with optional vanilla baseline",
        "gradcheck": "finite-difference gradient check (exit 1 if error >= 1e-4)",
        "dump-trajectories": "per-sample predictions as JSON for plotting",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        loaded.pop("command", None)
        _merge(cfg, loaded)
    flat = _flatten(default_config())
    for dest, text in vars(args).items():
        if dest.startswith("cfg:"):
            key = dest[4:]
            _set(cfg, key, _parse_value(text, flat[key]))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.n_per_class is not None:
        cfg["data"]["n_per_class"] = args.n_per_class
    if args.dataset is not None:
        cfg["data"]["dataset"] = args.dataset
    if args.checkpoint is not None:
        cfg["eval"]["checkpoint"] = args.checkpoint
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(copy.deepcopy(cfg["model"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def train_config(cfg: dict) -> training.TrainConfig:
    d = dict(cfg["train"])
    d.update(cfg["loss"])
    d["seed"] = cfg["seed"]
    try:
        return training.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train/loss config: {exc}") from exc


def _require(cfg: dict, dotted: str):
    section, key = dotted.split(".")
    value = cfg[section][key]
    if value in (None, ""):
        raise ConfigError(f"missing required field: {dotted} (set --{dotted} or --{key})")
    return value


def _load_split(cfg: dict):
    path = _require(cfg, "data.dataset")
    try:
        return ngsim.load_dataset(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"data.dataset not found: {path}") from exc


def _check_dims(split, mcfg: ModelConfig) -> None:
    T, F, D, C = ngsim._dims(split)
    want = (mcfg.history_len, mcfg.future_len, mcfg.input_dim, mcfg.grid.n_cells)
    if (T, F, D, C) != want:
        raise ConfigError(f"dataset has (history, future, features, cells) = {(T, F, D, C)} but the model "
                          f"expects {want}; set model.input_dim=4 for datasets built with kinematics")


def _load_model(cfg: dict):
    path = _require(cfg, "eval.checkpoint")
    try:
        ckpt = training.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"eval.checkpoint not found: {path}") from exc
    return ckpt.build(), ckpt


def _eval_samples(cfg: dict, split):
    name = cfg["eval"]["split"]
    if name not in ("train", "validation", "test"):
        raise ConfigError("eval.split must be train, validation or test")
    samples = getattr(split, name)
    if not samples:
        raise ConfigError(f"dataset has no {name} samples")
    return samples


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=evaluation._json_default) + "\n")


def _save_split(split, out: Path) -> None:
    ngsim.save_dataset(split, out / "dataset.bin")
    _write_json(out / "stats.json", ngsim.dataset_stats(split))
    log.info("wrote %s (%d samples)", out / "dataset.bin", len(split))


def cmd_preprocess(cfg: dict, out: Path) -> int:
    path = _require(cfg, "data.csv")
    d = cfg["data"]
    skipped: List[int] = []
    try:
        with open(path, newline="") as fh:
            records = ngsim.parse_records(fh, skipped)
    except FileNotFoundError as exc:
        raise ConfigError(f"data.csv not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if skipped:
        log.warning("skipped %d malformed rows", len(skipped))
    mcfg = model_config(cfg)
    records = ngsim.normalize_records(records)
    samples = ngsim.build_samples(records, mcfg.grid, mcfg.history_len, mcfg.future_len, d["stride"],
                                  include_kinematics=d["include_kinematics"], workers=cfg["threads"])
    split = ngsim.split_by_vehicle(samples, tuple(d["fractions"]), cfg["seed"])
    _save_split(split, out)
    return 0


def cmd_synth(cfg: dict, out: Path) -> int:
    d = cfg["data"]
    mcfg = model_config(cfg)
    split = synthetic.generate_dataset(
        cfg["seed"], d["n_per_class"], n_neighbors=d["n_neighbors"], noise_sigma=d["noise_sigma"],
        fractions=tuple(d["fractions"]), n_anchors=d["n_anchors"], history_len=mcfg.history_len,
        future_len=mcfg.future_len, grid=mcfg.grid, include_kinematics=d["include_kinematics"])
    _save_split(split, out)
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    split = _load_split(cfg)
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    _check_dims(split, mcfg)
    log.info("%s with %d parameters", tcfg.model_kind, count_parameters(build_model(mcfg, tcfg.model_kind)))
    try:
        result = training.train(split, mcfg, tcfg, out_dir=out)
    except training.TrainingDiverged as exc:
        training.save_checkpoint(exc.last_good, out / "checkpoint_last_good.bin")
        raise ConfigError(f"training diverged: {exc}") from exc
    test = split.test or split.validation or split.train
    model = result.model
    model.load_state_dict(result.best_state)
    metrics = evaluation.evaluate(model, test)
    metrics["best_epoch"] = result.best_epoch
    evaluation.write_report(evaluation.evaluation_report(metrics), out)
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    split = _load_split(cfg)
    model, _ = _load_model(cfg)
    samples = _eval_samples(cfg, split)
    metrics = evaluation.evaluate(model, samples, cumulative=cfg["eval"]["cumulative"])
    report = evaluation.evaluation_report(metrics)
    evaluation.write_report(report, out)
    row = {"model": [metrics.get(f"rmse_{h:g}s") for h in evaluation.HORIZONS_S]}
    evaluation.emit_plot_data({"mean_rmse": row}, out / "plots")
    print(Path(out / "report.txt").read_text(), end="")
    return 0


def cmd_ablate(cfg: dict, out: Path) -> int:
    split = _load_split(cfg)
    e = cfg["eval"]
    if not e["lambdas"]:
        raise ConfigError("eval.lambdas must be non-empty")
    seeds = e["seeds"] if e["seeds"] is not None else [cfg["seed"]]
    _check_dims(split, model_config(cfg))
    report = evaluation.ablation_sweep(split, model_config(cfg), train_config(cfg), e["lambdas"],
                                       seeds=seeds, include_vanilla=e["include_vanilla"], out_dir=out)
    evaluation.write_report(report, out)
    evaluation.emit_plot_data(report, out / "plots")
    print(Path(out / "report.txt").read_text(), end="")
    return 0


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    g = cfg["gradcheck"]
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    model = build_model(mcfg, tcfg.model_kind, seed=cfg["seed"]).double()
    samples = training.gradcheck_samples(model, mcfg, seed=g["seed"])
    result = training.gradient_check(model, samples, tcfg.loss, epoch=g["epoch"], n_params=g["n_params"],
                                     step=g["step"], seed=g["seed"])
    _write_json(out / "report.json", {
        "max_rel_error": result.max_rel_error, "n_checked": result.n_checked, "worst": result.worst,
        "groups": result.groups, "passed": result.passed, "kink_retries": result.skipped_kinks})
    print(f"max relative error {result.max_rel_error:.3e} over {result.n_checked} parameters "
          f"in {len(result.groups)} groups (worst: {result.worst})")
    return 0 if result.passed else 1


def cmd_dump(cfg: dict, out: Path) -> int:
    split = _load_split(cfg)
    model, ckpt = _load_model(cfg)
    if ckpt.train_cfg.model_kind != "miat":
        raise ConfigError("dump-trajectories needs a MIAT checkpoint")
    samples = _eval_samples(cfg, split)[: cfg["eval"]["n_samples"]]
    dumps = evaluation.trajectory_dump(model, samples)
    _write_json(out / "plots" / "trajectories.json", dumps)
    return 0


HANDLERS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-trajectories": cmd_dump,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, int(cfg["threads"])))
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        echo = {"command": args.command, **cfg}
        _write_json(out / "config.json", echo)
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, ngsim.DatasetFormatError, training.CheckpointError) as exc:
        print(f"miat {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
