"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical failure (non-finite loss). Failures print one line to stderr of
the form ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import experiments as ex
from . import nn, plotting
from .config import CONFIG_KEYS, RunConfig, load_config, parse_schedule, save_config
from .data import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, ConsistencyError, FormatError, NumericalError
from .gsm import approx_passive_decay, iterations_to_threshold, passive_decay_curve
from .pruning import SENSITIVITY_RATIOS, global_magnitude_prune

log = logging.getLogger("gsmprune")

OUTPUT_ROOT_ENV = "GSM_OUTPUT_ROOT"

_FIELD_TYPES = {
    "mode": str, "model": str, "dataset": str, "data_dir": str, "train_size": int,
    "test_size": int, "seed": int, "batch_size": int, "beta": float, "eta": float,
    "lr_schedule": parse_schedule, "compression": float, "q": int, "tau": float,
    "base_beta": float, "base_lr_schedule": parse_schedule, "eval_interval": int,
    "output_dir": str, "base_checkpoint": str,
}
assert set(_FIELD_TYPES) | {"full_reproduction"} == set(CONFIG_KEYS)

_FIELD_HELP = {
    "mode": "base, gsm, gsm_no_reselection or lottery",
    "model": "lenet-300-100, lenet-5 or mlp:D0-D1-...",
    "dataset": "mnist or synthetic",
    "data_dir": "directory holding the MNIST IDX files",
    "train_size": "use only the first N training examples",
    "test_size": "use only the first N test examples",
    "seed": "master seed for init, shuffling and synthetic data",
    "batch_size": "minibatch size",
    "beta": "GSM momentum coefficient",
    "eta": "weight-decay coefficient",
    "lr_schedule": "GSM stages as epochs:alpha[,epochs:alpha...]",
    "compression": "target compression ratio C (Q = floor(|Theta|/C))",
    "q": "number of active kernel entries; overrides --compression",
    "tau": "passive-decay target used to check the schedule",
    "base_beta": "momentum for base and ticket training",
    "base_lr_schedule": "base stages as epochs:alpha[,...]",
    "eval_interval": "iterations between metric rows",
    "output_dir": "artifact directory (default $GSM_OUTPUT_ROOT or runs)",
    "base_checkpoint": "dense checkpoint that GSM training starts from",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML file of run-config keys")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    g = p.add_argument_group("run-config keys (each mirrors the config key of the same name)")
    for key, kind in _FIELD_TYPES.items():
        flag = "--" + key.replace("_", "-")
        g.add_argument(flag, dest=key, type=kind, default=None, metavar=key.upper(),
                       help=_FIELD_HELP[key])
    g.add_argument("--full-reproduction", dest="full_reproduction", action="store_true",
                   default=None, help="240-epoch schedules with 60x / 125x compression")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsmprune", description="Global Sparse Momentum SGD training and pruning.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train-base", help="train a dense model with momentum SGD")
    _add_config_flags(p)

    p = sub.add_parser("train-gsm", help="GSM-train a base checkpoint, then prune to Q")
    _add_config_flags(p)

    p = sub.add_parser("prune", help="global magnitude pruning of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")

    p = sub.add_parser("sensitivity", help="single-layer pruning sensitivity")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--gsm-checkpoint", metavar="PATH",
                   help="GSM-pruned checkpoint whose per-layer nonzero ratios are compared")
    p.add_argument("--ratios", default=",".join(map(str, SENSITIVITY_RATIOS)),
                   metavar="R1,R2,...")

    p = sub.add_parser("lottery", help="magnitude vs GSM winning tickets")
    _add_config_flags(p)

    p = sub.add_parser("predict-decay", help="passive-update decay calculus")
    p.add_argument("--alpha", type=float, default=5e-3)
    p.add_argument("--eta", type=float, default=5e-4)
    p.add_argument("--beta", type=float, default=0.98)
    p.add_argument("--tau", type=float, default=1e-4)
    p.add_argument("--curve-length", type=int, default=0, metavar="K",
                   help="also write exact/approximate curves of K steps (0 = k itself)")
    p.add_argument("--output-dir", dest="output_dir", metavar="DIR")
    return parser


def _parse_value(key: str, text: str):
    if key not in _FIELD_TYPES and key != "full_reproduction":
        raise ConfigError(f"unknown config key {key!r}")
    if key in ("lr_schedule", "base_lr_schedule") and ":" in text:
        return parse_schedule(text)
    return yaml.safe_load(text)


def resolve_config(args: argparse.Namespace, mode: str | None = None) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for item in args.overrides:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        values[key.strip().replace("-", "_")] = _parse_value(key.strip().replace("-", "_"), text)
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    values.setdefault("output_dir", os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    if mode is not None and not (mode == "gsm" and values.get("mode") == "gsm_no_reselection"):
        values["mode"] = mode
    return RunConfig.from_dict(values)


def _write_rows(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_train_base(args):
    config = resolve_config(args, "base")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.yaml", config)
    result = ex.train_base(config)
    if result.metrics:
        plotting.plot_metrics({"base": result.metrics}, out / "base_metrics.png")
    print(f"top1={result.top1:.4f} checkpoint={out / 'base.ckpt'}")


def cmd_train_gsm(args):
    config = resolve_config(args, "gsm")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.yaml", config)
    base = ex.load_base(config)
    ex.resolve_q(config, base.num_kernel_params)
    if config.mode == "gsm_no_reselection":
        result, prefix = ex.train_gsm_no_reselection(config, base_params=base), "gsm_frozen"
    else:
        result, prefix = ex.train_gsm(config, base_params=base), "gsm"
    if result.metrics:
        plotting.plot_metrics({prefix: result.metrics}, out / f"{prefix}_metrics.png")
    print(f"q={result.q} top1={result.top1:.4f} pruned_top1={result.pruned_top1:.4f} "
          f"compression={result.report.compression_ratio:.2f}")


def cmd_prune(args):
    config = resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    q = ex.resolve_q(config, ckpt.params.num_kernel_params)
    pruned, report = global_magnitude_prune(ckpt.params, q)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        test = _test_set(config, ckpt.model)
        report.accuracy_before = nn.evaluate(ckpt.model, ckpt.params, test)[0]
        report.accuracy_after = nn.evaluate(ckpt.model, pruned, test)[0]
    except FileNotFoundError:
        log.warning("dataset unavailable; pruning report omits accuracies")
    save_checkpoint(out / "pruned.ckpt", Checkpoint(ckpt.model, pruned, meta={
        "kind": "pruned", "q": q, "top1": report.accuracy_after}))
    (out / "prune_report.txt").write_text(report.summary() + "\n")
    report.write_csv(out / "prune_report.csv")
    print(f"q={q} compression={report.compression_ratio:.2f} checkpoint={out / 'pruned.ckpt'}")


def _test_set(config: RunConfig, model: nn.ModelSpec):
    if model.name in nn.MODELS:
        config = config.replace(model=model.name)
    return ex.load_data(config)[1]


def cmd_eval(args):
    config = resolve_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    top1, loss = nn.evaluate(ckpt.model, ckpt.params, _test_set(config, ckpt.model))
    stored = ckpt.meta.get("top1")
    line = f"top1={top1:.4f} loss={loss:.4f}"
    if stored is not None:
        line += f" checkpoint_top1={stored:.4f}"
    print(line)


def cmd_sensitivity(args):
    config = resolve_config(args)
    try:
        ratios = [float(r) for r in args.ratios.split(",")]
    except ValueError:
        raise ConfigError(f"bad ratio list {args.ratios!r}") from None
    ckpt = load_checkpoint(args.checkpoint)
    gsm = load_checkpoint(args.gsm_checkpoint).params if args.gsm_checkpoint else None
    test = _test_set(config, ckpt.model)
    res = ex.sensitivity_experiment(ckpt.model, ckpt.params, test, ratios, gsm)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["layer", *[f"top1_prune_{r:g}" for r in ratios]]
    if res.nonzero is not None:
        header.append("gsm_nonzero_fraction")
    rows = []
    for i in range(res.accuracy.shape[0]):
        row = [i, *(f"{a:.6g}" for a in res.accuracy[i])]
        if res.nonzero is not None:
            row.append(f"{res.nonzero[i]:.6g}")
        rows.append(row)
    _write_rows(out / "sensitivity.csv", header, rows)
    plotting.plot_sensitivity(res.accuracy, ratios, out / "sensitivity.png", res.nonzero)
    print(f"baseline_top1={res.baseline:.4f}")
    for row in rows:
        print(",".join(map(str, row)))
    if res.nonzero is not None:
        rho_pruned, rho_kept = res.spearman(0)
        print(f"spearman(drop, 1-nonzero)={rho_pruned:.3f} spearman(drop, nonzero)={rho_kept:.3f}")


def cmd_lottery(args):
    config = resolve_config(args, "lottery")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.yaml", config)
    res = ex.lottery_experiment(config)
    _write_rows(out / "lottery.csv", ["seed", "q", "magnitude_top1", "gsm_top1"],
                [[config.seed, res.q, f"{res.magnitude_top1:.6g}", f"{res.gsm_top1:.6g}"]])
    print(json.dumps({"q": res.q, **res.table()}))


def cmd_predict_decay(args):
    try:
        k = iterations_to_threshold(args.alpha, args.eta, args.beta, args.tau)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"k={k}")
    out_dir = args.output_dir or os.environ.get(OUTPUT_ROOT_ENV)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        length = args.curve_length or k
        exact = passive_decay_curve(args.alpha, args.eta, args.beta, length)
        approx = approx_passive_decay(args.alpha, args.eta, args.beta, range(length + 1))
        _write_rows(out / "decay_curve.csv", ["k", "exact", "approx"],
                    [[i, f"{e:.6g}", f"{a:.6g}"] for i, (e, a) in enumerate(zip(exact, approx))])
        plotting.plot_decay(args.alpha, args.eta, sorted({0.9, 0.95, 0.98, 0.99, args.beta}),
                            length, out / "decay.png", representative=args.beta)


COMMANDS = {
    "train-base": cmd_train_base, "train-gsm": cmd_train_gsm, "prune": cmd_prune,
    "eval": cmd_eval, "sensitivity": cmd_sensitivity, "lottery": cmd_lottery,
    "predict-decay": cmd_predict_decay,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ConsistencyError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return 4
    return 0


def main() -> None:
    sys.exit(run())
