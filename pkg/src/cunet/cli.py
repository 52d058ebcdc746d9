"""Command-line entry point: ``cunet synth|train|eval|predict|gradcheck``.

Every subcommand prints one JSON object on success and exits 0. Failures print
one JSON line ``{"error": <kind>, "message": ...}`` to stderr and exit nonzero.

Config files are ``key = value`` lines (``#`` starts a comment) or a JSON object.
Command-line flags override file values.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import read_sample, read_split_dataset, read_dataset, split_dataset, synthesize, write_split_dataset
from .errors import ConfigError, ContractViolation, DegenerateBatchError, FormatError, NumericError
from .model import CUNet, CUNetConfig
from .train import TrainConfig, evaluate, load_model, predict, train

# model keys accepted in a training config; "model_seed" avoids clashing with the training seed
MODEL_KEYS = {"in_channels": int, "base_channels": int, "depth": int, "between_net": bool, "model_seed": int}
SYNTH_KEYS = {"count": int, "size": int, "seed": int, "q_tumor": float}

EXIT_CODES = {ConfigError: 2, FormatError: 3, NumericError: 4, DegenerateBatchError: 5, ContractViolation: 6}


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(kind, value):
    if kind is bool:
        return value if isinstance(value, bool) else _parse_bool(value)
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot read {value!r} as {kind.__name__}") from None


def read_config_file(path):
    """Raw ``{key: value}`` from a key-value text file or a JSON object."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _train_types():
    types = {f.name: f.type for f in fields(TrainConfig)}
    py = {"float": float, "int": int, "bool": bool, "str": str}
    return {k: py[t] if isinstance(t, str) else t for k, t in types.items()}


def _typed(raw, types, where):
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return {k: _coerce(types[k], v) for k, v in raw.items()}


def _add_flags(parser, types):
    for key, kind in types.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, dest=key, type=_parse_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, dest=key, type=kind, default=None)


def _merged(args, types, where):
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    values = _typed(raw, types, where)
    for key in types:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = flag_value
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="cunet", description="Cascaded U-Net with loss weighted sampling on synthetic phantoms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a phantom dataset split into train/val/test")
    s.add_argument("--config", help="key-value file with count, size, seed, q_tumor")
    _add_flags(s, SYNTH_KEYS)
    s.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="train a CU-Net on a synthesized dataset")
    t.add_argument("--config", help="key-value file with training and model keys")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    _add_flags(t, {**_train_types(), **MODEL_KEYS})

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True, help="run directory or .ckpt file next to model.json")
    e.add_argument("--data-dir", required=True, help="dataset root (uses its test split) or a directory of case files")
    e.add_argument("--report", required=True, help="CSV path; JSON aggregates go next to it")

    r = sub.add_parser("predict", help="segment one case and write an overlay image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--case", required=True, help=".cuns case file")
    r.add_argument("--out", required=True, help="output .ppm path")

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=50)
    g.add_argument("--tol", type=float, default=1e-4)
    return p


def cmd_synth(args):
    cfg = {"count": 100, "size": 64, "seed": 0, "q_tumor": 0.7}
    cfg.update(_merged(args, SYNTH_KEYS, "synth"))
    if cfg["count"] < 1 or cfg["size"] < 8:
        raise ConfigError("need count >= 1 and size >= 8")
    cases = synthesize(cfg["count"], cfg["size"], cfg["seed"], cfg["q_tumor"])
    split = split_dataset([c.id for c in cases], np.random.default_rng([cfg["seed"], 2]))
    write_split_dataset(args.out_dir, cases, split)
    return {"out_dir": str(args.out_dir), **cfg, "train": len(split.train), "val": len(split.val), "test": len(split.test)}


def cmd_train(args):
    values = _merged(args, {**_train_types(), **MODEL_KEYS}, "train")
    model_values = {k: values.pop(k) for k in list(values) if k in MODEL_KEYS}
    if "model_seed" in model_values:
        model_values["seed"] = model_values.pop("model_seed")
    config = TrainConfig.from_dict(values)
    model = CUNet(CUNetConfig(**model_values))
    dataset = read_split_dataset(args.data_dir)
    state, _ = train(model, dataset, config, out_dir=args.out_dir)
    return {
        "out_dir": str(args.out_dir),
        "epochs": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "steps": state.steps,
        "skipped_batches": state.skipped_batches,
    }


def _eval_cases(data_dir):
    root = Path(data_dir)
    if (root / "test").is_dir():
        return read_split_dataset(root)["test"]
    return read_dataset(root)


def cmd_eval(args):
    model = load_model(args.checkpoint)
    report_csv = Path(args.report)
    report_json = report_csv.with_suffix(".json")
    report = evaluate(model, _eval_cases(args.data_dir), report_csv, report_json)
    return {"report": str(report_csv), "aggregates": str(report_json), "cases": len(report.cases), "means": report.means}


def cmd_predict(args):
    from .render import render_overlay

    sample = read_sample(args.case)
    model = load_model(args.checkpoint)
    labels = predict(model, sample)
    render_overlay(sample, labels, args.out)
    counts = {str(k): int(np.count_nonzero(labels == k)) for k in (0, 1, 2, 4)}
    return {"case": sample.id, "out": str(args.out), "label_counts": counts}


def cmd_gradcheck(args):
    from .gradsuite import run_gradient_suite

    results = run_gradient_suite(range(args.seeds))
    worst = max(r["max_rel_error"] for r in results.values())
    summary = {"seeds": args.seeds, "tol": args.tol, "max_rel_error": worst, "passed": worst <= args.tol, "cases": results}
    if worst > args.tol:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} > {args.tol:g}")
    return summary


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def _exit_code(exc):
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return _exit_code(exc)
    print(json.dumps(_plain(result), allow_nan=False))
    return 0


def _plain(value):
    """JSON-safe copy: NaN and infinities become null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


if __name__ == "__main__":
    sys.exit(main())
