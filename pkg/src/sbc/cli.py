"""Command-line entry point: train, compress, eval, sweep, priors.

Configuration comes from built-in defaults, then an optional ``--config``
file of ``key=value`` lines, then command-line flags (highest precedence).
Unknown keys are rejected.

Exit codes:
  0  success
  2  bad configuration or input (missing data, unreadable artifact, shape mismatch)
  3  training diverged
  4  pruning would empty a layer
"""
import argparse
import csv
import json
import math
import os
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import compress as C
from . import priors as P
from . import trainer as TR
from .data import load_mnist, synth_classification
from .errors import ContractError, DimensionError, DomainError, EmptyLayerError, FormatError, TrainingDiverged
from .models import Network

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_EMPTY = 0, 2, 3, 4
CONFIG_NAME = "config.txt"
INPUT_CONFIG_NAME = "config.input.txt"
DATA_ENV = "SBC_DATA_DIR"
DEFAULT_GRID = "1.0,0.5,0.2,0.1,0.05,0.02,0.01"


class ConfigError(Exception):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text):
    return float(str(text).strip().replace("−", "-"))


# (key, parser, default, help) shared by several commands
COMMON = {
    "data": (str, None, f"MNIST directory, falls back to ${DATA_ENV}"),
    "dataset": (str, "mnist", "mnist or synthetic"),
    "train_size": (int, None, "use only the first N training samples"),
    "test_size": (int, None, "use only the first N test samples"),
    "synthetic_train": (int, 2000, "synthetic training samples"),
    "synthetic_test": (int, 1000, "synthetic test samples"),
    "synthetic_classes": (int, 4, "synthetic classes"),
    "out": (str, "out", "output directory"),
}

THRESHOLDS = {
    "group_tau": (_float, -math.inf, "prune a group when its score is below this"),
    "weight_log_alpha_tau": (_float, 3.0, "prune a weight when ln(sigma^2/mu^2) exceeds this"),
}


def _train_keys():
    parsers = {int: int, float: _float, bool: _bool, str: str}
    return {f.name: (parsers.get(f.type, str), f.default, "") for f in fields(TR.TrainConfig)}


COMMANDS = {
    "train": {**{k: COMMON[k] for k in COMMON}, **_train_keys()},
    "compress": {"checkpoint": (str, None, "trained checkpoint (.npz)"), **THRESHOLDS,
                 **{k: COMMON[k] for k in COMMON}, "evaluate": (_bool, True, "report errors on the test split"),
                 "bits": (int, None, "uniform bit width instead of the assigned ones")},
    "eval": {"model": (str, None, "checkpoint (.npz) or compressed model (.sbcm)"),
             **{k: COMMON[k] for k in COMMON if k != "out"},
             "timing_repeats": (int, 7, "repeats for the dense/sparse timing"),
             "timing_batch": (int, 1000, "batch size for the timing block")},
    "sweep": {"checkpoint": (str, None, "trained checkpoint (.npz)"), "grid": (str, DEFAULT_GRID,
              "comma-separated kept fractions"), **{k: COMMON[k] for k in COMMON}},
    "priors": {"out": COMMON["out"], "scale": (_float, 1.0, "component scale for the profiles"),
               "points": (int, 201, "grid points per half-axis")},
}


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"--config: cannot read {path}: {err}") from err
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command, file_values, flag_values):
    """Merge defaults < config file < flags, parsing and validating every key."""
    spec = COMMANDS[command]
    unknown = sorted(set(file_values) - set(spec))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {k: d for k, (_, d, _) in spec.items()}
    for source in (file_values, flag_values):
        for k, v in source.items():
            if v is None:
                continue
            parse = spec[k][0]
            try:
                cfg[k] = None if str(v).lower() == "none" else (parse(v) if isinstance(v, str) else v)
            except ValueError as err:
                raise ConfigError(f"--{k.replace('_', '-')}: {err}") from err
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="sbc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        p.add_argument("--quiet", action="store_true", help="stdout carries data only")
        for key, (_, default, text) in spec.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                           help=f"{text} [default: {default}]".strip())
    return parser


class Console:
    def __init__(self, quiet):
        self.quiet = quiet

    def info(self, msg):
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)

    def data(self, msg):
        print(msg, flush=True)


# ---------------------------------------------------------------- data


def load_data(cfg, need_train=True):
    if cfg["dataset"] == "synthetic":
        classes = cfg["synthetic_classes"]
        train = synth_classification(cfg["synthetic_train"], classes=classes, seed=1) if need_train else None
        test = synth_classification(cfg["synthetic_test"], classes=classes, seed=2)
        return train, test
    if cfg["dataset"] != "mnist":
        raise ConfigError(f"--dataset must be mnist or synthetic, got {cfg['dataset']!r}")
    root = cfg["data"] or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(f"--data: no dataset directory given and ${DATA_ENV} is not set")
    if not os.path.isdir(root):
        raise ConfigError(f"--data: {root} is not a directory")
    try:
        train = load_mnist(root, "train") if need_train else None
        test = load_mnist(root, "test")
    except (FileNotFoundError, FormatError) as err:
        raise ConfigError(f"--data: {err}") from err
    if train is not None and cfg["train_size"]:
        train = train.subset(cfg["train_size"])
    if cfg["test_size"]:
        test = test.subset(cfg["test_size"])
    return train, test


def _outdir(cfg, args):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    # the resolved config alone reproduces the run; the input file is kept verbatim beside it
    with open(out / CONFIG_NAME, "w") as fh:
        for k, v in cfg.items():
            if v is not None:
                fh.write(f"{k}={v}\n")
    if args.config:
        shutil.copyfile(args.config, out / INPUT_CONFIG_NAME)
    return out


def _check_shape(model_shape, dataset):
    got = tuple(dataset.images.shape[1:])
    if int(np.prod(got)) != int(np.prod(model_shape)):
        raise DimensionError(f"model expects inputs of shape {tuple(model_shape)}, data has {got}")


# ---------------------------------------------------------------- commands


def cmd_train(cfg, args, con):
    from .plotting import plot_history

    train_set, test = load_data(cfg)
    keys = {f.name for f in fields(TR.TrainConfig)}
    tc = TR.TrainConfig(**{k: v for k, v in cfg.items() if k in keys})
    if cfg["dataset"] == "synthetic" and tc.arch != "synthconv":
        raise ConfigError("--dataset synthetic needs --arch synthconv")
    out = _outdir(cfg, args)
    try:
        net, hist = TR.train(tc, train_set, test, log=con.info, checkpoint_path=out / "last_good.npz")
    except TrainingDiverged as err:
        print(f"sbc train: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    net.save(out / "model.npz")
    hist.write_csv(out / "history.csv")
    hist.write_timing(out / "timing.csv")
    if len(hist):
        plot_history(hist.records, out / "history.png")
    err = TR.evaluate(net, test)
    con.data(f"test_error={err:.4f} kept={sum(net.kept_counts())}/{sum(net.weight_counts())} "
             f"architecture={net.architecture_string()}")
    return EXIT_OK


def _load_checkpoint(path):
    if not path:
        raise ConfigError("--checkpoint is required")
    try:
        return Network.load(path)
    except FormatError as err:
        raise ConfigError(f"--checkpoint: {err}") from err


def cmd_compress(cfg, args, con):
    from .plotting import plot_report

    net = _load_checkpoint(cfg["checkpoint"])
    th = C.PruneThresholds(cfg["group_tau"], cfg["weight_log_alpha_tau"])
    test = load_data(cfg, need_train=False)[1] if cfg["evaluate"] else None
    if test is not None:
        _check_shape(net.input_shape, test)
    out = _outdir(cfg, args)
    try:
        pruned = C.prune(net, th).model
    except EmptyLayerError as err:
        print(f"sbc compress: {err}", file=sys.stderr)
        return EXIT_EMPTY
    bits = None if cfg["bits"] is None else [cfg["bits"]] * len(pruned.layers)
    if bits is not None and not 1 <= cfg["bits"] <= 32:
        raise ConfigError("--bits must lie in [1, 32]")
    cm = C.compress(pruned, bits)
    blob = C.export_compressed(cm, out / "model.sbcm")
    rep = C.compression_metrics(net, cm, file_bytes=len(blob))
    if test is not None:
        rep.error_before = TR.evaluate(net, test)
        rep.error_pruned = TR.evaluate(pruned, test)
        rep.error_quantized = C.evaluate_compressed(C.import_compressed(out / "model.sbcm"), test)
    d = rep.as_dict()
    with open(out / "report.json", "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True, default=float)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", "value"])
        for k in sorted(d):
            v = d[k]
            w.writerow([k, ";".join(map(str, v)) if isinstance(v, list) else v])
    plot_report(d, out / "report.png")
    con.data(f"architecture={rep.architecture_string} wr={rep.wr:.4f} cr={rep.cr:.2f} "
             f"avg_bits={rep.avg_bits:.3f} error={rep.error_quantized:.4f}")
    return EXIT_OK


def cmd_eval(cfg, args, con):
    path = cfg["model"]
    if not path:
        raise ConfigError("--model is required")
    test = load_data(cfg, need_train=False)[1]
    if str(path).endswith(".sbcm"):
        try:
            cm = C.import_compressed(path)
        except (OSError, FormatError) as err:
            raise ConfigError(f"--model: {err}") from err
        _check_shape(cm.input_shape, test)
        err = C.evaluate_compressed(cm, test)
        con.data(f"error={err:.4f}")
        x = test.images[:cfg["timing_batch"]]
        t = C.time_model(cm, x, cfg["timing_repeats"])
        con.data(f"dense_seconds={t.dense_seconds:.6g} sparse_seconds={t.sparse_seconds:.6g} "
                 f"speedup={t.speedup:.6g}")
        return EXIT_OK
    net = _load_checkpoint(path)
    _check_shape(net.input_shape, test)
    con.data(f"error={TR.evaluate(net, test):.4f}")
    return EXIT_OK


def cmd_sweep(cfg, args, con):
    from .plotting import plot_curve

    try:
        grid = [_float(g) for g in str(cfg["grid"]).split(",") if g.strip()]
    except ValueError as err:
        raise ConfigError(f"--grid: {err}") from err
    if not grid:
        raise ConfigError("--grid: empty grid")
    if any(not 0 <= g <= 1 for g in grid):
        raise ConfigError("--grid: fractions must lie in [0, 1]")
    net = _load_checkpoint(cfg["checkpoint"])
    test = load_data(cfg, need_train=False)[1]
    _check_shape(net.input_shape, test)
    out = _outdir(cfg, args)
    rows = C.sweep_curve(net, grid, test)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_fraction", "kept_fraction", "error"])
        for r in rows:
            w.writerow([repr(r[0]), repr(r[1]), repr(r[2])])
    plot_curve(rows, out / "curve.png")
    for r in rows:
        con.data(f"{r[0]},{r[1]:.6f},{r[2]:.4f}")
    return EXIT_OK


def cmd_priors(cfg, args, con):
    from .plotting import plot_priors

    out = _outdir(cfg, args)
    cols = P.density_profiles(P.profile_grid(cfg["points"]), scale=cfg["scale"])
    names = list(cols)
    with open(out / "priors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(cols[k] for k in names)):
            w.writerow([repr(float(v)) for v in row])
    plot_priors(cols, out / "priors.png")
    con.data(f"wrote {out / 'priors.csv'} ({len(cols['w'])} rows)")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "compress": cmd_compress, "eval": cmd_eval, "sweep": cmd_sweep,
            "priors": cmd_priors}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    con = Console(args.quiet)
    flags = {k: getattr(args, k) for k in COMMANDS[args.command]}
    t0 = time.perf_counter()
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        code = HANDLERS[args.command](cfg, args, con)
    except (ConfigError, DomainError, ContractError, DimensionError) as err:
        print(f"sbc {args.command}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    con.info(f"{args.command} finished in {time.perf_counter() - t0:.1f}s (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
