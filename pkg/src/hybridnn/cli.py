"""Command-line interface: generate, train, eval and sweep-snr.

Settings resolve as defaults < ``--config`` file (flat ``key=value`` lines)
< command-line flags. Commands with an output directory write ``manifest.txt`` there before doing
any work; a manifest is itself a valid config file.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .network import CheckpointError, load_checkpoint, save_checkpoint
from .radar_sim import (PROFILES, Dataset, DatasetFormatError, ParameterError, PlacementError,
                        generate_dataset, git_blob_hash, read_dataset, write_dataset)
from .trainer import (EPOCH_COLUMNS, HE_GAIN, POOLS, VARIANTS, NumericError, TrainConfig,
                      default_input_gain, evaluate, network_for, rows_to_csv, snr_sweep, train)

log = logging.getLogger("hybridnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_FILE = "data.hrd"
MODEL_FILE = "model.hnn"
MANIFEST_FILE = "manifest.txt"
DEFAULT_SNR_LIST = tuple(range(-10, 41, 5))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _flag(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# key -> (type, default) per command; flag names are the keys with "-" for "_"
COMMON = {"threads": (int, None), "profile": (str, "desk"), "seed": (int, 0)}
MODEL_KEYS = {"variant": (str, "hybrid"), "pool": (str, "max"), "init_gain": (float, HE_GAIN),
              "input_gain": (float, None), "rho_low": (float, 0.8), "rho_high": (float, 1.2)}
KEYS = {
    "generate": {**COMMON, "n": (int, None), "snr": (float, 20.0), "out": (str, None)},
    "train": {**COMMON, **MODEL_KEYS, "data": (str, None), "val": (str, None), "out": (str, None),
              "epochs": (int, 5), "batch": (int, 50), "lr_main": (float, 0.05),
              "lr_sp": (float, 0.01), "timing": (_flag, False)},
    "eval": {**COMMON, **MODEL_KEYS, "model": (str, None), "data": (str, None),
             "out": (str, None), "batch": (int, 50)},
    "sweep-snr": {**COMMON, **MODEL_KEYS, "model": (str, None), "out": (str, None),
                  "snr": (_float_list, DEFAULT_SNR_LIST), "n": (int, 300)},
}
ALL_KEYS = set().union(*KEYS.values()) | {"command"}
REQUIRED = {"generate": ("n", "out"), "train": ("data", "out"),
            "eval": ("model", "data"), "sweep-snr": ("model", "out")}
CHOICES = {"profile": sorted(PROFILES), "variant": list(VARIANTS), "pool": sorted(POOLS)}
HELP = {
    "threads": "worker threads for data generation (env HNN_THREADS; 1 is bit-reproducible)",
    "config": "flat key=value file; flags override it",
    "n": "number of samples (per SNR point for sweep-snr)",
    "snr": "SNR in dB (sweep-snr: comma-separated list; write --snr=-10,0 for negative values)",
    "out": "output directory (eval: CSV file)",
    "data": f"dataset file or directory holding {DATA_FILE}",
    "val": "optional validation dataset, evaluated after every epoch",
    "model": "checkpoint file",
    "timing": "record wall-clock seconds in the CSVs (breaks byte-identical reruns)",
    "input_gain": "fixed gain on the first layer's output (default 2 / filter_size^2)",
    "init_gain": "multiplier on the uniform init bound sqrt(1/fan_in)",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridnn", description="Hybrid matched-filter network for radar ATR.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in KEYS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help=HELP["config"])
        for key, (typ, _) in keys.items():
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": None, "help": HELP.get(key)}
            if typ is _flag:
                p.add_argument(flag, action="store_const", const=True, **kw)
            else:
                p.add_argument(flag, type=typ, choices=CHOICES.get(key), **kw)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if key not in ALL_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags for ``args.command``."""
    keys = KEYS[args.command]
    cfg = {k: default for k, (_, default) in keys.items()}
    if args.config:
        for key, text in read_config(args.config).items():
            if key not in keys:
                continue
            typ = keys[key][0]
            try:
                cfg[key] = typ(text) if text != "" else None
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}")
            if key in CHOICES and cfg[key] not in CHOICES[key]:
                raise UsageError(f"config key {key!r}: {cfg[key]!r} is not one of {CHOICES[key]}")
    for key in keys:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if cfg.get("threads") is None:
        env = os.environ.get("HNN_THREADS", "1")
        try:
            cfg["threads"] = int(env)
        except ValueError:
            raise UsageError(f"HNN_THREADS must be an integer, got {env!r}")
    if "input_gain" in keys and cfg.get("input_gain") is None and cfg.get("profile") in PROFILES:
        cfg["input_gain"] = default_input_gain(PROFILES[cfg["profile"]]())
    for key in REQUIRED[args.command]:
        if cfg.get(key) is None:
            raise UsageError(f"missing required setting {key!r} (flag --{key.replace('_', '-')})")
    if cfg["threads"] < 1:
        raise UsageError(f"threads must be >= 1, got {cfg['threads']}")
    for key in ("n", "epochs", "batch"):
        if key in cfg and cfg[key] is not None and cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1, got {cfg[key]}")
    return cfg


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


PATH_KEYS = ("data", "val", "out", "model")


def write_manifest(out_dir: Path, command: str, cfg: dict, layout: dict, hashes: dict) -> None:
    """Resolved settings as key=value lines; paths are recorded as comments
    so the manifest can be reused as a config file for other commands."""
    lines = [f"command={command}"]
    lines += [f"{k}={_format_value(v)}" for k, v in sorted(cfg.items()) if k not in PATH_KEYS]
    lines += [f"# path {k}: {cfg[k]}" for k in PATH_KEYS if cfg.get(k) is not None]
    lines += [f"# output {k}: {v}" for k, v in layout.items()]
    lines += [f"# sha1 {k}: {v}" for k, v in hashes.items()]
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / (MANIFEST_FILE + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(out_dir / MANIFEST_FILE)


def _data_file(path) -> Path:
    path = Path(path)
    return path / DATA_FILE if path.is_dir() else path


def _load_data(path, profile: str) -> tuple[Dataset, str]:
    f = _data_file(path)
    try:
        raw = f.read_bytes()
        ds = read_dataset(f)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {f}")
    except (DatasetFormatError, OSError, ValueError) as exc:
        raise DataError(f"{f}: {exc}")
    side = PROFILES[profile]().raw_size
    if ds.raw.shape[1:] != (side, side):
        raise DataError(f"{f}: samples are {ds.raw.shape[1]}x{ds.raw.shape[2]}, "
                        f"profile {profile!r} expects {side}x{side}")
    return ds, git_blob_hash(raw)


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(batch_size=cfg.get("batch", 50), epochs=cfg.get("epochs", 1),
                           lr_main=cfg.get("lr_main", 0.05), lr_sp=cfg.get("lr_sp", 0.01),
                           seed=cfg["seed"], profile=cfg["profile"], variant=cfg["variant"],
                           rho_low=cfg["rho_low"], rho_high=cfg["rho_high"],
                           input_gain=cfg["input_gain"], pool=cfg["pool"],
                           init_gain=cfg["init_gain"], record_time=bool(cfg.get("timing")))
    except ValueError as exc:
        raise UsageError(str(exc))


def _load_model(cfg: dict):
    net = network_for(_train_config(cfg))
    try:
        load_checkpoint(net, cfg["model"])
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {cfg['model']}")
    except (CheckpointError, OSError) as exc:
        raise DataError(f"{cfg['model']}: {exc}")
    return net


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    tmp.replace(path)


def cmd_generate(cfg: dict) -> int:
    out = Path(cfg["out"])
    layout = {"dataset": DATA_FILE, "params": DATA_FILE + ".params"}
    write_manifest(out, "generate", cfg, layout, {})
    params = PROFILES[cfg["profile"]]()
    try:
        ds = generate_dataset(cfg["n"], params, cfg["snr"], cfg["seed"], threads=cfg["threads"])
    except (ParameterError, PlacementError) as exc:
        raise UsageError(f"profile {cfg['profile']!r}: {exc}")
    write_dataset(ds, out / DATA_FILE)
    digest = git_blob_hash((out / DATA_FILE).read_bytes())
    write_manifest(out, "generate", cfg, layout, {DATA_FILE: digest})
    counts = ", ".join(f"{c}" for c in ds.class_counts())
    print(f"wrote {len(ds)} samples ({counts} per class) to {out / DATA_FILE}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    config = _train_config(cfg)
    layout = {"checkpoint": MODEL_FILE, "iterations": "metrics.csv", "epochs": "epochs.csv"}
    train_set, train_hash = _load_data(cfg["data"], cfg["profile"])
    hashes = {"data": train_hash}
    val_set = None
    if cfg.get("val"):
        val_set, hashes["val"] = _load_data(cfg["val"], cfg["profile"])
    write_manifest(out, "train", cfg, layout, hashes)
    model_path = out / MODEL_FILE
    saved = {"epoch": 0}

    def checkpoint(net, epoch):
        save_checkpoint(net, model_path)
        saved["epoch"] = epoch

    try:
        net, metrics = train(config, train_set, val_set, on_epoch=checkpoint)
    except NumericError as exc:
        if saved["epoch"]:
            where = f"last good checkpoint: {model_path} (end of epoch {saved['epoch']})"
        else:
            where = "no checkpoint was written (failure during the first epoch)"
        print(f"error: {exc}; {where}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_text(out / "metrics.csv", rows_to_csv(metrics.iterations))
    _write_text(out / "epochs.csv", rows_to_csv(metrics.epochs, EPOCH_COLUMNS))
    summary = f"final training accuracy {metrics.final_train_accuracy():.4f}"
    if metrics.final_rho is not None:
        summary += " rho_r {:.4f} rho_a {:.4f}".format(*metrics.final_rho)
    print(summary)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    net = _load_model(cfg)
    ds, _ = _load_data(cfg["data"], cfg["profile"])
    acc = evaluate(net, ds, cfg["batch"])
    print(f"accuracy {acc!r} on {len(ds)} samples")
    if cfg.get("out"):
        _write_text(Path(cfg["out"]), rows_to_csv([{"accuracy": acc, "n": len(ds)}], ("accuracy", "n")))
    return EXIT_OK


def cmd_sweep_snr(cfg: dict) -> int:
    out = Path(cfg["out"])
    net = _load_model(cfg)
    model_hash = git_blob_hash(Path(cfg["model"]).read_bytes())
    write_manifest(out, "sweep-snr", cfg, {"sweep": "sweep.csv"}, {"model": model_hash})
    params = PROFILES[cfg["profile"]]()
    rows = [{"snr_db": snr, "accuracy": acc, "n": cfg["n"]}
            for snr, acc in snr_sweep(net, cfg["snr"], cfg["n"], params, cfg["seed"],
                                      threads=cfg["threads"])]
    _write_text(out / "sweep.csv", rows_to_csv(rows, ("snr_db", "accuracy", "n")))
    for r in rows:
        print(f"{r['snr_db']:6.1f} dB  accuracy {r['accuracy']:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep-snr": cmd_sweep_snr}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
