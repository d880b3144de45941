"""``beamwalk`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 bad data,
3 numeric divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import channel as ch
from . import measurement as ms
from . import selftest
from . import tpgd
from . import train as tr
from .config import ConfigError, describe_defaults, parse_config
from .solvers import DivergenceError

log = logging.getLogger("beamwalk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

DATA_ERRORS = (ms.DatasetFormatError, ch.ChannelFormatError, tpgd.CheckpointError, tr.EvaluationError,
               ms.SplitAccessError, tpgd.ContractError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# flag dest -> config key; only flags the user actually passed become overrides
FLAG_KEYS = {
    "seed": "run.seed", "n": "channel.n", "paths": "channel.paths", "nrf": "measurement.n_rf",
    "m": "measurement.m", "snrs": "measurement.snrs", "train": "measurement.train", "val": "measurement.val",
    "test": "measurement.test", "channels": "measurement.channels_path", "epochs": "training.epochs",
    "lr": "training.learning_rate", "batch_size": "training.batch_size", "layers": "network.layers",
    "widths": "network.widths", "data": "paths.data", "ckpt_out": "paths.checkpoint",
}


def _add_common(p):
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key")
    p.add_argument("--seed", help="master seed (beats BEAMWALK_SEED)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beamwalk", description="Beamspace channel estimation workbench")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/worker threads")
    p.add_argument("--verbosity", default=None, help="logging level (debug, info, warning)")
    p.add_argument("--version", action="version", version=f"beamwalk {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-channels", help="generate SV channels to a .bwch file")
    _add_common(g)
    g.add_argument("--n")
    g.add_argument("--paths")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)

    d = sub.add_parser("gen-data", help="generate train/val/test datasets")
    _add_common(d)
    for flag in ("--n", "--nrf", "--m", "--paths", "--snrs", "--train", "--val", "--test", "--channels"):
        d.add_argument(flag)
    d.add_argument("--redraw-w", action="store_true", help="new selection matrix per sample")
    d.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train the unrolled network")
    _add_common(t)
    t.add_argument("--data", help="dataset directory (train.bwds, val.bwds)")
    t.add_argument("--out", dest="ckpt_out", help="checkpoint path")
    t.add_argument("--n", help="lens antennas; must match the dataset")
    t.add_argument("--epochs")
    t.add_argument("--lr")
    t.add_argument("--batch-size", dest="batch_size")
    t.add_argument("--layers")
    t.add_argument("--widths")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a classical solver")
    _add_common(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--algo", choices=("ista", "amp", "ls", "oracle"))
    e.add_argument("--data", dest="data_file", required=True, help="test .bwds file")
    e.add_argument("--out", required=True)
    e.add_argument("--name", help="estimator label in the report")

    b = sub.add_parser("baseline", help="classical solver report")
    _add_common(b)
    b.add_argument("--algo", required=True, choices=("ista", "amp", "ls"))
    b.add_argument("--data", dest="data_file", required=True)
    b.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="merge reports into one plot-data CSV")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", required=True)

    s = sub.add_parser("selftest", help="gradient, oracle and physics checks")
    s.add_argument("--suite", action="append", choices=tuple(selftest.SUITES), help="limit to a suite")
    s.add_argument("--seed", type=int, default=0)

    sub.add_parser("defaults", help="print a config template with every default")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = str(v)
    if getattr(args, "redraw_w", False):
        out["measurement.redraw_w"] = "true"
    return out


def _effective(args):
    cfg = parse_config(getattr(args, "config", None), _overrides(args))
    if args.verbosity is None:
        logging.getLogger().setLevel(getattr(logging, cfg["run.verbosity"].upper(), logging.INFO))
    if args.threads is None and cfg["run.threads"] > 0:
        threadpool_limits(limits=cfg["run.threads"])
    log.info("effective config %s (hash %s)", json.dumps(cfg.to_dict(), sort_keys=True), cfg.hash())
    return cfg


def cmd_gen_channels(args) -> int:
    cfg = _effective(args)
    reals = ch.gen_channels(cfg["channel.n"], cfg["channel.paths"], args.count, cfg["run.seed"])
    ch.export_channels(args.out, reals)
    log.info("wrote %d channels to %s", args.count, args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _effective(args)
    splits = ms.build_dataset(cfg.dataset_config(), cfg["run.seed"], args.out)
    for name, ds in splits.items():
        log.info("%s: %d records -> %s", name, len(ds), os.path.join(args.out, f"{name}.bwds"))
    return EXIT_OK


def _load_split(path, split):
    ds = ms.load_dataset(path)
    ds.require_split(split)
    return ds


def cmd_train(args) -> int:
    cfg = _effective(args)
    data = cfg["paths.data"]
    train_ds = _load_split(os.path.join(data, "train.bwds"), "train")
    val_path = os.path.join(data, "val.bwds")
    val_ds = _load_split(val_path, "val") if os.path.exists(val_path) else None
    net_cfg = cfg.net_config()
    if net_cfg.n != train_ds.n:
        raise ConfigError(f"channel.n: config says {net_cfg.n}, dataset has N={train_ds.n}")
    ckpt = cfg["paths.checkpoint"]
    tcfg = cfg.train_config(checkpoint=None)
    try:
        params, history = tr.train_tpgd(net_cfg, tcfg, {"train": train_ds, "val": val_ds})
    except tr.TrainingDivergence as exc:
        if exc.params is not None:
            tpgd.save_checkpoint(ckpt, exc.params, meta={"config_hash": cfg.hash(), "diverged": True})
        raise
    tpgd.save_checkpoint(ckpt, params, meta={"config_hash": cfg.hash(), "best_epoch": history.best_epoch,
                                             "data_hash": train_ds.config_hash})
    with open(cfg["paths.log"], "w") as f:
        json.dump({"config": cfg.to_dict(), "config_hash": cfg.hash(), "history": history.epochs,
                   "initial_val_nmse": history.initial_val_nmse, "best_val_nmse": history.best_val_nmse,
                   "best_epoch": history.best_epoch, "wall_clock": history.wall_clock}, f, indent=2)
    log.info("best val NMSE %.2f dB at epoch %d; checkpoint %s", tr.to_db(history.best_val_nmse),
             history.best_epoch, ckpt)
    return EXIT_OK


def _report(estimator, ds, out, params=None, solver_cfg=None, name=None) -> int:
    rep = tr.evaluate(estimator, ds, params, solver_cfg, name)
    rep.write_csv(out)
    for s, v in zip(rep.snr_db, rep.nmse_db):
        log.info("%s SNR %g dB: NMSE %.2f dB", rep.estimator, s, v)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _effective(args)
    ds = _load_split(args.data_file, "test")
    if args.ckpt:
        params, _, _ = tpgd.load_checkpoint(args.ckpt, np.float64)
        if params.config.n != ds.n:
            raise tpgd.CheckpointError(f"checkpoint is for N={params.config.n}, data has N={ds.n}")
        estimator = "tpgd" if params.config.clfaf else "tpgd-a"
        return _report(estimator, ds, args.out, params=params, name=args.name)
    solver_cfg = cfg.solver_config(args.algo) if args.algo in ("ista", "amp") else None
    return _report(args.algo, ds, args.out, solver_cfg=solver_cfg, name=args.name)


def cmd_baseline(args) -> int:
    cfg = _effective(args)
    ds = _load_split(args.data_file, "test")
    solver_cfg = cfg.solver_config(args.algo) if args.algo in ("ista", "amp") else None
    return _report(args.algo, ds, args.out, solver_cfg=solver_cfg)


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.extend(tr.read_report_csv(path))
        except (KeyError, ValueError) as exc:
            raise tr.EvaluationError(f"{path}: not a report CSV ({exc})") from None
    with open(args.out, "w", newline="") as f:
        f.write(tr.compare(reports))
    log.info("merged %d reports into %s", len(reports), args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    start = time.perf_counter()
    ok = selftest.run_all(args.suite, seed=args.seed, echo=print)
    print(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_DIVERGENCE


def cmd_defaults(args) -> int:
    print(describe_defaults())
    return EXIT_OK


COMMANDS = {
    "gen-channels": cmd_gen_channels, "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "baseline": cmd_baseline, "compare": cmd_compare, "selftest": cmd_selftest, "defaults": cmd_defaults,
}


def dispatch(args) -> int:
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        log.error("configuration: %s", exc)
        return EXIT_USAGE
    except (DivergenceError, tr.TrainingDivergence) as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except DATA_ERRORS as exc:
        log.error("data: %s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("I/O: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        # remaining contract violations come from data that cannot serve the request
        log.error("data: %s", exc)
        return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "beamwalk: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    level = (args.verbosity or os.environ.get("BEAMWALK_LOG") or "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("beamwalk: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads:
        with threadpool_limits(limits=args.threads):
            return dispatch(args)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
