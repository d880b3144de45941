"""Run configuration: ``key = value`` files with sections, plus overrides.

Every key has a default listed in :data:`DEFAULTS`. Values from a file
replace defaults, flag overrides replace file values, and the
``BEAMWALK_SEED`` environment variable replaces the seed unless a flag
sets it.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field

from .measurement import DatasetConfig
from .solvers import SolverConfig
from .tpgd import ContractError, NetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str):
    return s or None


def _opt_float(s: str):
    return float(s) if s.strip() else None


def _step(s: str):
    return "auto" if s.strip() == "auto" else float(s)


# section -> key -> (parser, default text, description)
DEFAULTS: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, "0", "master seed for data, initialisation and shuffling"),
        "threads": (int, "0", "BLAS thread cap, 0 = library default"),
        "verbosity": (str, "info", "logging level"),
    },
    "channel": {
        "n": (int, "64", "lens antennas N"),
        "paths": (int, "3", "SV paths per user"),
    },
    "measurement": {
        "n_rf": (int, "16", "RF chains"),
        "m": (int, "4", "pilot length M"),
        "snrs": (_floats, "0,5,10,15,20", "SNR grid in dB"),
        "train": (int, "2000", "training samples per SNR"),
        "val": (int, "200", "validation samples per SNR"),
        "test": (int, "500", "test samples per SNR"),
        "redraw_w": (_bool, "false", "draw a new selection matrix per sample"),
        "channels_path": (_opt_str, "", "optional .bwch file of imported spatial channels"),
    },
    "solver": {
        "ista_iters": (int, "200", "ISTA iteration budget"),
        "amp_iters": (int, "30", "AMP iteration budget"),
        "step_size": (_step, "auto", "ISTA step; auto = 1/||W||_2^2"),
        "reg_weight": (_opt_float, "", "ISTA lambda; blank = 0.1 sigma sqrt(2 log N)"),
        "tolerance": (float, "1e-6", "relative-change stopping tolerance"),
        "amp_threshold_scale": (float, "1.0", "AMP threshold multiplier tau"),
    },
    "network": {
        "layers": (int, "3", "unfolded layers T"),
        "widths": (_ints, "16,32,64", "feature channels per scale"),
        "reduction": (int, "4", "channel-attention reduction ratio"),
        "clfaf": (_bool, "true", "cross-layer attention fusion on/off"),
        "attention": (str, "d_st", "fusion orientation: d_st or d_s"),
        "alpha_init": (float, "0.5", "initial step sizes"),
        "share_steps": (_bool, "false", "middle layers also share step sizes and fusion scales"),
    },
    "training": {
        "epochs": (int, "50", "maximum epochs"),
        "batch_size": (int, "16", "minibatch size"),
        "learning_rate": (float, "1e-4", "Adam learning rate"),
        "eval_every": (int, "1", "validate every k epochs"),
        "patience": (int, "10", "early-stopping patience in validations, 0 = off"),
        "dtype": (str, "float32", "training precision"),
    },
    "paths": {
        "data": (str, "data", "dataset directory with train/val/test .bwds"),
        "checkpoint": (str, "best.bwck", "checkpoint written by train"),
        "log": (str, "train_log.json", "training log written by train"),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    subcommand: str | None = None

    def __getitem__(self, key: str):
        section, name = key.split(".")
        return self.values[section][name]

    def to_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()} for s, kv in self.values.items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dataset_config(self) -> DatasetConfig:
        c, m = self.values["channel"], self.values["measurement"]
        return DatasetConfig(c["n"], m["n_rf"], m["m"], c["paths"], m["snrs"], m["train"], m["val"], m["test"],
                             m["redraw_w"], m["channels_path"])

    def net_config(self) -> NetConfig:
        n = self.values["network"]
        return NetConfig(n=self.values["channel"]["n"], layers=n["layers"], widths=n["widths"], reduction=n["reduction"],
                         clfaf=n["clfaf"], attention=n["attention"], alpha_init=n["alpha_init"], share_steps=n["share_steps"])

    def train_config(self, checkpoint: str | None = None) -> TrainConfig:
        t = self.values["training"]
        return TrainConfig(t["epochs"], t["batch_size"], t["learning_rate"], self.values["run"]["seed"], t["eval_every"],
                           t["patience"], t["dtype"], checkpoint)

    def solver_config(self, algo: str) -> SolverConfig:
        s = self.values["solver"]
        iters = s["ista_iters"] if algo == "ista" else s["amp_iters"]
        return SolverConfig(iters, s["step_size"], s["reg_weight"], s["tolerance"], s["amp_threshold_scale"])


def _parse(section: str, key: str, raw: str):
    if section not in DEFAULTS:
        raise ConfigError(f"unknown section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    fn = DEFAULTS[section][key][0]
    try:
        return fn(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from None


def parse_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Effective configuration from defaults, an optional file and overrides.

    ``overrides`` maps ``"section.key"`` to raw strings or typed values.
    """
    env = os.environ if env is None else env
    values = {s: {k: fn(d) for k, (fn, d, _) in keys.items()} for s, keys in DEFAULTS.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as f:
                cp.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                values.setdefault(section, {})[key] = _parse(section, key, raw)
    overrides = dict(overrides or {})
    if "run.seed" not in overrides and env.get("BEAMWALK_SEED"):
        overrides["run.seed"] = env["BEAMWALK_SEED"]
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        values[section][key] = _parse(section, key, raw) if isinstance(raw, str) else _check_key(section, key, raw)
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def _check_key(section, key, value):
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {section}.{key}")
    return value


def validate(cfg: RunConfig) -> None:
    n = cfg["channel.n"]
    if cfg["measurement.n_rf"] > n:
        raise ConfigError(f"measurement.n_rf: N_RF <= N violated ({cfg['measurement.n_rf']} > {n})")
    if not cfg["measurement.snrs"]:
        raise ConfigError("measurement.snrs: SNR list must be non-empty")
    for key in ("channel.n", "channel.paths", "measurement.m", "measurement.n_rf", "network.layers", "training.batch_size"):
        if cfg[key] < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if cfg["channel.paths"] > n:
        raise ConfigError("channel.paths: paths <= N violated")
    if not cfg["training.learning_rate"] > 0:
        raise ConfigError("training.learning_rate: must be > 0")
    if cfg["training.dtype"] not in ("float32", "float64"):
        raise ConfigError("training.dtype: float32 or float64")
    path = cfg["measurement.channels_path"]
    if path and not os.path.exists(path):
        raise ConfigError(f"measurement.channels_path: {path} does not exist")
    try:
        cfg.net_config()
    except ContractError as exc:
        raise ConfigError(f"network: {exc}") from None


def describe_defaults() -> str:
    """Commented template listing every key and its default."""
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for k, (_, d, desc) in keys.items():
            lines.append(f"# {desc}")
            lines.append(f"{k} = {d}")
        lines.append("")
    return "\n".join(lines)
