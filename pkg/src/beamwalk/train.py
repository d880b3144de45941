"""Training, evaluation and NMSE reports for all estimators."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import solvers
from . import tensor as tn
from . import tpgd
from .channel import derive_seed, make_rng
from .measurement import Dataset, snr_to_noise_std

log = logging.getLogger(__name__)

ESTIMATORS = ("tpgd", "tpgd-a", "ista", "amp", "ls", "oracle")
CSV_COLUMNS = ("estimator", "snr_db", "nmse_linear", "nmse_db", "n_samples", "config_hash")


class EvaluationError(ValueError):
    pass


class TrainingDivergence(ArithmeticError):
    def __init__(self, msg, params=None, history=None):
        super().__init__(msg)
        self.params = params
        self.history = history


def nmse(h_est, h_true) -> float:
    """Mean over samples of ||h_est - h||^2 / ||h||^2."""
    return float(np.mean(nmse_per_sample(h_est, h_true)))


def nmse_per_sample(h_est, h_true) -> np.ndarray:
    h_est = np.atleast_2d(h_est)
    h_true = np.atleast_2d(h_true)
    if h_est.shape != h_true.shape:
        raise EvaluationError(f"estimate shape {h_est.shape} != truth shape {h_true.shape}")
    power = np.sum(np.abs(h_true) ** 2, axis=-1)
    zero = np.flatnonzero(power == 0)
    if zero.size:
        raise EvaluationError(f"sample {int(zero[0])} has an all-zero ground-truth channel")
    return np.sum(np.abs(h_est - h_true) ** 2, axis=-1) / power


def to_db(x: float) -> float:
    return 10.0 * math.log10(x) if x > 0 else -math.inf


def short_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    dtype: str = "float32"
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    initial_val_nmse: float | None = None
    best_val_nmse: float | None = None
    best_epoch: int = 0
    wall_clock: float = 0.0


def _batch_arrays(ds: Dataset, idx, grid, dtype):
    w = ds.w_for(idx) if ds.redraw_w else ds.w
    h_img = tn.Tensor(tpgd.vec_to_image(ds.h[idx], grid), dtype=dtype)
    return w, ds.y[idx], h_img


def validation_nmse(params: tpgd.TpgdParams, ds: Dataset) -> float:
    w = ds.w_for(np.arange(len(ds))) if ds.redraw_w else ds.w
    return nmse(tpgd.estimate(w, ds.y, params), ds.h)


def train(params: tpgd.TpgdParams, cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None = None):
    """Minimise the layer-wise loss with Adam; returns (best params, TrainLog).

    Shuffle order is derived from ``cfg.seed`` so identical configs replay
    identically. The best-on-validation parameters are kept (and written to
    ``cfg.checkpoint_path`` when set).
    """
    train_ds.require_split("train")
    if val_ds is not None:
        val_ds.require_split("val")
    history = TrainLog()
    if cfg.epochs == 0:
        return params, history
    start = time.perf_counter()
    dtype = np.dtype(cfg.dtype).type
    if params.alpha[0].dtype != dtype:
        params = params.astype(dtype)
    grid = params.config.grid
    opt = tn.Adam(params.parameters(), lr=cfg.learning_rate)
    best_state = params.state_arrays()
    if val_ds is not None:
        history.initial_val_nmse = history.best_val_nmse = validation_nmse(params, val_ds)
    stale = 0
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        order = make_rng(derive_seed(cfg.seed, epoch)).permutation(n)
        total = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            w, y, h_img = _batch_arrays(train_ds, idx, grid, dtype)
            loss = tpgd.layerwise_loss(h_img, tpgd.tpgd_forward(w, y, params))
            value = float(loss.data)
            if not math.isfinite(value):
                params.load_arrays(best_state)
                raise TrainingDivergence(f"non-finite loss in epoch {epoch}", params, history)
            opt.zero_grad()
            tn.backward(loss)
            opt.step()
            total += value * len(idx)
        entry = {"epoch": epoch, "train_loss": total / n}
        if val_ds is not None and epoch % cfg.eval_every == 0:
            v = validation_nmse(params, val_ds)
            entry["val_nmse"] = v
            entry["val_nmse_db"] = to_db(v)
            if v < history.best_val_nmse:
                history.best_val_nmse, history.best_epoch = v, epoch
                best_state = params.state_arrays()
                stale = 0
                if cfg.checkpoint_path:
                    tpgd.save_checkpoint(cfg.checkpoint_path, params, opt.state, {"epoch": epoch})
            else:
                stale += 1
        elif val_ds is None:
            best_state = params.state_arrays()
        history.epochs.append(entry)
        log.info("epoch %d loss %.4f val %s", epoch, entry["train_loss"], entry.get("val_nmse_db"))
        if cfg.patience and stale >= cfg.patience:
            break
    params.load_arrays(best_state)
    history.wall_clock = time.perf_counter() - start
    return params, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EstimatorReport:
    estimator: str
    snr_db: list
    nmse_linear: list
    n_samples: list
    config_hash: str
    wall_clock: float = 0.0

    @property
    def nmse_db(self) -> list:
        return [to_db(v) for v in self.nmse_linear]

    def at(self, snr: float) -> float:
        """NMSE in dB at one SNR."""
        return self.nmse_db[self.snr_db.index(float(snr))]

    def rows(self):
        for s, v, d, c in zip(self.snr_db, self.nmse_linear, self.nmse_db, self.n_samples):
            yield (self.estimator, s, v, d, c, self.config_hash)

    def to_csv(self, header: bool = True) -> str:
        return rows_to_csv(self.rows(), header)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def rows_to_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    if header:
        wr.writerow(CSV_COLUMNS)
    for est, s, v, d, c, hsh in rows:
        wr.writerow([est, repr(float(s)), repr(float(v)), repr(float(d)), int(c), hsh])
    return buf.getvalue()


def read_report_csv(path) -> list[EstimatorReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and set(rows[0]) != set(CSV_COLUMNS):
        raise EvaluationError(f"{path}: columns {sorted(rows[0])} do not match the report schema")
    grouped: dict[tuple, EstimatorReport] = {}
    for r in rows:
        key = (r["estimator"], r["config_hash"])
        rep = grouped.setdefault(key, EstimatorReport(r["estimator"], [], [], [], r["config_hash"]))
        rep.snr_db.append(float(r["snr_db"]))
        rep.nmse_linear.append(float(r["nmse_linear"]))
        rep.n_samples.append(int(r["n_samples"]))
    return list(grouped.values())


def run_estimator(estimator: str, ds: Dataset, params: tpgd.TpgdParams | None = None,
                  solver_config: solvers.SolverConfig | None = None) -> np.ndarray:
    """Channel estimates for every record of ``ds``."""
    if estimator not in ESTIMATORS:
        raise EvaluationError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    if estimator == "oracle":
        return ds.h.copy()
    if estimator in ("tpgd", "tpgd-a"):
        if params is None:
            raise EvaluationError(f"{estimator} needs trained parameters (checkpoint)")
        w = ds.w_for(np.arange(len(ds))) if ds.redraw_w else ds.w
        return tpgd.estimate(w, ds.y, params)

    out = np.zeros_like(ds.h)
    groups = [np.arange(len(ds))[i : i + 1] for i in range(len(ds))] if ds.redraw_w else [
        np.flatnonzero(ds.snr_db == s) for s in ds.snrs
    ]
    for idx in groups:
        if idx.size == 0:
            continue
        w = ds.w_for(idx[0]) if ds.redraw_w else ds.w
        y = ds.y[idx]
        sigma = snr_to_noise_std(float(ds.snr_db[idx[0]]))
        if estimator == "ls":
            out[idx] = solvers.ls_solve(w, y)
        elif estimator == "ista":
            out[idx] = solvers.ista_solve(w, y, solver_config or solvers.ISTA_DEFAULT, noise_std=sigma)[0]
        else:
            out[idx] = solvers.amp_solve(w, y, solver_config or solvers.AMP_DEFAULT, noise_std=sigma)[0]
    return out


def evaluate(estimator: str, ds: Dataset, params: tpgd.TpgdParams | None = None,
             solver_config: solvers.SolverConfig | None = None, name: str | None = None) -> EstimatorReport:
    """Per-SNR NMSE of one estimator on a (test) dataset."""
    start = time.perf_counter()
    est = run_estimator(estimator, ds, params, solver_config)
    per = nmse_per_sample(est, ds.h)
    snrs, vals, counts = [], [], []
    for s in ds.snrs:
        mask = ds.snr_db == s
        if not mask.any():
            continue
        snrs.append(float(s))
        vals.append(float(np.mean(per[mask])))
        counts.append(int(mask.sum()))
    if estimator in ("tpgd", "tpgd-a"):
        model = [params.config.to_dict(), [t.data.tobytes().hex()[:64] for t in params.parameters()[:4]]]
    elif estimator in ("ista", "amp"):
        model = asdict(solver_config or (solvers.ISTA_DEFAULT if estimator == "ista" else solvers.AMP_DEFAULT))
    else:
        model = None
    hsh = short_hash([estimator, ds.config_hash, int(ds.selection_seed), ds.split, model])
    return EstimatorReport(name or estimator, snrs, vals, counts, hsh, time.perf_counter() - start)


def compare(reports: list[EstimatorReport]) -> str:
    """Combined CSV of several reports, ordered by estimator then SNR."""
    rows = sorted((r for rep in reports for r in rep.rows()), key=lambda r: (r[0], r[1]))
    return rows_to_csv(rows)


# ---------------------------------------------------------------------------
# experiment recipes


@dataclass
class Bundle:
    """Reports of one experiment plus the training logs behind them."""

    name: str
    reports: list[EstimatorReport] = field(default_factory=list)
    logs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def get(self, estimator: str) -> EstimatorReport:
        for r in self.reports:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def write(self, out_dir) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        text = compare(self.reports)
        with open(os.path.join(out_dir, f"{self.name}.csv"), "w", newline="") as f:
            f.write(text)
        with open(os.path.join(out_dir, f"{self.name}_plot.csv"), "w", newline="") as f:
            f.write(text)


def train_tpgd(net_cfg: tpgd.NetConfig, train_cfg: TrainConfig, splits: dict[str, Dataset]):
    params = tpgd.TpgdParams.init(net_cfg, derive_seed(train_cfg.seed, 7), np.dtype(train_cfg.dtype).type)
    return train(params, train_cfg, splits["train"], splits.get("val"))


def experiment_snr_sweep(splits, net_cfg, train_cfg, baselines=("ista", "amp", "ls"), pretrained=None) -> Bundle:
    """TPGD plus classical baselines on one dataset, NMSE versus SNR.

    ``pretrained`` skips training and evaluates the given parameters.
    """
    bundle = Bundle("snr_sweep")
    params = _trained(bundle, "tpgd", net_cfg, train_cfg, splits, pretrained)
    bundle.reports.append(evaluate("tpgd", splits["test"], params))
    for b in baselines:
        bundle.reports.append(evaluate(b, splits["test"]))
    return bundle


def experiment_ablation(splits, net_cfg, train_cfg, pretrained=None) -> Bundle:
    """Full network versus the same network without cross-layer fusion.

    ``pretrained`` maps ``"tpgd"``/``"tpgd-a"`` to parameters already trained on ``splits``.
    """
    bundle = Bundle("ablation")
    pretrained = pretrained or {}
    for name, flag in (("tpgd", True), ("tpgd-a", False)):
        params = _trained(bundle, name, _with(net_cfg, clfaf=flag), train_cfg, splits, pretrained.get(name))
        bundle.reports.append(evaluate(name, splits["test"], params, name=name))
    return bundle


def experiment_rf_sweep(build, rf_values, net_cfg, train_cfg, pretrained=None) -> Bundle:
    """One trained network per RF-chain count; ``build(n_rf)`` returns the splits.

    ``pretrained`` maps an RF-chain count to parameters trained on ``build(n_rf)``.
    """
    bundle = Bundle("rf_sweep")
    pretrained = pretrained or {}
    for n_rf in rf_values:
        splits = build(n_rf)
        name = f"tpgd-nrf{n_rf}"
        params = _trained(bundle, name, net_cfg, train_cfg, splits, pretrained.get(n_rf))
        bundle.reports.append(evaluate("tpgd", splits["test"], params, name=name))
    return bundle


def experiment_snr_shift(matched_splits, shifted_splits, net_cfg, train_cfg, pretrained=None) -> Bundle:
    """Train on matched and on shifted SNRs; evaluate both on the matched test split.

    ``pretrained`` maps ``"tpgd"``/``"tpgd-r"`` to already trained parameters.
    """
    bundle = Bundle("snr_shift")
    pretrained = pretrained or {}
    test = matched_splits["test"]
    for name, splits in (("tpgd", matched_splits), ("tpgd-r", shifted_splits)):
        params = _trained(bundle, name, net_cfg, train_cfg, {"train": splits["train"], "val": splits["val"]},
                          pretrained.get(name))
        bundle.reports.append(evaluate("tpgd", test, params, name=name))
    return bundle


def _trained(bundle, name, net_cfg, train_cfg, splits, pretrained):
    if pretrained is None:
        pretrained, hist = train_tpgd(net_cfg, train_cfg, splits)
        bundle.logs[name] = hist
    bundle.params[name] = pretrained
    return pretrained


def layer_nmse(params: tpgd.TpgdParams, ds: Dataset, batch: int = 256) -> list[float]:
    """NMSE of every layer's output H_1..H_T on ``ds``."""
    w_all = ds.w_for(np.arange(len(ds))) if ds.redraw_w else ds.w
    per_layer = [[] for _ in range(params.config.layers)]
    with tn.no_grad():
        for i in range(0, len(ds), batch):
            w = w_all[i : i + batch] if ds.redraw_w else w_all
            for t, h in enumerate(tpgd.tpgd_forward(w, ds.y[i : i + batch], params)):
                per_layer[t].append(tpgd.image_to_vec(h.data))
    return [nmse(np.concatenate(est), ds.h) for est in per_layer]


def _with(cfg, **changes):
    d = cfg.to_dict()
    d.update(changes)
    return type(cfg)(**d)
