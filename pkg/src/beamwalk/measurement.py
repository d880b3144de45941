"""Beam-selection matrices, pilot measurements and dataset files.

Each pilot instant ``m`` combines the ``N`` lens outputs into ``N_RF``
RF chains with a random one-bit matrix ``W_m`` whose entries are
``+-1/sqrt(M N_RF)``. Pilot symbols are 1, so the stacked measurement of
one user is ``y = [W_1 (h + n_1); ...; W_M (h + n_M)]`` with every
``n_m ~ CN(0, sigma^2 I)``.

SNR is per receive antenna: the SV normalisation gives unit average power
per antenna, so ``sigma = 10 ** (-snr_db / 20)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import (
    complex_normal,
    derive_seed,
    gen_sv_channel,
    import_channels,
    lens_codebook,
    make_rng,
)

SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (at byte {offset})")
        self.offset = offset


class SplitAccessError(RuntimeError):
    """A split was used where it is not allowed (e.g. training on test data)."""


@dataclass
class SelectionMatrix:
    blocks: np.ndarray  # (M, N_RF, N)
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.blocks.shape[0]

    @property
    def n_rf(self) -> int:
        return self.blocks.shape[1]

    @property
    def n(self) -> int:
        return self.blocks.shape[2]

    @property
    def stacked(self) -> np.ndarray:
        """(M N_RF, N) row-stack of W_1..W_M."""
        return self.blocks.reshape(-1, self.n)


def gen_selection_matrix(n: int, n_rf: int, m: int, rng: np.random.Generator, seed: int | None = None) -> SelectionMatrix:
    if n_rf > n:
        raise ValueError(f"N_RF <= N required (N_RF={n_rf}, N={n})")
    if m < 1 or n_rf < 1:
        raise ValueError(f"M and N_RF must be >= 1 (M={m}, N_RF={n_rf})")
    signs = rng.integers(0, 2, size=(m, n_rf, n)) * 2 - 1
    return SelectionMatrix(signs / np.sqrt(m * n_rf), seed)


def selection_from_seed(n: int, n_rf: int, m: int, seed: int) -> SelectionMatrix:
    return gen_selection_matrix(n, n_rf, m, make_rng(seed), seed)


def snr_to_noise_std(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 20.0))


@dataclass
class ChannelSample:
    y: np.ndarray
    h: np.ndarray
    snr_db: float
    noise_seed: int | None = None


def measure_with_noise(sel: SelectionMatrix, h: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Stacked measurement for beamspace ``h`` (N,) and per-instant noise (M, N)."""
    h = np.asarray(h)
    if h.shape != (sel.n,):
        raise ValueError(f"channel of shape {h.shape} does not match N={sel.n}")
    return np.einsum("mrn,mn->mr", sel.blocks, h[None, :] + noise).reshape(-1)


def draw_noise(sel: SelectionMatrix, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    sigma = snr_to_noise_std(snr_db)
    return complex_normal(rng, (sel.m, sel.n), sigma * sigma)


def measure(sel: SelectionMatrix, h: np.ndarray, snr_db: float, rng: np.random.Generator | None = None,
            noise_seed: int | None = None) -> ChannelSample:
    """Noisy pilot measurement of one user's beamspace channel.

    ``snr_db=inf`` gives the noiseless ``Y = W H``.
    """
    if rng is None:
        if noise_seed is None:
            raise ValueError("pass either rng or noise_seed")
        rng = make_rng(noise_seed)
    if np.isinf(snr_db):
        noise = np.zeros((sel.m, sel.n), dtype=complex)
    else:
        noise = draw_noise(sel, snr_db, rng)
    return ChannelSample(measure_with_noise(sel, h, noise), np.asarray(h, dtype=complex), float(snr_db), noise_seed)


def block_operator(sel: SelectionMatrix, users: int) -> np.ndarray:
    """All-user operator ``kron(I_K, W_stacked)``."""
    return np.kron(np.eye(users), sel.stacked)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    n: int = 64
    n_rf: int = 16
    m: int = 4
    paths: int = 3
    snrs: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    train: int = 2000
    val: int = 200
    test: int = 500
    redraw_w: bool = False
    channels_path: str | None = None

    def __post_init__(self):
        self.snrs = tuple(float(s) for s in self.snrs)
        self.validate()

    def validate(self) -> None:
        if self.n_rf > self.n:
            raise ValueError(f"N_RF <= N required (N_RF={self.n_rf}, N={self.n})")
        if self.m < 1 or self.n_rf < 1 or self.n < 1:
            raise ValueError("N, N_RF and M must be >= 1")
        if not 1 <= self.paths <= self.n:
            raise ValueError(f"1 <= paths <= N required (paths={self.paths})")
        if not self.snrs:
            raise ValueError("SNR list must be non-empty")
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split sizes must be non-negative")

    def count(self, split: str) -> int:
        return getattr(self, split)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snrs"] = list(self.snrs)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    split: str
    n: int
    n_rf: int
    m: int
    snrs: tuple[float, ...]
    h: np.ndarray  # (count, N) beamspace
    y: np.ndarray  # (count, M N_RF)
    snr_db: np.ndarray
    noise_seed: np.ndarray
    selection_seed: int
    config_hash: str = "0" * 16
    redraw_w: bool = False
    _w: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.h.shape[0]

    @property
    def w(self) -> np.ndarray:
        """Fixed stacked selection matrix (P, N)."""
        if self._w is None:
            self._w = selection_from_seed(self.n, self.n_rf, self.m, self.selection_seed).stacked
        return self._w

    def w_for(self, idx) -> np.ndarray:
        """Selection matrix of one record, or (len(idx), P, N) for an index array."""
        if not self.redraw_w:
            return self.w
        if np.ndim(idx) == 0:
            return selection_from_seed(self.n, self.n_rf, self.m, derive_seed(self.selection_seed, int(idx))).stacked
        return np.stack([self.w_for(int(i)) for i in idx])

    def counts(self) -> list[int]:
        return [int(np.sum(self.snr_db == s)) for s in self.snrs]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if self.redraw_w:
            raise ValueError("subsets of redraw-W datasets are not supported")
        return Dataset(self.split, self.n, self.n_rf, self.m, self.snrs, self.h[idx], self.y[idx],
                       self.snr_db[idx], self.noise_seed[idx], self.selection_seed, self.config_hash, False, self._w)

    def at_snr(self, snr: float) -> "Dataset":
        return self.subset(np.flatnonzero(self.snr_db == snr))

    def require_split(self, *allowed: str) -> None:
        if self.split not in allowed:
            raise SplitAccessError(f"{self.split!r} split used where only {allowed} are allowed")

    def sample(self, i: int) -> ChannelSample:
        return ChannelSample(self.y[i], self.h[i], float(self.snr_db[i]), int(self.noise_seed[i]))


def _split_key(split: str) -> int:
    return SPLITS.index(split) + 1


def build_split(cfg: DatasetConfig, split: str, master_seed: int) -> Dataset:
    """One split. Every SNR group reuses the same channels with fresh noise."""
    count = cfg.count(split)
    sel_seed = derive_seed(master_seed, 0x5E1)
    sel = selection_from_seed(cfg.n, cfg.n_rf, cfg.m, sel_seed)
    cb = lens_codebook(cfg.n)
    key = _split_key(split)

    if cfg.channels_path:
        imported = import_channels(cfg.channels_path)
        offset = sum(cfg.count(s) for s in SPLITS[: SPLITS.index(split)])
        if offset + count > len(imported):
            raise ValueError(f"{cfg.channels_path} holds {len(imported)} channels, need {offset + count}")
        if imported and imported[0].n != cfg.n:
            raise ValueError(f"imported channels have N={imported[0].n}, config says {cfg.n}")
        beams = [imported[offset + i].beamspace for i in range(count)]
    else:
        beams = [gen_sv_channel(cfg.n, cfg.paths, make_rng(derive_seed(master_seed, key, i, 1)), cb).beamspace
                 for i in range(count)]
    for i, b in enumerate(beams):
        if not np.any(b):
            raise ValueError(f"{split} channel {i} is identically zero")

    total = count * len(cfg.snrs)
    p = cfg.m * cfg.n_rf
    h = np.zeros((total, cfg.n), dtype=complex)
    y = np.zeros((total, p), dtype=complex)
    snr = np.zeros(total)
    seeds = np.zeros(total, dtype=np.uint64)
    r = 0
    for si, s in enumerate(cfg.snrs):
        for i in range(count):
            ns = derive_seed(master_seed, key, si, i, 2)
            sel_r = sel
            if cfg.redraw_w:
                sel_r = selection_from_seed(cfg.n, cfg.n_rf, cfg.m, derive_seed(sel_seed, r))
            sample = measure(sel_r, beams[i], s, noise_seed=ns)
            h[r], y[r], snr[r], seeds[r] = beams[i], sample.y, s, ns
            r += 1
    return Dataset(split, cfg.n, cfg.n_rf, cfg.m, cfg.snrs, h, y, snr, seeds, sel_seed,
                   cfg.hash(), cfg.redraw_w, None if cfg.redraw_w else sel.stacked)


def build_dataset(cfg: DatasetConfig, master_seed: int, out_dir=None) -> dict[str, Dataset]:
    """All three splits; written as ``<out_dir>/<split>.bwds`` when a directory is given."""
    out = {s: build_split(cfg, s, master_seed) for s in SPLITS}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for s, ds in out.items():
            save_dataset(Path(out_dir) / f"{s}.bwds", ds)
    return out


def replay(ds: Dataset, i: int) -> np.ndarray:
    """Recompute record ``i``'s measurement from (H, noise_seed, SNR)."""
    sel = SelectionMatrix(ds.w_for(i).reshape(ds.m, ds.n_rf, ds.n))
    return measure(sel, ds.h[i], float(ds.snr_db[i]), noise_seed=int(ds.noise_seed[i])).y


# ---------------------------------------------------------------------------
# binary dataset files
#
# header: "BWDS", version, N, N_RF, M, snr_count, snr_count x count (u32)
# extension: split u32, flags u32, selection seed u64, config hash 8 bytes,
#            snr values f64, fixed W as (M N_RF) x N f64
# records: snr_db f64, noise_seed u64, H (N x c16), Y ((M N_RF) x c16)

DATASET_MAGIC = b"BWDS"
DATASET_VERSION = 1


def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    counts = ds.counts()
    buf.write(struct.pack("<4sIIIII", DATASET_MAGIC, DATASET_VERSION, ds.n, ds.n_rf, ds.m, len(ds.snrs)))
    buf.write(struct.pack(f"<{len(counts)}I", *counts))
    buf.write(struct.pack("<IIQ", SPLITS.index(ds.split), int(ds.redraw_w), ds.selection_seed))
    buf.write(bytes.fromhex(ds.config_hash))
    buf.write(np.asarray(ds.snrs, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(ds.w.real if not ds.redraw_w else np.zeros((ds.m * ds.n_rf, ds.n)), dtype="<f8").tobytes())
    rec = np.dtype([("snr", "<f8"), ("seed", "<u8"), ("h", "<c16", (ds.n,)), ("y", "<c16", (ds.m * ds.n_rf,))])
    arr = np.zeros(len(ds), dtype=rec)
    arr["snr"], arr["seed"], arr["h"], arr["y"] = ds.snr_db, ds.noise_seed, ds.h, ds.y
    buf.write(arr.tobytes())
    return buf.getvalue()


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(dataset_to_bytes(ds))


def parse_dataset(data: bytes) -> Dataset:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise DatasetFormatError("truncated header", pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    magic, version, n, n_rf, m, ns = take("<4sIIIII")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {DATASET_VERSION})", 4)
    counts = take(f"<{ns}I")
    split_id, flags, sel_seed = take("<IIQ")
    if split_id >= len(SPLITS):
        raise DatasetFormatError(f"unknown split id {split_id}", pos - 16)
    (digest,) = take("<8s")
    snrs = take(f"<{ns}d")
    p = m * n_rf
    wpos = pos
    w = np.frombuffer(data, dtype="<f8", count=p * n, offset=pos).reshape(p, n) if pos + 8 * p * n <= len(data) else None
    if w is None:
        raise DatasetFormatError("truncated selection matrix", pos)
    pos += 8 * p * n
    rec = np.dtype([("snr", "<f8"), ("seed", "<u8"), ("h", "<c16", (n,)), ("y", "<c16", (p,))])
    total = sum(counts)
    if len(data) - pos != total * rec.itemsize:
        raise DatasetFormatError(f"record block has {len(data) - pos} bytes, header implies {total * rec.itemsize}", pos)
    arr = np.frombuffer(data, dtype=rec, count=total, offset=pos)
    ds = Dataset(SPLITS[split_id], n, n_rf, m, tuple(snrs), arr["h"].copy(), arr["y"].copy(), arr["snr"].copy(),
                 arr["seed"].copy(), sel_seed, digest.hex(), bool(flags & 1))
    if not ds.redraw_w:
        expect = ds.w
        if not np.array_equal(expect, w):
            raise DatasetFormatError("stored selection matrix does not match its seed", wpos)
    if ds.counts() != list(counts):
        raise DatasetFormatError("per-SNR counts do not match records", pos)
    return ds


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        return parse_dataset(f.read())
