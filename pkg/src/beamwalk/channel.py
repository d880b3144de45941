"""Saleh-Valenzuela channels for a lens-array base station.

A uniform linear array with half-wavelength spacing sees a user through
``L`` paths; each path contributes a complex gain times the array steering
vector of its spatial direction. The lens acts as a unitary DFT ``U``
whose columns are steering vectors on the grid ``(n - (N+1)/2) / N``;
projecting the spatial channel onto those columns gives the (approximately
sparse) beamspace channel.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np


class ChannelFormatError(ValueError):
    """Malformed channel file; ``offset`` is the byte where parsing failed."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used throughout the package."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(*keys: int) -> int:
    """Independent 64-bit seed for a stream identified by ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def complex_normal(rng: np.random.Generator, size, var: float = 1.0) -> np.ndarray:
    """CN(0, var): real and imaginary parts i.i.d. N(0, var/2)."""
    s = np.sqrt(var / 2.0)
    return s * rng.standard_normal(size) + 1j * s * rng.standard_normal(size)


def steering_vector(theta: float, n: int) -> np.ndarray:
    """ULA response exp(-j 2 pi k theta) / sqrt(n), k = 0..n-1."""
    if n < 1:
        raise ValueError(f"antenna count must be >= 1, got {n}")
    k = np.arange(n)
    return np.exp(-2j * np.pi * k * theta) / np.sqrt(n)


@dataclass
class LensCodebook:
    n: int
    grid: np.ndarray
    u: np.ndarray

    @property
    def U(self) -> np.ndarray:
        return self.u


def lens_grid(n: int) -> np.ndarray:
    return (np.arange(1, n + 1) - (n + 1) / 2.0) / n


def lens_codebook(n: int) -> LensCodebook:
    """Steering vectors on the lens grid, one per column."""
    if n < 1:
        raise ValueError(f"antenna count must be >= 1, got {n}")
    grid = lens_grid(n)
    return LensCodebook(n=n, grid=grid, u=np.stack([steering_vector(t, n) for t in grid], axis=1))


@dataclass
class PathParams:
    gain: complex
    theta: float
    phi: float | None = None


@dataclass
class ChannelRealization:
    spatial: np.ndarray
    beamspace: np.ndarray
    paths: list[PathParams] = field(default_factory=list)
    user_index: int = 0
    rng_seed: int | None = None

    @property
    def n(self) -> int:
        return self.spatial.shape[0]


def sv_spatial(paths: list[PathParams], n: int) -> np.ndarray:
    """sqrt(N/L) * sum_l gain_l * a(theta_l)."""
    acc = np.zeros(n, dtype=complex)
    for p in paths:
        acc += p.gain * steering_vector(p.theta, n)
    return np.sqrt(n / len(paths)) * acc


def beamspace_transform(codebook: LensCodebook, spatial: np.ndarray) -> np.ndarray:
    """Project onto the lens directions: ``U^H @ spatial`` (works row-wise on batches)."""
    spatial = np.asarray(spatial)
    if spatial.shape[-1] != codebook.n:
        raise ValueError(f"channel length {spatial.shape[-1]} != codebook size {codebook.n}")
    return spatial @ codebook.u.conj()


def gen_sv_channel(n: int, paths: int, rng: np.random.Generator, codebook: LensCodebook | None = None,
                   user_index: int = 0, seed: int | None = None) -> ChannelRealization:
    """One SV realisation: CN(0,1) gains, directions uniform on [-0.5, 0.5)."""
    if paths < 1:
        raise ValueError(f"path count must be >= 1, got {paths}")
    if paths > n:
        raise ValueError(f"path count {paths} exceeds antenna count {n}")
    gains = complex_normal(rng, paths)
    thetas = rng.uniform(-0.5, 0.5, size=paths)
    plist = [PathParams(complex(g), float(t), float(np.arcsin(2 * t))) for g, t in zip(gains, thetas)]
    return realization_from_paths(plist, n, codebook, user_index, seed)


def realization_from_paths(paths: list[PathParams], n: int, codebook: LensCodebook | None = None,
                           user_index: int = 0, seed: int | None = None) -> ChannelRealization:
    codebook = codebook or lens_codebook(n)
    spatial = sv_spatial(paths, n)
    return ChannelRealization(spatial, beamspace_transform(codebook, spatial), paths, user_index, seed)


def gen_channels(n: int, paths: int, count: int, seed: int) -> list[ChannelRealization]:
    """``count`` realisations, each drawn from its own stream derived from ``seed``."""
    cb = lens_codebook(n)
    out = []
    for i in range(count):
        s = derive_seed(seed, i)
        out.append(gen_sv_channel(n, paths, make_rng(s), cb, user_index=i, seed=s))
    return out


# ---------------------------------------------------------------------------
# binary channel files: "BWCH", version, N, count, then count*N (re, im) f64

CHANNEL_MAGIC = b"BWCH"
CHANNEL_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def channels_to_bytes(spatial: np.ndarray) -> bytes:
    spatial = np.atleast_2d(np.asarray(spatial, dtype=complex))
    count, n = spatial.shape
    buf = io.BytesIO()
    buf.write(_HEADER.pack(CHANNEL_MAGIC, CHANNEL_VERSION, n, count))
    buf.write(np.ascontiguousarray(spatial, dtype="<c16").tobytes())
    return buf.getvalue()


def export_channels(path, channels) -> None:
    """Write spatial channels; accepts realisations or a (count, N) array."""
    if isinstance(channels, np.ndarray):
        spatial = channels
    else:
        spatial = np.stack([c.spatial for c in channels]) if channels else np.zeros((0, 0), complex)
    with open(path, "wb") as f:
        f.write(channels_to_bytes(spatial))


def parse_channels(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ChannelFormatError("file shorter than header", len(data))
    magic, version, n, count = _HEADER.unpack_from(data, 0)
    if magic != CHANNEL_MAGIC:
        raise ChannelFormatError(f"bad magic {magic!r}", 0)
    if version != CHANNEL_VERSION:
        raise ChannelFormatError(f"unsupported version {version}", 4)
    if n < 1 and count:
        raise ChannelFormatError("antenna count must be >= 1", 8)
    body = len(data) - _HEADER.size
    want = count * n * 16
    if body != want:
        raise ChannelFormatError(f"body has {body} bytes, header implies {want}", _HEADER.size + min(body, want))
    arr = np.frombuffer(data, dtype="<c16", offset=_HEADER.size).reshape(count, n)
    bad = ~np.isfinite(arr.view("<f8").reshape(count, n, 2)).all(axis=2)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ChannelFormatError(f"non-finite value in channel {i}, entry {j}", _HEADER.size + 16 * (i * n + j))
    return arr.astype(complex)


def import_channels(path) -> list[ChannelRealization]:
    """Load spatial channels and attach their beamspace form."""
    with open(path, "rb") as f:
        spatial = parse_channels(f.read())
    if spatial.shape[0] == 0:
        return []
    cb = lens_codebook(spatial.shape[1])
    beams = beamspace_transform(cb, spatial)
    return [ChannelRealization(s.copy(), b.copy(), user_index=i) for i, (s, b) in enumerate(zip(spatial, beams))]
