"""Unfolded proximal-gradient estimator with a learned U-Net proximal map.

Each of the ``T`` layers applies a gradient step on the data-fidelity term
with its own trainable step size, then a U-Net (channel-attention block,
residual blocks, max-pool down / bilinear up) that replaces the proximal
operator. From layer 2 on, encoder features at every scale are fused with
the previous layer's encoder and decoder features through spatial
attention (CLFAF).

Beamspace channels travel through the network as 2-channel images
(real, imaginary) of shape ``grid_h x grid_w`` with row-major packing.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ATTENTION_MODES = ("d_st", "d_s")


class ContractError(ValueError):
    pass


def grid_shape(n: int) -> tuple[int, int]:
    """Image shape used for an ``n``-element beamspace vector."""
    gh = 2 ** int(math.floor(math.log2(math.sqrt(n))))
    if n % gh:
        raise ContractError(f"N={n} cannot be packed on a {gh}-row grid")
    return gh, n // gh


@dataclass
class NetConfig:
    n: int = 64
    layers: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    reduction: int = 4
    clfaf: bool = True
    attention: str = "d_st"
    alpha_init: float = 0.5
    beta_init: float = 0.0
    share_steps: bool = False
    zero_head: bool = True
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        self.widths = tuple(int(c) for c in self.widths)
        if self.grid is None:
            self.grid = grid_shape(self.n)
        self.grid = tuple(int(g) for g in self.grid)
        self.validate()

    @property
    def scales(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        gh, gw = self.grid
        if gh * gw != self.n:
            raise ContractError(f"grid {gh}x{gw} does not hold N={self.n}")
        step = 2 ** (self.scales - 1)
        if gh % step or gw % step:
            raise ContractError(f"grid {gh}x{gw} not divisible by {step} for {self.scales} scales")
        if self.layers < 1:
            raise ContractError("layers must be >= 1")
        if self.widths[0] < self.reduction:
            raise ContractError(f"channel attention needs C >= r ({self.widths[0]} < {self.reduction})")
        if self.attention not in ATTENTION_MODES:
            raise ContractError(f"attention must be one of {ATTENTION_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["grid"] = list(self.grid)
        return d


# ---------------------------------------------------------------------------
# tensorisation


def vec_to_image(h: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Complex (B, N) -> real (B, 2, gh, gw)."""
    h = np.atleast_2d(h)
    b = h.shape[0]
    return np.stack([h.real, h.imag], axis=1).reshape(b, 2, *grid)


def image_to_vec(img: np.ndarray) -> np.ndarray:
    b = img.shape[0]
    flat = img.reshape(b, 2, -1)
    return flat[:, 0] + 1j * flat[:, 1]


def composite_operator(w: np.ndarray) -> np.ndarray:
    """Real (2P x 2N) operator acting on stacked [Re; Im] for complex ``w``."""
    w = np.asarray(w)
    wr, wi = w.real, np.imag(w)
    return np.block([[wr, -wi], [wi, wr]])


def composite_vec(y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    return np.concatenate([y.real, y.imag], axis=1)


# ---------------------------------------------------------------------------
# parameters


def _conv_init(rng, cout: int, cin: int, k: int, zero: bool, dtype) -> tuple[Tensor, Tensor]:
    bound = 1.0 / math.sqrt(cin * k * k)
    if zero:
        w = np.zeros((cout, cin, k, k))
        b = np.zeros(cout)
    else:
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        b = rng.uniform(-bound, bound, size=cout)
    return tn.parameter(w.astype(dtype)), tn.parameter(b.astype(dtype))


def init_group(cfg: NetConfig, rng, with_clfaf: bool, dtype=None) -> dict[str, Tensor]:
    """Parameter dict for one proximal-mapping network."""
    dtype = dtype or tn.get_default_dtype()
    p: dict[str, Tensor] = {}

    def conv(name, cout, cin, k, zero=False):
        p[name + ".w"], p[name + ".b"] = _conv_init(rng, cout, cin, k, zero, dtype)

    c = cfg.widths
    conv("in", c[0], 2, 3)
    conv("cab.c1", c[0], c[0], 3)
    conv("cab.c2", c[0], c[0], 3)
    conv("cab.du1", c[0] // cfg.reduction, c[0], 1)
    conv("cab.du2", c[0], c[0] // cfg.reduction, 1)
    for j, cj in enumerate(c):
        if j:
            conv(f"enc{j}.down", cj, c[j - 1], 1)
        conv(f"enc{j}.rb.c1", cj, cj, 3)
        conv(f"enc{j}.rb.c2", cj, cj, 3)
        if with_clfaf:
            conv(f"fuse{j}.mix", cj, 3 * cj, 1)
            conv(f"fuse{j}.q", cj, cj, 1)
            conv(f"fuse{j}.k", cj, cj, 1)
            conv(f"fuse{j}.v", cj, cj, 1)
    last = len(c) - 1
    conv(f"dec{last}.rb.c1", c[last], c[last], 3)
    conv(f"dec{last}.rb.c2", c[last], c[last], 3)
    for j in range(last - 1, -1, -1):
        conv(f"dec{j}.reduce", c[j], c[j] + c[j + 1], 1)
        conv(f"dec{j}.rb.c1", c[j], c[j], 3)
        conv(f"dec{j}.rb.c2", c[j], c[j], 3)
    conv("out", 2, c[0], 3, zero=cfg.zero_head)
    for k, t in p.items():
        t.name = k
    return p


def share_map(layers: int) -> list[str]:
    """Layer -> parameter group: first and last layers own theirs, the middle shares one."""
    if layers == 1:
        return ["first"]
    return ["first"] + ["middle"] * (layers - 2) + ["last"]


@dataclass
class TpgdParams:
    config: NetConfig
    groups: dict[str, dict[str, Tensor]]
    alpha: list[Tensor]
    beta: list[list[Tensor]]
    layer_group: list[str] = field(default_factory=list)

    @classmethod
    def init(cls, config: NetConfig, seed: int = 0, dtype=None) -> "TpgdParams":
        dtype = dtype or tn.get_default_dtype()
        rng = np.random.Generator(np.random.Philox(seed))
        layer_group = share_map(config.layers)
        groups = {}
        for t, g in enumerate(layer_group):
            if g not in groups:
                groups[g] = init_group(config, rng, config.clfaf and t > 0, dtype)

        def scalar(v, name):
            return tn.parameter(np.full((1,), v, dtype=dtype), name=name)

        alpha, beta = [], []
        for t, g in enumerate(layer_group):
            if config.share_steps and g == "middle" and t > 1:
                alpha.append(alpha[1])
                beta.append(beta[1])
                continue
            alpha.append(scalar(config.alpha_init, f"alpha{t}"))
            if config.clfaf and t > 0:
                beta.append([scalar(config.beta_init, f"beta{t}.{j}") for j in range(config.scales)])
            else:
                beta.append([])
        return cls(config, groups, alpha, beta, layer_group)

    def group_for(self, t: int) -> dict[str, Tensor]:
        return self.groups[self.layer_group[t]]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Unique parameters, in a stable order."""
        out, seen = [], set()

        def add(name, t):
            if id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))

        for t, a in enumerate(self.alpha):
            add(f"alpha.{t}", a)
        for t, bs in enumerate(self.beta):
            for j, b in enumerate(bs):
                add(f"beta.{t}.{j}", b)
        for g in ("first", "middle", "last"):
            for k, v in self.groups.get(g, {}).items():
                add(f"{g}.{k}", v)
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.named_parameters():
            src = arrays[k]
            if src.shape != v.shape:
                raise ContractError(f"parameter {k}: shape {src.shape} != {v.shape}")
            v.data[...] = src

    def astype(self, dtype) -> "TpgdParams":
        clone = TpgdParams.init(self.config, 0, dtype)
        clone.load_arrays(self.state_arrays())
        return clone


# ---------------------------------------------------------------------------
# building blocks


def _conv(x: Tensor, p: dict, name: str) -> Tensor:
    w = p[name + ".w"]
    return tn.conv2d(x, w, p[name + ".b"], padding=w.shape[-1] // 2)


def rb_forward(x: Tensor, p: dict, prefix: str) -> Tensor:
    """conv3x3 -> relu -> conv3x3, plus identity skip."""
    r = _conv(tn.relu(_conv(x, p, prefix + ".c1")), p, prefix + ".c2")
    return tn.add(x, r)


def cab_forward(x: Tensor, p: dict, prefix: str = "cab") -> Tensor:
    """Residual block whose branch is re-weighted per channel by a sigmoid gate."""
    r = _conv(tn.relu(_conv(x, p, prefix + ".c1")), p, prefix + ".c2")
    gate = channel_gate(r, p, prefix)
    return tn.add(x, tn.mul(r, gate))


def channel_gate(r: Tensor, p: dict, prefix: str = "cab") -> Tensor:
    z = tn.global_avg_pool(r)
    z = tn.relu(_conv(z, p, prefix + ".du1"))
    return tn.sigmoid(_conv(z, p, prefix + ".du2"))


def clfaf_forward(e_prev: Tensor, d_prev: Tensor, e_cur: Tensor, p: dict, beta: Tensor, prefix: str, attention: str = "d_st"):
    """Fuse the previous layer's encoder/decoder maps into the current encoder map.

    Returns ``(fused, attention_map)``; the map has shape (B, HW, HW) and is
    row-stochastic.
    """
    if not (e_prev.shape == d_prev.shape == e_cur.shape):
        raise tn.ShapeError(f"clfaf: shapes {e_prev.shape}, {d_prev.shape}, {e_cur.shape} differ")
    b, c, h, w = e_cur.shape
    mixed = _conv(tn.concat([e_prev, d_prev, e_cur], axis=1), p, prefix + ".mix")
    q = tn.reshape(_conv(mixed, p, prefix + ".q"), (b, c, h * w))
    k = tn.reshape(_conv(mixed, p, prefix + ".k"), (b, c, h * w))
    v = tn.reshape(_conv(mixed, p, prefix + ".v"), (b, c, h * w))
    s = tn.softmax(tn.matmul(tn.transpose(q, (0, 2, 1)), k), axis=-1)
    if attention == "d_st":
        att = tn.matmul(v, tn.transpose(s, (0, 2, 1)))
    else:
        att = tn.matmul(v, s)
    fused = tn.add(tn.mul(tn.reshape(att, (b, c, h, w)), beta), e_cur)
    return fused, s


@dataclass
class LayerFeatures:
    enc: list[Tensor]
    dec: list[Tensor]


def pmm_forward(v: Tensor, prev: LayerFeatures | None, p: dict, betas: list[Tensor], cfg: NetConfig, layer: int = 0):
    """Learned proximal map; returns (H_t image, this layer's features)."""
    use_fusion = cfg.clfaf and layer > 0
    if use_fusion and prev is None:
        raise ContractError(f"layer {layer + 1} needs the previous layer's features")
    x = cab_forward(_conv(v, p, "in"), p)
    enc = []
    for j in range(cfg.scales):
        if j:
            x = _conv(tn.maxpool2(x), p, f"enc{j}.down")
        x = rb_forward(x, p, f"enc{j}.rb")
        if use_fusion:
            x, _ = clfaf_forward(prev.enc[j], prev.dec[j], x, p, betas[j], f"fuse{j}", cfg.attention)
        enc.append(x)
    last = cfg.scales - 1
    d = rb_forward(enc[last], p, f"dec{last}.rb")
    dec = [None] * cfg.scales
    dec[last] = d
    for j in range(last - 1, -1, -1):
        u = tn.concat([tn.bilinear_upsample2(d), enc[j]], axis=1)
        d = rb_forward(_conv(u, p, f"dec{j}.reduce"), p, f"dec{j}.rb")
        dec[j] = d
    out = tn.add(_conv(dec[0], p, "out"), v)
    return out, LayerFeatures(enc, dec)


def gdm_forward(h_prev: Tensor, alpha: Tensor, w_op: Tensor, y: Tensor) -> Tensor:
    """V = H + alpha * W^H (Y - W H) on the real composite representation.

    ``w_op`` is the (2P x 2N) composite operator, or (B, 2P, 2N) with one
    operator per sample; ``y`` is (B, 2P).
    """
    shape = h_prev.shape
    b = shape[0]
    h = tn.reshape(h_prev, (b, -1))
    if h.shape[1] != w_op.shape[-1] or y.shape != (b, w_op.shape[-2]) or (w_op.ndim == 3 and w_op.shape[0] != b):
        raise tn.ShapeError(f"gdm: H {shape}, W {w_op.shape}, Y {y.shape} do not conform")
    if w_op.ndim == 2:
        resid = tn.sub(y, tn.matmul(h, tn.transpose(w_op)))
        back = tn.matmul(resid, w_op)
    else:
        hb = tn.reshape(h, (b, 1, -1))
        resid = tn.sub(tn.reshape(y, (b, 1, -1)), tn.matmul(hb, tn.transpose(w_op, (0, 2, 1))))
        back = tn.reshape(tn.matmul(resid, w_op), (b, -1))
    return tn.reshape(tn.add(h, tn.mul(back, alpha)), shape)


def tpgd_forward(w: np.ndarray, y: np.ndarray, params: TpgdParams) -> list[Tensor]:
    """Run all layers; returns the per-layer channel images H_1..H_T.

    ``w`` is the (P x N) stacked selection matrix (or one per sample,
    (B, P, N)); ``y`` is complex (B, P).
    """
    cfg = params.config
    dtype = params.alpha[0].dtype
    w_op = Tensor(composite_operator(w), dtype=dtype)
    yc = Tensor(composite_vec(y), dtype=dtype)
    b = yc.shape[0]
    h = Tensor(np.zeros((b, 2, *cfg.grid)), dtype=dtype)
    feats = None
    outs = []
    for t in range(cfg.layers):
        v = gdm_forward(h, params.alpha[t], w_op, yc)
        h, feats = pmm_forward(v, feats, params.group_for(t), params.beta[t], cfg, layer=t)
        outs.append(h)
    return outs


def layerwise_loss(h_true: Tensor, estimates: list[Tensor]) -> Tensor:
    """Sum over layers of squared error, averaged over the batch."""
    h_true = tn.as_tensor(h_true)
    total = None
    for h in estimates:
        if h.shape != h_true.shape:
            raise tn.ShapeError(f"loss: estimate {h.shape} vs truth {h_true.shape}")
        term = tn.sum_(tn.square(tn.sub(h, h_true)))
        total = term if total is None else tn.add(total, term)
    return tn.scale(total, 1.0 / h_true.shape[0])


def estimate(w: np.ndarray, y: np.ndarray, params: TpgdParams, batch: int = 256) -> np.ndarray:
    """Final-layer complex estimates for complex measurements ``y`` (B, P)."""
    y = np.atleast_2d(y)
    w = np.asarray(w)
    out = []
    with tn.no_grad():
        for i in range(0, y.shape[0], batch):
            wb = w[i : i + batch] if w.ndim == 3 else w
            out.append(image_to_vec(tpgd_forward(wb, y[i : i + batch], params)[-1].data))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"BWCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: TpgdParams, optimizer_state: dict | None = None, meta: dict | None = None) -> None:
    """Write parameters (float32 blobs) and optional Adam state."""
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, optimizer_state, meta))


def checkpoint_bytes(params: TpgdParams, optimizer_state: dict | None = None, meta: dict | None = None) -> bytes:
    arch = params.config.to_dict()
    header = json.dumps({"arch": arch, "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(bytes.fromhex(config_hash(arch)))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    named = params.named_parameters()

    def blob(name, arr):
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        blob(name, t.data)
    if optimizer_state and "m" in optimizer_state:
        buf.write(struct.pack("<BQ", 1, optimizer_state["step"]))
        for (name, _), m, v in zip(named, optimizer_state["m"], optimizer_state["v"]):
            blob(name + "#m", m)
            blob(name + "#v", v)
    else:
        buf.write(struct.pack("<BQ", 0, 0))
    return buf.getvalue()


def load_checkpoint(path, dtype=np.float32):
    """Returns (params, optimizer_state or None, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_checkpoint(data, dtype)


def parse_checkpoint(data: bytes, dtype=np.float32):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    digest = bytes(take(8)).hex()
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)))
    if config_hash(header["arch"]) != digest:
        raise CheckpointError("architecture hash mismatch")
    cfg = NetConfig(**header["arch"])

    def blob():
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        return name, arr

    (count,) = struct.unpack("<I", take(4))
    arrays = dict(blob() for _ in range(count))
    params = TpgdParams.init(cfg, 0, dtype)
    expected = [k for k, _ in params.named_parameters()]
    if sorted(expected) != sorted(arrays):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    params.load_arrays({k: v.astype(dtype) for k, v in arrays.items()})
    has_opt, step = struct.unpack("<BQ", take(9))
    opt = None
    if has_opt:
        ms, vs = [], []
        for _ in expected:
            ms.append(np.array(blob()[1], dtype=dtype))
            vs.append(np.array(blob()[1], dtype=dtype))
        opt = {"step": step, "m": ms, "v": vs}
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes in checkpoint")
    return params, opt, header["meta"]
