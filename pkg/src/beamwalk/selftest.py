"""Built-in verification suites run by ``beamwalk selftest``.

Three groups of checks, each returning :class:`Check` records:

* ``gradients``: central-difference checks of every differentiable op,
  the network blocks and a full T=3 network, all in float64;
* ``oracles``: the unrolled gradient step against the classical one,
  soft thresholding against a brute-force prox, monotone ISTA objective;
* ``physics``: codebook unitarity, steering-vector norms, beamspace
  energy preservation and on-grid sparsity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from . import solvers
from . import tensor as tn
from . import tpgd
from .measurement import gen_selection_matrix

GRAD_TOL = 1e-4
# A deep relu network has many kinks and gradients spanning several decades:
# probes straddling a kink are skipped, and entries far below the largest
# gradient are compared against that scale rather than their own.
NET_REL_FLOOR = 1e-3
KINK_TOL = 1e-4


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.suite}/{self.name}: {self.value:.3g} (tol {self.tolerance:g})"


def _t(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.sign(x) * (np.abs(x) + low)
    return tn.Tensor(x, requires_grad=True, dtype=np.float64)


def _op_cases(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 1, 4)
    m1, m2 = _t(rng, 2, 3, 5), _t(rng, 2, 5, 4)
    img = _t(rng, 2, 3, 6, 6)
    odd = _t(rng, 2, 3, 7, 7)
    k3, b3 = _t(rng, 4, 3, 3, 3), _t(rng, 4)
    k1 = _t(rng, 5, 3, 1, 1)
    pool_in = tn.Tensor(rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8) * 0.1, requires_grad=True, dtype=np.float64)
    small = _t(rng, 2, 3, 4, 4)
    # relu input kept away from zero so finite differences stay on one side of the kink
    pos = _t(rng, 3, 4, low=0.05)
    return [
        ("add", lambda: tn.add(a, row), [a, row]),
        ("sub", lambda: tn.sub(a, b), [a, b]),
        ("mul", lambda: tn.mul(a, row), [a, row]),
        ("scale", lambda: tn.scale(a, -1.7), [a]),
        ("relu", lambda: tn.relu(pos), [pos]),
        ("sigmoid", lambda: tn.sigmoid(a), [a]),
        ("square", lambda: tn.square(a), [a]),
        ("reshape", lambda: tn.reshape(a, (4, 3)), [a]),
        ("transpose", lambda: tn.transpose(m1, (0, 2, 1)), [m1]),
        ("concat", lambda: tn.concat([a, b], axis=0), [a, b]),
        ("sum", lambda: tn.sum_(m1, axis=1, keepdims=True), [m1]),
        ("mean", lambda: tn.mean(m1, axis=2), [m1]),
        ("global_avg_pool", lambda: tn.global_avg_pool(img), [img]),
        ("mse", lambda: tn.reshape(tn.mse(a, b), (1,)), [a, b]),
        ("matmul", lambda: tn.matmul(m1, m2), [m1, m2]),
        ("softmax", lambda: tn.softmax(m1, axis=-1), [m1]),
        ("conv2d_3x3", lambda: tn.conv2d(img, k3, b3, padding=1), [img, k3, b3]),
        ("conv2d_1x1", lambda: tn.conv2d(img, k1), [img, k1]),
        ("conv2d_stride2", lambda: tn.conv2d(odd, k3, b3, stride=2, padding=1), [odd, k3, b3]),
        ("maxpool2", lambda: tn.maxpool2(pool_in), [pool_in]),
        ("bilinear_upsample2", lambda: tn.bilinear_upsample2(small), [small]),
    ]


def _network_params(cfg: tpgd.NetConfig, rng) -> tpgd.TpgdParams:
    params = tpgd.TpgdParams.init(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for bs in params.beta:
        for b in bs:
            b.data[...] = rng.uniform(0.2, 0.8, b.shape)
    return params


def gradient_checks(seed: int = 0, sample: int = 4) -> list[Check]:
    prev = tn.get_default_dtype()
    tn.set_default_dtype(np.float64)
    try:
        return _gradient_checks(seed, sample)
    finally:
        tn.set_default_dtype(prev)


def _gradient_checks(seed, sample):
    rng = np.random.default_rng(seed)
    out = []

    def run(name, fn, tensors, readout_seed, kinks=False):
        rr = np.random.default_rng(readout_seed)
        probe = fn()
        r = tn.Tensor(rr.standard_normal(probe.shape), dtype=np.float64)
        res = tn.gradcheck(lambda: tn.sum_(tn.mul(fn(), r)), tensors, sample=sample * 4, rng=rng,
                           kink_tol=KINK_TOL if kinks else None, stats=True)
        ok = res.max_rel_error < GRAD_TOL and res.skipped <= 0.25 * res.probed
        out.append(Check("gradients", name, ok, res.max_rel_error, GRAD_TOL))

    for i, (name, fn, tensors) in enumerate(_op_cases(rng)):
        run(name, fn, tensors, 100 + i)

    # network blocks on a small desk grid
    cfg = tpgd.NetConfig(n=64, layers=3, widths=(4, 6, 8), zero_head=False)
    params = _network_params(cfg, rng)
    g = params.group_for(2)
    x = _t(rng, 2, 4, 8, 8)
    run("residual_block", lambda: tpgd.rb_forward(x, g, "enc0.rb"), [x, g["enc0.rb.c1.w"], g["enc0.rb.c2.b"]], 200, kinks=True)
    run("channel_attention_block", lambda: tpgd.cab_forward(x, g), [x, g["cab.c1.w"], g["cab.du1.w"], g["cab.du2.b"]], 201, kinks=True)
    e0, d0 = _t(rng, 2, 4, 8, 8), _t(rng, 2, 4, 8, 8)
    beta = params.beta[2][0]
    for mode in tpgd.ATTENTION_MODES:
        run(f"cross_layer_fusion_{mode}", lambda mode=mode: tpgd.clfaf_forward(e0, d0, x, g, beta, "fuse0", mode)[0],
            [e0, d0, x, beta, g["fuse0.mix.w"], g["fuse0.q.w"], g["fuse0.k.w"], g["fuse0.v.w"]], 202, kinks=True)

    w = ch.complex_normal(rng, (32, 64))
    w_op = tn.Tensor(tpgd.composite_operator(w), requires_grad=True, dtype=np.float64)
    y = _t(rng, 2, 64)
    h0 = _t(rng, 2, 2, 8, 8)
    alpha = tn.Tensor(np.array([0.3]), requires_grad=True, dtype=np.float64)
    run("gradient_descent_module", lambda: tpgd.gdm_forward(h0, alpha, w_op, y), [h0, alpha, w_op, y], 203)

    # the full T=3 network at the desk configuration
    full_cfg = tpgd.NetConfig(n=64, layers=3, zero_head=False)
    net = _network_params(full_cfg, rng)
    wd = gen_selection_matrix(64, 16, 4, rng).stacked
    hs = np.stack([ch.gen_sv_channel(64, 3, rng).beamspace for _ in range(2)])
    yd = hs @ wd.T + 0.1 * ch.complex_normal(rng, (2, 64))
    truth = tn.Tensor(tpgd.vec_to_image(hs, full_cfg.grid), dtype=np.float64)
    res = tn.gradcheck(lambda: tpgd.layerwise_loss(truth, tpgd.tpgd_forward(wd, yd, net)), net.parameters(),
                       sample=sample, rng=rng, rel_floor=NET_REL_FLOOR, kink_tol=KINK_TOL, stats=True)
    ok = res.max_rel_error < GRAD_TOL and res.skipped <= 0.25 * res.probed
    out.append(Check("gradients", "tpgd_network_T3", ok, res.max_rel_error, GRAD_TOL))
    return out


def _grid_prox(x: complex, kappa: float, half: float, steps: int):
    """Brute-force minimiser of 0.5|z - x|^2 + kappa |z| on a square grid around x."""
    axis = np.linspace(-half, half, steps)
    zr, zi = np.meshgrid(x.real + axis, x.imag + axis, indexing="ij")
    z = zr + 1j * zi
    cost = 0.5 * np.abs(z - x) ** 2 + kappa * np.abs(z)
    k = np.argmin(cost)
    return z.reshape(-1)[k], axis[1] - axis[0]


def oracle_checks(seed: int = 0, instances: int = 50) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    # unrolled gradient step versus the complex one
    worst = 0.0
    for _ in range(5):
        p, n, b = 48, 64, 3
        w = ch.complex_normal(rng, (p, n), 1.0 / p)
        y = ch.complex_normal(rng, (b, p))
        h = ch.complex_normal(rng, (b, n))
        a = float(rng.uniform(0.1, 1.0))
        ref = solvers.gradient_step(w, y, h, a)
        grid = tpgd.grid_shape(n)
        with tn.no_grad():
            got = tpgd.gdm_forward(tn.Tensor(tpgd.vec_to_image(h, grid), dtype=np.float64),
                                   tn.Tensor(np.array([a]), dtype=np.float64),
                                   tn.Tensor(tpgd.composite_operator(w), dtype=np.float64),
                                   tn.Tensor(tpgd.composite_vec(y), dtype=np.float64))
        worst = max(worst, float(np.max(np.abs(tpgd.image_to_vec(got.data) - ref))))
    out.append(Check("oracles", "gdm_equals_gradient_step", worst < 1e-10, worst, 1e-10))

    # soft threshold versus grid-search prox
    worst_ratio = 0.0
    for _ in range(40):
        x = complex(*rng.normal(0, 1, 2))
        kappa = float(rng.uniform(0.05, 1.5))
        z, step = _grid_prox(x, kappa, half=2.0, steps=801)
        st = complex(solvers.soft_threshold(np.array([x]), kappa)[0])
        worst_ratio = max(worst_ratio, abs(z - st) / step)
    # one grid cell diagonal
    out.append(Check("oracles", "soft_threshold_equals_grid_prox", worst_ratio <= np.sqrt(2), worst_ratio, np.sqrt(2)))

    # ISTA objective never increases with the spectral step
    worst_rise = 0.0
    for i in range(instances):
        r = np.random.default_rng([seed, i])
        p, n = 32, 64
        w = ch.complex_normal(r, (p, n), 1.0 / p)
        h = np.zeros(n, complex)
        h[r.choice(n, 3, replace=False)] = ch.complex_normal(r, 3)
        y = w @ h + ch.complex_normal(r, p, 0.01)
        cfg = solvers.SolverConfig(max_iters=100, reg_weight=float(r.uniform(0.01, 0.2)), tolerance=0.0)
        _, trace = solvers.ista_solve(w, y, cfg)
        obj = np.asarray(trace.objective)
        rise = float(np.max(np.diff(obj) / np.abs(obj[:-1]))) if obj.size > 1 else 0.0
        worst_rise = max(worst_rise, rise)
    out.append(Check("oracles", "ista_objective_non_increasing", worst_rise <= 1e-12, worst_rise, 1e-12))
    return out


def physics_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    worst_u = max(float(np.max(np.abs(ch.lens_codebook(n).u.conj().T @ ch.lens_codebook(n).u - np.eye(n))))
                  for n in (16, 63, 64, 128))
    out.append(Check("physics", "codebook_unitary", worst_u < 1e-10, worst_u, 1e-10))
    worst_sv = max(abs(np.linalg.norm(ch.steering_vector(float(t), 64)) - 1.0) for t in rng.uniform(-0.5, 0.5, 50))
    out.append(Check("physics", "steering_unit_norm", worst_sv < 1e-12, worst_sv, 1e-12))
    book = ch.lens_codebook(64)
    worst_norm = 0.0
    for _ in range(20):
        c = ch.gen_sv_channel(64, 3, rng, book)
        worst_norm = max(worst_norm, abs(np.linalg.norm(c.beamspace) - np.linalg.norm(c.spatial)) / np.linalg.norm(c.spatial))
    out.append(Check("physics", "beamspace_norm_preserved", worst_norm < 1e-12, worst_norm, 1e-12))
    worst_energy = 1.0
    for n in (64, 128):
        book = ch.lens_codebook(n)
        for k in rng.choice(n, 8, replace=False):
            c = ch.realization_from_paths([ch.PathParams(1.0 + 0.5j, float(book.grid[k]), 0.0)], n, book)
            e = np.abs(c.beamspace) ** 2
            worst_energy = min(worst_energy, float(e.max() / e.sum()))
    out.append(Check("physics", "on_grid_path_one_beam", worst_energy >= 0.9999, worst_energy, 0.9999))
    return out


SUITES = {"gradients": gradient_checks, "oracles": oracle_checks, "physics": physics_checks}


def run_all(suites=None, seed: int = 0, echo=print) -> bool:
    """Run the requested suites, echo one line per check and return overall success."""
    ok = True
    for name in suites or SUITES:
        start = time.perf_counter()
        checks = SUITES[name](seed=seed)
        for c in checks:
            echo(c.line())
            ok &= c.passed
        echo(f"{name}: {sum(c.passed for c in checks)}/{len(checks)} in {time.perf_counter() - start:.1f}s")
    return ok
