import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beamwalk import channel as ch
from beamwalk import measurement as ms
from beamwalk import solvers as sv


def instance(seed, n=64, n_rf=16, m=4, snr=10.0, paths=3):
    rng = ch.make_rng(seed)
    w = ms.gen_selection_matrix(n, n_rf, m, rng).stacked
    h = ch.gen_sv_channel(n, paths, rng).beamspace
    sel = ms.SelectionMatrix(w.reshape(m, n_rf, n))
    y = ms.measure(sel, h, snr, rng).y
    return w, y, h


def nmse(a, b):
    return np.sum(np.abs(a - b) ** 2) / np.sum(np.abs(b) ** 2)


# -- objective and gradient step ---------------------------------------------

def test_objective_at_zero():
    w, y, _ = instance(0)
    assert abs(sv.objective_value(w, y, np.zeros(64), 0.3) - 0.5 * np.linalg.norm(y) ** 2) < 1e-12


def test_objective_zero_at_truth_noiseless():
    w, _, h = instance(0)
    assert abs(sv.objective_value(w, w @ h, h, 0.0)) < 1e-20


def test_objective_matches_high_precision():
    import mpmath

    w, y, h = instance(3)
    lam = 0.17
    mpmath.mp.dps = 40
    r = [mpmath.mpc(complex(y[i])) - mpmath.fsum(mpmath.mpc(complex(w[i, j])) * mpmath.mpc(complex(h[j])) for j in range(64))
         for i in range(64)]
    ref = mpmath.mpf(0.5) * mpmath.fsum(abs(v) ** 2 for v in r) + lam * mpmath.fsum(abs(mpmath.mpc(complex(x))) for x in h)
    assert abs(sv.objective_value(w, y, h, lam) - float(ref)) < 1e-12 * float(ref)


def test_gradient_step_zero_alpha():
    w, y, h = instance(1)
    np.testing.assert_array_equal(sv.gradient_step(w, y, h, 0.0), h)


def test_gradient_step_consistent_measurement():
    w, _, h = instance(1)
    np.testing.assert_allclose(sv.gradient_step(w, w @ h, h, 0.7), h, atol=1e-14)


def test_gradient_step_direct():
    w, y, h = instance(2)
    ref = h + 0.4 * np.array([sum(np.conj(w[i, j]) * (y[i] - np.dot(w[i], h)) for i in range(64)) for j in range(64)])
    np.testing.assert_allclose(sv.gradient_step(w, y, h, 0.4), ref, atol=1e-12)


def test_shape_mismatch_rejected():
    w, y, h = instance(0)
    with pytest.raises(ValueError):
        sv.gradient_step(w, y[:10], h, 0.1)


# -- soft threshold ----------------------------------------------------------

def test_soft_threshold_example():
    np.testing.assert_allclose(sv.soft_threshold(np.array([3 + 4j]), 1.0), [2.4 + 3.2j])


@given(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False))
def test_soft_threshold_zero_kappa_is_identity(x):
    assert sv.soft_threshold(np.array([x]), 0.0)[0] == x


@given(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False), st.floats(0, 10))
def test_soft_threshold_properties(x, extra):
    kappa = np.abs(np.complex128(x)) + extra
    assert sv.soft_threshold(np.array([x]), kappa)[0] == 0
    k2 = extra
    z = sv.soft_threshold(np.array([x]), k2)[0]
    # shrinks magnitude by exactly kappa and keeps the phase
    assert abs(abs(z) - max(abs(x) - k2, 0)) < 1e-9 * max(1, abs(x))
    if abs(z) > 1e-9:
        assert abs(z / abs(z) - x / abs(x)) < 1e-9


# -- ISTA --------------------------------------------------------------------

def test_ista_zero_measurement():
    w, _, _ = instance(0)
    h, trace = sv.ista_solve(w, np.zeros(64, complex), sv.SolverConfig(reg_weight=0.1))
    np.testing.assert_array_equal(h, 0)
    assert trace.iterations == 1 and trace.converged


def test_ista_objective_monotone_many_instances():
    for seed in range(50):
        w, y, _ = instance(seed, snr=float(seed % 20))
        lam = float(sv.default_lambda(ms.snr_to_noise_std(seed % 20), 64))
        _, trace = sv.ista_solve(w, y, sv.SolverConfig(max_iters=80, reg_weight=lam, tolerance=0.0))
        obj = np.asarray(trace.objective)
        assert np.all(np.diff(obj) <= 1e-12 * obj[:-1])


def test_ista_noiseless_one_sparse_recovery():
    # lambda small against |h_k| = sqrt(N) but large enough to pin the support quickly
    book = ch.lens_codebook(64)
    rng = ch.make_rng(3)
    w = ms.gen_selection_matrix(64, 16, 4, rng).stacked
    h = ch.realization_from_paths([ch.PathParams(0.8 + 0.6j, float(book.grid[17]))], 64, book).beamspace
    est, trace = sv.ista_solve(w, w @ h, sv.SolverConfig(max_iters=500, reg_weight=1e-2, tolerance=0.0), h_true=h)
    assert 10 * np.log10(nmse(est, h)) < -40
    assert len(trace.nmse) == trace.iterations <= 500


def test_ista_batched_equals_single():
    w, y, _ = instance(4)
    _, y2, _ = instance(5)
    cfg = sv.SolverConfig(max_iters=30, reg_weight=0.05, tolerance=0.0)
    both, _ = sv.ista_solve(w, np.stack([y, y2]), cfg)
    one, _ = sv.ista_solve(w, y2, cfg)
    np.testing.assert_allclose(both[1], one, atol=1e-14)


def test_ista_needs_lambda_or_noise():
    w, y, _ = instance(0)
    with pytest.raises(ValueError):
        sv.ista_solve(w, y, sv.SolverConfig())


def test_ista_divergence_with_oversized_step():
    w, y, _ = instance(0)
    with pytest.raises(sv.DivergenceError) as err:
        sv.ista_solve(w, y, sv.SolverConfig(max_iters=5000, step_size=100.0, reg_weight=0.0, tolerance=0.0))
    assert err.value.trace is not None and err.value.iteration > 1


def test_solver_config_rejects_bad_values():
    with pytest.raises(ValueError):
        sv.SolverConfig(max_iters=0)
    with pytest.raises(ValueError):
        sv.SolverConfig(step_size=-1.0)


# -- AMP ---------------------------------------------------------------------

def test_amp_zero_measurement():
    w, _, _ = instance(0)
    h, _ = sv.amp_solve(w, np.zeros(64, complex))
    np.testing.assert_array_equal(h, 0)


def test_amp_beats_ista_at_equal_iterations():
    wins = 0
    for seed in range(20):
        w, y, h = instance(100 + seed)
        sigma = ms.snr_to_noise_std(10.0)
        a, _ = sv.amp_solve(w, y, sv.SolverConfig(max_iters=20, tolerance=0.0), noise_std=sigma)
        i, _ = sv.ista_solve(w, y, sv.SolverConfig(max_iters=20, tolerance=0.0), noise_std=sigma)
        wins += nmse(a, h) <= nmse(i, h)
    assert wins >= 12


def test_onsager_term_helps():
    full, plain = [], []
    for seed in range(100):
        w, y, h = instance(1000 + seed)
        a, _ = sv.amp_solve(w, y, sv.SolverConfig(max_iters=20, tolerance=0.0))
        try:
            b, _ = sv.amp_solve(w, y, sv.SolverConfig(max_iters=20, tolerance=0.0, onsager=False))
        except sv.DivergenceError as exc:
            # without the correction the unit step can run away; keep its last iterate
            b = exc.estimate
        full.append(nmse(a, h))
        plain.append(nmse(b, h))
    assert np.mean(full) < np.mean(plain)


def test_amp_divergence_detected():
    w, y, h = instance(0)
    # an over-scaled operator with a vanishing threshold has no stable fixed point
    with pytest.raises(sv.DivergenceError):
        sv.amp_solve(w * 4.0, y, sv.SolverConfig(max_iters=200, tolerance=0.0, amp_threshold_scale=1e-9), h_true=h)


# -- least squares -----------------------------------------------------------

def test_ls_noiseless_exact():
    w, _, h = instance(6)
    assert 10 * np.log10(nmse(sv.ls_solve(w, w @ h), h)) < -80


def test_ls_batch_shape():
    w, y, _ = instance(6)
    assert sv.ls_solve(w, np.stack([y, y, y])).shape == (3, 64)
