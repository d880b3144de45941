"""Iterative sparse-recovery baselines for ``Y = W H + W N``.

All solvers work on complex numpy arrays and accept either one
measurement vector ``(P,)`` or a batch ``(B, P)`` sharing the same
selection matrix ``W`` of shape ``(P, N)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np


class DivergenceError(ArithmeticError):
    """Iterates blew up. ``trace`` holds everything recorded so far."""

    def __init__(self, msg: str, iteration: int, trace: "SolverTrace | None" = None, estimate=None):
        super().__init__(f"{msg} at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace
        self.estimate = estimate


@dataclass
class SolverConfig:
    max_iters: int = 200
    step_size: float | str = "auto"
    reg_weight: float | None = None
    tolerance: float = 1e-6
    amp_threshold_scale: float = 1.0
    onsager: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size != "auto" and not float(self.step_size) > 0:
            raise ValueError("step size must be positive")
        if self.reg_weight is not None and self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")


ISTA_DEFAULT = SolverConfig(max_iters=200)
AMP_DEFAULT = SolverConfig(max_iters=30)


@dataclass
class SolverTrace:
    objective: list = field(default_factory=list)
    nmse: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _check(w, y, h=None):
    w = np.asarray(w)
    y = np.asarray(y)
    if w.ndim != 2 or y.shape[-1] != w.shape[0]:
        raise ValueError(f"W {w.shape} and Y {y.shape} do not conform")
    if h is not None and np.shape(h)[-1] != w.shape[1]:
        raise ValueError(f"W {w.shape} and H {np.shape(h)} do not conform")
    return w, y


def objective_value(w, y, h, lam: float):
    """0.5 ||Y - W H||^2 + lam * sum |H|; per row for batches."""
    w, y = _check(w, y, h)
    r = y - h @ w.T
    return 0.5 * np.sum(np.abs(r) ** 2, axis=-1) + lam * np.sum(np.abs(h), axis=-1)


def gradient_step(w, y, h, alpha):
    """H + alpha W^H (Y - W H)."""
    w, y = _check(w, y, h)
    return h + alpha * ((y - h @ w.T) @ w.conj())


def soft_threshold(x, kappa):
    """Complex soft threshold x * max(1 - kappa/|x|, 0)."""
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.maximum(mag - kappa, 0.0) / np.where(mag > 0, mag, 1.0)
    return x * scale


def default_lambda(noise_std, n: int):
    return 0.1 * np.asarray(noise_std, dtype=float) * np.sqrt(2.0 * np.log(n))


def spectral_step(w) -> float:
    return 1.0 / float(np.linalg.norm(w, 2) ** 2)


def _nmse_rows(h, h_true):
    return np.sum(np.abs(h - h_true) ** 2, axis=-1) / np.sum(np.abs(h_true) ** 2, axis=-1)


def _lambda(config: SolverConfig, noise_std, n):
    if config.reg_weight is not None:
        return config.reg_weight
    if noise_std is None:
        raise ValueError("reg_weight is unset; pass noise_std for the default heuristic")
    return default_lambda(noise_std, n)


def _quiet(fn):
    """Divergence is detected explicitly, so silence numpy's overflow chatter."""

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return inner


@_quiet
def ista_solve(w, y, config: SolverConfig = ISTA_DEFAULT, h_true=None, noise_std=None):
    """Proximal gradient with the l1 prox, starting from zero.

    Stops after ``max_iters`` or when the relative change of every row
    drops below ``tolerance``.
    """
    w, y = _check(w, y)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    n = w.shape[1]
    alpha = spectral_step(w) if config.step_size == "auto" else float(config.step_size)
    lam = np.atleast_1d(_lambda(config, noise_std, n))
    lam_col = lam[:, None] if lam.size > 1 else lam[0]
    h = np.zeros((y2.shape[0], n), dtype=complex)
    trace = SolverTrace()
    for it in range(1, config.max_iters + 1):
        v = gradient_step(w, y2, h, alpha)
        h_new = soft_threshold(v, alpha * lam_col)
        if not np.all(np.isfinite(h_new)):
            raise DivergenceError("non-finite ISTA iterate", it, trace, h)
        change = np.linalg.norm(h_new - h, axis=-1)
        base = np.linalg.norm(h_new, axis=-1)
        h = h_new
        trace.objective.append(objective_value(w, y2, h, lam if lam.size > 1 else lam[0]))
        if h_true is not None:
            trace.nmse.append(_nmse_rows(h, np.atleast_2d(h_true)))
        trace.iterations = it
        if np.all(change <= config.tolerance * np.maximum(base, 1e-300)):
            trace.converged = True
            break
    if single:
        trace.objective = [float(o[0]) for o in trace.objective]
        trace.nmse = [float(e[0]) for e in trace.nmse]
        return h[0], trace
    return h, trace


def _eta_slope(x, kappa):
    """Average divergence of the complex soft threshold (half the trace of its real Jacobian)."""
    mag = np.abs(x)
    active = mag > kappa
    d = np.where(active, 1.0 - kappa / (2.0 * np.where(active, mag, 1.0)), 0.0)
    return d.mean(axis=-1)


@_quiet
def amp_solve(w, y, config: SolverConfig = AMP_DEFAULT, h_true=None, noise_std=None):
    """Approximate message passing with a complex soft-threshold denoiser.

    The threshold follows the residual: ``kappa_t = tau * ||r_t|| / sqrt(P)``.
    """
    w, y = _check(w, y)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    p, n = w.shape
    ratio = n / p
    h = np.zeros((y2.shape[0], n), dtype=complex)
    r_prev = np.zeros_like(y2)
    slope = np.zeros(y2.shape[0])
    trace = SolverTrace()
    ref = np.linalg.norm(y2, axis=-1)
    strikes = 0
    for it in range(1, config.max_iters + 1):
        r = y2 - h @ w.T
        if config.onsager:
            r = r + ratio * slope[:, None] * r_prev
        sigma = np.linalg.norm(r, axis=-1) / np.sqrt(p)
        x = h + r @ w.conj()
        kappa = config.amp_threshold_scale * sigma[:, None]
        h_new = soft_threshold(x, kappa)
        slope = _eta_slope(x, kappa)
        r_prev = r
        if not np.all(np.isfinite(h_new)):
            raise DivergenceError("non-finite AMP iterate", it, trace, h)
        change = np.linalg.norm(h_new - h, axis=-1)
        base = np.linalg.norm(h_new, axis=-1)
        h = h_new
        trace.objective.append(0.5 * np.sum(np.abs(y2 - h @ w.T) ** 2, axis=-1))
        if h_true is not None:
            err = _nmse_rows(h, np.atleast_2d(h_true))
            trace.nmse.append(err)
            blown = np.any(err > 10.0)
        else:
            blown = np.any(np.linalg.norm(r, axis=-1) > 10.0 * np.maximum(ref, 1e-300))
        strikes = strikes + 1 if blown else 0
        trace.iterations = it
        if strikes >= 5:
            raise DivergenceError("AMP error exceeded 10x its initial value for 5 iterations", it, trace, h)
        if np.all(change <= config.tolerance * np.maximum(base, 1e-300)):
            trace.converged = True
            break
    if single:
        trace.objective = [float(o[0]) for o in trace.objective]
        trace.nmse = [float(e[0]) for e in trace.nmse]
        return h[0], trace
    return h, trace


def ls_solve(w, y):
    """Minimum-norm least squares."""
    w, y = _check(w, y)
    return (np.linalg.pinv(w) @ np.atleast_2d(y).T).T.reshape(np.shape(y)[:-1] + (w.shape[1],))
