"""Predictor-based negative log-likelihoods and finite-difference gradients.

Both objectives omit the ``(p/2) ln(2 pi)`` per-sample constant; add
:func:`gaussian_constant` to obtain absolute log-densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dataset import Dataset
from .errors import (
    AssumptionError,
    ConditioningError,
    ConvergenceError,
    StabilityError,
)
from .model import THETA_MARGIN, NetworkModel, assemble_closed_loop, spectral_radius, theta_layout
from .riccati import initial_covariance, qrs_blocks, solve_dare


@dataclass(frozen=True)
class NllValue:
    value: float
    theta: np.ndarray
    quad: float = np.nan
    logdet: float = np.nan
    per_step: np.ndarray | None = None

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))


def _infinite(model) -> NllValue:
    return NllValue(np.inf, model.theta)


def gaussian_constant(n_obs: int) -> float:
    return 0.5 * n_obs * np.log(2.0 * np.pi)


def in_theta(model: NetworkModel, margin=THETA_MARGIN, ss=None) -> bool:
    """Closed-loop spectral radius within 1 - margin."""
    ss = ss if ss is not None else assemble_closed_loop(model)
    return spectral_radius(ss.F_c) <= 1.0 - margin


def _result(model, quad_k, logdet_k, per_step) -> NllValue:
    q, ld = float(np.sum(quad_k)), float(np.sum(logdet_k))
    steps = 0.5 * (quad_k + logdet_k) if per_step else None
    return NllValue(0.5 * (q + ld), model.theta, q, ld, steps)


def nll_stationary(
    model: NetworkModel, data: Dataset, *, margin=THETA_MARGIN, per_step=False
) -> NllValue:
    """(1/2) sum_k eps_k^T Sigma_eps^{-1} eps_k + ln det Sigma_eps.

    Innovations come from the stationary Kalman predictor started at zero.
    Returns an infinite value outside the stability margin.
    """
    ss = assemble_closed_loop(model)
    if not in_theta(model, margin, ss):
        return _infinite(model)
    ric = solve_dare(ss, model=model)
    L = np.linalg.cholesky(ric.Sigma_eps)
    _, _, quad = _kernels.stationary_filter(
        ss.F_c, ss.G_r, ss.H_o, ss.J_ro, np.ascontiguousarray(ric.K), L, data.r, data.x_o
    )
    logdet = np.full(data.N, 2.0 * np.sum(np.log(np.diag(L))))
    return _result(model, quad, logdet, per_step)


def nll_time_varying(
    model: NetworkModel,
    data: Dataset,
    init: str = "lyapunov",
    *,
    margin=THETA_MARGIN,
    per_step=False,
) -> NllValue:
    """Exact prediction-error decomposition via the time-varying Kalman filter.

    With ``init='zero'`` this is the exact negative log-density of the
    observations for trajectories started from rest.
    """
    ss = assemble_closed_loop(model)
    if not in_theta(model, margin, ss):
        return _infinite(model)
    if np.linalg.matrix_rank(ss.J_eo) < ss.p:
        raise AssumptionError("J_eo does not have full row rank")
    qrs = qrs_blocks(ss)
    Sig1 = initial_covariance(ss, init)
    status, _, _, _, _, quad, logdet = _kernels.tv_filter(
        ss.F_c, ss.G_r, ss.H_o, ss.J_ro, qrs.Q, qrs.S, qrs.R, Sig1, data.r, data.x_o, False
    )
    if status != 0:
        raise ConditioningError("innovation covariance is not positive definite")
    return _result(model, quad, logdet, per_step)


def safe_value(objective, model, data, **kwargs) -> float:
    """Objective value with solver failures mapped to +inf."""
    try:
        return objective(model, data, **kwargs).value
    except (ConvergenceError, ConditioningError, StabilityError, np.linalg.LinAlgError):
        return np.inf


def fd_gradient(f, x, *, rel_step=1e-6, log_mask=None, f0=None):
    """Central differences with steps rel_step * max(1, |x_i|).

    Coordinates flagged in ``log_mask`` are perturbed multiplicatively
    (x_i exp(+-h)) and the chain rule maps the result back to x_i.  A stencil
    that evaluates to +inf is retried once with a 10x smaller step, then
    replaced by a one-sided difference on the finite side.
    """
    x = np.asarray(x, dtype=float)
    log_mask = np.zeros(x.size, bool) if log_mask is None else np.asarray(log_mask, bool)
    g = np.empty_like(x)

    def shifted(i, h):
        xs = x.copy()
        if log_mask[i]:
            xs[i] = np.exp(np.log(x[i]) + h)
        else:
            xs[i] += h
        return xs

    for i in range(x.size):
        base = np.log(x[i]) if log_mask[i] else x[i]
        d = None
        for shrink in (1.0, 0.1):
            h = rel_step * max(1.0, abs(base)) * shrink
            fp, fm = f(shifted(i, h)), f(shifted(i, -h))
            if np.isfinite(fp) and np.isfinite(fm):
                d = (fp - fm) / (2.0 * h)
                break
        if d is None:
            if f0 is None:
                f0 = f(x)
            if np.isfinite(f0) and np.isfinite(fp):
                d = (fp - f0) / h
            elif np.isfinite(f0) and np.isfinite(fm):
                d = (f0 - fm) / h
            else:
                raise StabilityError(f"finite-difference stencil for coordinate {i} leaves Theta")
        g[i] = d / x[i] if log_mask[i] else d
    return g


def gradient(objective, model: NetworkModel, data: Dataset, **kwargs) -> np.ndarray:
    """Gradient of ``objective(model, data)`` over the packed theta layout.

    Noise variances are differentiated in log-space.
    """
    theta = model.theta
    lay = theta_layout(model.orders)
    log_mask = np.zeros(theta.size, bool)
    log_mask[lay["lam"]] = True

    def f(th):
        return safe_value(objective, model.with_theta(th), data, **kwargs)

    if not np.isfinite(f(theta)):
        raise StabilityError("objective is not finite at the evaluation point")
    return fd_gradient(f, theta, log_mask=log_mask)
