"""Algebraic Riccati equation, Riccati recursion and Kalman predictors.

All quantities refer to the closed-loop realization

    xi_{k+1} = F_c xi_k + G_r r_k + G_e e_k
    x_{o,k}  = H_o xi_k + J_ro r_k + J_eo e_k,   cov(e_k) = Sigma_e

and the noise blocks [Q S; S^T R] = [G_e; J_eo] Sigma_e [G_e; J_eo]^T.
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
    DegenerateSampleError,
    SingularityError,
    StabilityError,
    StructureError,
)
from .model import RANK_RTOL, ClosedLoopSS, NetworkModel, spectral_radius

DARE_TOL = 1e-12
DARE_MAX_ITER = 100_000
RESIDUAL_TOL = 1e-8
TRIVIAL_TOL = 1e-10
LYAP_DIRECT_MAX_N = 64


@dataclass(frozen=True)
class QRS:
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class RiccatiSolution:
    Sigma: np.ndarray
    K: np.ndarray
    Sigma_eps: np.ndarray
    stabilizing: bool
    spectral_radius_closed: float
    trivial: bool = False
    iterations: int = 0
    residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "Sigma": self.Sigma.tolist(),
            "K": self.K.tolist(),
            "Sigma_eps": self.Sigma_eps.tolist(),
            "stabilizing": self.stabilizing,
            "spectral_radius_closed": self.spectral_radius_closed,
            "trivial": self.trivial,
            "iterations": self.iterations,
            "residual": self.residual,
        }


@dataclass(frozen=True)
class InnovationSequence:
    eps: np.ndarray
    Sigma_eps_seq: np.ndarray
    xi_hat: np.ndarray
    gains: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.eps.shape[0]


def qrs_blocks(ss: ClosedLoopSS) -> QRS:
    Ge, Je, Se = ss.G_e, ss.J_eo, ss.Sigma_e
    return QRS(Ge @ Se @ Ge.T, Ge @ Se @ Je.T, Je @ Se @ Je.T)


def _require_a2(ss: ClosedLoopSS) -> None:
    J = ss.J_eo
    if J.shape[0] == 0:
        raise AssumptionError("nothing is observed")
    s = np.linalg.svd(J, compute_uv=False)
    if s.size < J.shape[0] or s[-1] <= RANK_RTOL * max(s[0], 1.0):
        raise AssumptionError(
            "J_eo does not have full row rank; drop redundant observations first"
        )


def are_residual(ss: ClosedLoopSS, qrs: QRS, Sigma, K, Sigma_eps) -> float:
    """Largest relative residual over the three blocks of the ARE in gain form."""
    F, H = ss.F_c, ss.H_o
    pairs = [
        (Sigma_eps, H @ Sigma @ H.T + qrs.R),
        (K @ Sigma_eps, F @ Sigma @ H.T + qrs.S),
        (Sigma + K @ Sigma_eps @ K.T, F @ Sigma @ F.T + qrs.Q),
    ]
    res = 0.0
    for lhs, rhs in pairs:
        scale = max(1.0, np.linalg.norm(rhs), np.linalg.norm(lhs))
        res = max(res, np.linalg.norm(lhs - rhs) / scale)
    return float(res)


def _is_stable_poly(poly, band=0.0) -> bool:
    roots = np.roots(poly)
    return bool(roots.size == 0 or np.max(np.abs(roots)) < 1.0 - band)


def check_trivial_solution(ss: ClosedLoopSS, model: NetworkModel | None = None):
    """Return (0, S R^{-1}, R) when one of the closed-form cases applies.

    Two sufficient conditions are tested:
    Sigma_e - Sigma_e J_eo^T R^{-1} J_eo Sigma_e = 0 (all C^i stable), and,
    for output-error models (a = c, all A^i stable),
    Upsilon (I - J_eo^T (J_eo J_eo^T)^{-1} J_eo) = 0.
    Returns ``None`` when neither holds.
    """
    _require_a2(ss)
    qrs = qrs_blocks(ss)
    J, Se = ss.J_eo, ss.Sigma_e
    Rinv = np.linalg.inv(qrs.R)
    fires = False
    cond1 = Se - Se @ J.T @ Rinv @ J @ Se
    if np.max(np.abs(cond1)) <= TRIVIAL_TOL:
        fires = model is None or all(_is_stable_poly(nd.C_poly()) for nd in model.nodes)
    if not fires and model is not None:
        oe = all(np.array_equal(nd.a, nd.c) for nd in model.nodes)
        if oe and all(_is_stable_poly(nd.A_poly()) for nd in model.nodes):
            proj = J.T @ np.linalg.solve(J @ J.T, J)
            cond2 = model.topology.upsilon @ (np.eye(J.shape[1]) - proj)
            fires = np.max(np.abs(cond2)) <= TRIVIAL_TOL
    if not fires:
        return None
    K = qrs.S @ Rinv
    rho = spectral_radius(ss.F_c - K @ ss.H_o)
    Sigma = np.zeros((ss.n, ss.n))
    return RiccatiSolution(
        Sigma, K, qrs.R.copy(), rho < 1.0, rho, trivial=True,
        residual=are_residual(ss, qrs, Sigma, K, qrs.R),
    )


def riccati_step(Sigma_k, ss: ClosedLoopSS, qrs: QRS):
    """One step of the Riccati recursion.

    Returns ``(Sigma_{k+1}, K_k, Sigma_eps_k)``.
    """
    Sigma_k = np.ascontiguousarray(Sigma_k, dtype=float)
    ok, Sig_next, K, Se = _kernels.riccati_step(
        ss.F_c, ss.H_o, qrs.Q, qrs.S, qrs.R, Sigma_k
    )
    if not ok:
        raise ConditioningError("innovation covariance is not positive definite")
    return Sig_next, K, Se


def solve_lyapunov(ss: ClosedLoopSS | None = None, *, F=None, Q=None) -> np.ndarray:
    """Solve P = F P F^T + Q for stable F (default F_c and G_e Sigma_e G_e^T)."""
    if F is None:
        F = ss.F_c
        Q = ss.G_e @ ss.Sigma_e @ ss.G_e.T
    F = np.asarray(F, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = F.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if spectral_radius(F) >= 1.0:
        raise StabilityError("Lyapunov equation needs a stable F")
    if n <= LYAP_DIRECT_MAX_N:
        lhs = np.eye(n * n) - np.kron(F, F)
        P = np.linalg.solve(lhs, Q.reshape(-1)).reshape(n, n)
    else:
        # Smith doubling: P = sum_j F^j Q F^jT, squaring F each pass
        P, A = Q.copy(), F.copy()
        for _ in range(200):
            step = A @ P @ A.T
            P = P + step
            A = A @ A
            if np.linalg.norm(step) <= 1e-16 * np.linalg.norm(P):
                break
    return 0.5 * (P + P.T)


def lyapunov_residual(ss: ClosedLoopSS, P) -> float:
    Q = ss.G_e @ ss.Sigma_e @ ss.G_e.T
    res = P - ss.F_c @ P @ ss.F_c.T - Q
    return float(np.linalg.norm(res) / max(1.0, np.linalg.norm(P)))


def _gain_from_sigma(ss, qrs, Sigma):
    H = ss.H_o
    Se = H @ Sigma @ H.T + qrs.R
    Se = 0.5 * (Se + Se.T)
    K = np.linalg.solve(Se.T, (ss.F_c @ Sigma @ H.T + qrs.S).T).T
    return K, Se


def solve_dare(
    ss: ClosedLoopSS,
    qrs: QRS | None = None,
    model: NetworkModel | None = None,
    *,
    tol=DARE_TOL,
    max_iter=DARE_MAX_ITER,
    use_trivial=True,
) -> RiccatiSolution:
    """Stabilizing solution of the algebraic Riccati equation.

    Iterates the Riccati recursion from the Lyapunov solution, which converges
    geometrically to the stabilizing solution when J_eo has full row rank and
    no C^i has a root on the unit circle.  The closed-form cases are returned
    directly when ``use_trivial`` is set.
    """
    _require_a2(ss)
    if qrs is None:
        qrs = qrs_blocks(ss)
    if use_trivial:
        triv = check_trivial_solution(ss, model)
        if triv is not None and triv.stabilizing:
            return triv
    P = solve_lyapunov(ss)
    status, Sigma, iters, _ = _kernels.riccati_iterate(
        ss.F_c, ss.H_o, qrs.Q, qrs.S, qrs.R, P, tol, max_iter, 0
    )
    if status == 1:
        raise ConditioningError("innovation covariance lost definiteness")
    if status == 2:
        raise ConvergenceError(
            f"Riccati recursion did not converge in {max_iter} iterations "
            "(check full row rank of J_eo, C^i roots and stability)"
        )
    K, Se = _gain_from_sigma(ss, qrs, Sigma)
    res = are_residual(ss, qrs, Sigma, K, Se)
    if res > RESIDUAL_TOL:
        raise ConvergenceError(f"Riccati residual {res:.3g} exceeds {RESIDUAL_TOL:g}")
    rho = spectral_radius(ss.F_c - K @ ss.H_o)
    return RiccatiSolution(Sigma, K, Se, rho < 1.0, rho, iterations=int(iters), residual=res)


def riccati_iterates(ss: ClosedLoopSS, qrs: QRS, Sigma_1, count: int):
    """Sigma_1, ..., Sigma_count of the recursion (for convergence studies)."""
    _, _, _, hist = _kernels.riccati_iterate(
        ss.F_c, ss.H_o, qrs.Q, qrs.S, qrs.R,
        np.ascontiguousarray(Sigma_1, dtype=float), 0.0, count - 1, count,
    )
    return hist


def _check_data(ss: ClosedLoopSS, data: Dataset):
    if data.p != ss.p or data.m != ss.G_r.shape[1]:
        raise StructureError(
            f"data has p={data.p}, m={data.m}; model expects p={ss.p}, m={ss.G_r.shape[1]}"
        )


def initial_covariance(ss: ClosedLoopSS, init: str) -> np.ndarray:
    init = init.lower()
    if init == "lyapunov":
        return solve_lyapunov(ss)
    if init == "zero":
        return np.zeros((ss.n, ss.n))
    raise ValueError(f"unknown initialization {init!r}")


def kalman_time_varying(
    ss: ClosedLoopSS, qrs: QRS | None, data: Dataset, init: str = "lyapunov"
) -> InnovationSequence:
    """Time-varying Kalman predictor with xi_1 = 0.

    ``init='lyapunov'`` starts from the stationary state covariance,
    ``init='zero'`` from Sigma_1 = 0, which is exact for data generated with
    zero initial conditions.
    """
    _check_data(ss, data)
    if qrs is None:
        qrs = qrs_blocks(ss)
    Sig1 = initial_covariance(ss, init)
    status, eps, se, xi, gains, _, _ = _kernels.tv_filter(
        ss.F_c, ss.G_r, ss.H_o, ss.J_ro, qrs.Q, qrs.S, qrs.R, Sig1,
        data.r, data.x_o, True,
    )
    if status != 0:
        raise ConditioningError("innovation covariance is not positive definite")
    return InnovationSequence(eps, se, xi, gains)


def kalman_stationary(
    ss: ClosedLoopSS, qrs: QRS | None, ric: RiccatiSolution, data: Dataset
) -> InnovationSequence:
    """Time-invariant Kalman predictor with xi_1 = 0."""
    _check_data(ss, data)
    L = np.linalg.cholesky(ric.Sigma_eps)
    eps, xi, _ = _kernels.stationary_filter(
        ss.F_c, ss.G_r, ss.H_o, ss.J_ro, np.ascontiguousarray(ric.K), L, data.r, data.x_o
    )
    se = np.broadcast_to(ric.Sigma_eps, (data.N,) + ric.Sigma_eps.shape)
    return InnovationSequence(eps, se, xi)


def predictions(ss: ClosedLoopSS, innov: InnovationSequence, data: Dataset) -> np.ndarray:
    """One-step predictions x_hat = x_o - eps."""
    return data.x_o - innov.eps


def predictor_transfers(ss: ClosedLoopSS, K, z: complex):
    """W_o(z), W_r(z) of the Kalman predictor with gain K."""
    K = np.asarray(K)
    AK = ss.F_c - K @ ss.H_o
    Rz = z * np.eye(ss.n) - AK
    if ss.n and np.linalg.cond(Rz) > 1e12:
        raise SingularityError(f"z={z} is an eigenvalue of F_c - K H_o")
    W_o = ss.H_o @ np.linalg.solve(Rz, K) if ss.n else np.zeros((ss.p, ss.p))
    W_r = (ss.H_o @ np.linalg.solve(Rz, ss.G_r - K @ ss.J_ro) if ss.n else 0.0) + ss.J_ro
    return W_o, W_r


def predictor_to_innovation(W_o, W_r):
    """Recover (G_o, G_c) = (W_o (I - W_o)^{-1}, (I - W_o)^{-1} W_r).

    The returned G_o excludes the identity feedthrough, i.e. it equals
    H_o (zI - F_c)^{-1} K.
    """
    W_o = np.atleast_2d(W_o)
    W_r = np.atleast_2d(W_r)
    D = np.eye(W_o.shape[0]) - W_o
    if np.linalg.cond(D) > 1e12:
        raise DegenerateSampleError("I - W_o is singular at this sample")
    G_o = np.linalg.solve(D.T, W_o.T).T
    G_c = np.linalg.solve(D, W_r)
    return G_o, G_c
