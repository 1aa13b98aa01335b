"""Predictor-free likelihood through the Toeplitz structural system.

With zero initial conditions the stacked signals x = (P kron I)^T (y, u) obey

    A x + b = (e, 0),   A = [[T_y, -T_u], [-Upsilon kron I, I]] (P kron I),

where only the first block row depends on the parameters.  Orthogonal
eliminations of the parameter-free rows leave a square system
``J (xbar_o2, xbar_m2) + b_tilde_1 = e`` whose Gaussian marginal in
``xbar_o2`` is the likelihood of the observations.

Signal vectors are stacked signal-major: all N samples of the first signal,
then the second, and so on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .dataset import Dataset
from .errors import ConditioningError, SingularityError
from .likelihood import NllValue, in_theta
from .model import THETA_MARGIN, NetworkModel

RANK_RTOL = 1e-10
WARN_BAND = (1e-12, 1e-8)


def _lower_toeplitz(first_col, N):
    col = np.zeros(N)
    k = min(N, len(first_col))
    col[:k] = first_col[:k]
    return linalg.toeplitz(col, np.zeros(N))


@dataclass(frozen=True)
class ToeplitzBank:
    T_a: list
    T_b: list
    T_c: list
    T_y: np.ndarray
    T_u: np.ndarray


def build_toeplitz_bank(model: NetworkModel, N: int) -> ToeplitzBank:
    """Lower-triangular Toeplitz forms T_a y = T_b u + T_c e of every node."""
    if N < 1:
        raise ValueError("horizon must be positive")
    Ta, Tb, Tc, Ty, Tu = [], [], [], [], []
    for nd in model.nodes:
        ta = _lower_toeplitz(np.concatenate(([1.0], nd.a)), N)
        tb = _lower_toeplitz(np.concatenate(([0.0], nd.b)), N)
        tc = _lower_toeplitz(np.concatenate(([1.0], nd.c)), N)
        # T_c^{-1} T_a is again lower-triangular Toeplitz: solve for its first column
        ya = linalg.solve_triangular(tc, ta[:, 0], lower=True, unit_diagonal=True)
        ub = linalg.solve_triangular(tc, tb[:, 0], lower=True, unit_diagonal=True)
        Ta.append(ta)
        Tb.append(tb)
        Tc.append(tc)
        Ty.append(_lower_toeplitz(ya, N))
        Tu.append(_lower_toeplitz(ub, N))
    return ToeplitzBank(Ta, Tb, Tc, linalg.block_diag(*Ty), linalg.block_diag(*Tu))


def signal_order(topology) -> tuple:
    """Observed signals first (in observation order), then missing ones."""
    obs = list(topology.observed)
    return tuple(obs + [i for i in range(2 * topology.M) if i not in obs])


def stack_signals(y, u, perm) -> np.ndarray:
    """x = (P kron I)^T (y, u) for N x M arrays y, u."""
    yu = np.hstack([y, u])
    return yu[:, list(perm)].T.reshape(-1)


@dataclass(frozen=True)
class StructuralSystem:
    A: np.ndarray
    b: np.ndarray
    perm: tuple
    N: int
    M: int
    p: int
    constraint: np.ndarray  # [-Upsilon, I] P, so that A_2 = constraint kron I_N

    @property
    def n_o(self) -> int:
        return self.p * self.N

    @property
    def n_m(self) -> int:
        return (2 * self.M - self.p) * self.N

    @property
    def A1(self):
        return self.A[: self.M * self.N]

    @property
    def A2(self):
        return self.A[self.M * self.N:]

    @property
    def b1(self):
        return self.b[: self.M * self.N]

    @property
    def b2(self):
        return self.b[self.M * self.N:]

    def blocks(self):
        """(A_1o, A_1m, A_2o, A_2m)."""
        MN, no = self.M * self.N, self.n_o
        A = self.A
        return A[:MN, :no], A[:MN, no:], A[MN:, :no], A[MN:, no:]


def assemble_structural(model: NetworkModel, r, N: int | None = None) -> StructuralSystem:
    """Structural system A x + b = (e, 0) for zero initial conditions."""
    topo = model.topology
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if r.shape[0] != N and N is not None:
        r = r[:N]
    N = r.shape[0]
    M = model.M
    bank = build_toeplitz_bank(model, N)
    I_N = np.eye(N)
    top = np.hstack([bank.T_y, -bank.T_u])
    bottom = np.hstack([-np.kron(topo.upsilon, I_N), np.eye(M * N)])
    perm = signal_order(topo)
    cols = np.concatenate([np.arange(s * N, (s + 1) * N) for s in perm])
    A = np.vstack([top, bottom])[:, cols]
    small = np.hstack([-topo.upsilon, np.eye(M)])[:, list(perm)]
    b = np.concatenate([np.zeros(M * N), -np.kron(topo.omega, I_N) @ r.T.reshape(-1)])
    # A is nonsingular iff the Schur complement T_y - T_u (Upsilon kron I) is
    schur = bank.T_y - bank.T_u @ np.kron(topo.upsilon, I_N)
    diag = np.abs(np.diag(schur))
    if diag.size and diag.min() < 1e-12:
        raise SingularityError("structural system is singular (ill-posed loop)")
    return StructuralSystem(A, b, perm, N, M, topo.p, small)


# ---------------------------------------------------------------------------
# elimination


def _kron_right(A, X, N):
    """A @ kron(X, I_N) without forming the Kronecker product."""
    rows = A.shape[0]
    k, j = X.shape
    return np.einsum("rkn,kj->rjn", A.reshape(rows, k, N), X).reshape(rows, j * N)


def _kron_left(X, B, N):
    """kron(X, I_N) @ B."""
    j, k = X.shape
    B2 = B if B.ndim == 2 else B[:, None]
    c = B2.shape[1]
    out = np.einsum("jk,knc->jnc", X, B2.reshape(k, N, c)).reshape(j * N, c)
    return out if B.ndim == 2 else out.ravel()


@dataclass
class ReducedSystem:
    """Blocks of the two reduced systems plus the orthogonal transforms.

    First system:  [A_tilde_1o2  A_bar_1m2] (xbar_o2, xbar_m2) + b_tilde_1 = e.
    Second system: A_tilde_2o11 xbar_o1 + Sigma1 xbar_m1 + A_tilde_2o12 xbar_o2 + b_bar_21 = 0,
                   A_tilde_2o21 xbar_o1 + b_bar_22 = 0.
    ``U``, ``V``, ``W`` are the small orthogonal factors; the full transforms
    are their Kronecker products with I_N.
    """

    A_tilde_1o2: np.ndarray
    A_bar_1m2: np.ndarray
    b_tilde_1: np.ndarray
    A_tilde_2o11: np.ndarray
    A_tilde_2o12: np.ndarray
    A_tilde_2o21: np.ndarray
    sigma1: np.ndarray
    b_bar_21: np.ndarray
    b_bar_22: np.ndarray
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    N: int
    dims: dict
    singular_values: np.ndarray
    notes: list = field(default_factory=list)

    @property
    def J(self) -> np.ndarray:
        return np.hstack([self.A_tilde_1o2, self.A_bar_1m2])

    def transform_observed(self, x_o):
        """(xbar_o1, xbar_o2) = W^T x_o."""
        xb = _kron_left(self.W.T, np.asarray(x_o, float)[:, None], self.N).ravel()
        k = self.dims["o1"]
        return xb[:k], xb[k:]

    def transform_missing(self, x_m):
        xb = _kron_left(self.V.T, np.asarray(x_m, float)[:, None], self.N).ravel()
        k = self.dims["m1"]
        return xb[:k], xb[k:]

    def reconstruct(self, xbar_o2, xbar_m2):
        """Solve the second system for xbar_o1, xbar_m1; return (x_o, x_m)."""
        if self.dims["o1"]:
            xbar_o1 = -np.linalg.solve(self.A_tilde_2o21, self.b_bar_22)
        else:
            xbar_o1 = np.zeros(0)
        rhs = self.b_bar_21 + self.A_tilde_2o12 @ xbar_o2 + self.A_tilde_2o11 @ xbar_o1
        xbar_m1 = -rhs / np.repeat(self.sigma1, self.N) if self.dims["m1"] else np.zeros(0)
        x_o = _kron_left(self.W, np.concatenate([xbar_o1, xbar_o2])[:, None], self.N).ravel()
        x_m = _kron_left(self.V, np.concatenate([xbar_m1, xbar_m2])[:, None], self.N).ravel()
        return x_o, x_m

    def report(self) -> dict:
        return {
            "N": self.N,
            "dims": dict(self.dims),
            "constraint_singular_values": self.singular_values.tolist(),
            "J_shape": list(self.J.shape),
            "notes": list(self.notes),
        }


def _lq_complement(Y):
    """Orthogonal W with Y W = [L 0], L square lower triangular."""
    k, p = Y.shape
    if k == 0:
        return np.eye(p)
    Q, _ = np.linalg.qr(Y.T, mode="complete")
    return Q


def constraint_factors(sys: StructuralSystem):
    """Small SVD and LQ factors of the parameter-free rows (cacheable)."""
    X = sys.constraint
    p = sys.p
    Xo, Xm = X[:, :p], X[:, p:]
    M = X.shape[0]
    notes = []
    if Xm.shape[1]:
        Uf, s, Vt = np.linalg.svd(Xm)
        smax = s[0] if s.size else 0.0
    else:
        Uf, s, Vt, smax = np.eye(M), np.zeros(0), np.zeros((0, 0)), 0.0
    r1 = int(np.sum(s > RANK_RTOL * smax)) if smax > 0 else 0
    band = (s > WARN_BAND[0] * smax) & (s < WARN_BAND[1] * smax) if smax > 0 else []
    if np.any(band):
        notes.append("constraint block has singular values near the rank threshold")
    V = Vt.T
    U1, U2 = Uf[:, :r1], Uf[:, r1:]
    Y = U2.T @ Xo
    W = _lq_complement(Y)
    return dict(U=Uf, V=V, W=W, s=s, r1=r1, U1=U1, U2=U2, Xo=Xo, notes=notes)


def eliminate(sys: StructuralSystem, factors=None) -> ReducedSystem:
    """Two-stage orthogonal elimination of the parameter-free rows."""
    N, M, p = sys.N, sys.M, sys.p
    f = factors if factors is not None else constraint_factors(sys)
    r1, U1, U2, V, W, Xo = f["r1"], f["U1"], f["U2"], f["V"], f["W"], f["Xo"]
    k2 = M - r1  # rows of the second pivot block per time step
    A1o, A1m, _, _ = sys.blocks()
    b1, b2 = sys.b1, sys.b2

    A2o1_s = U1.T @ Xo  # small factors of Abar_2o1, Abar_2o2
    A2o2_s = U2.T @ Xo
    Abar_1m = _kron_right(A1m, V, N) if A1m.shape[1] else A1m
    Abar_1m1, Abar_1m2 = Abar_1m[:, : r1 * N], Abar_1m[:, r1 * N:]
    b21 = _kron_left(U1.T, b2[:, None], N).ravel()
    b22 = _kron_left(U2.T, b2[:, None], N).ravel()
    sig = f["s"][:r1]

    # pivot on Sigma_1
    if r1:
        scaled = Abar_1m1 / np.repeat(sig, N)
        Abar_1o = A1o - _kron_right(scaled, A2o1_s, N)
        bbar_1 = b1 - scaled @ b21
    else:
        Abar_1o, bbar_1 = A1o.copy(), b1.copy()

    Atil_1o = _kron_right(Abar_1o, W, N)
    Atil_1o1, Atil_1o2 = Atil_1o[:, : k2 * N], Atil_1o[:, k2 * N:]
    Atil_2o1 = np.kron(A2o1_s @ W, np.eye(N))
    Atil_2o11, Atil_2o12 = Atil_2o1[:, : k2 * N], Atil_2o1[:, k2 * N:]
    Atil_2o21 = np.kron((A2o2_s @ W)[:, :k2], np.eye(N))

    if k2:
        btil_1 = bbar_1 - Atil_1o1 @ np.linalg.solve(Atil_2o21, b22)
    else:
        btil_1 = bbar_1
    dims = {"o1": k2 * N, "o2": (p - k2) * N, "m1": r1 * N, "m2": (2 * M - p - r1) * N}
    red = ReducedSystem(
        Atil_1o2, Abar_1m2, btil_1, Atil_2o11, Atil_2o12, Atil_2o21, sig,
        b21, b22, f["U"], V, W, N, dims, f["s"], list(f["notes"]),
    )
    J = red.J
    if J.shape[0] != J.shape[1]:
        # a nonsingular structural system always yields a square J
        raise SingularityError(f"reduced system is {J.shape}, expected square")
    return red


def reduced_full_row_rank(red: ReducedSystem) -> float:
    """Ratio of smallest to largest singular value of [A_tilde_1o2 A_bar_1m2]."""
    s = np.linalg.svd(red.J, compute_uv=False)
    return float(s[-1] / s[0])


def nll_reduced(
    model: NetworkModel,
    data: Dataset,
    *,
    margin=THETA_MARGIN,
    factors=None,
    check_theta=True,
) -> NllValue:
    """Negative log-density of xbar_o2 (constant ln(2 pi) terms omitted)."""
    if check_theta and not in_theta(model, margin):
        return NllValue(np.inf, model.theta)
    sys = assemble_structural(model, data.r)
    red = eliminate(sys, factors)
    J = red.J
    n_o2 = red.dims["o2"]
    lu = linalg.lu_factor(J, check_finite=False)
    if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * np.max(np.abs(np.diag(lu[0]))):
        raise ConditioningError("reduced system is numerically singular")
    lam = np.repeat(model.lam, data.N)
    # rows of J^{-1} that produce xbar_o2
    Jinv = linalg.lu_solve(lu, np.eye(J.shape[0]), check_finite=False)[:n_o2]
    G = Jinv * np.sqrt(lam)
    C = G @ G.T
    mu = -Jinv @ red.b_tilde_1
    _, xo2 = red.transform_observed(data.x_o.T.reshape(-1))
    try:
        cf = linalg.cho_factor(C, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise ConditioningError("marginal covariance of the observations is singular") from None
    d = xo2 - mu
    quad = float(d @ linalg.cho_solve(cf, d, check_finite=False))
    logdet = float(2.0 * np.sum(np.log(np.diag(cf[0]))))
    if red.notes:
        warnings.warn("; ".join(red.notes), RuntimeWarning, stacklevel=2)
    return NllValue(0.5 * (quad + logdet), model.theta, quad, logdet)
