"""ARMAX nodes, network topology and closed-loop state-space assembly.

Each node obeys

    y_k + a_1 y_{k-1} + ... + a_n y_{k-n}
        = b_1 u_{k-1} + ... + b_n u_{k-n} + e_k + c_1 e_{k-1} + ... + c_n e_{k-n}

and nodes are coupled through ``u_k = Upsilon y_k + Omega r_k``.  The observed
signal is a row selection of the stacked vector ``(y_k, u_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSampleError, SingularityError, StructureError

COPRIME_RTOL = 1e-8
THETA_MARGIN = 1e-6
WELLPOSED_TOL = 1e-12
RANK_RTOL = 1e-10
UNIT_CIRCLE_BAND = 1e-6


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ArmaxNode:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: float

    def __post_init__(self):
        for name in ("a", "b", "c"):
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name))))
        object.__setattr__(self, "lam", float(self.lam))
        n = self.a.size
        if n < 1:
            raise StructureError("node order must be positive")
        if self.b.size != n or self.c.size != n:
            raise StructureError(
                f"coefficient lengths differ: a={n}, b={self.b.size}, c={self.c.size}"
            )
        if not self.lam > 0:
            raise StructureError(f"noise variance must be positive, got {self.lam}")

    @property
    def order(self) -> int:
        return self.a.size

    def A_poly(self):
        return np.concatenate(([1.0], self.a))

    def B_poly(self):
        return self.b.copy()

    def C_poly(self):
        return np.concatenate(([1.0], self.c))


def signal_name(index: int, M: int) -> str:
    """Name of entry ``index`` of the stacked (y, u) vector, e.g. ``'u3'``."""
    return f"y{index + 1}" if index < M else f"u{index - M + 1}"


def signal_index(name: str, M: int) -> int:
    kind, node = name[0], int(name[1:])
    if kind not in "yu" or not 1 <= node <= M:
        raise StructureError(f"unknown signal {name!r} for M={M}")
    return node - 1 if kind == "y" else M + node - 1


@dataclass(frozen=True)
class Topology:
    """Interconnection ``u = Upsilon y + Omega r`` and observation selection.

    ``observed`` lists row indices into the stacked ``(y, u)`` vector of length
    2M, in the order the observations appear in ``x_o``.
    """

    upsilon: np.ndarray
    omega: np.ndarray
    observed: tuple

    def __post_init__(self):
        ups = np.atleast_2d(np.array(self.upsilon, dtype=float))
        om = np.array(self.omega, dtype=float)
        if om.ndim == 1:
            om = om.reshape(ups.shape[0], -1)
        object.__setattr__(self, "upsilon", _frozen(ups))
        object.__setattr__(self, "omega", _frozen(om))
        object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))
        M = ups.shape[0]
        if ups.shape != (M, M):
            raise StructureError(f"Upsilon must be square, got {ups.shape}")
        if om.shape[0] != M:
            raise StructureError(f"Omega must have {M} rows, got {om.shape}")
        for name, mat in (("Upsilon", ups), ("Omega", om)):
            if not np.all((mat == 0) | (mat == 1)):
                raise StructureError(f"{name} must be a zero-one matrix")
        if not self.observed:
            raise StructureError("at least one signal must be observed")
        if len(set(self.observed)) != len(self.observed):
            raise StructureError("observed indices must be distinct")
        if min(self.observed) < 0 or max(self.observed) >= 2 * M:
            raise StructureError(f"observed indices must lie in [0, {2 * M})")

    @property
    def M(self) -> int:
        return self.upsilon.shape[0]

    @property
    def m(self) -> int:
        return self.omega.shape[1]

    @property
    def p(self) -> int:
        return len(self.observed)

    @property
    def T_o(self) -> np.ndarray:
        T = np.zeros((self.p, 2 * self.M))
        T[np.arange(self.p), list(self.observed)] = 1.0
        return T

    @property
    def labels(self) -> list:
        return [signal_name(i, self.M) for i in self.observed]

    def with_observed(self, observed) -> "Topology":
        return Topology(self.upsilon, self.omega, tuple(observed))

    def to_dict(self) -> dict:
        return {
            "upsilon": self.upsilon.astype(int).tolist(),
            "omega": self.omega.astype(int).tolist(),
            "observed": list(self.observed),
        }

    @classmethod
    def from_dict(cls, d) -> "Topology":
        observed = [
            signal_index(o, len(d["upsilon"])) if isinstance(o, str) else o
            for o in d["observed"]
        ]
        return cls(d["upsilon"], d["omega"], observed)


def fig1_topology(observe=("u1", "u3")) -> Topology:
    """Three-node example: u1 = y2 + y3 + r1, u2 = r2, u3 = y1 + r3."""
    ups = [[0, 1, 1], [0, 0, 0], [1, 0, 0]]
    return Topology(ups, np.eye(3), [signal_index(s, 3) for s in observe])


def theta_layout(orders) -> dict:
    """Index arrays of the a, b, c and lambda blocks of the packed vector."""
    orders = [int(n) for n in orders]
    n, M = sum(orders), len(orders)
    return {
        "a": np.arange(0, n),
        "b": np.arange(n, 2 * n),
        "c": np.arange(2 * n, 3 * n),
        "lam": np.arange(3 * n, 3 * n + M),
    }


@dataclass(frozen=True)
class NetworkModel:
    nodes: tuple
    topology: Topology

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if len(self.nodes) != self.topology.M:
            raise StructureError(
                f"{len(self.nodes)} nodes given for a topology with M={self.topology.M}"
            )

    @property
    def M(self) -> int:
        return len(self.nodes)

    @property
    def orders(self) -> tuple:
        return tuple(nd.order for nd in self.nodes)

    @property
    def n(self) -> int:
        return sum(self.orders)

    @property
    def lam(self) -> np.ndarray:
        return np.array([nd.lam for nd in self.nodes])

    @property
    def theta(self) -> np.ndarray:
        return pack(self)

    def with_theta(self, theta) -> "NetworkModel":
        return unpack(theta, self.orders, self.topology)

    def with_topology(self, topology: Topology) -> "NetworkModel":
        return NetworkModel(self.nodes, topology)

    def to_dict(self) -> dict:
        d = {
            "orders": list(self.orders),
            "a": [nd.a.tolist() for nd in self.nodes],
            "b": [nd.b.tolist() for nd in self.nodes],
            "c": [nd.c.tolist() for nd in self.nodes],
            "lambda": [nd.lam for nd in self.nodes],
        }
        d.update(self.topology.to_dict())
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkModel":
        topo = Topology.from_dict(d)
        orders = d.get("orders") or [len(a) for a in d["a"]]
        nodes = []
        for i, n in enumerate(orders):
            for key in ("a", "b", "c"):
                if len(d[key][i]) != n:
                    raise StructureError(
                        f"node {i + 1}: {key} has {len(d[key][i])} entries, order is {n}"
                    )
            nodes.append(ArmaxNode(d["a"][i], d["b"][i], d["c"][i], d["lambda"][i]))
        return cls(nodes, topo)


def pack(model: NetworkModel) -> np.ndarray:
    """theta = (a^1..a^M, b^1..b^M, c^1..c^M, lambda^1..lambda^M)."""
    nodes = model.nodes
    return np.concatenate(
        [nd.a for nd in nodes]
        + [nd.b for nd in nodes]
        + [nd.c for nd in nodes]
        + [np.array([nd.lam for nd in nodes])]
    )


def unpack(theta, orders, topology: Topology) -> NetworkModel:
    theta = np.asarray(theta, dtype=float)
    lay = theta_layout(orders)
    if theta.size != lay["lam"][-1] + 1:
        raise StructureError(
            f"theta has {theta.size} entries, layout needs {lay['lam'][-1] + 1}"
        )
    a, b, c = theta[lay["a"]], theta[lay["b"]], theta[lay["c"]]
    splits = np.cumsum(orders)[:-1]
    nodes = [
        ArmaxNode(ai, bi, ci, li)
        for ai, bi, ci, li in zip(
            np.split(a, splits), np.split(b, splits), np.split(c, splits), theta[lay["lam"]]
        )
    ]
    return NetworkModel(nodes, topology)


# --------------------------------------------------------------------------
# validation


def _common_roots(p_roots, q_roots, rtol=COPRIME_RTOL):
    common = []
    for q in q_roots:
        if p_roots.size and np.min(np.abs(p_roots - q)) <= rtol * max(1.0, abs(q)):
            common.append(complex(q))
    return common


@dataclass
class NodeReport:
    A_roots: np.ndarray
    B_roots: np.ndarray
    C_root_moduli: np.ndarray
    coprime: bool
    common_roots: list
    c_off_unit_circle: bool


@dataclass
class ValidationReport:
    nodes: list
    spectral_radius: float
    in_theta: bool
    well_posed: bool
    passed: bool
    messages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spectral_radius": self.spectral_radius,
            "in_theta": self.in_theta,
            "well_posed": self.well_posed,
            "passed": self.passed,
            "messages": list(self.messages),
            "nodes": [
                {
                    "A_roots": [[z.real, z.imag] for z in nd.A_roots],
                    "C_root_moduli": nd.C_root_moduli.tolist(),
                    "coprime": nd.coprime,
                    "c_off_unit_circle": nd.c_off_unit_circle,
                }
                for nd in self.nodes
            ],
        }


def validate_model(model: NetworkModel, margin=THETA_MARGIN) -> ValidationReport:
    """Coprimeness of (A^i, B^i), C^i root moduli and closed-loop stability."""
    msgs, node_reports = [], []
    for i, nd in enumerate(model.nodes, start=1):
        A_roots = np.roots(nd.A_poly())
        B_roots = np.roots(nd.B_poly()) if np.any(nd.b != 0) else np.array([])
        if np.all(nd.b == 0):
            common, coprime = [complex(z) for z in A_roots], False
        else:
            common = _common_roots(A_roots, B_roots)
            coprime = not common
        C_mod = np.abs(np.roots(nd.C_poly()))
        c_ok = bool(np.all(np.abs(C_mod - 1.0) > UNIT_CIRCLE_BAND))
        if not coprime:
            msgs.append(f"node {i}: A and B share roots {common}")
        if not c_ok:
            msgs.append(f"node {i}: C has a root on the unit circle")
        node_reports.append(NodeReport(A_roots, B_roots, C_mod, coprime, common, c_ok))
    try:
        ss = assemble_closed_loop(model)
        rho = spectral_radius(ss.F_c)
        well_posed = True
    except SingularityError as exc:
        msgs.append(str(exc))
        rho, well_posed = np.inf, False
    in_theta = bool(rho <= 1.0 - margin)
    if well_posed and not in_theta:
        msgs.append(f"closed-loop spectral radius {rho:.6g} exceeds 1 - {margin:g}")
    passed = well_posed and in_theta and all(nr.coprime for nr in node_reports)
    return ValidationReport(node_reports, float(rho), in_theta, well_posed, passed, msgs)


def spectral_radius(F) -> float:
    F = np.asarray(F)
    if F.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(F))))


# --------------------------------------------------------------------------
# state space


@dataclass(frozen=True)
class ClosedLoopSS:
    F_c: np.ndarray
    G_r: np.ndarray
    G_e: np.ndarray
    H_o: np.ndarray
    J_ro: np.ndarray
    J_eo: np.ndarray
    Sigma_e: np.ndarray

    @property
    def n(self) -> int:
        return self.F_c.shape[0]

    @property
    def p(self) -> int:
        return self.H_o.shape[0]

    def select_rows(self, rows) -> "ClosedLoopSS":
        rows = list(rows)
        return ClosedLoopSS(
            self.F_c, self.G_r, self.G_e, self.H_o[rows], self.J_ro[rows],
            self.J_eo[rows], self.Sigma_e,
        )


def open_loop_blocks(model: NetworkModel):
    """Block-diagonal observer-form matrices (F, B, C, H) of all nodes."""
    n, M = model.n, model.M
    F = np.zeros((n, n))
    B = np.zeros((n, M))
    C = np.zeros((n, M))
    H = np.zeros((M, n))
    k = 0
    for i, nd in enumerate(model.nodes):
        ni = nd.order
        blk = np.eye(ni, k=1)
        blk[:, 0] -= nd.a
        F[k:k + ni, k:k + ni] = blk
        B[k:k + ni, i] = nd.b
        C[k:k + ni, i] = nd.c - nd.a
        H[i, k] = 1.0
        k += ni
    return F, B, C, H


def assemble_closed_loop(model: NetworkModel) -> ClosedLoopSS:
    topo = model.topology
    ups, om = topo.upsilon, topo.omega
    M = model.M
    # nodes are strictly proper from u, so the only algebraic loop is I - D_u Upsilon
    # with D_u = 0; keep the determinant check for completeness
    if abs(np.linalg.det(np.eye(M) - np.zeros((M, M)) @ ups)) < WELLPOSED_TOL:
        raise SingularityError("closed loop is not well-posed")
    F, B, C, H = open_loop_blocks(model)
    F_c = F + B @ ups @ H
    G_r = B @ om
    G_e = C + B @ ups
    H_c = np.vstack([np.eye(M), ups]) @ H
    J_r = np.vstack([np.zeros((M, topo.m)), om])
    J_e = np.vstack([np.eye(M), ups])
    T_o = topo.T_o
    return ClosedLoopSS(
        F_c, G_r, G_e, T_o @ H_c, T_o @ J_r, T_o @ J_e, np.diag(model.lam)
    )


def open_loop_transfer(model: NetworkModel, z: complex) -> np.ndarray:
    """Diagonal matrix of B^i(z)/A^i(z)."""
    g = np.empty(model.M, dtype=complex)
    for i, nd in enumerate(model.nodes):
        den = np.polyval(nd.A_poly(), z)
        if abs(den) < 1e-14 * max(1.0, abs(z)) ** nd.order:
            raise SingularityError(f"z={z} is a pole of G^{i + 1}")
        # B(z) = b_1 z^{n-1} + ... + b_n
        g[i] = np.polyval(nd.B_poly(), z) / den
    return np.diag(g)


def eval_closed_loop_transfer(ss: ClosedLoopSS, model: NetworkModel, z: complex):
    """G_c(z) = J_eo (I - G Upsilon)^{-1} G Omega + J_ro and G(z)."""
    G = open_loop_transfer(model, z)
    ups, om = model.topology.upsilon, model.topology.omega
    L = np.eye(model.M) - G @ ups
    if np.linalg.cond(L) > 1e12:
        raise SingularityError(f"z={z} is a pole of the closed loop")
    G_c = ss.J_eo @ np.linalg.solve(L, G @ om) + ss.J_ro
    return G_c, G


def ss_transfer(ss: ClosedLoopSS, z: complex) -> np.ndarray:
    """H_o (zI - F_c)^{-1} G_r + J_ro."""
    R = z * np.eye(ss.n) - ss.F_c
    if np.linalg.cond(R) > 1e12:
        raise SingularityError(f"z={z} is an eigenvalue of F_c")
    return ss.H_o @ np.linalg.solve(R, ss.G_r) + ss.J_ro


def recover_modules_fig1(samples, tol=1e-12):
    """Invert the closed-loop map of the three-node example observing u3 only.

    ``samples`` is an iterable of ``(z, Gc)`` with ``Gc`` of length 3.  Returns
    three arrays with G^1, G^2, G^3 at each sample.
    """
    out = []
    for z, gc in samples:
        g1c, g2c, g3c = np.ravel(gc)
        if abs(g1c) < tol or abs(g3c) < tol:
            raise DegenerateSampleError(f"closed-loop entry vanishes at z={z}")
        out.append((g1c / g3c, g2c / g1c, (g3c - 1.0) / g1c))
    return tuple(np.array(col) for col in zip(*out))


def independent_rows(J, rtol=RANK_RTOL):
    """Greedy lowest-index maximal set of linearly independent rows."""
    J = np.asarray(J, dtype=float)
    scale = max(np.linalg.norm(J, 2), 1.0) if J.size else 1.0
    kept = []
    for i in range(J.shape[0]):
        trial = J[kept + [i]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s.size and s[-1] > rtol * scale and len(s) == len(kept) + 1:
            kept.append(i)
    return kept


def reduce_observations(ss: ClosedLoopSS):
    """Drop observations that are redundant in the noise channel.

    Keeps the lowest-index rows of J_eo that are linearly independent; the
    dropped observations are affine in the kept ones and in r.
    """
    kept = independent_rows(ss.J_eo)
    return ss.select_rows(kept), kept


# --------------------------------------------------------------------------
# time-domain simulation (direct recursion, used as an oracle and for data)


def simulate_network(model: NetworkModel, r, e):
    """Run the node recursions with zero initial conditions.

    ``r`` is N x m, ``e`` is N x M.  Returns ``(y, u)``, both N x M.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    e = np.atleast_2d(np.asarray(e, dtype=float))
    N, M = e.shape[0], model.M
    nmax = max(model.orders)
    a = np.zeros((M, nmax))
    b = np.zeros((M, nmax))
    c = np.zeros((M, nmax))
    for i, nd in enumerate(model.nodes):
        a[i, :nd.order], b[i, :nd.order], c[i, :nd.order] = nd.a, nd.b, nd.c
    ups, om = model.topology.upsilon, model.topology.omega
    # padded histories; row j holds time k-1-j
    y = np.zeros((N + nmax, M))
    u = np.zeros((N + nmax, M))
    ep = np.zeros((N + nmax, M))
    ep[nmax:] = e
    for k in range(nmax, N + nmax):
        past = slice(k - 1, k - nmax - 1 if k - nmax - 1 >= 0 else None, -1)
        yk = (
            -np.einsum("ij,ji->i", a, y[past])
            + np.einsum("ij,ji->i", b, u[past])
            + ep[k]
            + np.einsum("ij,ji->i", c, ep[past])
        )
        y[k] = yk
        u[k] = ups @ yk + om @ r[k - nmax]
    return y[nmax:], u[nmax:]


def observe(topology: Topology, y, u) -> np.ndarray:
    """x_o = T_o (y, u) for every time step."""
    return np.hstack([y, u])[:, list(topology.observed)]
