"""Data generation, validation metrics, PEM baseline and Monte Carlo studies."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize, signal

from .dataset import Dataset
from .errors import (
    ConditioningError,
    ConvergenceError,
    EstimationError,
    GenerationError,
    StabilityError,
    StructureError,
)
from .estimator import EstimatorConfig, estimate
from .model import (
    ArmaxNode,
    NetworkModel,
    Topology,
    assemble_closed_loop,
    fig1_topology,
    observe,
    signal_index,
    simulate_network,
    spectral_radius,
    theta_layout,
    validate_model,
)
from .riccati import kalman_stationary, qrs_blocks, solve_dare

log = logging.getLogger(__name__)


def _seed(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


# ---------------------------------------------------------------------------
# random models


@dataclass
class RandomNetworkSpec:
    orders: tuple = (2, 2, 2)
    pole_radius: float = 0.9
    zero_radius: float = 1.0
    closed_loop_radius: float = 0.9
    lam_bar: float = 0.1
    min_noise_gain: float = 1e-2
    max_tries: int = 10000
    topology: Topology | None = None

    def resolved_topology(self) -> Topology:
        return self.topology if self.topology is not None else fig1_topology()


def _roots_in_disk(rng, count, radius):
    """``count`` roots closed under conjugation, uniform in the disk."""
    roots = []
    for _ in range(count // 2):
        z = radius * np.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform())
        roots += [z, np.conj(z)]
    if count % 2:
        roots.append(rng.uniform(-radius, radius))
    return np.array(roots, dtype=complex)


def draw_lambda(rng, lam_bar, size=None):
    return rng.uniform(0.1 * lam_bar, lam_bar, size)


def random_node(rng, order, spec: RandomNetworkSpec) -> ArmaxNode:
    """Stable node with monic b leading term and unit-gain noise filter.

    The drawn variance ``lam0`` belongs to the unit-gain filter
    ``(A(1)/C(1)) C/A``; the monic parametrization carries
    ``lam0 (A(1)/C(1))**2``.
    """
    while True:
        A = np.real(np.poly(_roots_in_disk(rng, order, spec.pole_radius)))
        B = np.real(np.poly(_roots_in_disk(rng, order - 1, spec.zero_radius)))
        C = np.real(np.poly(_roots_in_disk(rng, order, spec.zero_radius)))
        lam0 = draw_lambda(rng, spec.lam_bar)
        if abs(np.sum(C)) >= spec.min_noise_gain:
            break
    gain = np.sum(A) / np.sum(C)
    return ArmaxNode(A[1:], B, C[1:], lam0 * gain**2)


def generate_random_network(seed: int, spec: RandomNetworkSpec | None = None) -> NetworkModel:
    spec = spec or RandomNetworkSpec()
    topo = spec.resolved_topology()
    if len(spec.orders) != topo.M:
        raise GenerationError(f"{len(spec.orders)} orders for {topo.M} nodes")
    rng = _seed(seed, 0)
    for _ in range(spec.max_tries):
        nodes = [random_node(rng, n, spec) for n in spec.orders]
        model = NetworkModel(nodes, topo)
        ss = assemble_closed_loop(model)
        if spectral_radius(ss.F_c) > spec.closed_loop_radius:
            continue
        if validate_model(model).passed:
            return model
    raise GenerationError(f"no admissible model after {spec.max_tries} draws (seed {seed})")


# ---------------------------------------------------------------------------
# signals


def generate_reference(seed: int, N: int, m: int) -> np.ndarray:
    return _seed(seed, 1).choice(np.array([-1.0, 1.0]), size=(N, m))


def draw_noise(model: NetworkModel, N: int, noise_seed: int, noise_scale=1.0) -> np.ndarray:
    e = _seed(noise_seed, 2).standard_normal((N, model.M))
    return e * np.sqrt(model.lam) * noise_scale


def simulate(model: NetworkModel, r, noise_seed: int, noise_scale=1.0) -> Dataset:
    """Closed-loop trajectory from rest; ``noise_scale=0`` gives G_c r exactly."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    e = draw_noise(model, r.shape[0], noise_seed, noise_scale)
    y, u = simulate_network(model, r, e)
    return Dataset(r, observe(model.topology, y, u), tuple(model.topology.labels))


def noise_free_output(model: NetworkModel, r) -> np.ndarray:
    r = np.atleast_2d(np.asarray(r, dtype=float))
    y, u = simulate_network(model, r, np.zeros((r.shape[0], model.M)))
    return observe(model.topology, y, u)


def empirical_snr_db(model: NetworkModel, data: Dataset) -> np.ndarray:
    clean = noise_free_output(model, data.r)
    noise = data.x_o - clean
    return 10.0 * np.log10(np.var(clean, axis=0) / np.var(noise, axis=0))


@dataclass
class InformativityReport:
    min_eig: float
    threshold: float
    passed: bool
    grid_size: int

    def to_dict(self) -> dict:
        return asdict(self)


def informativity_check(r, grid_size=64, threshold=0.1) -> InformativityReport:
    """Welch estimate of the reference spectrum; min eigenvalue over frequency.

    Advisory only.  White unit-variance references give a flat spectrum near
    the identity.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if r.shape[0] < r.shape[1]:
        r = r.T
    m = r.shape[1]
    nper = min(grid_size, r.shape[0])
    Phi = None
    for i in range(m):
        for j in range(i, m):
            _, P = signal.csd(r[:, i], r[:, j], nperseg=nper, return_onesided=False,
                              detrend=False)
            if Phi is None:
                Phi = np.zeros((P.size, m, m), complex)
            Phi[:, i, j] = P
            Phi[:, j, i] = np.conj(P)
    min_eig = float(np.min(np.linalg.eigvalsh(Phi)))
    return InformativityReport(min_eig, threshold, min_eig > threshold, nper)


# ---------------------------------------------------------------------------
# metrics


def fit(x_hat, x) -> np.ndarray:
    """1 - ||x_hat - x|| / ||x - mean(x)|| per column."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float).T).T
    den = np.linalg.norm(x - x.mean(axis=0), axis=0)
    return 1.0 - np.linalg.norm(x_hat - x, axis=0) / den


def predict_stationary(model: NetworkModel, data: Dataset) -> np.ndarray:
    """W_r r + W_o x_o via the stationary Kalman predictor started at zero."""
    ss = assemble_closed_loop(model)
    ric = solve_dare(ss, model=model)
    innov = kalman_stationary(ss, qrs_blocks(ss), ric, data)
    return data.x_o - innov.eps


@dataclass
class FitReport:
    fit_sim: np.ndarray
    fit_pred: np.ndarray | None

    @property
    def positive(self) -> bool:
        f = self.fit_pred if self.fit_pred is not None else self.fit_sim
        return bool(np.all(f > 0))

    def to_dict(self) -> dict:
        return {
            "fit_sim": self.fit_sim.tolist(),
            "fit_pred": None if self.fit_pred is None else self.fit_pred.tolist(),
        }


def validation_fit(model: NetworkModel, data: Dataset) -> FitReport:
    sim = fit(noise_free_output(model, data.r), data.x_o)
    try:
        pred = fit(predict_stationary(model, data), data.x_o)
    except (ConvergenceError, ConditioningError, StabilityError, np.linalg.LinAlgError):
        pred = None
    return FitReport(sim, pred)


@dataclass
class MetricsReport:
    fit_pred: np.ndarray | None
    fit_sim: np.ndarray
    bias: np.ndarray
    cov_trace: float
    cov_max_eig: float
    mse: float
    replicates: int

    def to_dict(self) -> dict:
        return {
            "fit_pred": None if self.fit_pred is None else np.asarray(self.fit_pred).tolist(),
            "fit_sim": np.asarray(self.fit_sim).tolist(),
            "bias": self.bias.tolist(),
            "cov_trace": self.cov_trace,
            "cov_max_eig": self.cov_max_eig,
            "mse": self.mse,
            "replicates": self.replicates,
        }


def ab_part(theta, orders) -> np.ndarray:
    lay = theta_layout(orders)
    theta = np.asarray(theta, dtype=float)
    return theta[..., np.concatenate([lay["a"], lay["b"]])]


def aggregate_estimates(ab_hats, ab_true):
    """Bias, population covariance and MSE of replicate estimates."""
    X = np.atleast_2d(np.asarray(ab_hats, dtype=float))
    mean = X.mean(axis=0)
    bias = mean - np.asarray(ab_true, dtype=float)
    D = X - mean
    cov = D.T @ D / X.shape[0]
    mse = float(np.mean(np.sum((X - ab_true) ** 2, axis=1)))
    return bias, float(np.trace(cov)), float(np.max(np.linalg.eigvalsh(cov))), mse


def validate_metrics(theta_hats, model_true: NetworkModel, validation_data: Dataset) -> MetricsReport:
    """Fits of the replicate-averaged estimate plus (a, b) bias/covariance/MSE."""
    th = np.atleast_2d(np.asarray(theta_hats, dtype=float))
    orders = model_true.orders
    bias, tr, mx, mse = aggregate_estimates(ab_part(th, orders), ab_part(model_true.theta, orders))
    mean_model = model_true.with_theta(th.mean(axis=0))
    fr = validation_fit(mean_model, validation_data)
    return MetricsReport(fr.fit_pred, fr.fit_sim, bias, tr, mx, mse, th.shape[0])


# ---------------------------------------------------------------------------
# separable PEM for the three-node example observing (u1, u3)


def _g(b, a, x):
    """B(q)/A(q) x with relative degree one and zero initial state."""
    return signal.lfilter(np.concatenate(([0.0], b)), np.concatenate(([1.0], a)), x)


def _h_inv(c, d, x):
    """D(q)/C(q) x for monic C, D."""
    return signal.lfilter(np.concatenate(([1.0], d)), np.concatenate(([1.0], c)), x)


def _arx_init(y, inputs, n):
    """Least-squares ARX fit y = -sum a y + sum_j sum b_j u_j (relative degree one)."""
    N = y.size
    cols = []
    for k in range(1, n + 1):
        cols.append(-np.concatenate((np.zeros(k), y[:-k])))
    for u in inputs:
        for k in range(1, n + 1):
            cols.append(np.concatenate((np.zeros(k), u[:-k])))
    Phi = np.column_stack(cols)[: N]
    sol, *_ = np.linalg.lstsq(Phi, y, rcond=None)
    a = sol[:n]
    bs = [sol[n + j * n: n + (j + 1) * n] for j in range(len(inputs))]
    if np.max(np.abs(np.roots(np.concatenate(([1.0], a)))), initial=0) >= 1:
        a = np.zeros(n)
    return a, bs


def _stable(poly_tail, margin=1e-6):
    roots = np.roots(np.concatenate(([1.0], poly_tail)))
    return roots.size == 0 or np.max(np.abs(roots)) < 1.0 - margin


def _lsq(residual, x0, tol):
    def safe(x):
        v = residual(x)
        return v if np.all(np.isfinite(v)) else np.full(v.shape, 1e8)

    sol = optimize.least_squares(safe, x0, xtol=tol, ftol=tol, gtol=tol, method="trf")
    return sol.x, float(np.sum(sol.fun**2))


@dataclass
class PemResult:
    model_class: str
    orders: tuple
    a: list
    b: list
    noise_u3: np.ndarray
    noise_u1: tuple
    lam1: float
    lam23: float
    sse: tuple

    def predict(self, data: Dataset) -> np.ndarray:
        """One-step MISO predictions of (u1, u3)."""
        r1, r2, r3 = data.r.T
        u1, u3 = data.x_o.T
        a1, a2, a3 = self.a
        b1, b2, b3 = self.b
        det1 = r1 + _g(b3, a3, u3) + _g(b2, a2, r2)
        det3 = r3 + _g(b1, a1, u1)
        if self.model_class == "oe":
            return np.column_stack([det1, det3])
        cbar, dbar = self.noise_u1
        c1 = self.noise_u3
        u1_hat = u1 - _h_inv(cbar, dbar, u1 - det1)
        u3_hat = u3 - _h_inv(c1, a1, u3 - det3)
        return np.column_stack([u1_hat, u3_hat])

    def network_model(self, topology: Topology) -> NetworkModel:
        """Network with c = a (OE) or c from the u3 equation for node 1; lambda_2 = lambda_3."""
        cs = [self.a[0] if self.model_class == "oe" else self.noise_u3, self.a[1], self.a[2]]
        lams = [self.lam1, self.lam23 / 2, self.lam23 / 2]
        nodes = [ArmaxNode(a, b, c, lam) for a, b, c, lam in zip(self.a, self.b, cs, lams)]
        return NetworkModel(nodes, topology)

    def to_dict(self) -> dict:
        return {
            "model_class": self.model_class,
            "a": [np.asarray(v).tolist() for v in self.a],
            "b": [np.asarray(v).tolist() for v in self.b],
            "noise_u3": np.asarray(self.noise_u3).tolist(),
            "noise_u1": [np.asarray(v).tolist() for v in self.noise_u1],
            "lam1": self.lam1,
            "lam23": self.lam23,
            "sse": list(self.sse),
        }


def _is_fig1_u1u3(topology: Topology) -> bool:
    ref = fig1_topology(("u1", "u3"))
    return (
        topology.M == 3
        and np.array_equal(topology.upsilon, ref.upsilon)
        and np.array_equal(topology.omega, ref.omega)
        and topology.observed == ref.observed
    )


def pem_baseline(data: Dataset, topology: Topology, orders=(2, 2, 2), model_class="armax",
                 tol=1e-5) -> PemResult:
    """Separable prediction-error fit of the two MISO equations

    u3 - r3 = G1 u1 + H1 e1  and  u1 - r1 = G3 u3 + G2 r2 + Hbar ebar.

    ``model_class='oe'`` uses unit noise models; ``'armax'`` fits an ARMAX
    noise model for the first and a Box-Jenkins noise model of order
    n2 + n3 for the second.
    """
    if not _is_fig1_u1u3(topology):
        raise StructureError("PEM baseline supports only the three-node example observing (u1, u3)")
    if model_class not in ("oe", "armax"):
        raise StructureError(f"unknown PEM model class {model_class!r}")
    n1, n2, n3 = (int(n) for n in orders)
    r1, r2, r3 = data.r.T
    u1, u3 = data.x_o.T
    N = data.N

    # u3 equation
    z3 = u3 - r3
    a1_0, (b1_0,) = _arx_init(z3, [u1], n1)

    if model_class == "oe":
        def res3(x):
            a, b = x[:n1], x[n1:]
            if not _stable(a):
                return np.full(N, np.inf)
            return z3 - _g(b, a, u1)
        x3, sse3 = _lsq(res3, np.concatenate([a1_0, b1_0]), tol)
        a1, b1, c1 = x3[:n1], x3[n1:], x3[:n1]
    else:
        def res3(x):
            a, b, c = x[:n1], x[n1:2 * n1], x[2 * n1:]
            if not _stable(c):
                return np.full(N, np.inf)
            return _h_inv(c, a, z3) - _h_inv(c, np.zeros(0), _g(b, np.zeros(0), u1))
        x3, sse3 = _lsq(res3, np.concatenate([a1_0, b1_0, np.zeros(n1)]), tol)
        a1, b1, c1 = x3[:n1], x3[n1:2 * n1], x3[2 * n1:]

    # u1 equation
    z1 = u1 - r1
    nb = n2 + n3
    _, (b3_0, b2_0) = _arx_init(z1, [u3, r2], max(n2, n3))
    b3_0, b2_0 = b3_0[:n3], b2_0[:n2]
    x1_0 = np.concatenate([np.zeros(n2), b2_0, np.zeros(n3), b3_0])

    def det_residual(x):
        a2, b2 = x[:n2], x[n2:2 * n2]
        a3, b3 = x[2 * n2:2 * n2 + n3], x[2 * n2 + n3:2 * n2 + 2 * n3]
        if not (_stable(a2) and _stable(a3)):
            return None
        return z1 - _g(b3, a3, u3) - _g(b2, a2, r2)

    k = 2 * n2 + 2 * n3
    if model_class == "oe":
        def res1(x):
            v = det_residual(x)
            return np.full(N, np.inf) if v is None else v
        x1, sse1 = _lsq(res1, x1_0, tol)
        noise_u1 = (np.zeros(0), np.zeros(0))
    else:
        def res1(x):
            v = det_residual(x[:k])
            cbar, dbar = x[k:k + nb], x[k + nb:]
            if v is None or not _stable(cbar):
                return np.full(N, np.inf)
            return _h_inv(cbar, dbar, v)
        # deterministic part first, then the joint fit
        x_det, _ = _lsq(lambda x: (lambda v: np.full(N, np.inf) if v is None else v)(det_residual(x)),
                        x1_0, tol)
        x1, sse1 = _lsq(res1, np.concatenate([x_det, np.zeros(2 * nb)]), tol)
        noise_u1 = (x1[k:k + nb], x1[k + nb:])
    a2, b2 = x1[:n2], x1[n2:2 * n2]
    a3, b3 = x1[2 * n2:2 * n2 + n3], x1[2 * n2 + n3:k]
    return PemResult(
        model_class, (n1, n2, n3), [a1, a2, a3], [b1, b2, b3], c1, noise_u1,
        sse3 / N, sse1 / N, (sse3, sse1),
    )


def pem_validation_fit(pem: PemResult, topology: Topology, data: Dataset) -> FitReport:
    pred = fit(pem.predict(data), data.x_o)
    sim = fit(noise_free_output(pem.network_model(topology), data.r), data.x_o)
    return FitReport(sim, pred)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloConfig:
    master_seed: int = 0
    n_models: int = 2
    n_replicates: int = 3
    N_values: list = field(default_factory=lambda: [200])
    observation_sets: list = field(default_factory=lambda: [["u1", "u3"], ["u3"]])
    orders: list = field(default_factory=lambda: [2, 2, 2])
    lam_bar: float = 0.1
    pem: bool = True
    pem_class: str = "armax"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    consistency: dict | None = None
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            self.estimator = EstimatorConfig.from_dict(self.estimator)
        if self.n_models < 1 or self.n_replicates < 1 or not self.N_values:
            raise StructureError("grid must contain at least one model, replicate and N")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "MonteCarloConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise StructureError(f"unknown Monte Carlo config keys: {sorted(unknown)}")
        return cls(**d)


def _cell(task):
    """One (model, N, observation set, replicate) estimate; never raises."""
    model_true, obs, N, seeds, est_cfg, pem, pem_class = task
    topo = model_true.topology.with_observed([signal_index(s, model_true.M) for s in obs])
    model_true = model_true.with_topology(topo)
    r = generate_reference(seeds["r"], N, topo.m)
    data = simulate(model_true, r, seeds["e"])
    val = simulate(model_true, generate_reference(seeds["r_val"], N, topo.m), seeds["e_val"])
    out = {"observed": list(obs), "N": N, "replicate": seeds["replicate"],
           "model": seeds["model"], "methods": {}}
    t0 = time.perf_counter()
    try:
        res = estimate(data, topo, model_true.orders, est_cfg)
        fr = validation_fit(res.model, val)
        out["methods"]["ML"] = {
            "theta_hat": res.theta_hat.tolist(),
            "optimizer_converged": res.converged,
            "converged": fr.positive,
            "final_value": res.stages[-1].value,
            **fr.to_dict(),
            "time": time.perf_counter() - t0,
        }
    except EstimationError as exc:
        out["methods"]["ML"] = {"error": str(exc), "stage": exc.stage, "converged": False,
                                "time": time.perf_counter() - t0}
    if pem and _is_fig1_u1u3(topo):
        t0 = time.perf_counter()
        try:
            p = pem_baseline(data, topo, model_true.orders, pem_class)
            fr = pem_validation_fit(p, topo, val)
            theta = p.network_model(topo).theta
            out["methods"]["PEM"] = {
                "theta_hat": theta.tolist(),
                "converged": fr.positive,
                **fr.to_dict(),
                "time": time.perf_counter() - t0,
            }
        except (StructureError, ValueError, np.linalg.LinAlgError) as exc:
            out["methods"]["PEM"] = {"error": str(exc), "converged": False,
                                     "time": time.perf_counter() - t0}
    return out


def _mean_std(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


def summarize_cells(cells, models):
    """Table-1 rows (per observation set, N, method) and Table-2 rows (per model)."""
    table1, table2 = [], []
    keys = sorted({(tuple(c["observed"]), c["N"]) for c in cells}, key=lambda k: (len(k[0]), k))
    for obs, N in keys:
        sub = [c for c in cells if tuple(c["observed"]) == obs and c["N"] == N]
        methods = sorted({m for c in sub for m in c["methods"]})
        for method in methods:
            recs = [c["methods"][method] for c in sub if method in c["methods"]]
            ok = [r for r in recs if r.get("converged")]
            row = {"observed": "+".join(obs), "N": N, "method": method,
                   "runs": len(recs), "converged": len(ok),
                   "optimizer_converged": sum(bool(r.get("optimizer_converged", r.get("converged")))
                                              for r in recs),
                   "mean_time": float(np.mean([r["time"] for r in recs]))}
            for i, lab in enumerate(obs):
                for kind in ("sim", "pred"):
                    vals = [r[f"fit_{kind}"][i] for r in ok if r.get(f"fit_{kind}") is not None]
                    mu, sd = _mean_std(vals)
                    row[f"fit_{kind}_{lab}_mean"] = mu
                    row[f"fit_{kind}_{lab}_std"] = sd
            table1.append(row)
            for mi, model in enumerate(models):
                mrecs = [c["methods"][method] for c in sub
                         if c["model"] == mi and method in c["methods"]
                         and "theta_hat" in c["methods"][method]]
                if not mrecs:
                    continue
                ths = np.array([r["theta_hat"] for r in mrecs])
                bias, tr, mx, mse = aggregate_estimates(
                    ab_part(ths, model.orders), ab_part(model.theta, model.orders)
                )
                table2.append({"observed": "+".join(obs), "N": N, "method": method, "model": mi,
                               "replicates": len(mrecs), "bias_norm": float(np.linalg.norm(bias)),
                               "cov_trace": tr, "cov_max_eig": mx, "mse": mse,
                               "bias": bias.tolist()})
    return table1, table2


def _run(tasks, jobs):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_cell, tasks))
    return [_cell(t) for t in tasks]


def consistency_study(master_seed=0, N_values=(100, 400, 1600), n_replicates=20,
                      observed=("u3",), model=None, estimator=None, jobs=1, model_seed=None):
    """Median (a, b) error over noise realizations for growing N on one model."""
    est = estimator or EstimatorConfig()
    model = model or generate_random_network(master_seed if model_seed is None else model_seed)
    tasks = []
    for N in N_values:
        for rep in range(n_replicates):
            seeds = {"r": _cell_seed(master_seed, 7, N, 0), "e": _cell_seed(master_seed, 7, N, rep + 1),
                     "r_val": _cell_seed(master_seed, 8, N, 0),
                     "e_val": _cell_seed(master_seed, 8, N, rep + 1),
                     "replicate": rep, "model": 0}
            tasks.append((model, tuple(observed), int(N), seeds, est, False, "oe"))
    cells = _run(tasks, jobs)
    ab0 = ab_part(model.theta, model.orders)
    rows = []
    for N in N_values:
        errs = [float(np.linalg.norm(ab_part(c["methods"]["ML"]["theta_hat"], model.orders) - ab0))
                for c in cells if c["N"] == N and "theta_hat" in c["methods"]["ML"]]
        rows.append({"N": int(N), "runs": n_replicates, "estimates": len(errs),
                     "median_error": float(np.median(errs)) if errs else None,
                     "mean_error": float(np.mean(errs)) if errs else None})
    return rows, cells


def _cell_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def monte_carlo(config: MonteCarloConfig) -> dict:
    """generate -> simulate -> estimate -> validate over the configured grid.

    The reference is shared by all replicates of a (model, N) pair; noise and
    validation data are fresh per replicate.
    """
    spec = RandomNetworkSpec(orders=tuple(config.orders), lam_bar=config.lam_bar)
    models, tasks = [], []
    for mi in range(config.n_models):
        model = generate_random_network(_cell_seed(config.master_seed, mi), spec)
        models.append(model)
        for N in config.N_values:
            for oi, obs in enumerate(config.observation_sets):
                for rep in range(config.n_replicates):
                    seeds = {"r": _cell_seed(config.master_seed, mi, N, 0),
                             "e": _cell_seed(config.master_seed, mi, N, oi, rep, 1),
                             "r_val": _cell_seed(config.master_seed, mi, N, oi, rep, 2),
                             "e_val": _cell_seed(config.master_seed, mi, N, oi, rep, 3),
                             "replicate": rep, "model": mi}
                    tasks.append((model, tuple(obs), int(N), seeds, config.estimator,
                                  config.pem, config.pem_class))
    cells = _run(tasks, config.jobs)
    table1, table2 = summarize_cells(cells, models)
    report = {
        "config": config.to_dict(),
        "models": [m.to_dict() for m in models],
        "table1": table1,
        "table2": table2,
        "cells": cells,
    }
    if config.consistency:
        c = dict(config.consistency)
        rows, _ = consistency_study(
            master_seed=config.master_seed,
            N_values=c.get("N_values", (100, 400, 1600)),
            n_replicates=c.get("replicates", 20),
            observed=tuple(c.get("observed", ("u3",))),
            model=models[0],
            estimator=config.estimator,
            jobs=config.jobs,
        )
        report["consistency"] = rows
    return report
