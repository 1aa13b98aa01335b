"""Staged trust-region maximum-likelihood estimation of network parameters."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize

from .dataset import Dataset
from .errors import (
    AssumptionError,
    ConditioningError,
    ConvergenceError,
    EstimationError,
    StabilityError,
    StructureError,
)
from .likelihood import fd_gradient, nll_stationary, nll_time_varying
from .model import (
    THETA_MARGIN,
    NetworkModel,
    Topology,
    assemble_closed_loop,
    spectral_radius,
    theta_layout,
    unpack,
)
from .toeplitz import assemble_structural, constraint_factors, nll_reduced

log = logging.getLogger(__name__)

OBJECTIVES = ("Stationary", "TimeVaryingLyapunov", "TimeVaryingZero", "ToeplitzReduced")


@dataclass
class EstimatorConfig:
    objective: str = "TimeVaryingZero"
    tol: float = 1e-5
    max_iter: int = 300
    stability_margin: float = THETA_MARGIN
    initial_radius: float = 0.5
    max_radius: float = 10.0
    shrink: float = 0.25
    grow: float = 2.0
    seed: int = 0
    hessian_refreshes: int = 3
    init_gain: float = 0.5
    init_jitter: float = 0.0
    reflection_bound: float = 0.99

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise StructureError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.tol > 0:
            raise StructureError("tol must be positive")
        if not 0 < self.stability_margin < 1:
            raise StructureError("stability_margin must lie in (0, 1)")
        if not 0 < self.reflection_bound < 1:
            raise StructureError("reflection_bound must lie in (0, 1)")
        if not (0 < self.shrink < 1 < self.grow):
            raise StructureError("need 0 < shrink < 1 < grow")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EstimatorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise StructureError(f"unknown estimator config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# trust region


@dataclass
class TrustRegionStatus:
    fun: float
    iterations: int
    message: str
    converged: bool
    history: list = field(default_factory=list)
    evaluations: int = 0


def _tr_subproblem(g, B, radius):
    """Minimize g^T p + p^T B p / 2 subject to ||p|| <= radius."""
    lam, Q = np.linalg.eigh(B)
    gt = Q.T @ g
    lmin = lam[0]

    def step(mu):
        return -Q @ (gt / (lam + mu))

    if lmin > 1e-12 * max(1.0, abs(lam[-1])):
        p = step(0.0)
        if np.linalg.norm(p) <= radius:
            return p
    lo = max(0.0, -lmin)
    mask = np.abs(lam - lmin) <= 1e-10 * max(1.0, abs(lmin))
    if np.linalg.norm(gt[mask]) <= 1e-12 * max(1.0, np.linalg.norm(g)):
        # hard case: move along the leftmost eigenvector to the boundary
        safe = ~mask
        p = -Q[:, safe] @ (gt[safe] / (lam[safe] + lo)) if np.any(safe) else np.zeros_like(g)
        pn = np.linalg.norm(p)
        if pn <= radius:
            tau = np.sqrt(max(radius**2 - pn**2, 0.0))
            return p + tau * Q[:, np.argmax(mask)]

    def phi(mu):
        return np.linalg.norm(step(mu)) - radius

    a = lo + 1e-14 * max(1.0, abs(lo))
    hi = max(a, 1.0)
    while phi(hi) > 0:
        hi *= 4.0
    if phi(a) <= 0:
        return step(a)
    mu = optimize.brentq(phi, a, hi, xtol=1e-14, rtol=1e-12, maxiter=200)
    return step(mu)


def fd_hessian(grad, x, rel_step=1e-6):
    """Symmetrized central differences of ``grad``."""
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        H[:, i] = (grad(xp) - grad(xm)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _stalled(g, fx, tol):
    return np.linalg.norm(g) > np.sqrt(tol) * (1.0 + abs(fx))


def trust_region_minimize(f, grad, theta0, config: EstimatorConfig | None = None, hess=None):
    """Trust-region quasi-Newton minimization with symmetric rank-one updates.

    ``f`` may return +inf to mark infeasible points; such trial steps are
    rejected and the radius shrinks.  If the radius collapses while the
    gradient is still large and ``hess`` is given, the curvature model is
    replaced by ``hess(x)`` and the radius reset (``config.hessian_refreshes``
    times at most).  Returns ``(theta_star, status)``.
    """
    cfg = config or EstimatorConfig()
    x = np.array(theta0, dtype=float)
    fx = f(x)
    nfev = 1
    if not np.isfinite(fx):
        raise EstimationError("objective is not finite at the starting point")
    g = grad(x)
    n = x.size
    B = np.eye(n)
    scaled = False
    radius = cfg.initial_radius
    history = [fx]
    message, converged = "iteration limit reached", False
    refreshes = 0

    def collapse():
        nonlocal B, radius, refreshes, scaled
        if hess is None or refreshes >= cfg.hessian_refreshes or not _stalled(g, fx, cfg.tol):
            return True
        try:
            Bh = hess(x)
        except (StabilityError, EstimationError):
            return True
        if not np.all(np.isfinite(Bh)):
            return True
        B, scaled = Bh, True
        radius = cfg.initial_radius
        refreshes += 1
        return False

    it = 0
    for it in range(1, cfg.max_iter + 1):
        if np.linalg.norm(g) <= cfg.tol:
            message, converged = "gradient norm below tolerance", True
            break
        p = _tr_subproblem(g, B, radius)
        pnorm = np.linalg.norm(p)
        pred = -(g @ p + 0.5 * p @ B @ p)
        x_new = x + p
        f_new = f(x_new)
        nfev += 1
        interior = pnorm < 0.99 * radius
        if not np.isfinite(f_new) or pred <= 0:
            radius = cfg.shrink * min(radius, pnorm)
            if radius <= cfg.tol and collapse():
                message, converged = "step norm below tolerance", True
                break
            continue
        rho = (fx - f_new) / pred
        g_new = None
        if rho > 1e-4:
            try:
                g_new = grad(x_new)
            except StabilityError:
                g_new = None
        if rho > 1e-4 and g_new is not None:
            s, y = p, g_new - g
            if not scaled and s @ y > 0:
                B = (y @ y) / (s @ y) * np.eye(n)
                scaled = True
            v = y - B @ s
            den = v @ s
            if abs(den) > 1e-8 * np.linalg.norm(s) * np.linalg.norm(v):
                B = B + np.outer(v, v) / den
            x, fx, g = x_new, f_new, g_new
            history.append(fx)
            if interior and pnorm <= cfg.tol:
                message, converged = "step norm below tolerance", True
                break
        if rho < 0.25 or g_new is None:
            radius = cfg.shrink * pnorm
        elif rho > 0.75 and pnorm >= 0.9 * radius:
            radius = min(cfg.grow * radius, cfg.max_radius)
        if radius <= cfg.tol and collapse():
            message, converged = "step norm below tolerance", True
            break
    return x, TrustRegionStatus(float(fx), it, message, converged, history, nfev)


# ---------------------------------------------------------------------------
# objectives


_RECOVERABLE = (
    ConvergenceError, ConditioningError, StabilityError, AssumptionError,
    np.linalg.LinAlgError, FloatingPointError,
)


class ObjectiveFactory:
    """Evaluates a named likelihood over packed theta with Theta guards."""

    def __init__(self, name, data: Dataset, topology: Topology, orders, margin=THETA_MARGIN):
        if name not in OBJECTIVES:
            raise StructureError(f"unknown objective {name!r}")
        self.name = name
        self.data = data
        self.topology = topology
        self.orders = tuple(orders)
        self.margin = margin
        self.layout = theta_layout(orders)
        self._factors = None
        if name == "ToeplitzReduced":
            probe = unpack(_default_theta(self.orders, 0.0, 1.0), self.orders, topology)
            self._factors = constraint_factors(assemble_structural(probe, data.r[:1]))

    @property
    def n_obs(self) -> int:
        if self.name == "ToeplitzReduced":
            # xbar_o1 rows are parameter-free and not part of the density
            k2 = self.topology.M - self._factors["r1"]
            return (self.topology.p - k2) * self.data.N
        return self.data.N * self.topology.p

    def feasible(self, model: NetworkModel) -> bool:
        ss = assemble_closed_loop(model)
        if spectral_radius(ss.F_c) > 1.0 - self.margin:
            return False
        for nd in model.nodes:
            roots = np.roots(nd.C_poly())
            if roots.size and np.max(np.abs(roots)) > 1.0 - self.margin:
                return False
        return True

    def evaluate(self, theta):
        """NllValue at theta, or None when infeasible or numerically broken."""
        try:
            model = unpack(theta, self.orders, self.topology)
        except StructureError:
            return None
        if not np.all(np.isfinite(theta)) or not self.feasible(model):
            return None
        try:
            if self.name == "Stationary":
                v = nll_stationary(model, self.data, margin=self.margin)
            elif self.name == "TimeVaryingLyapunov":
                v = nll_time_varying(model, self.data, "lyapunov", margin=self.margin)
            elif self.name == "TimeVaryingZero":
                v = nll_time_varying(model, self.data, "zero", margin=self.margin)
            else:
                v = nll_reduced(model, self.data, margin=self.margin, factors=self._factors)
        except _RECOVERABLE:
            return None
        return v if np.isfinite(v.value) else None

    def value(self, theta) -> float:
        v = self.evaluate(theta)
        return np.inf if v is None else v.value

    def profiled(self, theta_shared) -> tuple:
        """Objective with a common noise variance minimized in closed form.

        Returns ``(value, lambda_hat)``; ``theta_shared``'s noise entries are
        ignored.
        """
        th = np.array(theta_shared, dtype=float)
        th[self.layout["lam"]] = 1.0
        v = self.evaluate(th)
        if v is None or not v.quad > 0:
            return np.inf, np.nan
        n_obs = self.n_obs
        lam = v.quad / n_obs
        return 0.5 * (n_obs + v.logdet + n_obs * np.log(lam)), lam


def _step_up(kappa):
    """Monic polynomial coefficients from reflection coefficients."""
    a = np.zeros(0)
    for k in kappa:
        a = np.concatenate([a + k * a[::-1], [k]])
    return a


def _step_down(c):
    """Reflection coefficients of a monic polynomial; |k| < 1 iff roots inside the unit disk."""
    a = np.array(c, dtype=float)
    kappa = np.empty(a.size)
    for m in range(a.size - 1, -1, -1):
        k = kappa[m] = a[m]
        if abs(k) >= 1.0:
            raise StabilityError("polynomial has roots on or outside the unit circle")
        a = (a[:m] - k * a[:m][::-1]) / (1.0 - k * k)
    return kappa


def c_from_free(w, orders, bound):
    """Map unconstrained coordinates to noise-model coefficients.

    Each node's reflection coefficients are ``bound * tanh(w)``, so every
    image has its roots strictly inside the unit disk.
    """
    out, k = np.empty(len(w)), 0
    for n in orders:
        out[k:k + n] = _step_up(bound * np.tanh(w[k:k + n]))
        k += n
    return out


def free_from_c(c, orders, bound):
    """Inverse of :func:`c_from_free`; fails if a reflection coefficient exceeds ``bound``."""
    out, k = np.empty(len(c)), 0
    for n in orders:
        kappa = _step_down(c[k:k + n]) / bound
        if np.any(np.abs(kappa) >= 1):
            raise StabilityError("noise model outside the reflection bound")
        out[k:k + n] = np.arctanh(kappa)
        k += n
    return out


def _default_theta(orders, gain, lam):
    lay = theta_layout(orders)
    th = np.zeros(lay["lam"][-1] + 1)
    th[lay["lam"]] = lam
    starts = np.concatenate(([0], np.cumsum(orders)[:-1]))
    th[lay["b"][starts]] = gain
    return th


# ---------------------------------------------------------------------------
# staged estimation


@dataclass
class StageResult:
    name: str
    theta: np.ndarray
    value: float
    initial_value: float
    iterations: int
    status: str
    converged: bool
    history: list

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "theta": self.theta.tolist(),
            "value": self.value,
            "initial_value": self.initial_value,
            "iterations": self.iterations,
            "status": self.status,
            "converged": self.converged,
            "history": [float(h) for h in self.history],
        }


@dataclass
class EstimateResult:
    theta_hat: np.ndarray
    stages: list
    converged: bool
    objective: str
    orders: tuple
    topology: Topology

    @property
    def model(self) -> NetworkModel:
        return unpack(self.theta_hat, self.orders, self.topology)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "theta_hat": self.theta_hat.tolist(),
            "orders": list(self.orders),
            "converged": self.converged,
            "stages": [s.to_dict() for s in self.stages],
        }


def _run_stage(name, f, grad, x0, cfg, to_theta):
    f0 = f(x0)
    if not np.isfinite(f0):
        raise EstimationError(f"stage {name!r}: objective not finite at start", stage=name)
    try:
        x, st = trust_region_minimize(f, grad, x0, cfg, hess=lambda z: fd_hessian(grad, z))
    except StabilityError as exc:
        raise EstimationError(f"stage {name!r}: {exc}", stage=name) from None
    if not np.isfinite(st.fun):
        raise EstimationError(f"stage {name!r}: objective became non-finite", stage=name)
    log.debug("stage %s: f=%.6g it=%d (%s)", name, st.fun, st.iterations, st.message)
    return x, StageResult(
        name, to_theta(x), st.fun, float(f0), st.iterations, st.message, st.converged,
        st.history,
    )


def estimate(
    data: Dataset,
    topology: Topology,
    orders,
    config: EstimatorConfig | None = None,
    theta_init=None,
) -> EstimateResult:
    """Three-stage ML estimation.

    1. ARX structure (c = 0) with a common noise variance, profiled out.
    2. ARMAX structure, common noise variance, warm-started from stage 1.
    3. All parameters, including one noise variance per node.

    Stages 2 and 3 search the noise polynomials through bounded reflection
    coefficients (see :func:`c_from_free`), which keeps every iterate's
    C roots inside the unit disk without a hard wall.
    """
    cfg = config or EstimatorConfig()
    orders = tuple(int(n) for n in orders)
    n_total = 3 * sum(orders) + len(orders)
    if data.N < n_total:
        raise EstimationError(
            f"horizon N={data.N} is shorter than the parameter count {n_total}", stage="setup"
        )
    obj = ObjectiveFactory(cfg.objective, data, topology, orders, cfg.stability_margin)
    lay = obj.layout
    n = sum(orders)
    ab = np.concatenate([lay["a"], lay["b"]])

    if theta_init is None:
        theta_init = _default_theta(orders, cfg.init_gain, 1.0)
        if cfg.init_jitter:
            rng = np.random.default_rng(cfg.seed)
            theta_init[ab] += cfg.init_jitter * rng.standard_normal(2 * n)
    theta_init = np.asarray(theta_init, dtype=float)

    def grad_of(fun):
        def g(x):
            return fd_gradient(fun, x)
        return g

    stages = []

    def run(*args):
        try:
            return _run_stage(*args)
        except EstimationError as exc:
            exc.partial_stages = list(stages)
            raise

    # stage 1: ARX, shared lambda
    def embed1(x):
        th = np.zeros_like(theta_init)
        th[ab] = x
        return th

    def f1(x):
        return obj.profiled(embed1(x))[0]

    def theta1(x):
        th = embed1(x)
        th[lay["lam"]] = obj.profiled(th)[1]
        return th

    x1, st1 = run("arx", f1, grad_of(f1), theta_init[ab], cfg, theta1)
    stages.append(st1)

    # stage 2: ARMAX, shared lambda
    def embed2(x):
        th = np.zeros_like(theta_init)
        th[ab] = x[: 2 * n]
        th[lay["c"]] = c_from_free(x[2 * n:], orders, cfg.reflection_bound)
        return th

    def f2(x):
        return obj.profiled(embed2(x))[0]

    def theta2(x):
        th = embed2(x)
        th[lay["lam"]] = obj.profiled(th)[1]
        return th

    x2_0 = np.concatenate([x1, np.zeros(n)])
    x2, st2 = run("armax-shared", f2, grad_of(f2), x2_0, cfg, theta2)
    stages.append(st2)

    # stage 3: everything, noise variances in log space
    def embed3(x):
        th = np.empty_like(theta_init)
        th[ab] = x[: 2 * n]
        th[lay["c"]] = c_from_free(x[2 * n: 3 * n], orders, cfg.reflection_bound)
        th[lay["lam"]] = np.exp(x[3 * n:])
        return th

    def f3(x):
        return obj.value(embed3(x))

    lam2 = st2.theta[lay["lam"]]
    x3_0 = np.concatenate([x2, np.log(lam2)])
    x3, st3 = run("armax-full", f3, grad_of(f3), x3_0, cfg, embed3)
    stages.append(st3)

    theta_hat = embed3(x3)
    return EstimateResult(
        theta_hat, stages, all(s.converged for s in stages), cfg.objective, orders, topology
    )
