import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import lfilter

from netident.dataset import Dataset
from netident.errors import StabilityError
from netident.likelihood import (
    fd_gradient,
    gaussian_constant,
    gradient,
    nll_stationary,
    nll_time_varying,
)
from netident.model import (
    ArmaxNode,
    NetworkModel,
    Topology,
    assemble_closed_loop,
    fig1_topology,
    observe,
    simulate_network,
)
from netident.riccati import qrs_blocks, solve_lyapunov

from helpers import FIG1_NODES, fig1_oe_nodes, perturbed, random_model, simulate_data

SEEDS = st.integers(0, 2**31 - 1)


def brute_force_nll(model, data):
    """Gaussian negative log-density of x_o from the explicit map (e, r) -> x_o."""
    N, M, m = data.N, model.M, data.m

    def response(r, e):
        y, u = simulate_network(model, r, e)
        return observe(model.topology, y, u).reshape(-1)

    Phi = np.empty((N * data.p, N * M))
    for j in range(N * M):
        e = np.zeros(N * M)
        e[j] = 1.0
        Phi[:, j] = response(np.zeros((N, m)), e.reshape(N, M))
    mean = response(data.r, np.zeros((N, M)))
    cov = Phi @ np.diag(np.tile(model.lam, N)) @ Phi.T
    d = data.x_o.reshape(-1) - mean
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (d @ np.linalg.solve(cov, d) + logdet)


# --- stationary objective --------------------------------------------------


def test_stationary_noise_free_trivial_topology():
    model = NetworkModel(fig1_oe_nodes(), fig1_topology(("u1", "u3")))
    data, *_ = simulate_data(model, 150, 0, noise_scale=0.0)
    val = nll_stationary(model, data)
    R = qrs_blocks(assemble_closed_loop(model)).R
    assert val.quad == pytest.approx(0.0, abs=1e-20)
    assert val.value == pytest.approx(0.5 * 150 * np.log(np.linalg.det(R)), rel=1e-12)


def test_stationary_single_sample():
    model = NetworkModel([ArmaxNode([-0.5], [1.0], [0.0], 1.0)], Topology([[0]], [[1]], [0]))
    val = nll_stationary(model, Dataset(np.zeros((1, 1)), np.ones((1, 1))))
    assert val.value == pytest.approx(0.5)


def _g_filter(node, x):
    return lfilter(np.concatenate(([0.0], node.b)), node.A_poly(), x)


def test_stationary_oe_separable_form():
    nodes = fig1_oe_nodes()
    model = NetworkModel(nodes, fig1_topology(("u1", "u3")))
    data, *_ = simulate_data(model, 300, 2)
    r, u1, u3 = data.r, data.x_o[:, 0], data.x_o[:, 1]
    u1_hat = r[:, 0] + _g_filter(nodes[1], r[:, 1]) + _g_filter(nodes[2], u3)
    u3_hat = _g_filter(nodes[0], u1) + r[:, 2]
    l1, l2, l3 = model.lam
    expected = 0.5 * np.sum(
        (u3 - u3_hat) ** 2 / l1 + (u1 - u1_hat) ** 2 / (l2 + l3) + np.log(l1) + np.log(l2 + l3)
    )
    assert nll_stationary(model, data).value == pytest.approx(expected, rel=1e-10)


def test_outside_stability_region_is_infinite():
    model = NetworkModel([ArmaxNode([0.0], [1.0], [0.0], 1.0)], Topology([[1]], [[1]], [0]))
    data = Dataset(np.zeros((3, 1)), np.ones((3, 1)))
    assert nll_stationary(model, data).value == np.inf
    assert nll_time_varying(model, data, "zero").value == np.inf
    assert not nll_stationary(model, data).finite


# --- time-varying objective ------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_time_varying_approaches_stationary(seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 2000, seed)
    gap = nll_time_varying(model, data, "lyapunov").value - nll_stationary(model, data).value
    assert abs(gap) / 2000 <= 1e-3


@given(SEEDS)
def test_time_varying_zero_noise_free(seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 50, seed, noise_scale=0.0)
    assert nll_time_varying(model, data, "zero").quad <= 1e-20 * max(1.0, np.abs(data.x_o).max())


@given(SEEDS)
def test_time_varying_single_step_lyapunov(seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 1, seed)
    ss = assemble_closed_loop(model)
    Se = ss.H_o @ solve_lyapunov(ss) @ ss.H_o.T + qrs_blocks(ss).R
    eps = data.x_o[0] - ss.J_ro @ data.r[0]
    expected = 0.5 * (eps @ np.linalg.solve(Se, eps) + np.linalg.slogdet(Se)[1])
    assert nll_time_varying(model, data, "lyapunov").value == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_zero_init_is_exact_density_scalar(N):
    model = NetworkModel(
        [ArmaxNode([-0.6, 0.2], [0.8, -0.3], [0.4, 0.1], 0.7)], Topology([[1]], [[1]], [1])
    )
    data, *_ = simulate_data(model, N, N)
    assert nll_time_varying(model, data, "zero").value == pytest.approx(
        brute_force_nll(model, data), abs=1e-10
    )


@given(SEEDS)
def test_zero_init_is_exact_density_network(seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 4, seed)
    assert nll_time_varying(model, data, "zero").value == pytest.approx(
        brute_force_nll(model, data), rel=1e-9, abs=1e-9
    )


# --- shared invariants -----------------------------------------------------


@pytest.mark.parametrize(
    "objective",
    [nll_stationary, lambda m, d, **kw: nll_time_varying(m, d, "lyapunov", **kw),
     lambda m, d, **kw: nll_time_varying(m, d, "zero", **kw)],
)
@given(seed=SEEDS)
def test_per_step_terms_sum_to_value(objective, seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 40, seed)
    val = objective(model, data, per_step=True)
    assert np.sum(val.per_step) == pytest.approx(val.value, rel=1e-12)
    assert val.per_step.shape == (40,)


@given(SEEDS, st.floats(0.1, 10.0))
def test_noise_scale_equivariance(seed, s):
    model = random_model(seed)
    data, *_ = simulate_data(model, 60, seed)
    scaled_data = Dataset(np.sqrt(s) * data.r, np.sqrt(s) * data.x_o)
    th = model.theta.copy()
    th[-model.M:] *= s
    scaled = model.with_theta(th)
    shift = 0.5 * data.N * data.p * np.log(s)
    for f in (nll_stationary, lambda m, d: nll_time_varying(m, d, "zero")):
        assert f(scaled, scaled_data).value == pytest.approx(f(model, data).value + shift, abs=1e-9 * data.N)


def test_gaussian_constant():
    assert gaussian_constant(2) == pytest.approx(np.log(2 * np.pi))


# --- finite-difference gradient --------------------------------------------


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_fd_gradient_quadratic(x):
    x = np.array(x)
    assert np.allclose(fd_gradient(lambda z: 0.5 * z @ z, x), x, atol=1e-8)


def test_fd_gradient_log_coordinates():
    x = np.array([0.3, 2.0])
    g = fd_gradient(lambda z: z[0] ** 2 + np.log(z[1]) * 3, x, log_mask=[False, True])
    assert np.allclose(g, [0.6, 1.5], atol=1e-8)


def test_fd_gradient_one_sided_at_wall():
    f = lambda z: z[0] ** 2 if z[0] <= 1.0 else np.inf  # noqa: E731
    g = fd_gradient(f, np.array([1.0]))
    assert g[0] == pytest.approx(2.0, abs=1e-5)


def test_fd_gradient_both_sides_infinite():
    f = lambda z: 0.0 if z[0] == 1.0 else np.inf  # noqa: E731
    with pytest.raises(StabilityError):
        fd_gradient(f, np.array([1.0]))


def test_gradient_requires_finite_point():
    model = NetworkModel([ArmaxNode([0.0], [1.0], [0.0], 1.0)], Topology([[1]], [[1]], [0]))
    with pytest.raises(StabilityError):
        gradient(nll_stationary, model, Dataset(np.zeros((3, 1)), np.ones((3, 1))))


def test_gradient_small_at_true_parameter():
    model = NetworkModel(FIG1_NODES, fig1_topology(("u1", "u3")))
    data, *_ = simulate_data(model, 5000, 9)
    g0 = gradient(nll_stationary, model, data)
    g1 = gradient(nll_stationary, perturbed(model, 1, 0.05), data)
    assert np.linalg.norm(g0) <= 0.1 * np.linalg.norm(g1)


@pytest.mark.parametrize("init", ["zero", "lyapunov"])
def test_gradient_matches_secants(init):
    model = random_model(5)
    data, *_ = simulate_data(model, 200, 5)

    def f(th):
        return nll_time_varying(model.with_theta(th), data, init).value

    th = model.theta
    g = gradient(lambda m, d: nll_time_varying(m, d, init), model, data)
    rng = np.random.default_rng(0)
    h = 1e-5
    n3 = 3 * model.n
    for _ in range(10):
        d = rng.normal(size=th.size)
        d /= np.linalg.norm(d)
        # the lambda block is differentiated with respect to lambda itself
        sec = (f(th + h * d) - f(th - h * d)) / (2 * h)
        assert abs(g @ d - sec) <= 1e-5 * (1 + abs(f(th)))
        assert np.all(np.isfinite(g[:n3]))
