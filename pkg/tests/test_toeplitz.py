import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from netident.dataset import Dataset
from netident.likelihood import nll_time_varying
from netident.model import ArmaxNode, NetworkModel, Topology, fig1_topology, simulate_network
from netident.toeplitz import (
    assemble_structural,
    build_toeplitz_bank,
    eliminate,
    nll_reduced,
    reduced_full_row_rank,
    stack_signals,
)

from helpers import FIG1_NODES, perturbed, random_model, simulate_data

SEEDS = st.integers(0, 2**31 - 1)


def isolated(node, observed=(0, 1)):
    return NetworkModel([node], Topology([[0]], [[1]], observed))


def structural_residual(model, N, seed):
    data, e, y, u = simulate_data(model, N, seed)
    sys = assemble_structural(model, data.r)
    x = stack_signals(y, u, sys.perm)
    target = np.concatenate([e.T.reshape(-1), np.zeros(model.M * N)])
    return sys, x, sys.A @ x + sys.b - target, data, e


# --- Toeplitz bank ---------------------------------------------------------


def test_toeplitz_definition():
    a1, a2 = 0.3, -0.2
    bank = build_toeplitz_bank(isolated(ArmaxNode([a1, a2], [1.0, 0.0], [0.0, 0.0], 1.0)), 3)
    assert np.array_equal(bank.T_a[0], [[1, 0, 0], [a1, 1, 0], [a2, a1, 1]])
    assert np.array_equal(bank.T_b[0], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_unit_delay():
    model = isolated(ArmaxNode([0.0, 0.0], [1.0, 0.0], [0.0, 0.0], 1.0))
    u = np.array([1.0, 0, 0, 0])
    y, _ = simulate_network(model, u[:, None], np.zeros((4, 1)))
    assert np.array_equal(y[:, 0], [0, 1, 0, 0])
    bank = build_toeplitz_bank(model, 4)
    assert np.all(bank.T_a[0] @ y[:, 0] - bank.T_b[0] @ u == 0)


@given(SEEDS)
def test_bank_matches_recursion(seed):
    base = random_model(seed, M=1)
    model = isolated(base.nodes[0])
    rng = np.random.default_rng(seed)
    u, e = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
    y, _ = simulate_network(model, u, e)
    bank = build_toeplitz_bank(model, 50)
    res = bank.T_a[0] @ y[:, 0] - bank.T_b[0] @ u[:, 0] - bank.T_c[0] @ e[:, 0]
    assert np.max(np.abs(res)) <= 1e-12 * max(1.0, np.abs(y).max())
    assert np.allclose(bank.T_c[0] @ bank.T_y[:50, :50], bank.T_a[0], atol=1e-12)
    assert np.allclose(bank.T_c[0] @ bank.T_u[:50, :50], bank.T_b[0], atol=1e-12)


# --- structural system -----------------------------------------------------


def test_uncoupled_single_node_fully_observed():
    model = isolated(ArmaxNode([-0.5], [1.0], [0.2], 1.0), observed=(0, 1))
    sys = assemble_structural(model, np.ones((4, 1)))
    assert sys.n_m == 0
    assert np.array_equal(sys.A2, np.hstack([np.zeros((4, 4)), np.eye(4)]))
    assert np.array_equal(sys.b2, -np.ones(4))


def test_fig1_dimensions_observing_u3():
    sys = assemble_structural(NetworkModel(FIG1_NODES, fig1_topology(("u3",))), np.zeros((2, 3)))
    assert sys.A.shape == (12, 12)
    assert (sys.n_o, sys.n_m) == (2, 10)
    assert abs(np.linalg.det(sys.A)) > 0


@given(SEEDS)
def test_structural_residual(seed):
    model = random_model(seed)
    _, _, res, *_ = structural_residual(model, 40, seed)
    assert np.max(np.abs(res)) <= 1e-10


@given(SEEDS)
def test_parameter_free_rows_do_not_depend_on_theta(seed):
    model = random_model(seed)
    other = perturbed(model, seed + 1, 0.1)
    r = np.random.default_rng(seed).normal(size=(15, model.topology.m))
    s1, s2 = assemble_structural(model, r), assemble_structural(other, r)
    assert np.array_equal(s1.A2, s2.A2) and np.array_equal(s1.b, s2.b)
    assert not np.array_equal(s1.A1, s2.A1)


@given(SEEDS)
def test_observed_block_selects_observations(seed):
    model = random_model(seed)
    data, e, y, u = simulate_data(model, 12, seed)
    sys = assemble_structural(model, data.r)
    x = stack_signals(y, u, sys.perm)
    assert np.array_equal(x[: sys.n_o], data.x_o.T.reshape(-1))


# --- elimination -----------------------------------------------------------


def test_all_signals_observed():
    model = isolated(ArmaxNode([-0.5], [1.0], [0.2], 1.0), observed=(0, 1))
    red = eliminate(assemble_structural(model, np.ones((5, 1))))
    assert red.A_bar_1m2.shape == (5, 0)
    assert red.A_tilde_1o2.shape == (5, 5)
    assert red.dims == {"o1": 5, "o2": 5, "m1": 0, "m2": 0}


def test_unconstrained_missing_signal():
    # u = r observed, y missing and absent from the coupling rows
    model = isolated(ArmaxNode([-0.5], [1.0], [0.2], 1.0), observed=(1,))
    red = eliminate(assemble_structural(model, np.ones((6, 1))))
    assert red.sigma1.size == 0
    assert red.dims["m1"] == 0 and red.dims["m2"] == 6


@given(SEEDS)
def test_reconstruction_round_trip(seed):
    model = random_model(seed)
    sys, x, _, data, e = structural_residual(model, 20, seed)
    red = eliminate(sys)
    x_o, x_m = x[: sys.n_o], x[sys.n_o:]
    _, xo2 = red.transform_observed(x_o)
    _, xm2 = red.transform_missing(x_m)
    rx_o, rx_m = red.reconstruct(xo2, xm2)
    assert np.allclose(rx_o, x_o, atol=1e-9) and np.allclose(rx_m, x_m, atol=1e-9)
    target = np.concatenate([e.T.reshape(-1), np.zeros(model.M * 20)])
    assert np.max(np.abs(sys.A @ np.concatenate([rx_o, rx_m]) + sys.b - target)) <= 1e-9
    # first reduced system
    assert np.allclose(red.J @ np.concatenate([xo2, xm2]) + red.b_tilde_1, e.T.reshape(-1), atol=1e-9)


@given(SEEDS)
def test_transforms_are_isometries(seed):
    model = random_model(seed)
    sys, x, *_ = structural_residual(model, 15, seed)
    red = eliminate(sys)
    x_o, x_m = x[: sys.n_o], x[sys.n_o:]
    for vec, tf in ((x_o, red.transform_observed), (x_m, red.transform_missing)):
        a, b = tf(vec)
        assert np.linalg.norm(np.concatenate([a, b])) == pytest.approx(np.linalg.norm(vec), abs=1e-12 * max(1, np.linalg.norm(vec)))


@given(SEEDS)
def test_reduced_block_has_full_row_rank(seed):
    model = random_model(seed)
    red = eliminate(assemble_structural(model, np.zeros((20, model.topology.m))))
    assert red.J.shape[0] == red.J.shape[1] == model.M * 20
    assert reduced_full_row_rank(red) > 1e-10


# --- reduced likelihood ----------------------------------------------------


def test_fully_observed_uncoupled_density_of_noise():
    node = ArmaxNode([-0.5, 0.1], [1.0, 0.4], [0.3, 0.0], 0.6)
    model = isolated(node, observed=(0, 1))
    data, e, y, u = simulate_data(model, 30, 4)
    bank = build_toeplitz_bank(model, 30)
    e_hat = np.linalg.solve(bank.T_c[0], bank.T_a[0] @ y[:, 0] - bank.T_b[0] @ u[:, 0])
    expected = 0.5 * (e_hat @ e_hat / node.lam + 30 * np.log(node.lam))
    assert nll_reduced(model, data).value == pytest.approx(expected, rel=1e-10)


def test_scalar_closed_loop_matches_predictor_likelihood():
    model = NetworkModel(
        [ArmaxNode([-0.7, 0.1], [0.5, 0.2], [0.4, 0.0], 0.9)], Topology([[1]], [[1]], [1])
    )
    data = Dataset(np.array([[1.0], [-1.0], [0.5]]), np.array([[1.2], [-0.3], [0.8]]))
    assert nll_reduced(model, data).value == pytest.approx(
        nll_time_varying(model, data, "zero").value, abs=1e-9
    )


@pytest.mark.parametrize("seed", range(10))
def test_equivalence_with_zero_initialised_filter(seed):
    model = random_model(seed)
    data, *_ = simulate_data(model, 25, seed)
    diffs = []
    for j in range(10):
        cand = model if j == 0 else perturbed(model, 100 * seed + j, 0.1)
        diffs.append(nll_reduced(cand, data).value - nll_time_varying(cand, data, "zero").value)
    assert np.ptp(diffs) <= 1e-8
    assert abs(diffs[0]) <= 1e-8


def test_true_parameter_dominates_perturbed():
    model = NetworkModel(FIG1_NODES, fig1_topology(("u3",)))
    other = perturbed(model, 7, 0.15)
    wins = 0
    for k in range(50):
        data, *_ = simulate_data(model, 200, 1000 + k)
        wins += nll_reduced(model, data).value < nll_reduced(other, data).value
    assert wins >= 45


def test_outside_stability_region_is_infinite():
    model = NetworkModel([ArmaxNode([0.0], [1.0], [0.0], 1.0)], Topology([[1]], [[1]], [0]))
    assert nll_reduced(model, Dataset(np.zeros((3, 1)), np.ones((3, 1)))).value == np.inf
