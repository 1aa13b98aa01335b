"""Seeded random networks for property tests."""

import numpy as np

from netident.dataset import Dataset
from netident.model import (
    ArmaxNode,
    NetworkModel,
    Topology,
    assemble_closed_loop,
    independent_rows,
    observe,
    simulate_network,
    spectral_radius,
)


def _stable_poly(rng, n, radius):
    roots = []
    for _ in range(n // 2):
        z = radius * np.sqrt(rng.uniform()) * np.exp(2j * np.pi * rng.uniform())
        roots += [z, np.conj(z)]
    if n % 2:
        roots.append(rng.uniform(-radius, radius))
    return np.real(np.poly(roots))[1:]


def random_model(seed, M=None, max_order=3, observed=None, oe=False, cl_radius=0.95):
    """Random stable network with M <= 3 nodes and a well-conditioned J_eo."""
    rng = np.random.default_rng(seed)
    M = M or int(rng.integers(1, 4))
    while True:
        orders = rng.integers(1, max_order + 1, size=M)
        ups = (rng.uniform(size=(M, M)) < 0.4).astype(float)
        np.fill_diagonal(ups, 0.0)
        omega = np.eye(M)
        nodes = []
        for n in orders:
            a = _stable_poly(rng, n, 0.8)
            b = rng.normal(size=n) * 0.6
            c = a.copy() if oe else _stable_poly(rng, n, 0.8)
            nodes.append(ArmaxNode(a, b, c, rng.uniform(0.05, 1.0)))
        if observed is None:
            p = int(rng.integers(1, 2 * M + 1))
            obs = sorted(rng.choice(2 * M, size=p, replace=False).tolist())
        else:
            obs = list(observed)
        topo = Topology(ups, omega, obs)
        model = NetworkModel(nodes, topo)
        ss = assemble_closed_loop(model)
        if spectral_radius(ss.F_c) > cl_radius:
            continue
        kept = independent_rows(ss.J_eo)
        if not kept:
            continue
        if len(kept) < len(obs):
            model = model.with_topology(topo.with_observed([obs[i] for i in kept]))
        return model


def perturbed(model, seed, scale=0.05):
    """Nearby parameter vector that stays inside the stability region."""
    rng = np.random.default_rng(seed)
    ss_ok = False
    while not ss_ok:
        th = model.theta.copy()
        n = model.n
        th[: 3 * n] += scale * rng.normal(size=3 * n)
        th[3 * n:] *= np.exp(0.2 * rng.normal(size=model.M))
        cand = model.with_theta(th)
        ok_c = all(
            np.all(np.abs(np.roots(nd.C_poly())) < 0.98) for nd in cand.nodes
        )
        ss_ok = ok_c and spectral_radius(assemble_closed_loop(cand).F_c) < 0.98
    return cand


def simulate_data(model, N, seed, noise_scale=1.0):
    rng = np.random.default_rng(seed)
    r = rng.choice([-1.0, 1.0], size=(N, model.topology.m))
    e = rng.normal(size=(N, model.M)) * np.sqrt(model.lam) * noise_scale
    y, u = simulate_network(model, r, e)
    return Dataset(r, observe(model.topology, y, u)), e, y, u


FIG1_NODES = (
    ArmaxNode([-0.5, 0.1], [1.0, 0.3], [0.2, 0.0], 0.1),
    ArmaxNode([-0.3, 0.0], [0.5, 0.1], [0.1, 0.05], 0.05),
    ArmaxNode([0.2, -0.1], [0.4, -0.2], [0.3, 0.0], 0.08),
)


def fig1_oe_nodes():
    return tuple(ArmaxNode(nd.a, nd.b, nd.a, nd.lam) for nd in FIG1_NODES)
