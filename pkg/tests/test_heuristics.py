import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lowrank_bnb.disjunctions import DisjunctionBranch, make_cut
from lowrank_bnb.heuristics import (
    FactorPair,
    NodePolyhedron,
    altmin,
    altmin_node,
    initialize_U,
    node_selection_probability,
    polish_basis_pursuit,
    top_left_singular,
    u_step,
    v_step,
)
from lowrank_bnb.instance import INFEASIBLE, generate_instance, num_observed_for_rate, objective_value

from oracles import full_instance, full_observation_optimum


def noisy(n, k, seed, gamma=20.0, rate="knlogn", p=2.0):
    return generate_instance(n, n, k, gamma, 0.1, num_observed_for_rate(n, k, p, rate), seed)


def test_initialize_U_is_top_singular_space():
    inst = noisy(8, 2, 0)
    U = initialize_U(inst)
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-12)
    Uf = np.linalg.svd(inst.observed_matrix())[0][:, :2]
    assert np.allclose(U @ U.T, Uf @ Uf.T, atol=1e-10)


def test_top_left_singular_pads_rank_deficient_input():
    M = np.zeros((5, 4))
    M[0, 0] = 3.0
    U = top_left_singular(M, 3)
    assert U.shape == (5, 3)
    assert np.allclose(U.T @ U, np.eye(3), atol=1e-12)
    assert abs(U[0, 0]) == pytest.approx(1.0)
    assert np.allclose(top_left_singular(np.zeros((4, 4)), 2).T @ top_left_singular(np.zeros((4, 4)), 2), np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_altmin_descends_monotonically(seed):
    trace = []
    altmin(noisy(10, 2, seed), trace=trace)
    diffs = np.diff(trace)
    assert np.all(diffs <= 1e-9 * max(1.0, abs(trace[0])))


@pytest.mark.parametrize("n,m,k,gamma,seed", [(5, 5, 1, 20.0, 0), (6, 4, 2, 5.0, 1), (7, 7, 3, 1.0, 2)])
def test_altmin_matches_full_observation_optimum(n, m, k, gamma, seed):
    inst = full_instance(n, m, k, gamma, seed)
    _, best = full_observation_optimum(inst.observed_matrix(), k, gamma)
    got = altmin(inst, max_iters=2000, tol=1e-14)
    assert got.objective == pytest.approx(best, rel=1e-6, abs=1e-9)


def test_v_and_u_steps_match_least_squares():
    inst = noisy(6, 2, 3)
    rng = np.random.default_rng(0)
    U = rng.standard_normal((6, 2))
    V = v_step(inst, U)
    A, M, g = inst.observed_matrix(), inst.mask, inst.gamma
    for j in range(inst.m):
        stacked = np.vstack([U[M[:, j]], U / math.sqrt(g)])
        rhs = np.concatenate([A[M[:, j], j], np.zeros(6)])
        assert np.allclose(V[:, j], np.linalg.lstsq(stacked, rhs, rcond=None)[0], atol=1e-9)
    U2 = u_step(inst, V)
    for i in range(inst.n):
        stacked = np.vstack([V[:, M[i]].T, V.T / math.sqrt(g)])
        rhs = np.concatenate([A[i, M[i]], np.zeros(inst.m)])
        assert np.allclose(U2[i], np.linalg.lstsq(stacked, rhs, rcond=None)[0], atol=1e-9)


@given(st.integers(0, 1000))
def test_half_steps_never_increase_objective(seed):
    inst = noisy(5, 1, seed)
    U = np.random.default_rng(seed).standard_normal((5, 1))
    V = v_step(inst, U)
    before = objective_value(inst, U @ V)
    assert objective_value(inst, u_step(inst, V) @ V) <= before + 1e-9 * max(1.0, before)


def test_altmin_rejects_basis_pursuit():
    bp = generate_instance(5, 5, 1, 1.0, 0.0, 12, 0, mode="basis_pursuit")
    with pytest.raises(ValueError):
        altmin(bp)


def test_altmin_node_without_constraints_is_close_to_altmin():
    for seed in range(3):
        inst = noisy(6, 1, seed)
        ref = altmin(inst)
        U = ref.U
        got = altmin_node(inst, NodePolyhedron(), U @ U.T, max_iters=50, tol=1e-9)
        assert got is not None
        assert got.objective <= ref.objective * (1 + 1e-4) + 1e-9


def test_altmin_node_respects_branch_intervals():
    inst = noisy(6, 2, 4)
    ref = altmin(inst)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(6)
    x /= np.linalg.norm(x)
    U_hat = 0.6 * ref.U
    cut = make_cut(U_hat, np.eye(6), x, 3)
    checked = 0
    for z in [(0, 0), (1, 2), (2, 1)]:
        branch = DisjunctionBranch(cut, z)
        poly = NodePolyhedron.from_branches([branch])
        sol = altmin_node(inst, poly, ref.U @ ref.U.T)
        if sol is None:
            continue
        checked += 1
        assert poly.violation(sol.U) <= 1e-6
        assert sol.objective == pytest.approx(objective_value(inst, sol.U @ sol.V), rel=1e-12)
    assert checked >= 1


def test_node_selection_probability():
    assert node_selection_probability(0) == 1.0
    assert node_selection_probability(3) == pytest.approx(0.125)
    assert node_selection_probability(2, beta=0.9) == pytest.approx(0.81)
    with pytest.raises(ValueError):
        node_selection_probability(-1)
    with pytest.raises(ValueError):
        node_selection_probability(1, beta=0.0)
    rng = np.random.default_rng(7)
    draws = rng.random(200_000) < node_selection_probability(2)
    assert abs(draws.mean() - 0.25) < 4 * math.sqrt(0.25 * 0.75 / draws.size)


def test_factor_pair_objective_recomputes():
    inst = noisy(7, 2, 5)
    fp = altmin(inst)
    assert isinstance(fp, FactorPair)
    assert fp.objective == pytest.approx(objective_value(inst, fp.X), rel=1e-12)
    assert np.allclose(fp.U.T @ fp.U, np.eye(2), atol=1e-10)


def test_polish_basis_pursuit_matches_observations_when_it_succeeds():
    solved = 0
    for seed in range(6):
        inst = generate_instance(8, 8, 1, 1.0, 0.0, num_observed_for_rate(8, 1, 3.0, "knlogn"), seed,
                                 mode="basis_pursuit")
        fp = polish_basis_pursuit(inst, initialize_U(inst))
        assert np.linalg.matrix_rank(fp.X, tol=1e-9 * max(1.0, np.abs(fp.X).max())) <= 1
        if fp.objective < INFEASIBLE:
            solved += 1
            assert np.max(np.abs(fp.X[inst.mask] - inst.observed_matrix()[inst.mask])) <= 1e-6
            assert fp.objective == pytest.approx(objective_value(inst, fp.X), rel=1e-12)
    assert solved >= 4
