"""Transport solver tests: trivial cases, brute-force oracles, gradients."""

import itertools

import numpy as np
import pytest

from pita.errors import EmptyDistribution
from pita.transport import (
    SinkhornConfig,
    TransportProblem,
    emd_metric,
    exact_emd,
    sinkhorn,
    sinkhorn_batch,
)


def random_problem(rng, n, low=0.0):
    a = rng.dirichlet(np.ones(n))
    b = rng.dirichlet(np.ones(n))
    cost = rng.uniform(low, 1.0, size=(n, n))
    cost = 0.5 * (cost + cost.T)
    np.fill_diagonal(cost, 0.0)
    return TransportProblem(a=a, b=b, cost=cost)


def enumerate_min_cost(units_a, units_b, cost, unit):
    """Brute-force transport oracle: enumerate all integer-unit plans."""
    n = len(units_a)
    best = np.inf
    rows = []
    for ua in units_a:
        # all ways to split ua units over n columns
        rows.append([c for c in itertools.product(range(ua + 1), repeat=n) if sum(c) == ua])
    for plan_rows in itertools.product(*rows):
        plan = np.array(plan_rows)
        if np.array_equal(plan.sum(axis=0), units_b):
            best = min(best, float((plan * cost).sum()) * unit)
    return best


class TestExactEmd:
    def test_identical_marginals_zero(self):
        a = np.array([0.2, 0.5, 0.3])
        cost = np.array([[0, 0.3, 0.9], [0.3, 0, 0.4], [0.9, 0.4, 0]])
        value, plan = exact_emd(TransportProblem(a=a, b=a, cost=cost))
        assert value == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(plan.sum(axis=1), a)

    def test_forced_single_move(self):
        prob = TransportProblem(
            a=np.array([1.0, 0.0]),
            b=np.array([0.0, 1.0]),
            cost=np.array([[0.0, 0.5], [0.5, 0.0]]),
        )
        value, plan = exact_emd(prob)
        assert value == pytest.approx(0.5)
        assert plan[0, 1] == pytest.approx(1.0)

    def test_three_bin_chain_against_enumeration(self):
        # |i-j| cost, half-unit masses; oracle enumerates every feasible plan
        cost = np.abs(np.subtract.outer(np.arange(3), np.arange(3))).astype(float)
        a = np.array([0.5, 0.5, 0.0])
        b = np.array([0.0, 0.5, 0.5])
        oracle = enumerate_min_cost([1, 1, 0], np.array([0, 1, 1]), cost, unit=0.5)
        assert oracle == pytest.approx(1.0)
        value, _ = exact_emd(TransportProblem(a=a, b=b, cost=cost))
        assert value == pytest.approx(oracle)

    def test_random_instances_against_enumeration(self):
        rng = np.random.default_rng(101)
        for _ in range(25):
            n = int(rng.integers(2, 5))
            units = 4
            ua = rng.multinomial(units, np.ones(n) / n)
            ub = rng.multinomial(units, np.ones(n) / n)
            cost = rng.uniform(0, 1, (n, n))
            cost = 0.5 * (cost + cost.T)
            np.fill_diagonal(cost, 0.0)
            oracle = enumerate_min_cost(list(ua), ub, cost, unit=1.0 / units)
            value, _ = exact_emd(
                TransportProblem(a=ua / units, b=ub / units, cost=cost)
            )
            assert value == pytest.approx(oracle, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            prob = random_problem(rng, int(rng.integers(2, 8)))
            v_ab, _ = exact_emd(prob)
            v_ba, _ = exact_emd(TransportProblem(a=prob.b, b=prob.a, cost=prob.cost))
            assert v_ab == pytest.approx(v_ba, abs=1e-10)

    def test_support_restriction_matches_dense_subproblem(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = 8
            a = np.zeros(n)
            b = np.zeros(n)
            ia = rng.choice(n, size=3, replace=False)
            jb = rng.choice(n, size=4, replace=False)
            a[ia] = rng.dirichlet(np.ones(3))
            b[jb] = rng.dirichlet(np.ones(4))
            cost = rng.uniform(0, 1, (n, n))
            cost = 0.5 * (cost + cost.T)
            np.fill_diagonal(cost, 0.0)
            full, plan = exact_emd(TransportProblem(a=a, b=b, cost=cost))
            # dense path: solve over the union of supports as its own index space
            union = sorted(set(ia) | set(jb))
            sub = cost[np.ix_(union, union)]
            dense, _ = exact_emd(TransportProblem(a=a[union], b=b[union], cost=sub))
            assert full == pytest.approx(dense, abs=1e-10)
            off = np.delete(np.arange(n), ia)
            assert np.abs(plan[off, :]).max() == 0.0

    def test_empty_marginal_rejected(self):
        with pytest.raises(EmptyDistribution):
            TransportProblem(a=np.zeros(3), b=np.ones(3) / 3, cost=np.zeros((3, 3)))


class TestSinkhorn:
    def test_identical_marginals_near_zero_and_diagonal_plan(self):
        a = np.array([0.3, 0.2, 0.5])
        cost = np.array([[0, 0.4, 0.7], [0.4, 0, 0.2], [0.7, 0.2, 0]])
        res = sinkhorn(TransportProblem(a=a, b=a, cost=cost), SinkhornConfig(lam=2000.0))
        assert res.value == pytest.approx(0.0, abs=1e-4)
        assert np.allclose(np.diag(res.plan), a, atol=1e-4)

    def test_forced_move_value(self):
        prob = TransportProblem(
            a=np.array([1.0, 0.0]),
            b=np.array([0.0, 1.0]),
            cost=np.array([[0.0, 0.5], [0.5, 0.0]]),
        )
        res = sinkhorn(prob, SinkhornConfig(lam=500.0))
        assert res.value == pytest.approx(0.5, abs=1e-3)

    def test_matches_exact_on_random_six_bin_problems(self):
        rng = np.random.default_rng(202)
        cfg = SinkhornConfig(lam=200.0, max_iters=2000, tol=1e-8)
        for _ in range(30):
            prob = random_problem(rng, 6)
            res = sinkhorn(prob, cfg)
            exact, _ = exact_emd(prob)
            assert res.value == pytest.approx(exact, rel=1e-2, abs=1e-4)

    def test_plan_marginals_within_tolerance(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            prob = random_problem(rng, 7)
            res = sinkhorn(prob, SinkhornConfig(lam=100.0, max_iters=2000, tol=1e-8))
            assert np.abs(res.plan.sum(axis=1) - prob.a).max() < 1e-8
            assert np.abs(res.plan.sum(axis=0) - prob.b).max() < 1e-8

    def test_value_monotone_in_lam(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            prob = random_problem(rng, 6)
            exact, _ = exact_emd(prob)
            values = [
                sinkhorn(prob, SinkhornConfig(lam=lam, max_iters=5000)).value
                for lam in (10.0, 50.0, 200.0, 1000.0)
            ]
            for hi, lo in zip(values, values[1:]):
                assert hi >= lo - 1e-6
            assert values[-1] >= exact - 1e-6
            assert values[-1] == pytest.approx(exact, rel=1e-2, abs=1e-5)

    def test_gradient_matches_finite_differences_of_sharp_value(self):
        # sharp gradients live in the simplex tangent space; compare there
        rng = np.random.default_rng(42)
        cfg = SinkhornConfig(lam=30000.0, max_iters=50000, tol=1e-11)
        for _ in range(15):
            n = 5
            a = rng.dirichlet(np.ones(n)) * 0.8 + 0.04
            a /= a.sum()
            b = rng.dirichlet(np.ones(n)) * 0.8 + 0.04
            b /= b.sum()
            cost = rng.uniform(0.1, 1.0, (n, n))
            cost = 0.5 * (cost + cost.T)
            np.fill_diagonal(cost, 0.0)
            prob = TransportProblem(a=a, b=b, cost=cost)
            res = sinkhorn(prob, cfg)
            fd = np.zeros(n)
            h = 1e-5
            for i in range(n):
                d = -np.ones(n) / n
                d[i] += 1.0
                vp, _ = exact_emd(TransportProblem(a=(a + h * d) / (a + h * d).sum(), b=b, cost=cost))
                vm, _ = exact_emd(TransportProblem(a=(a - h * d) / (a - h * d).sum(), b=b, cost=cost))
                fd[i] = (vp - vm) / (2 * h)
            rel = np.linalg.norm(res.gradient - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-3

    def test_zero_mass_target_bins_allowed(self):
        a = np.array([0.25, 0.25, 0.25, 0.25])
        b = np.array([0.5, 0.5, 0.0, 0.0])
        cost = np.array(
            [[0, 0.2, 0.4, 0.6], [0.2, 0, 0.3, 0.5], [0.4, 0.3, 0, 0.1], [0.6, 0.5, 0.1, 0]]
        )
        prob = TransportProblem(a=a, b=b, cost=cost)
        res = sinkhorn(prob, SinkhornConfig(lam=500.0, max_iters=5000))
        exact, _ = exact_emd(prob)
        assert res.value == pytest.approx(exact, rel=1e-2, abs=1e-4)
        assert np.isfinite(res.gradient).all()

    def test_non_convergence_reported_not_raised(self):
        rng = np.random.default_rng(5)
        prob = random_problem(rng, 8)
        res = sinkhorn(prob, SinkhornConfig(lam=5000.0, max_iters=3, tol=1e-12))
        assert not res.converged
        assert np.isfinite(res.value)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(23)
        n = 9
        cost = rng.uniform(0, 1, (n, n))
        cost = 0.5 * (cost + cost.T)
        np.fill_diagonal(cost, 0.0)
        A = rng.dirichlet(np.ones(n), size=5)
        B = rng.dirichlet(np.ones(n), size=5)
        cfg = SinkhornConfig(lam=150.0, max_iters=2000, tol=1e-9)
        values, grads, done = sinkhorn_batch(A, B, cost, cfg)
        for i in range(5):
            single = sinkhorn(TransportProblem(a=A[i], b=B[i], cost=cost), cfg)
            assert values[i] == pytest.approx(single.value, rel=1e-6, abs=1e-9)
            assert np.allclose(grads[i], single.gradient, atol=1e-6)


class TestEmdMetric:
    def test_identical_vectors_zero(self):
        v = np.array([0.0, 300.0, 700.0])
        M = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
        assert emd_metric(v, v, M) == pytest.approx(0.0, abs=1e-12)

    def test_single_forced_move_scales_by_constant(self):
        v_hat = np.array([1000.0, 0.0, 0.0])
        v = np.array([0.0, 0.0, 1000.0])
        M = np.zeros((3, 3))
        M[0, 2] = M[2, 0] = 0.2
        M[0, 1] = M[1, 0] = 0.9
        M[1, 2] = M[2, 1] = 0.9
        assert emd_metric(v_hat, v, M) == pytest.approx(200.0)

    def test_same_substitution_group_costs_nothing(self):
        # indices 0 and 1 in one group: M distance 0 between them
        M = np.zeros((3, 3))
        M[0, 2] = M[2, 0] = 0.7
        M[1, 2] = M[2, 1] = 0.7
        v_hat = np.array([1000.0, 0.0, 0.0])
        v = np.array([0.0, 1000.0, 0.0])
        assert emd_metric(v_hat, v, M) == pytest.approx(0.0, abs=1e-12)

    def test_empty_vector_rejected(self):
        with pytest.raises(EmptyDistribution):
            emd_metric(np.zeros(3), np.array([0.0, 1000.0, 0.0]), np.zeros((3, 3)))
