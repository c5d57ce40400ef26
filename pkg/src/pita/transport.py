"""Entropic-regularized transport loss and an exact solver for evaluation.

The training loss is the transport cost of moving predicted mass onto the
ground-truth mass under the ingredient distance matrix. The entropic form
is solved with log-domain Sinkhorn scaling; the regularization strength
``lam`` multiplies the cost inside the Gibbs kernel exp(-lam * cost), so
larger lam means closer to the exact (unregularized) optimum. Evaluation
uses the exact transportation LP restricted to the marginal supports.

Two standard accelerations keep sharp lam practical inside a fixed
iteration budget: the kernel is annealed from a smoother lam upward with
the dual potentials warm-started between stages, and the final stage uses
overrelaxed updates that back off automatically if the marginal residual
grows. The returned coupling is rounded onto the transport polytope
(row/column rescaling plus a rank-one correction), so its marginals match
a and b exactly even when the iterate stopped short of tol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, EmptyDistribution, NumericalBlowup

MASS_TOL = 1e-9
_ANNEAL_BASE = 2.0
_ANNEAL_STAGE_ITERS = 100
_ANNEAL_STAGE_TOL = 1e-5
_OVERRELAX = 1.7


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs. lam is the lambda of the math; Python keyword."""

    lam: float = 200.0
    max_iters: int = 2000
    tol: float = 1e-8
    p: float = 1.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.p < 1:
            raise ValueError(f"ground-metric exponent p must be >= 1, got {self.p}")


@dataclass(frozen=True)
class TransportProblem:
    """Balanced pair of distributions plus a ground-cost matrix."""

    a: np.ndarray
    b: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        cost = np.asarray(self.cost, dtype=np.float64)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "cost", cost)
        n = a.shape[0]
        if b.shape != (n,) or cost.shape != (n, n):
            raise DimensionMismatch(
                f"marginals {a.shape}/{b.shape} and cost {cost.shape} do not agree"
            )
        if np.any(a < 0) or np.any(b < 0):
            raise ValueError("marginals must be nonnegative")
        if a.sum() == 0 or b.sum() == 0:
            raise EmptyDistribution("a transport marginal carries no mass")
        if abs(a.sum() - 1.0) > MASS_TOL or abs(b.sum() - 1.0) > MASS_TOL:
            raise ValueError(
                f"marginals must sum to 1 within {MASS_TOL} (got {a.sum()}, {b.sum()})"
            )
        if np.any(cost < 0):
            raise ValueError("cost matrix must be nonnegative")
        if np.abs(cost - cost.T).max() > 1e-9:
            raise ValueError("cost matrix must be symmetric")
        if np.abs(np.diag(cost)).max() > 0:
            raise ValueError("cost matrix must have a zero diagonal")

    @property
    def size(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class TransportResult:
    value: float
    gradient: np.ndarray
    plan: np.ndarray
    converged: bool
    iters_used: int


def sinkhorn(problem: TransportProblem, config: SinkhornConfig = SinkhornConfig()) -> TransportResult:
    """Entropic transport value, coupling, and gradient for one problem.

    value is <plan, cost> of the rounded coupling. gradient is the
    gradient of the transport value w.r.t. the first marginal, recovered
    from the log of the row scaling vector divided by lam and centered to
    zero mean (its component in the simplex tangent space). Non-convergence
    within max_iters is reported through the converged flag; the last
    iterate is still returned.
    """
    values, grads, plans, done, iters = _sinkhorn_core(
        problem.a[None, :], problem.b[None, :], problem.cost, config
    )
    return TransportResult(
        value=float(values[0]),
        gradient=grads[0],
        plan=plans[0],
        converged=bool(done[0]),
        iters_used=iters,
    )


def sinkhorn_batch(A: np.ndarray, B: np.ndarray, cost: np.ndarray, config: SinkhornConfig):
    """Vectorized Sinkhorn over row-aligned batches of marginals.

    A, B: (N, n) arrays of distributions (rows sum to 1; zeros allowed).
    Returns (values, gradients, converged) with shapes (N,), (N, n), (N,).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    values, grads, _, done, _ = _sinkhorn_core(A, B, np.asarray(cost, dtype=np.float64), config)
    return values, grads, done


def _overrelax(old, new, w):
    """Blend potentials where both are finite; -inf bins stay -inf."""
    finite = np.isfinite(old) & np.isfinite(new)
    blend = (1 - w[:, None]) * np.where(finite, old, 0.0) + w[:, None] * np.where(finite, new, 0.0)
    return np.where(finite, blend, new)


def _lse_rows(kernel, vec, buf):
    """logsumexp_j(kernel[i, j] + vec[k, j]) into shape (K, n), using buf."""
    np.add(kernel[None, :, :], vec[:, None, :], out=buf)
    m = buf.max(axis=2)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    np.subtract(buf, m_safe[:, :, None], out=buf)
    np.exp(buf, out=buf)
    s = buf.sum(axis=2)
    with np.errstate(divide="ignore"):
        out = np.log(s)
    out += m_safe
    return out


def _round_to_feasible(plan, A, B):
    """Project couplings onto the transport polytope of (A, B) rows."""
    r = plan.sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        sr = np.where(r > 0, np.minimum(A / r, 1.0), 0.0)
    plan = plan * sr[:, :, None]
    c = plan.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sc = np.where(c > 0, np.minimum(B / c, 1.0), 0.0)
    plan = plan * sc[:, None, :]
    err_r = A - plan.sum(axis=2)
    err_c = B - plan.sum(axis=1)
    l1 = err_r.sum(axis=1)
    fix = l1 > 0
    if np.any(fix):
        corr = err_r[fix, :, None] * err_c[fix, None, :] / l1[fix, None, None]
        plan[fix] += corr
    return plan


def _sinkhorn_core(A, B, cost, config):
    n = cost.shape[0]
    if A.shape[1] != n or B.shape[1] != n:
        raise DimensionMismatch(f"marginal length {A.shape[1]}/{B.shape[1]} vs cost {cost.shape}")
    lam = config.lam

    stages = []
    level = lam
    while level > _ANNEAL_BASE:
        stages.append(level)
        level /= _ANNEAL_BASE
    stages.append(level)
    stages = stages[::-1]

    with np.errstate(divide="ignore"):
        logA = np.log(A)
        logB = np.log(B)
    alpha = np.where(A > 0, 0.0, -np.inf)
    beta = np.where(B > 0, 0.0, -np.inf)

    n_batch = A.shape[0]
    buf = np.empty((n_batch, n, n))
    total = 0
    converged = np.zeros(n_batch, dtype=bool)
    for s_i, lam_s in enumerate(stages):
        # the cost is symmetric, so both updates use the same kernel orientation
        kernel = -lam_s * cost
        final = s_i == len(stages) - 1
        stage_tol = config.tol if final else max(config.tol, _ANNEAL_STAGE_TOL)
        if final:
            budget = config.max_iters - total
        else:
            budget = min(_ANNEAL_STAGE_ITERS, max(0, config.max_iters - total - 200))
        w = np.full(n_batch, _OVERRELAX)
        prev_err = np.full(n_batch, np.inf)
        for it in range(budget):
            alpha = _overrelax(alpha, logA - _lse_rows(kernel, beta, buf), w)
            beta = _overrelax(beta, logB - _lse_rows(kernel, alpha, buf), w)
            total += 1
            if (it + 1) % 5 == 0 or it == budget - 1:
                np.add(kernel[None, :, :], alpha[:, :, None], out=buf)
                buf += beta[:, None, :]
                np.exp(buf, out=buf)
                if np.isnan(buf).any():
                    raise NumericalBlowup("NaN in Sinkhorn scaling")
                # columns are exact after the beta update; rows carry the residual
                err = np.abs(buf.sum(axis=2) - A).max(axis=1)
                if final:
                    converged = err < stage_tol
                if (err < stage_tol).all():
                    break
                grow = err > prev_err
                w = np.where(grow, 1.0 + 0.5 * (w - 1.0), w)
                prev_err = err
        if not final:
            rescale = stages[s_i + 1] / lam_s
            alpha = alpha * rescale
            beta = beta * rescale

    kernel = -lam * cost
    # Gradient w.r.t. A: alpha / lam on the support; off-support bins get the
    # finite soft c-transform part (the log A term is -inf there).
    soft = -_lse_rows(kernel, beta, buf) / lam
    grads = np.where(A > 0, alpha / lam, soft)
    grads = grads - grads.mean(axis=1, keepdims=True)

    np.add(kernel[None, :, :], alpha[:, :, None], out=buf)
    buf += beta[:, None, :]
    plan = np.exp(buf)
    plan = _round_to_feasible(plan, A, B)
    values = np.einsum("kij,ij->k", plan, cost)

    return values, grads, plan, converged, total


def exact_emd(problem: TransportProblem) -> tuple[float, np.ndarray]:
    """Exact optimal transport value and plan via the transportation LP.

    The LP is solved on the union of supports only; zero-mass bins never
    carry flow at an optimum, so they are dropped and the plan is embedded
    back into the full index space.
    """
    a, b, cost = problem.a, problem.b, problem.cost
    ia = np.flatnonzero(a > 0)
    jb = np.flatnonzero(b > 0)
    if ia.size == 0 or jb.size == 0:
        raise EmptyDistribution("all-zero marginal in exact_emd")
    sub = cost[np.ix_(ia, jb)]
    m, k = sub.shape

    row_eq = np.kron(np.eye(m), np.ones((1, k)))
    col_eq = np.kron(np.ones((1, m)), np.eye(k))
    A_eq = np.vstack([row_eq, col_eq])
    b_eq = np.concatenate([a[ia], b[jb]])

    res = linprog(sub.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise NumericalBlowup(f"transportation LP failed: {res.message}")
    plan = np.zeros_like(cost)
    plan[np.ix_(ia, jb)] = res.x.reshape(m, k)
    return float(res.fun), plan


def emd_metric(v_hat: np.ndarray, v: np.ndarray, M: np.ndarray, amount_constant: float = 1000.0) -> float:
    """Grams-scaled exact transport distance between two amount vectors."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s_hat, s = v_hat.sum(), v.sum()
    if s_hat <= 0 or s <= 0:
        raise EmptyDistribution("amount vector carries no mass")
    problem = TransportProblem(a=v_hat / s_hat, b=v / s, cost=np.asarray(M, dtype=np.float64))
    value, _ = exact_emd(problem)
    return amount_constant * value
