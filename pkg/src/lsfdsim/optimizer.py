"""Joint data-power and LSFD optimization of the uplink sum SE.

The sum-SE maximization is attacked through its weighted-MMSE reformulation:
minimize ``sum_{l,k} (w_{l,k} e_{l,k} - ln w_{l,k})`` over receiver scalars
``u``, weights ``w``, second-layer vectors ``a``, and root-powers ``rho``
(with ``rho^2 <= p_max``), where ``e`` is the mean-squared error of detecting
a unit-power symbol through the equivalent scalar channel built from the
closed-form coefficients.  Each block has a unique closed-form minimizer, so
cycling u -> w -> a -> rho never increases the objective and the recorded sum
SE never decreases.

A single-layer benchmark keeps ``a`` pinned to the own-cell indicators and
optimizes powers only.  A mismatched-statistics variant runs every update on
an approximate coefficient tensor while scoring iterates against the true
one; monotonicity is lost, so the best iterate over the run is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se as semod
from .se import PowerAllocation, SECoefficients

__all__ = [
    "ConvergenceOptions",
    "OptimizationTrace",
    "WmmseState",
    "update_u",
    "update_w",
    "update_a",
    "update_rho",
    "mse_terms",
    "wmmse_objective",
    "run_two_layer",
    "run_single_layer",
    "stopping_met",
    "arithmetic_op_count",
]


# Users the optimizer shuts off have rho decaying geometrically toward zero,
# eventually underflowing into denormals where rho/conj(u) degenerates.  Zero
# is their absorbing fixed point, so powers this far below the cap are snapped
# to it exactly (the sum-SE effect is far below any tracked tolerance).
POWER_SHUTOFF_REL = 1e-30


@dataclass(frozen=True)
class ConvergenceOptions:
    """Stopping rule: absolute sum-SE change `epsilon` (bit/s/Hz) or
    `max_iter`, whichever hits first."""

    epsilon: float = 1e-3
    max_iter: int = 500
    record_trace: bool = True

    def __post_init__(self):
        if self.epsilon < 0 or self.max_iter < 1:
            raise ValueError("need epsilon >= 0 and max_iter >= 1")


@dataclass
class WmmseState:
    """One iterate of the alternating optimization."""

    u: np.ndarray              # (L, K) complex receiver scalars
    w: np.ndarray              # (L, K) positive weights
    a: np.ndarray              # (L, K, L) second-layer vectors
    rho: np.ndarray            # (L, K) root data powers
    e: np.ndarray              # (L, K) per-user MSE at the last w-update
    iteration: int = 0


@dataclass
class OptimizationTrace:
    sum_se: np.ndarray
    per_user_se: np.ndarray
    iterations: int
    terminated_by: str


def _own_gain(g: np.ndarray) -> np.ndarray:
    L = g.shape[0]
    return g[np.arange(L), :, np.arange(L)]


def update_u(coeffs: SECoefficients, a: np.ndarray, rho: np.ndarray):
    """Receiver-scalar update; returns (u, u_tilde) with u_tilde the total
    received power of the equivalent scalar channel."""
    p = rho**2
    g = semod.combined_gains(coeffs, a)
    g2 = np.abs(g) ** 2
    cw = semod.interference_weights(coeffs, p)
    u_tilde = np.einsum("jk,lkj->lk", p, g2) + np.einsum(
        "lkp,pk->lk", np.abs(a) ** 2, cw + coeffs.d
    )
    if np.any(u_tilde <= 0):
        raise ValueError("u-update needs a nonzero LSFD vector (u_tilde > 0)")
    u = rho * np.conj(_own_gain(g)) / u_tilde
    return u, u_tilde


def mse_terms(coeffs: SECoefficients, u: np.ndarray, a: np.ndarray, rho: np.ndarray):
    """Per-user MSE ``e`` of the equivalent scalar channel at arbitrary
    (u, a, rho); the quantity the weights multiply in the objective."""
    p = rho**2
    g = semod.combined_gains(coeffs, a)
    cw = semod.interference_weights(coeffs, p)
    u_tilde = np.einsum("jk,lkj->lk", p, np.abs(g) ** 2) + np.einsum(
        "lkp,pk->lk", np.abs(a) ** 2, cw + coeffs.d
    )
    return np.abs(u) ** 2 * u_tilde - 2 * rho * (u * _own_gain(g)).real + 1.0


def update_w(coeffs: SECoefficients, u: np.ndarray, a: np.ndarray, rho: np.ndarray):
    """Weight update w = 1/e; raises if the state is inconsistent (e <= 0)."""
    e = mse_terms(coeffs, u, a, rho)
    if np.any(e <= 0):
        raise ArithmeticError("nonpositive MSE: inconsistent optimizer state")
    return 1.0 / e, e


def update_a(
    coeffs: SECoefficients,
    u: np.ndarray,
    rho: np.ndarray,
    a_prev: np.ndarray,
) -> np.ndarray:
    """Second-layer vector update.

    The minimizing vector is ``(rho/u^*) Ct^{-1} b_own`` where Ct adds the
    own-signal outer product to the matrix used for the SE-optimal weights;
    the two solutions are collinear, so the achieved SINR is identical.
    Users with u = 0 (zero power) keep their previous vector, which is
    optimal for them.
    """
    p = rho**2
    L, K = coeffs.shape
    cw = semod.interference_weights(coeffs, p)
    a_new = np.array(a_prev, copy=True)
    for k in range(K):
        bv = coeffs.b[:, k, :]
        c_mat = np.einsum("j,jp,jq->pq", p[:, k], bv, bv.conj())
        c_mat += np.diag(cw[:, k] + coeffs.d[:, k])
        directions = np.linalg.solve(c_mat, bv.T)        # column l: Ct^{-1} b_l
        for l in range(L):
            if u[l, k] == 0:
                continue
            a_new[l, k] = (rho[l, k] / np.conj(u[l, k])) * directions[:, l]
    return a_new


def update_rho(
    coeffs: SECoefficients,
    u: np.ndarray,
    w: np.ndarray,
    a: np.ndarray,
    p_max,
) -> np.ndarray:
    """Root-power update, clamped to [0, sqrt(p_max)].

    The numerator is nonnegative whenever `a` came out of :func:`update_a`,
    but transient states can push it negative; the lower clamp keeps the
    iterate feasible and is exactly the box-constrained block minimizer.
    """
    g = semod.combined_gains(coeffs, a)
    u2w = w * np.abs(u) ** 2
    numer = w * (u * _own_gain(g)).real
    den_coherent = np.einsum("pk,pkl->lk", u2w, np.abs(g) ** 2)
    t = np.einsum("pi,pim->mi", u2w, np.abs(a) ** 2)
    den_noncoherent = np.einsum("mi,milk->lk", t, coeffs.c)
    denom = den_coherent + den_noncoherent
    rho = np.zeros_like(numer)
    np.divide(numer, denom, out=rho, where=denom > 0)
    return np.clip(rho, 0.0, np.sqrt(p_max))


def wmmse_objective(
    coeffs: SECoefficients, u: np.ndarray, w: np.ndarray, a: np.ndarray, rho: np.ndarray
) -> float:
    """Value sum(w e - ln w) that the alternating updates minimize."""
    e = mse_terms(coeffs, u, a, rho)
    return float(np.sum(w * e - np.log(w)))


def _sum_se(coeffs: SECoefficients, p: np.ndarray, a: np.ndarray, prelog: float):
    sinr = semod.sinr_closed_form(coeffs, p, a)
    se = prelog * np.log2(1.0 + sinr)
    return float(se.sum()), se


def _init_rho(p_max, shape, rho0, rng):
    cap = np.broadcast_to(np.sqrt(p_max), shape)
    if rho0 is None:
        if rng is None:
            raise ValueError("provide rho0 or an rng for the random initialization")
        return rng.uniform(0.0, 1.0, size=shape) * cap
    rho0 = np.asarray(rho0, dtype=float)
    if np.any(rho0 < 0) or np.any(rho0 > cap * (1 + 1e-12)):
        raise ValueError("rho0 outside the feasible box")
    return rho0.copy()


def run_two_layer(
    coeffs: SECoefficients,
    p_max,
    opts: ConvergenceOptions,
    prelog: float,
    rho0: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    model_coeffs: SECoefficients | None = None,
) -> tuple[PowerAllocation, np.ndarray, OptimizationTrace]:
    """Alternate u -> w -> a -> rho from feasible powers until the sum-SE
    change drops below `opts.epsilon` or `opts.max_iter` is reached.

    `coeffs` scores the iterates (the true system).  When `model_coeffs` is
    given, every update runs on that approximate tensor instead; the recorded
    sum SE is then no longer monotone and the best-scoring iterate over the
    whole run is returned (the stopping rule is skipped).
    """
    work = model_coeffs if model_coeffs is not None else coeffs
    track_best = model_coeffs is not None
    L, K = coeffs.shape
    rho = _init_rho(p_max, (L, K), rho0, rng)
    a = semod.optimal_lsfd(work, rho**2, check_condition=False)

    total, se = _sum_se(coeffs, rho**2, a, prelog)
    trace = [total]
    best = (total, rho.copy(), a.copy(), se)
    terminated_by = "max_iter"
    u = np.zeros((L, K), dtype=complex)
    w = np.ones((L, K))
    e = np.ones((L, K))
    iteration = 0
    shutoff = POWER_SHUTOFF_REL * np.broadcast_to(np.sqrt(p_max), (L, K))
    for iteration in range(1, opts.max_iter + 1):
        u, _ = update_u(work, a, rho)
        w, e = update_w(work, u, a, rho)
        a = update_a(work, u, rho, a)
        rho = update_rho(work, u, w, a, p_max)
        rho[rho < shutoff] = 0.0
        total, se = _sum_se(coeffs, rho**2, a, prelog)
        trace.append(total)
        if track_best:
            if total > best[0]:
                best = (total, rho.copy(), a.copy(), se)
            continue
        if abs(trace[-1] - trace[-2]) <= opts.epsilon:
            terminated_by = "epsilon"
            break

    if track_best:
        total, rho, a, se = best
    powers = PowerAllocation(p=rho**2, rho=rho)
    trace_arr = np.array(trace) if opts.record_trace else np.array(trace[-1:])
    return powers, a, OptimizationTrace(
        sum_se=trace_arr,
        per_user_se=se,
        iterations=iteration,
        terminated_by=terminated_by,
    )


def run_single_layer(
    coeffs: SECoefficients,
    p_max,
    opts: ConvergenceOptions,
    prelog: float,
    rho0: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[PowerAllocation, OptimizationTrace]:
    """Data-power optimization with the second layer disabled (indicator
    weights); the same block updates with the a-step skipped."""
    L, K = coeffs.shape
    a = semod.single_layer_lsfd(L, K)
    rho = _init_rho(p_max, (L, K), rho0, rng)

    total, se = _sum_se(coeffs, rho**2, a, prelog)
    trace = [total]
    terminated_by = "max_iter"
    iteration = 0
    shutoff = POWER_SHUTOFF_REL * np.broadcast_to(np.sqrt(p_max), (L, K))
    for iteration in range(1, opts.max_iter + 1):
        u, _ = update_u(coeffs, a, rho)
        w, _ = update_w(coeffs, u, a, rho)
        rho = update_rho(coeffs, u, w, a, p_max)
        rho[rho < shutoff] = 0.0
        total, se = _sum_se(coeffs, rho**2, a, prelog)
        trace.append(total)
        if abs(trace[-1] - trace[-2]) <= opts.epsilon:
            terminated_by = "epsilon"
            break

    powers = PowerAllocation(p=rho**2, rho=rho)
    trace_arr = np.array(trace) if opts.record_trace else np.array(trace[-1:])
    return powers, OptimizationTrace(
        sum_se=trace_arr,
        per_user_se=se,
        iterations=iteration,
        terminated_by=terminated_by,
    )


def stopping_met(trace: np.ndarray, epsilon: float) -> bool:
    """Whether the last two recorded sum-SE values differ by at most epsilon."""
    trace = np.asarray(trace, dtype=float)
    if trace.size < 2:
        return False
    return bool(abs(trace[-1] - trace[-2]) <= epsilon)


def arithmetic_op_count(cells: int, users_per_cell: int, n_iterations: int) -> int:
    """Exact number of complex multiplications/divisions/logarithms the
    alternating algorithm spends in `n_iterations` iterations (Cholesky-based
    solve assumed for the second-layer systems)."""
    L, K, N = int(cells), int(users_per_cell), int(n_iterations)
    if L < 1 or K < 1 or N < 1:
        raise ValueError("cells, users_per_cell, n_iterations must be >= 1")
    per_iter = (
        11 * L**3 * K**2
        + 6 * L**3 * K
        + (L**4 * K + 53 * L**2 * K) // 3
        + 3 * L**2 * K**2
        + 16 * L * K
        + 2
    )
    if (L**4 * K + 53 * L**2 * K) % 3:
        raise AssertionError("operation-count term unexpectedly not divisible by 3")
    return N * per_iter
