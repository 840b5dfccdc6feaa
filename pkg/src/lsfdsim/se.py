"""Uplink spectral efficiency for two-layer decoded multi-cell massive MIMO.

Closed-form path (maximum-ratio combining in the first layer)
--------------------------------------------------------------
The effective SINR of user (l, k) after second-layer combining with the
weight vector ``a[l, k] in C^L`` is a generalized Rayleigh quotient built
from three coefficient tensors:

* ``b[j, k, lp]``  - coherent gain of the pilot-k user in cell j at BS lp
  (complex; the signal term uses j = l, pilot contamination uses j != l);
* ``c[lp, k, j, i]`` - non-coherent interference power coupling at BS lp,
  pilot k, caused by user (j, i) (real, nonnegative);
* ``d[lp, k]``     - effective noise at BS lp for pilot k (real, positive).

    SINR = p[l,k] |a^H b_l|^2 /
           ( sum_{j != l} p[j,k] |a^H b_j|^2
             + sum_lp |a_lp|^2 sum_{j,i} p[j,i] c[lp,k,j,i]
             + sum_lp |a_lp|^2 d[lp,k] )

The weights maximizing this quotient solve a Hermitian L x L system and are
returned by :func:`optimal_lsfd`.

General path (any first-layer combiner, e.g. regularized zero-forcing)
----------------------------------------------------------------------
:func:`general_expectations_mc` estimates the first- and second-moment
matrices of the per-BS combined products by Monte Carlo, after which
:func:`general_optimal_lsfd` gives the SE-optimal weights and the achieved
SE for any data power allocation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import channel as chan
from .scenario import ScenarioStatistics

__all__ = [
    "SECoefficients",
    "PowerAllocation",
    "SEReport",
    "GeneralSEModel",
    "coefficients",
    "sinr_closed_form",
    "optimal_lsfd",
    "single_layer_lsfd",
    "se_report",
    "rzf_combiner",
    "general_expectations_mc",
    "general_sinr",
    "general_optimal_lsfd",
]

CONDITION_WARN_THRESHOLD = 1e12


@dataclass(frozen=True)
class SECoefficients:
    """Closed-form SINR coefficients for MRC with a given estimator.

    Axis conventions: ``b[j, k, lp]`` (source cell, pilot, BS component),
    ``c[lp, k, j, i]`` (BS, pilot, interferer cell, interferer index),
    ``d[lp, k]`` (BS, pilot).
    """

    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    estimator: str
    corr_mode: str = "full"

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


@dataclass(frozen=True)
class PowerAllocation:
    """Per-user uplink data powers and their square roots."""

    p: np.ndarray
    rho: np.ndarray | None = None

    def __post_init__(self):
        if self.rho is None:
            object.__setattr__(self, "rho", np.sqrt(self.p))


@dataclass(frozen=True)
class SEReport:
    """Per-user SINR/SE plus per-cell sums; SE in bit/s/Hz."""

    sinr: np.ndarray
    se: np.ndarray
    sum_se_per_cell: np.ndarray
    prelog: float


def coefficients(
    stats: ScenarioStatistics,
    pilot_powers: np.ndarray,
    estimator: str = "mmse",
    corr_mode: str = "full",
) -> SECoefficients:
    """Evaluate the closed-form SINR coefficient tensors.

    ``corr_mode="diagonal"`` replaces every correlation matrix by its
    (constant) diagonal before evaluating the traces, which collapses both
    estimators to the same scalar expressions; it models a network that only
    knows the average channel gains.
    """
    if estimator not in ("mmse", "ewmmse"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if corr_mode not in ("full", "diagonal"):
        raise ValueError(f"unknown corr_mode {corr_mode!r}")
    p_hat = np.asarray(pilot_powers, dtype=float)
    L, K = stats.shape
    tau_p, sigma2 = stats.tau_p, stats.sigma2

    if corr_mode == "diagonal":
        m = stats.antennas
        beta = stats.beta
        # psi_bar[lp, k]: per-antenna observation variance
        psi_bar = tau_p * np.einsum("jk,jkp->pk", p_hat, beta) + sigma2
        own_beta = beta[np.arange(L), :, np.arange(L)]            # (L, K), BS index first
        # b[j, k, lp] = sqrt(tau_p p_hat[j,k] p_hat[lp,k]) M beta_own[lp,k] beta[j,k,lp] / psi_bar[lp,k]
        b = (
            np.sqrt(tau_p * p_hat[:, :, None] * p_hat.T[None, :, :])
            * m * own_beta.T[None, :, :] * beta / psi_bar.T[None, :, :]
        ).astype(complex)
        c = (
            p_hat[:, :, None, None]
            * m
            * (own_beta**2)[:, :, None, None]
            / psi_bar[:, :, None, None]
            * beta.transpose(2, 0, 1)[:, None, :, :]
        )
        d = sigma2 * p_hat * m * own_beta**2 / psi_bar
        return SECoefficients(b=b, c=c, d=d, estimator=estimator, corr_mode=corr_mode)

    psi = chan.compute_psi(stats, p_hat)
    b = np.empty((L, K, L), dtype=complex)
    c = np.empty((L, K, L, K))
    d = np.empty((L, K))

    if estimator == "mmse":
        for lp in range(L):
            for k in range(K):
                r_own = stats.corr[lp, k, lp]
                factor = cho_factor(psi[lp, k], lower=True)
                x = cho_solve(factor, r_own)            # Psi^{-1} R_own
                t = r_own @ x                           # R_own Psi^{-1} R_own
                # trace(X R[j,k,lp]) over source cells j
                traces = np.einsum("ij,lji->l", x, stats.corr[:, k, lp])
                b[:, k, lp] = np.sqrt(tau_p * p_hat[:, k] * p_hat[lp, k]) * traces
                c[lp, k] = p_hat[lp, k] * np.einsum(
                    "ij,lkji->lk", t, stats.corr[:, :, lp]
                ).real
                d[lp, k] = sigma2 * p_hat[lp, k] * np.einsum("ij,ji->", x, r_own).real
    else:
        denom = tau_p * np.einsum("jk,jkp->pk", p_hat, stats.beta) + sigma2
        varrho = np.sqrt(p_hat)[:, :, None] * stats.beta / denom.T[None, :, :]
        tr_psi = np.trace(psi, axis1=-2, axis2=-1).real   # (L, K)
        own_varrho = varrho[np.arange(L), :, np.arange(L)]
        for lp in range(L):
            for k in range(K):
                b[:, k, lp] = (
                    math.sqrt(tau_p) * own_varrho[lp, k] * varrho[:, k, lp] * tr_psi[lp, k]
                )
                c[lp, k] = own_varrho[lp, k] ** 2 * np.einsum(
                    "lkji,ij->lk", stats.corr[:, :, lp], psi[lp, k]
                ).real
        d = own_varrho**2 * sigma2 * tr_psi
    return SECoefficients(b=b, c=c, d=d, estimator=estimator, corr_mode=corr_mode)


def combined_gains(coeffs: SECoefficients, lsfd: np.ndarray) -> np.ndarray:
    """g[l, k, j] = sum_lp conj(a[l,k,lp]) * b[j,k,lp]: coherent gain of the
    cell-j pilot-k signal inside user (l, k)'s two-layer detector."""
    return np.einsum("lkp,jkp->lkj", lsfd.conj(), coeffs.b)


def interference_weights(coeffs: SECoefficients, data_powers: np.ndarray) -> np.ndarray:
    """cw[lp, k] = sum_{j,i} p[j,i] c[lp,k,j,i]: total non-coherent
    interference power at BS lp on pilot k."""
    return np.einsum("pkji,ji->pk", coeffs.c, np.asarray(data_powers, dtype=float))


def sinr_closed_form(
    coeffs: SECoefficients, data_powers: np.ndarray, lsfd: np.ndarray
) -> np.ndarray:
    """Exact per-user SINR for given data powers and LSFD weights."""
    p = np.asarray(data_powers, dtype=float)
    L, K = coeffs.shape
    g = combined_gains(coeffs, lsfd)
    g2 = np.abs(g) ** 2
    own = g2[np.arange(L), :, np.arange(L)]
    coherent_total = np.einsum("jk,lkj->lk", p, g2)
    contamination = coherent_total - p * own
    abs_a2 = np.abs(lsfd) ** 2
    cw = interference_weights(coeffs, p)
    noise_plus_ni = np.einsum("lkp,pk->lk", abs_a2, cw + coeffs.d)
    denominator = contamination + noise_plus_ni
    if np.any(denominator <= 0):
        raise ArithmeticError("SINR denominator is not positive; got zero LSFD vector?")
    return p * own / denominator


def optimal_lsfd(
    coeffs: SECoefficients, data_powers: np.ndarray, check_condition: bool = True
) -> np.ndarray:
    """SE-maximizing second-layer weights, one L-vector per user.

    Solves ``C a = b_own`` per user where C collects contamination outer
    products from the other cells plus the diagonal of non-coherent
    interference and noise.
    """
    p = np.asarray(data_powers, dtype=float)
    L, K = coeffs.shape
    cw = interference_weights(coeffs, p)
    a = np.empty((L, K, L), dtype=complex)
    for k in range(K):
        bv = coeffs.b[:, k, :]                               # (src cell, component)
        gram = np.einsum("j,jp,jq->jpq", p[:, k], bv, bv.conj())
        total = gram.sum(axis=0)
        diag = np.diag(cw[:, k] + coeffs.d[:, k])
        for l in range(L):
            c_mat = total - gram[l] + diag
            if check_condition:
                cond = np.linalg.cond(c_mat)
                if cond > CONDITION_WARN_THRESHOLD:
                    warnings.warn(
                        f"LSFD system for user ({l},{k}) has condition number "
                        f"{cond:.2e}", RuntimeWarning, stacklevel=2,
                    )
            a[l, k] = np.linalg.solve(c_mat, bv[l])
    return a


def single_layer_lsfd(cells: int, users_per_cell: int) -> np.ndarray:
    """Indicator weights: each user is decoded by its own BS only."""
    a = np.zeros((cells, users_per_cell, cells), dtype=complex)
    for l in range(cells):
        a[l, :, l] = 1.0
    return a


def se_report(sinr: np.ndarray, tau_p: int, tau_c: int) -> SEReport:
    """Spectral efficiency from SINR with the pilot-overhead prelog."""
    prelog = 1.0 - tau_p / tau_c
    if not 0.0 < prelog < 1.0:
        raise ValueError("need 0 < 1 - tau_p/tau_c < 1")
    se = prelog * np.log2(1.0 + sinr)
    return SEReport(
        sinr=sinr, se=se, sum_se_per_cell=se.sum(axis=-1), prelog=prelog
    )


def rzf_combiner(h_hat: np.ndarray, data_powers: np.ndarray, sigma2: float) -> np.ndarray:
    """Regularized zero-forcing over the own-cell channel estimates.

    `h_hat` has the K estimated channel columns as trailing axes
    ``(..., M, K)``; the regularization is sigma2 divided by the mean data
    power of the cell's users.  Returns matching combiner columns.
    """
    h_hat = np.asarray(h_hat)
    k = h_hat.shape[-1]
    p_mean = float(np.mean(data_powers))
    if p_mean <= 0:
        raise ValueError("RZF needs a positive mean data power")
    gram = np.swapaxes(h_hat, -2, -1).conj() @ h_hat
    gram += (sigma2 / p_mean) * np.eye(k)
    # v = H (H^H H + xi I)^{-1}; solve on the Gram side
    return np.swapaxes(np.linalg.solve(np.swapaxes(gram, -2, -1), np.swapaxes(h_hat, -2, -1).conj()), -2, -1).conj()


@dataclass(frozen=True)
class GeneralSEModel:
    """Monte-Carlo moments of the per-BS combined products.

    ``b_vec[j, k, :]`` estimates the mean combined gains of user (j, k) across
    BSs; ``c2[k]`` the summed centered second-moment matrix; ``c3[k]`` /
    ``c4[k]`` the diagonal non-coherent interference and noise terms.  The
    data powers used for the p-weighted moments are stored for reuse.
    """

    b_vec: np.ndarray           # (L, K, L) complex
    c2: np.ndarray              # (K, L, L) Hermitian PSD
    c3: np.ndarray              # (K, L) real
    c4: np.ndarray              # (K, L) real
    data_powers: np.ndarray
    combiner: str
    estimator: str
    n_realizations: int
    b_vec_se: np.ndarray = field(repr=False, default=None)
    c2_se: np.ndarray = field(repr=False, default=None)
    c3_se: np.ndarray = field(repr=False, default=None)
    c4_se: np.ndarray = field(repr=False, default=None)

    def c1(self, l: int, k: int) -> np.ndarray:
        p = self.data_powers
        bv = self.b_vec[:, k, :]
        gram = np.einsum("j,jp,jq->jpq", p[:, k], bv, bv.conj())
        return gram.sum(axis=0) - gram[l]

    def denominator_matrix(self, l: int, k: int) -> np.ndarray:
        return self.c1(l, k) + self.c2[k] + np.diag(self.c3[k] + self.c4[k])


def first_layer_products(
    stats: ScenarioStatistics,
    model: chan.EstimationModel,
    estimator,
    combiner: str,
    data_powers: np.ndarray,
    n_batches: int,
    batch_size: int,
    rng: np.random.Generator,
):
    """Yield per-batch products of first-layer combining.

    Per batch: ``t[lp, k, j, i, b] = v[lp,k]^H h[j,i,lp]`` and
    ``q[lp, k, b] = ||v[lp,k]||^2``.  Batches use independent deterministic
    sub-streams spawned from `rng` and are intended to be merged in order.

    `estimator` may be a single name or a sequence of names; in the latter
    case every estimator sees the same channel and pilot-noise realizations
    (sampling dominates the cost) and each batch yields a dict name -> (t, q).
    """
    single = isinstance(estimator, str)
    names = (estimator,) if single else tuple(estimator)
    for name in names:
        if name not in ("mmse", "ewmmse"):
            raise ValueError(f"unknown estimator {name!r}")
    if combiner not in ("mrc", "rzf"):
        raise ValueError(f"unknown combiner {combiner!r}")
    factors = chan.channel_factors(stats)
    L = stats.shape[0]
    for child in rng.spawn(n_batches):
        h = chan.sample_channels(stats, child, batch_size, factors)
        y = chan.pilot_observation(
            h, model.pilot_powers, stats.sigma2, stats.tau_p, child
        )
        out = {}
        for name in names:
            h_hat = (
                chan.mmse_estimate(y, model)
                if name == "mmse"
                else chan.ewmmse_estimate(y, model)
            )
            if combiner == "mrc":
                v = h_hat
            else:
                v = np.empty_like(h_hat)
                for l in range(L):
                    block = np.transpose(h_hat[l], (2, 1, 0))   # (B, M, K)
                    vb = rzf_combiner(block, np.asarray(data_powers)[l], stats.sigma2)
                    v[l] = np.transpose(vb, (2, 1, 0))
            t = np.einsum("pqmb,jipmb->pqjib", v.conj(), h)
            q = np.einsum("pqmb,pqmb->pqb", v.conj(), v).real
            out[name] = (t, q)
        yield out[estimator] if single else out


def _batch_plan(n: int, batch_size: int) -> tuple[int, int]:
    batch_size = int(batch_size)
    if batch_size % 2:
        batch_size += 1
    n_batches = max(2, math.ceil(n / batch_size))
    return n_batches, batch_size


def general_expectations_mc(
    stats: ScenarioStatistics,
    pilot_powers: np.ndarray,
    data_powers: np.ndarray,
    combiner: str,
    estimator: str,
    n: int,
    rng: np.random.Generator,
    batch_size: int = 2000,
) -> GeneralSEModel:
    """Estimate the SE moment matrices for an arbitrary first-layer combiner.

    Runs ``>= n`` channel/pilot realizations in equal batches; standard
    errors are estimated from the spread of per-batch means.
    """
    if n < 100:
        raise ValueError("need at least 100 realizations")
    p = np.asarray(data_powers, dtype=float)
    L, K = stats.shape
    model = chan.estimation_model(stats, pilot_powers)
    n_batches, batch_size = _batch_plan(n, batch_size)

    b_parts, c2_parts, c3_parts, c4_parts = [], [], [], []
    other_mask = 1.0 - np.eye(K)
    for t, q in first_layer_products(
        stats, model, estimator, combiner, p, n_batches, batch_size, rng
    ):
        nb = t.shape[-1]
        tp = t[:, np.arange(K), :, np.arange(K)]     # (k, lp, j, b) same-pilot products
        bm = tp.mean(axis=-1)                        # (k, lp, j)
        b_parts.append(np.transpose(bm, (2, 0, 1)))  # -> (j, k, lp)
        s2 = np.einsum("kpjb,krjb->kjpr", tp, tp.conj()) / nb
        centered = s2 - np.einsum("kpj,krj->kjpr", bm, bm.conj())
        centered *= nb / (nb - 1)
        c2_parts.append(np.einsum("jk,kjpr->kpr", p, centered))
        m2 = (np.abs(t) ** 2).mean(axis=-1)          # (lp, q, j, i)
        c3_parts.append(
            np.einsum("pqji,ji,qi->qp", m2, p, other_mask)
        )
        c4_parts.append(stats.sigma2 * q.mean(axis=-1).T)   # (k, lp)

    def _merge(parts):
        arr = np.stack(parts)
        mean = arr.mean(axis=0)
        se = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) if arr.shape[0] > 1 else None
        return mean, se

    b_vec, b_raw_se = _merge(b_parts)
    c2, c2_se = _merge(c2_parts)
    c3, c3_se = _merge(c3_parts)
    c4, c4_se = _merge(c4_parts)
    c2 = 0.5 * (c2 + np.conj(np.swapaxes(c2, -2, -1)))
    return GeneralSEModel(
        b_vec=b_vec,
        c2=c2,
        c3=c3,
        c4=c4,
        data_powers=p,
        combiner=combiner,
        estimator=estimator,
        n_realizations=n_batches * batch_size,
        b_vec_se=np.abs(b_raw_se) if b_raw_se is not None else None,
        c2_se=np.abs(c2_se) if c2_se is not None else None,
        c3_se=c3_se,
        c4_se=c4_se,
    )


def general_sinr(model: GeneralSEModel, data_powers: np.ndarray, lsfd: np.ndarray) -> np.ndarray:
    """SINR for arbitrary weights under the Monte-Carlo moment model."""
    p = np.asarray(data_powers, dtype=float)
    L, K = model.b_vec.shape[:2]
    sinr = np.empty((L, K))
    for l in range(L):
        for k in range(K):
            a = lsfd[l, k]
            num = p[l, k] * np.abs(a.conj() @ model.b_vec[l, k]) ** 2
            den = (a.conj() @ model.denominator_matrix(l, k) @ a).real
            sinr[l, k] = num / den
    return sinr


def general_optimal_lsfd(
    model: GeneralSEModel, data_powers: np.ndarray, tau_p: int, tau_c: int
) -> tuple[np.ndarray, SEReport]:
    """Optimal weights and resulting SE under the Monte-Carlo moment model."""
    p = np.asarray(data_powers, dtype=float)
    L, K = model.b_vec.shape[:2]
    a = np.empty((L, K, L), dtype=complex)
    sinr = np.empty((L, K))
    for l in range(L):
        for k in range(K):
            c_mat = model.denominator_matrix(l, k)
            a[l, k] = np.linalg.solve(c_mat, model.b_vec[l, k])
            sinr[l, k] = p[l, k] * (model.b_vec[l, k].conj() @ a[l, k]).real
    return a, se_report(sinr, tau_p, tau_c)
