"""Small-scale fading realizations, pilot phase, and channel estimators.

Channel vectors follow the correlated Rayleigh model
``h[l, k, lp] ~ CN(0, R[l, k, lp])``.  Pilots are orthogonal and reused with
the same index across cells, so correlating the received pilot block with
pilot k is simulated directly as

    y_tilde[lp, k] = tau_p * sum_l sqrt(p_hat[l, k]) * h[l, k, lp] + noise,

with noise ~ CN(0, tau_p * sigma2 * I); the pilot matrix itself is never
materialized.

Two estimators of the own-cell channels are provided:

* full MMSE, ``h_hat = sqrt(p_hat) R Psi^{-1} y_tilde``;
* element-wise MMSE (EW-MMSE), ``h_hat = varrho * y_tilde`` with a scalar
  gain built from the correlation-matrix diagonals only.  It requires equal
  diagonal elements, which the exponential correlation model guarantees.

Batched realizations carry the batch as the trailing axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .scenario import ScenarioStatistics

__all__ = [
    "EstimationModel",
    "channel_factors",
    "sample_channels",
    "pilot_observation",
    "compute_psi",
    "estimation_model",
    "mmse_estimate",
    "ewmmse_estimate",
]


def channel_factors(stats: ScenarioStatistics) -> np.ndarray:
    """Cholesky factors A with A A^H = R for every (l, k, l') triple.

    On factorization failure a single diagonal jitter of
    ``1e-12 * trace(R)/M`` is added before retrying; a second failure is a
    genuine numeric error and propagates.
    """
    corr = stats.corr
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        m = corr.shape[-1]
        jitter = 1e-12 * np.trace(corr, axis1=-2, axis2=-1).real / m
        bumped = corr + jitter[..., None, None] * np.eye(m)
        return np.linalg.cholesky(bumped)


def _complex_normal_raw(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex normals with variance 2 (unit-variance re/im parts),
    generated interleaved in one pass; callers fold in the 1/sqrt(2)."""
    raw = rng.standard_normal((*tuple(shape), 2))
    return raw.view(np.complex128)[..., 0]


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return _complex_normal_raw(rng, shape) * np.sqrt(0.5)


def sample_channels(
    stats: ScenarioStatistics,
    rng: np.random.Generator,
    n: int | None = None,
    factors: np.ndarray | None = None,
) -> np.ndarray:
    """Draw channel realizations for all (l, k, l') triples.

    Returns shape (L, K, L, M) for ``n=None`` and (L, K, L, M, n) otherwise.
    Pass precomputed `factors` when sampling repeatedly for the same scenario.
    """
    if factors is None:
        factors = channel_factors(stats)
    squeeze = n is None
    n_draw = 1 if squeeze else int(n)
    if n_draw < 1:
        raise ValueError("n must be >= 1")
    g = _complex_normal_raw(rng, (*factors.shape[:-1], n_draw))
    h = (np.sqrt(0.5) * factors) @ g
    return h[..., 0] if squeeze else h


def pilot_observation(
    channels: np.ndarray,
    pilot_powers: np.ndarray,
    sigma2: float,
    tau_p: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pilot-correlated observation y_tilde at every BS for every pilot index.

    `channels` has shape (L, K, L, M[, n]); the result contracts the
    source-cell axis: (L, K, M[, n]) indexed by (observing BS, pilot index).
    """
    root_power = np.sqrt(np.asarray(pilot_powers, dtype=float))
    sub = "lkpmn->pkmn" if channels.ndim == 5 else "lkpm->pkm"
    signal = tau_p * np.einsum("lk," + sub, root_power, channels)
    signal += np.sqrt(0.5 * tau_p * sigma2) * _complex_normal_raw(rng, signal.shape)
    return signal


def compute_psi(stats: ScenarioStatistics, pilot_powers: np.ndarray) -> np.ndarray:
    """Covariance Psi[l, k] of y_tilde[l, k] / sqrt(tau_p): one M x M Hermitian
    PD matrix per (BS, pilot)."""
    p_hat = np.asarray(pilot_powers, dtype=float)
    psi = stats.tau_p * np.einsum("lk,lkpij->pkij", p_hat, stats.corr)
    psi += stats.sigma2 * np.eye(stats.antennas)
    return psi


@dataclass(frozen=True)
class EstimationModel:
    """Precomputed estimator quantities for one scenario and pilot allocation.

    Attributes
    ----------
    psi : (L, K, M, M) observation covariances, indexed (BS, pilot).
    varrho : (L, K, L) EW-MMSE gains; ``varrho[l, k, lp]`` applies to the
        estimate of user (l, k)'s channel formed at BS lp from y_tilde[lp, k].
    mmse_filter : (L, K, M, M) matrices W with ``h_hat = W @ y_tilde`` giving
        the own-cell MMSE estimate at BS l.
    own_corr : (L, K, M, M) correlation matrices of the own-cell channels.
    """

    pilot_powers: np.ndarray
    tau_p: int
    sigma2: float
    psi: np.ndarray
    varrho: np.ndarray
    mmse_filter: np.ndarray
    own_corr: np.ndarray

    @property
    def own_varrho(self) -> np.ndarray:
        """(L, K) gains varrho[l, k, l] of the serving-BS EW-MMSE estimates."""
        L = self.varrho.shape[0]
        return self.varrho[np.arange(L), :, np.arange(L)]

    def estimate_cov(self, estimator: str) -> np.ndarray:
        """Exact covariance of the own-cell channel estimate, per (l, k)."""
        if estimator == "mmse":
            # tau_p p_hat R Psi^{-1} R = tau_p sqrt(p_hat) W R
            cov = self.tau_p * np.sqrt(self.pilot_powers)[..., None, None] * (
                self.mmse_filter @ self.own_corr
            )
            return 0.5 * (cov + np.conj(np.swapaxes(cov, -2, -1)))
        if estimator == "ewmmse":
            return self.own_varrho[..., None, None] ** 2 * self.tau_p * self.psi
        raise ValueError(f"unknown estimator {estimator!r}")

    def error_cov(self, estimator: str) -> np.ndarray:
        """Exact covariance of the estimation error; complements estimate_cov
        so the two always sum to the channel correlation matrix."""
        return self.own_corr - self.estimate_cov(estimator)


def estimation_model(
    stats: ScenarioStatistics, pilot_powers: np.ndarray
) -> EstimationModel:
    """Build Psi, the MMSE filters, and the EW-MMSE gains for one scenario."""
    p_hat = np.asarray(pilot_powers, dtype=float)
    L, K = stats.shape
    psi = compute_psi(stats, p_hat)

    # denom[lp, k] = tau_p * sum_l p_hat[l,k] beta[l,k,lp] + sigma2
    denom = stats.tau_p * np.einsum("lk,lkp->pk", p_hat, stats.beta) + stats.sigma2
    varrho = np.sqrt(p_hat)[:, :, None] * stats.beta / denom.T[None, :, :]

    own_corr = stats.corr[np.arange(L), :, np.arange(L)]  # (L, K, M, M)
    mmse_filter = np.empty_like(own_corr)
    for l in range(L):
        for k in range(K):
            factor = cho_factor(psi[l, k], lower=True)
            # W = sqrt(p_hat) R Psi^{-1} = sqrt(p_hat) (Psi^{-1} R)^H
            x = cho_solve(factor, own_corr[l, k])
            mmse_filter[l, k] = np.sqrt(p_hat[l, k]) * np.conj(x.T)

    return EstimationModel(
        pilot_powers=p_hat,
        tau_p=stats.tau_p,
        sigma2=stats.sigma2,
        psi=psi,
        varrho=varrho,
        mmse_filter=mmse_filter,
        own_corr=own_corr,
    )


def mmse_estimate(y_tilde: np.ndarray, model: EstimationModel) -> np.ndarray:
    """MMSE estimates of all own-cell channels; shape follows `y_tilde`."""
    if y_tilde.ndim == 4:
        return model.mmse_filter @ y_tilde
    return (model.mmse_filter @ y_tilde[..., None])[..., 0]


def ewmmse_estimate(y_tilde: np.ndarray, model: EstimationModel) -> np.ndarray:
    """EW-MMSE estimates of all own-cell channels (scalar gain per user)."""
    gain = model.own_varrho
    extra = y_tilde.ndim - gain.ndim
    return gain.reshape(gain.shape + (1,) * extra) * y_tilde
