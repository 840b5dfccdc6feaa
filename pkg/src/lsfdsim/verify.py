"""Monte-Carlo oracles for the closed-form spectral-efficiency expressions.

Every closed-form quantity in the library has an independent estimator here
that goes back to first principles: sample channels, run the pilot phase,
build the first-layer combiners, and average.  The effective SINR is
assembled term by term,

    sinr = ds / (pc + bu + ni + an),

from the desired signal, pilot contamination, beamforming-gain uncertainty,
non-coherent interference, and additive noise.  Data symbols and the
data-phase noise are integrated out analytically (unit symbol power), which
removes variance without biasing any term.  Terms of the form |E{x}|^2 are
estimated by multiplying the means of two independent half-batches, avoiding
the positive bias of squaring a noisy mean.

Batches use deterministic sub-streams spawned from the caller's generator and
are merged in order, so results are reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import channel as chan
from . import se as semod
from .scenario import ScenarioStatistics

__all__ = [
    "McSinrEstimate",
    "mc_sinr",
    "gaussian_quartic_check",
    "toy_example_check",
    "mmse_orthogonality_check",
]


@dataclass(frozen=True)
class McSinrEstimate:
    """Per-user term estimates and the assembled SINR, with standard errors
    taken from the spread of per-batch estimates."""

    ds: np.ndarray
    pc: np.ndarray
    bu: np.ndarray
    ni: np.ndarray
    an: np.ndarray
    sinr: np.ndarray
    term_se: dict
    sinr_se: np.ndarray
    n_realizations: int


def _own(x: np.ndarray) -> np.ndarray:
    L = x.shape[0]
    return x[np.arange(L), :, np.arange(L)]


class _TermAccumulator:
    """Collects per-batch estimates of the five SINR terms for one (lsfd,
    powers) combination and assembles means and standard errors."""

    def __init__(self, lsfd: np.ndarray, data_powers: np.ndarray, sigma2: float):
        self.lsfd = lsfd
        self.p = np.asarray(data_powers, dtype=float)
        self.sigma2 = sigma2
        K = lsfd.shape[1]
        self._other_pilot = 1.0 - np.eye(K)
        self.parts = {name: [] for name in ("ds", "pc", "bu", "ni", "an", "sinr")}

    def update(self, t: np.ndarray, q: np.ndarray) -> None:
        K = self.lsfd.shape[1]
        p = self.p
        nb = t.shape[-1]
        half = nb // 2
        # combine across BS components with the per-user weights
        ta = np.einsum("lkp,pkjib->lkjib", self.lsfd.conj(), t)
        tap = ta[:, np.arange(K), :, np.arange(K)]          # (k, l, j, b)
        m1 = tap[..., :half].mean(axis=-1)
        m2 = tap[..., half:].mean(axis=-1)
        cross = (m1 * np.conj(m2)).real.transpose(1, 0, 2)   # (l, k, j)
        own_cross = _own(cross)
        ds = p * own_cross
        pc = np.einsum("jk,lkj->lk", p, cross) - p * own_cross

        mean_full = tap.mean(axis=-1)
        second = (np.abs(tap) ** 2).mean(axis=-1)
        variance = (second - np.abs(mean_full) ** 2) * (nb / (nb - 1))
        bu = np.einsum("jk,lkj->lk", p, variance.transpose(1, 0, 2))

        ni = np.einsum("lkjib,ji,ki->lk", np.abs(ta) ** 2, p, self._other_pilot) / nb
        an = self.sigma2 * np.einsum(
            "lkp,pk->lk", np.abs(self.lsfd) ** 2, q.mean(axis=-1)
        )
        self.parts["ds"].append(ds)
        self.parts["pc"].append(pc)
        self.parts["bu"].append(bu)
        self.parts["ni"].append(ni)
        self.parts["an"].append(an)
        self.parts["sinr"].append(ds / (pc + bu + ni + an))

    def result(self, n_realizations: int) -> McSinrEstimate:
        stacked = {name: np.stack(vals) for name, vals in self.parts.items()}
        means = {name: arr.mean(axis=0) for name, arr in stacked.items()}
        ses = {
            name: arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
            for name, arr in stacked.items()
        }
        ds = np.maximum(means["ds"], 0.0)
        pc = np.maximum(means["pc"], 0.0)
        return McSinrEstimate(
            ds=ds,
            pc=pc,
            bu=means["bu"],
            ni=means["ni"],
            an=means["an"],
            sinr=ds / (pc + means["bu"] + means["ni"] + means["an"]),
            term_se={k: ses[k] for k in ("ds", "pc", "bu", "ni", "an")},
            sinr_se=ses["sinr"],
            n_realizations=n_realizations,
        )


def mc_sinr(
    stats: ScenarioStatistics,
    pilot_powers: np.ndarray,
    data_powers: np.ndarray,
    lsfd: np.ndarray,
    estimator: str = "mmse",
    combiner: str = "mrc",
    n: int = 200_000,
    rng: np.random.Generator | None = None,
    batch_size: int = 10_000,
) -> McSinrEstimate:
    """Estimate each SINR term of the two-layer detector empirically.

    `lsfd` holds one combining vector per user, shape (L, K, L).  At least
    1000 realizations are required; the actual count is rounded up to a whole
    number of equal batches.
    """
    results = mc_sinr_many(
        stats,
        pilot_powers,
        data_powers,
        {estimator: (estimator, lsfd)},
        combiner=combiner,
        n=n,
        rng=rng,
        batch_size=batch_size,
    )
    return results[estimator]


def mc_sinr_many(
    stats: ScenarioStatistics,
    pilot_powers: np.ndarray,
    data_powers: np.ndarray,
    cases: dict,
    combiner: str = "mrc",
    n: int = 200_000,
    rng: np.random.Generator | None = None,
    batch_size: int = 10_000,
) -> dict:
    """Run several (estimator, lsfd) cases against shared channel and pilot
    realizations; sampling dominates the cost, so evaluating both estimators
    together is nearly twice as fast as two separate runs.

    `cases` maps a result key to ``(estimator, lsfd)``.  Returns a dict of
    :class:`McSinrEstimate` under the same keys.
    """
    if n < 1000:
        raise ValueError("need at least 1000 realizations for mc_sinr")
    if rng is None:
        raise ValueError("an explicitly seeded rng is required")
    p = np.asarray(data_powers, dtype=float)
    model = chan.estimation_model(stats, pilot_powers)
    n_batches, batch_size = semod._batch_plan(n, batch_size)
    estimators = tuple(dict.fromkeys(est for est, _ in cases.values()))
    accs = {
        key: _TermAccumulator(lsfd, p, stats.sigma2) for key, (_, lsfd) in cases.items()
    }
    for products in semod.first_layer_products(
        stats, model, estimators, combiner, p, n_batches, batch_size, rng
    ):
        for key, (est, _) in cases.items():
            accs[key].update(*products[est])
    total = n_batches * batch_size
    return {key: acc.result(total) for key, acc in accs.items()}


def gaussian_quartic_check(
    lam: np.ndarray,
    mmat: np.ndarray,
    n: int,
    rng: np.random.Generator,
    batch_size: int = 100_000,
) -> tuple[float, float]:
    """Fourth-moment identity of circular complex Gaussians.

    For u ~ CN(0, lam) and any fixed matrix mmat,
    ``E{|u^H mmat u|^2} = |tr(lam mmat)|^2 + tr(lam mmat lam mmat^H)``.
    Returns (monte_carlo_estimate, exact_value).
    """
    lam = np.asarray(lam, dtype=complex)
    mmat = np.asarray(mmat, dtype=complex)
    if lam.shape != mmat.shape or lam.shape[0] != lam.shape[1]:
        raise ValueError("lam and mmat must be square with matching shapes")
    eigval, eigvec = np.linalg.eigh(lam)
    root = eigvec * np.sqrt(np.clip(eigval, 0.0, None))
    lm = lam @ mmat
    exact = float(
        np.abs(np.trace(lm)) ** 2
        + np.trace(lm @ lam @ np.conj(mmat.T)).real
    )
    total = 0.0
    remaining = int(n)
    while remaining > 0:
        nb = min(batch_size, remaining)
        g = chan._complex_normal(rng, (lam.shape[0], nb))
        u = root @ g
        x = np.einsum("mn,mn->n", u.conj(), mmat @ u)
        total += float(np.sum(np.abs(x) ** 2))
        remaining -= nb
    return total / int(n), exact


def toy_example_check(bmat: np.ndarray, rng: np.random.Generator) -> float:
    """Two-cell sanity check: inverting the asymptotic gain matrix recovers
    the transmitted pair exactly.  Returns the recovery residual for a random
    unit-norm symbol vector."""
    bmat = np.asarray(bmat, dtype=complex)
    s = chan._complex_normal(rng, bmat.shape[0])
    s /= np.linalg.norm(s)
    detected = np.linalg.solve(bmat, bmat @ s)
    return float(np.linalg.norm(detected - s))


def mmse_orthogonality_check(
    stats: ScenarioStatistics,
    pilot_powers: np.ndarray,
    estimator: str,
    n: int,
    rng: np.random.Generator,
    batch_size: int = 20_000,
) -> np.ndarray:
    """Empirical cross-covariance between estimate and estimation error.

    Returns ``||mean(h_hat e^H)||_F / ||R||_F`` per own-cell user.  For the
    full MMSE estimator this converges to zero; the element-wise estimator
    leaves a genuinely nonzero correlation on spatially correlated channels.
    """
    model = chan.estimation_model(stats, pilot_powers)
    L, K = stats.shape
    factors = chan.channel_factors(stats)
    m = stats.antennas
    acc = np.zeros((L, K, m, m), dtype=complex)
    n_batches = max(1, math.ceil(n / batch_size))
    for child in rng.spawn(n_batches):
        h = chan.sample_channels(stats, child, batch_size, factors)
        y = chan.pilot_observation(h, model.pilot_powers, stats.sigma2, stats.tau_p, child)
        h_hat = (
            chan.mmse_estimate(y, model)
            if estimator == "mmse"
            else chan.ewmmse_estimate(y, model)
        )
        own = h[np.arange(L), :, np.arange(L)]
        err = own - h_hat
        acc += np.einsum("lkmb,lknb->lkmn", h_hat, err.conj())
    acc /= n_batches * batch_size
    own_corr = model.own_corr
    num = np.linalg.norm(acc, axis=(-2, -1))
    den = np.linalg.norm(own_corr, axis=(-2, -1))
    return num / den
