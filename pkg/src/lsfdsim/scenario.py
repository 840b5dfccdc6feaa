"""Network geometry, large-scale fading, and spatial correlation statistics.

The simulated network is a rectangular grid of square cells wrapped around
into a torus, so every cell sees statistically identical surroundings.  All
quantities indexed per (cell l, user k, BS l') follow the axis convention
``array[l, k, lp]`` where ``lp`` is the observing base station.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigurationError",
    "NetworkConfig",
    "UserDrop",
    "ScenarioStatistics",
    "build_drop",
    "large_scale_fading",
    "correlation_matrix",
    "scenario_statistics",
    "wrap_displacement",
]

# path-loss constants (3GPP-like urban macro, distance in km)
_PL_INTERCEPT_DB = -148.1
_PL_EXPONENT_DB = 37.6

_MAX_PLACEMENT_ATTEMPTS = 10_000


class ConfigurationError(ValueError):
    """Raised when a network configuration cannot be realized."""


@dataclass(frozen=True)
class NetworkConfig:
    """Static parameters of the multi-cell uplink.

    Powers are per transmitted symbol in watt.  ``tau_p`` defaults to
    ``users_per_cell`` (one orthogonal pilot per in-cell user, reused across
    cells).
    """

    cells: int = 4
    users_per_cell: int = 5
    antennas: int = 200
    tau_c: int = 200
    tau_p: int | None = None
    bandwidth_hz: float = 20e6
    noise_power_dbm: float = -96.0
    noise_figure_db: float = 5.0
    pilot_power_w: float = 0.2
    max_data_power_w: float = 0.2
    corr_magnitude: float = 0.5
    cell_edge_m: float = 250.0
    min_distance_m: float = 35.0
    shadow_std_db: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.tau_p is None:
            object.__setattr__(self, "tau_p", self.users_per_cell)
        if self.cells < 1 or self.users_per_cell < 1 or self.antennas < 1:
            raise ConfigurationError("cells, users_per_cell and antennas must be >= 1")
        if not 0 < self.tau_p <= self.tau_c:
            raise ConfigurationError("need 0 < tau_p <= tau_c")
        if self.tau_p != self.users_per_cell:
            raise ConfigurationError("tau_p must equal users_per_cell (one pilot per user)")
        if not 0.0 <= self.corr_magnitude < 1.0:
            raise ConfigurationError("corr_magnitude must lie in [0, 1)")
        if min(self.pilot_power_w, self.max_data_power_w, self.bandwidth_hz) <= 0:
            raise ConfigurationError("powers and bandwidth must be positive")
        if self.min_distance_m <= 0 or self.cell_edge_m <= 0:
            raise ConfigurationError("distances must be positive")
        if self.shadow_std_db < 0:
            raise ConfigurationError("shadow_std_db must be nonnegative")

    @property
    def noise_power_w(self) -> float:
        """Receiver noise power (noise floor plus noise figure) in watt."""
        return 10 ** ((self.noise_power_dbm + self.noise_figure_db) / 10.0) * 1e-3

    @property
    def prelog(self) -> float:
        return 1.0 - self.tau_p / self.tau_c


@dataclass(frozen=True)
class UserDrop:
    """One random placement of users on the wrapped-around network."""

    bs_positions: np.ndarray      # (L, 2) meters
    user_positions: np.ndarray    # (L, K, 2) meters
    distances: np.ndarray         # (L, K, L) torus distance user (l,k) -> BS l'
    angles: np.ndarray            # (L, K, L) bearing of the wrap-minimal image, radians
    shadow_db: np.ndarray         # (L, K, L) shadow fading in dB


@dataclass(frozen=True)
class ScenarioStatistics:
    """All large-scale quantities needed by estimators and SE expressions."""

    beta: np.ndarray              # (L, K, L) linear channel gain
    corr: np.ndarray              # (L, K, L, M, M) Hermitian PSD correlation matrices
    sigma2: float                 # noise power, watt
    tau_p: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.beta.shape[0], self.beta.shape[1]

    @property
    def antennas(self) -> int:
        return self.corr.shape[-1]


def _grid_dims(cells: int) -> tuple[int, int]:
    """Rows x cols of the most-square rectangular tiling with `cells` cells."""
    rows = int(math.isqrt(cells))
    while cells % rows:
        rows -= 1
    return rows, cells // rows


def wrap_displacement(points: np.ndarray, refs: np.ndarray, period: tuple[float, float]):
    """Shortest displacement from `refs` to `points` on a torus.

    Parameters
    ----------
    points, refs : (..., 2) arrays, broadcastable against each other.
    period : (width, height) of the torus.

    Returns
    -------
    disp : (..., 2) displacement of the wrap-minimal image of `points`
        relative to `refs`.
    dist : (...) Euclidean length of that displacement.
    """
    width, height = period
    delta = np.asarray(points, dtype=float) - np.asarray(refs, dtype=float)
    shifts = np.array(
        [[sx, sy] for sx in (-width, 0.0, width) for sy in (-height, 0.0, height)]
    )
    candidates = delta[..., None, :] + shifts          # (..., 9, 2)
    d2 = np.sum(candidates**2, axis=-1)                # (..., 9)
    best = np.argmin(d2, axis=-1)
    disp = np.take_along_axis(candidates, best[..., None, None], axis=-2)[..., 0, :]
    dist = np.sqrt(np.take_along_axis(d2, best[..., None], axis=-1)[..., 0])
    return disp, dist


def build_drop(config: NetworkConfig, rng: np.random.Generator) -> UserDrop:
    """Place users uniformly in their own cell, at least `min_distance_m` from
    the serving BS, and compute all torus distances, bearings and shadow terms.
    """
    L, K = config.cells, config.users_per_cell
    edge = config.cell_edge_m
    rows, cols = _grid_dims(L)
    period = (cols * edge, rows * edge)

    cell_cols = np.arange(L) % cols
    cell_rows = np.arange(L) // cols
    bs_positions = np.stack([(cell_cols + 0.5) * edge, (cell_rows + 0.5) * edge], axis=-1)

    user_positions = np.empty((L, K, 2))
    for l in range(L):
        origin = np.array([cell_cols[l] * edge, cell_rows[l] * edge])
        for k in range(K):
            for attempt in range(_MAX_PLACEMENT_ATTEMPTS):
                pos = origin + rng.uniform(0.0, edge, size=2)
                if np.linalg.norm(pos - bs_positions[l]) >= config.min_distance_m:
                    break
            else:
                raise ConfigurationError(
                    f"could not place user {k} in cell {l}: min_distance_m="
                    f"{config.min_distance_m} too large for cell edge {edge}"
                )
            user_positions[l, k] = pos

    disp, dist = wrap_displacement(
        user_positions[:, :, None, :], bs_positions[None, None, :, :], period
    )
    angles = np.arctan2(disp[..., 1], disp[..., 0])
    shadow_db = rng.normal(0.0, config.shadow_std_db, size=(L, K, L))
    return UserDrop(bs_positions, user_positions, dist, angles, shadow_db)


def large_scale_fading(distance_m, shadow_db=0.0):
    """Linear-scale channel gain from distance (m) and shadow fading (dB)."""
    distance_m = np.asarray(distance_m, dtype=float)
    if np.any(distance_m <= 0):
        raise ValueError("distance must be positive")
    gain_db = _PL_INTERCEPT_DB - _PL_EXPONENT_DB * np.log10(distance_m / 1000.0)
    return 10 ** ((gain_db + shadow_db) / 10.0)


def correlation_matrix(beta, theta, corr_magnitude: float, antennas: int) -> np.ndarray:
    """Exponential-correlation covariance of a uniform linear array.

    Entry (m, n) equals ``beta * r^(m-n)`` below the diagonal with
    ``r = corr_magnitude * exp(1j * theta)`` and the conjugate above, giving a
    Hermitian Toeplitz matrix with constant diagonal ``beta``.  `beta` and
    `theta` may be arrays of matching shape; matrices are appended as the two
    trailing axes.
    """
    if not 0.0 <= corr_magnitude < 1.0:
        raise ValueError("corr_magnitude must lie in [0, 1)")
    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    lag = np.arange(antennas)[:, None] - np.arange(antennas)[None, :]
    magnitude = float(corr_magnitude) ** np.abs(lag)
    phase = np.exp(1j * theta[..., None, None] * lag)
    return beta[..., None, None] * magnitude * phase


def scenario_statistics(config: NetworkConfig, drop: UserDrop) -> ScenarioStatistics:
    """Assemble path gains and correlation matrices for every (l, k, l') triple."""
    beta = large_scale_fading(drop.distances, drop.shadow_db)
    corr = correlation_matrix(beta, drop.angles, config.corr_magnitude, config.antennas)
    return ScenarioStatistics(
        beta=beta, corr=corr, sigma2=config.noise_power_w, tau_p=config.tau_p
    )
