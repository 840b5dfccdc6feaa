"""Experiment driver and command-line interface.

Subcommands
-----------
``run <spec.json>``
    Execute one experiment specification and write CSV/JSON result tables.
``preset <name> [--scale desk|paper]``
    Run a packaged benchmark preset (fig3 .. fig10, see README).
``verify <quick|full>``
    Run the self-verification battery; exits 3 on any failure.
``flops --L --K --N``
    Print the exact arithmetic-operation count of the optimizer.

Benchmark modes
---------------
(i)    single-layer decoding, fixed data power;
(ii)   single-layer decoding, optimized data powers;
(iii)  two-layer decoding, fixed power, SE-optimal weights;
(iv)   like (iii) but weights computed from diagonal statistics only;
(v)    two-layer decoding, jointly optimized powers and weights;
(vi)   like (v) but run on diagonal statistics, best iterate kept.

The closed-form pipeline requires MRC; regularized zero-forcing runs through
the Monte-Carlo moment path and supports the fixed-power modes (i)/(iii).

Result rows are deterministic for a fixed (spec, seed): every drop derives
its own random sub-streams, so outputs are byte-identical regardless of the
worker count.  Wall-clock timings are recorded only when `record_timings` is
set, since real timings would break byte-level reproducibility.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import channel as chan
from . import optimizer as opt
from . import se as semod
from . import verify as ver
from .scenario import (
    ConfigurationError,
    NetworkConfig,
    build_drop,
    scenario_statistics,
)

__all__ = [
    "ExperimentSpec",
    "ResultRow",
    "TraceRow",
    "run_experiment",
    "export",
    "verify_suite",
    "PRESETS",
    "main",
]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_VERIFY = 3

OUTPUT_DIR_ENV = "LSFDSIM_OUTPUT_DIR"

MODES = ("i", "ii", "iii", "iv", "v", "vi")
CSV_HEADER = "sweep_value,mode,estimator,combiner,drop,cell,sum_se,iterations,wall_time_s"

# RNG sub-stream tags
_TAG_GEOMETRY = 1
_TAG_RHO0 = 2
_TAG_MC = 3


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: a network, an estimator/combiner choice, benchmark
    modes, an optional parameter sweep, and drop counts."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    estimator: str = "mmse"
    combiner: str = "mrc"
    modes: tuple[str, ...] = ("i", "ii", "iii", "v")
    sweep_parameter: str | None = None
    sweep_values: tuple = ()
    n_drops: int = 1
    n_small_scale: int = 1000
    epsilon: float = 1e-3
    max_iter: int = 500
    record_trace: bool = False
    record_timings: bool = False
    workers: int = 1
    output_path: str | None = None

    def __post_init__(self):
        if self.estimator not in ("mmse", "ewmmse"):
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.combiner not in ("mrc", "rzf"):
            raise ConfigurationError(f"unknown combiner {self.combiner!r}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigurationError(f"invalid benchmark modes {bad or self.modes}")
        if self.combiner == "rzf" and any(m not in ("i", "iii") for m in self.modes):
            raise ConfigurationError(
                "the RZF Monte-Carlo path supports fixed-power modes (i)/(iii) only"
            )
        if self.n_drops < 1:
            raise ConfigurationError("n_drops must be >= 1")
        if self.combiner == "rzf" and self.n_small_scale < 100:
            raise ConfigurationError("n_small_scale must be >= 100 for the MC path")
        if self.sweep_parameter is not None:
            if not hasattr(self.network, self.sweep_parameter):
                raise ConfigurationError(
                    f"unknown sweep parameter {self.sweep_parameter!r}"
                )
            if len(self.sweep_values) == 0:
                raise ConfigurationError("sweep_values must not be empty")


_SPEC_KEYS = {f.name for f in dataclasses.fields(ExperimentSpec)}
_NETWORK_KEYS = {f.name for f in dataclasses.fields(NetworkConfig)}


def spec_from_dict(doc: dict) -> ExperimentSpec:
    """Build an ExperimentSpec from a parsed JSON document, rejecting unknown
    keys at both levels (fail fast against typos)."""
    if not isinstance(doc, dict):
        raise ConfigurationError("experiment spec must be a JSON object")
    doc = dict(doc)
    sweep = doc.pop("sweep", None)
    unknown = set(doc) - (_SPEC_KEYS - {"sweep_parameter", "sweep_values"}) - {"network", "mode", "modes"}
    if unknown:
        raise ConfigurationError(f"unknown spec keys: {sorted(unknown)}")
    network_doc = doc.pop("network", {})
    if not isinstance(network_doc, dict):
        raise ConfigurationError("'network' must be an object")
    unknown_net = set(network_doc) - _NETWORK_KEYS
    if unknown_net:
        raise ConfigurationError(f"unknown network keys: {sorted(unknown_net)}")
    network = NetworkConfig(**network_doc)

    modes = doc.pop("modes", None)
    if modes is None and "mode" in doc:
        modes = doc.pop("mode")
    if modes is None:
        modes = ("i", "ii", "iii", "v")
    if isinstance(modes, str):
        modes = (modes,)
    kwargs = dict(doc, network=network, modes=tuple(modes))
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) - {"parameter", "values"}:
            raise ConfigurationError("'sweep' must be {parameter, values}")
        kwargs["sweep_parameter"] = sweep["parameter"]
        kwargs["sweep_values"] = tuple(sweep["values"])
    return ExperimentSpec(**kwargs)


@dataclass(frozen=True)
class ResultRow:
    """Terminal result of one (sweep value, drop, mode) evaluation."""

    sweep_value: object
    mode: str
    estimator: str
    combiner: str
    drop_index: int
    per_cell_sum_se: tuple[float, ...]
    per_user_se: tuple[tuple[float, ...], ...]
    iterations: int
    wall_time_s: float

    @property
    def sum_se_per_cell(self) -> float:
        """Mean over cells of the per-cell SE sums."""
        return float(np.mean(self.per_cell_sum_se))


@dataclass(frozen=True)
class TraceRow:
    """One optimizer iteration of a convergence run (network sum SE)."""

    estimator: str
    mode: str
    drop_index: int
    iteration: int
    sum_se: float


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _evaluate_drop(
    spec: ExperimentSpec, config: NetworkConfig, sweep_value, drop_index: int
) -> tuple[list[ResultRow], list[TraceRow]]:
    """Run every requested mode for one user drop."""
    drop = build_drop(config, _rng(config.seed, _TAG_GEOMETRY, drop_index))
    stats = scenario_statistics(config, drop)
    L, K = stats.shape
    p_hat = np.full((L, K), config.pilot_power_w)
    p_fixed = np.full((L, K), config.max_data_power_w)
    prelog = config.prelog
    opts = opt.ConvergenceOptions(epsilon=spec.epsilon, max_iter=spec.max_iter)
    rho0 = _rng(config.seed, _TAG_RHO0, drop_index).uniform(
        0.0, np.sqrt(config.max_data_power_w), size=(L, K)
    )

    rows: list[ResultRow] = []
    traces: list[TraceRow] = []

    def finish(mode, se, iterations, t0, trace_values=None):
        wall = time.perf_counter() - t0 if spec.record_timings else 0.0
        rows.append(
            ResultRow(
                sweep_value=sweep_value,
                mode=mode,
                estimator=spec.estimator,
                combiner=spec.combiner,
                drop_index=drop_index,
                per_cell_sum_se=tuple(float(x) for x in se.sum(axis=-1)),
                per_user_se=tuple(tuple(float(x) for x in row) for row in se),
                iterations=iterations,
                wall_time_s=wall,
            )
        )
        if spec.record_trace and trace_values is not None:
            traces.extend(
                TraceRow(spec.estimator, mode, drop_index, i, float(v))
                for i, v in enumerate(trace_values)
            )

    if spec.combiner == "mrc":
        coeffs = semod.coefficients(stats, p_hat, spec.estimator)
        diag = (
            semod.coefficients(stats, p_hat, spec.estimator, corr_mode="diagonal")
            if any(m in spec.modes for m in ("iv", "vi"))
            else None
        )
        indicators = semod.single_layer_lsfd(L, K)
        for mode in spec.modes:
            t0 = time.perf_counter()
            if mode == "i":
                sinr = semod.sinr_closed_form(coeffs, p_fixed, indicators)
                finish(mode, prelog * np.log2(1 + sinr), 0, t0)
            elif mode == "ii":
                _, trace = opt.run_single_layer(
                    coeffs, config.max_data_power_w, opts, prelog, rho0=rho0
                )
                finish(mode, trace.per_user_se, trace.iterations, t0, trace.sum_se)
            elif mode == "iii":
                a = semod.optimal_lsfd(coeffs, p_fixed, check_condition=False)
                sinr = semod.sinr_closed_form(coeffs, p_fixed, a)
                finish(mode, prelog * np.log2(1 + sinr), 0, t0)
            elif mode == "iv":
                a = semod.optimal_lsfd(diag, p_fixed, check_condition=False)
                sinr = semod.sinr_closed_form(coeffs, p_fixed, a)
                finish(mode, prelog * np.log2(1 + sinr), 0, t0)
            elif mode == "v":
                _, _, trace = opt.run_two_layer(
                    coeffs, config.max_data_power_w, opts, prelog, rho0=rho0
                )
                finish(mode, trace.per_user_se, trace.iterations, t0, trace.sum_se)
            elif mode == "vi":
                _, _, trace = opt.run_two_layer(
                    coeffs,
                    config.max_data_power_w,
                    opts,
                    prelog,
                    rho0=rho0,
                    model_coeffs=diag,
                )
                finish(mode, trace.per_user_se, trace.iterations, t0, trace.sum_se)
    else:
        model = semod.general_expectations_mc(
            stats,
            p_hat,
            p_fixed,
            spec.combiner,
            spec.estimator,
            spec.n_small_scale,
            _rng(config.seed, _TAG_MC, drop_index),
        )
        indicators = semod.single_layer_lsfd(L, K)
        for mode in spec.modes:
            t0 = time.perf_counter()
            if mode == "i":
                sinr = semod.general_sinr(model, p_fixed, indicators)
                finish(mode, prelog * np.log2(1 + sinr), 0, t0)
            else:
                _, report = semod.general_optimal_lsfd(
                    model, p_fixed, config.tau_p, config.tau_c
                )
                finish(mode, report.se, 0, t0)
    return rows, traces


def _drop_task(args):
    spec, config, sweep_value, drop_index = args
    return _evaluate_drop(spec, config, sweep_value, drop_index)


def run_experiment(spec: ExperimentSpec) -> tuple[list[ResultRow], list[TraceRow]]:
    """Run all sweep values and drops of one spec; rows come back ordered by
    (sweep value, drop, mode) regardless of the worker count."""
    if spec.sweep_parameter is None:
        points = [(None, spec.network)]
    else:
        points = [
            (value, replace(spec.network, **{spec.sweep_parameter: value}))
            for value in spec.sweep_values
        ]
    tasks = [
        (spec, config, value if value is not None else 0, drop)
        for value, config in points
        for drop in range(spec.n_drops)
    ]
    rows: list[ResultRow] = []
    traces: list[TraceRow] = []
    if spec.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for drop_rows, drop_traces in pool.map(_drop_task, tasks):
                rows.extend(drop_rows)
                traces.extend(drop_traces)
    else:
        for task in tasks:
            drop_rows, drop_traces = _drop_task(task)
            rows.extend(drop_rows)
            traces.extend(drop_traces)
    return rows, traces


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export(
    rows: list[ResultRow],
    base_path: str,
    spec=None,
    traces: list[TraceRow] | None = None,
) -> list[str]:
    """Write `<base>.csv` (one line per cell) and `<base>.json` (full rows
    plus the resolved spec(s)); returns the written paths."""
    written = []
    csv_path = base_path + ".csv"
    lines = [CSV_HEADER]
    for row in rows:
        for cell, sum_se in enumerate(row.per_cell_sum_se):
            lines.append(
                ",".join(
                    [
                        _fmt(row.sweep_value),
                        row.mode,
                        row.estimator,
                        row.combiner,
                        str(row.drop_index),
                        str(cell),
                        repr(float(sum_se)),
                        str(row.iterations),
                        repr(float(row.wall_time_s)),
                    ]
                )
            )
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(csv_path)

    if spec is None:
        spec_doc = None
    elif isinstance(spec, (list, tuple)):
        spec_doc = [dataclasses.asdict(s) for s in spec]
    else:
        spec_doc = dataclasses.asdict(spec)
    payload = {
        "spec": spec_doc,
        "rows": [dataclasses.asdict(row) for row in rows],
    }
    json_path = base_path + ".json"
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(json_path)

    if traces:
        trace_path = base_path + "_trace.csv"
        tlines = ["estimator,mode,drop,iteration,sum_se"]
        tlines += [
            ",".join(
                [t.estimator, t.mode, str(t.drop_index), str(t.iteration), repr(t.sum_se)]
            )
            for t in traces
        ]
        with open(trace_path, "w") as fh:
            fh.write("\n".join(tlines) + "\n")
        written.append(trace_path)
    return written


# ---------------------------------------------------------------------------
# presets reproducing the benchmark figures as data tables
# ---------------------------------------------------------------------------

def _preset_specs(name: str, scale: str) -> list[ExperimentSpec]:
    desk = scale == "desk"
    base = NetworkConfig()

    def net(**kw):
        return replace(base, **kw)

    corr_sweep = ("corr_magnitude", (0.0, 0.2, 0.4, 0.6, 0.8))
    if name == "fig3":
        m = 64 if desk else 200
        return [
            ExperimentSpec(
                network=net(antennas=m, corr_magnitude=0.8, seed=3),
                estimator=est,
                modes=("ii", "v"),
                n_drops=1,
                record_trace=True,
            )
            for est in ("mmse", "ewmmse")
        ]
    if name in ("fig4", "fig5"):
        est = "mmse" if name == "fig4" else "ewmmse"
        return [
            ExperimentSpec(
                network=net(antennas=64 if desk else 200, seed=4),
                estimator=est,
                modes=("i", "ii", "iii", "v"),
                sweep_parameter=corr_sweep[0],
                sweep_values=corr_sweep[1],
                n_drops=25 if desk else 300,
            )
        ]
    if name in ("fig6", "fig7"):
        est = "mmse" if name == "fig6" else "ewmmse"
        values = (32, 64, 96) if desk else (100, 150, 200, 250, 300)
        return [
            ExperimentSpec(
                network=net(seed=6),
                estimator=est,
                modes=("i", "ii", "iii", "v"),
                sweep_parameter="antennas",
                sweep_values=values,
                n_drops=15 if desk else 300,
            )
        ]
    if name in ("fig8", "fig9"):
        est = "mmse" if name == "fig8" else "ewmmse"
        return [
            ExperimentSpec(
                network=net(antennas=64 if desk else 200, seed=8),
                estimator=est,
                modes=("iii", "iv", "v", "vi"),
                sweep_parameter="users_per_cell",
                sweep_values=(2, 4, 6, 8, 10),
                n_drops=10 if desk else 300,
            )
        ]
    if name == "fig10":
        m = 64 if desk else 200
        n_drops = 25 if desk else 3000
        n_small = 600 if desk else 1000
        return [
            ExperimentSpec(
                network=net(antennas=m, seed=10),
                estimator="mmse",
                combiner=combiner,
                modes=("i", "iii"),
                n_drops=n_drops,
                n_small_scale=n_small,
            )
            for combiner in ("mrc", "rzf")
        ]
    raise ConfigurationError(f"unknown preset {name!r}")


PRESETS = ("fig3", "fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10")


# ---------------------------------------------------------------------------
# self-verification battery
# ---------------------------------------------------------------------------

def _check(name: str, ok: bool, detail: str, report: list) -> None:
    print(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}")
    report.append(ok)


def _verify_scenario(seed: int, corr: float, cells=4, users=2, antennas=16):
    config = NetworkConfig(
        cells=cells,
        users_per_cell=users,
        antennas=antennas,
        corr_magnitude=corr,
        seed=seed,
    )
    drop = build_drop(config, _rng(seed, _TAG_GEOMETRY, 0))
    return config, scenario_statistics(config, drop)


def verify_suite(level: str = "quick", seed: int = 0) -> bool:
    """Run the oracle battery; prints one line per check."""
    if level not in ("quick", "full"):
        raise ValueError(f"unknown verification level {level!r}")
    report: list[bool] = []
    rng = _rng(seed, 77)

    # exact decoupling of the two-cell toy system
    worst = 0.0
    for _ in range(3):
        beta = rng.uniform(0.1, 2.0, size=(2, 2))
        worst = max(worst, ver.toy_example_check(beta.astype(complex), rng))
    _check("toy-decoupling", worst <= 1e-12, f"residual {worst:.2e}", report)

    # Gaussian quartic-moment identity
    dims = (2, 8, 16) if level == "full" else (2, 8)
    n = 1_000_000 if level == "full" else 200_000
    tol = 0.01 if level == "full" else 0.03
    worst = 0.0
    for m in dims:
        mc, exact = ver.gaussian_quartic_check(np.eye(m), np.eye(m), 10_000, rng)
        assert abs(exact - (m * m + m)) < 1e-9
        g = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
        lam = g @ g.conj().T / m
        mmat = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m)))
        mc, exact = ver.gaussian_quartic_check(lam, mmat, n, rng)
        worst = max(worst, abs(mc - exact) / exact)
    _check("quartic-moment", worst <= tol, f"max rel err {worst:.4f} (n={n})", report)

    # operation-count formula
    ok = (
        opt.arithmetic_op_count(4, 5, 1) == 22_882
        and opt.arithmetic_op_count(4, 5, 2) == 2 * 22_882
        and opt.arithmetic_op_count(1, 1, 1) == 56
    )
    _check("op-count", ok, "closed-form operation counts", report)

    # estimator coincidence on uncorrelated channels
    config, stats = _verify_scenario(seed, 0.0)
    p_hat = np.full(stats.shape, config.pilot_power_w)
    cm = semod.coefficients(stats, p_hat, "mmse")
    ce = semod.coefficients(stats, p_hat, "ewmmse")
    rel = max(
        np.max(np.abs(cm.b - ce.b)) / np.max(np.abs(cm.b)),
        np.max(np.abs(cm.c - ce.c)) / np.max(cm.c),
        np.max(np.abs(cm.d - ce.d)) / np.max(cm.d),
    )
    _check("estimator-coincidence", rel <= 1e-12, f"max rel diff {rel:.2e}", report)

    # closed form against the Monte-Carlo oracle
    config, stats = _verify_scenario(seed + 1, 0.5)
    p_hat = np.full(stats.shape, config.pilot_power_w)
    p = _rng(seed, 5).uniform(0.02, config.max_data_power_w, size=stats.shape)
    n_mc = 200_000 if level == "full" else 40_000
    estimators = ("mmse", "ewmmse") if level == "full" else ("mmse",)
    worst_z, worst_rel = 0.0, 0.0
    for est in estimators:
        coeffs = semod.coefficients(stats, p_hat, est)
        a = semod.optimal_lsfd(coeffs, p, check_condition=False)
        sinr_cf = semod.sinr_closed_form(coeffs, p, a)
        est_mc = ver.mc_sinr(
            stats, p_hat, p, a, est, "mrc", n=n_mc, rng=_rng(seed, 6), batch_size=5000
        )
        z = np.max(np.abs(est_mc.sinr - sinr_cf) / np.maximum(est_mc.sinr_se, 1e-300))
        rel = np.max(np.abs(est_mc.sinr - sinr_cf) / sinr_cf)
        worst_z, worst_rel = max(worst_z, z), max(worst_rel, rel)
    ok = worst_z <= 4.0 or worst_rel <= 0.05
    _check(
        "closed-form-vs-mc",
        ok,
        f"max |z| {worst_z:.2f}, max rel {worst_rel:.4f} (n={n_mc})",
        report,
    )

    # optimality of the second-layer weights under random probing
    coeffs = semod.coefficients(stats, p_hat, "mmse")
    a = semod.optimal_lsfd(coeffs, p, check_condition=False)
    base = semod.sinr_closed_form(coeffs, p, a)
    probe_rng = _rng(seed, 9)
    worst = -np.inf
    for _ in range(200):
        scale = 10.0 ** probe_rng.uniform(-3, 0)
        delta = (
            probe_rng.standard_normal(a.shape) + 1j * probe_rng.standard_normal(a.shape)
        )
        perturbed = semod.sinr_closed_form(coeffs, p, a + scale * delta)
        worst = max(worst, float(np.max((perturbed - base) / base)))
    _check("lsfd-argmax", worst <= 1e-10, f"best probe gain {worst:.2e}", report)

    # optimizer: monotone ascent, convergence, and two-layer dominance
    opts = opt.ConvergenceOptions(epsilon=1e-3, max_iter=500)
    ok, detail = True, ""
    for trial in range(2):
        config, stats = _verify_scenario(seed + 10 + trial, 0.5, users=3, antennas=32)
        p_hat = np.full(stats.shape, config.pilot_power_w)
        coeffs = semod.coefficients(stats, p_hat, "mmse")
        rho0 = _rng(seed, 20 + trial).uniform(
            0, np.sqrt(config.max_data_power_w), stats.shape
        )
        _, _, tr2 = opt.run_two_layer(
            coeffs, config.max_data_power_w, opts, config.prelog, rho0=rho0
        )
        _, tr1 = opt.run_single_layer(
            coeffs, config.max_data_power_w, opts, config.prelog, rho0=rho0
        )
        mono = np.min(np.diff(tr2.sum_se)) >= -1e-9 and np.min(np.diff(tr1.sum_se)) >= -1e-9
        ok &= mono and tr2.terminated_by == "epsilon" and tr1.terminated_by == "epsilon"
        ok &= tr2.sum_se[-1] >= tr1.sum_se[-1] - 1e-12
        detail = (
            f"iters {tr2.iterations}/{tr1.iterations}, "
            f"sum SE {tr2.sum_se[-1]:.3f} >= {tr1.sum_se[-1]:.3f}"
        )
    _check("optimizer", ok, detail, report)

    # estimator statistics against sampled channels
    if level == "full":
        config, stats = _verify_scenario(seed + 2, 0.8, cells=2, users=2, antennas=8)
        p_hat = np.full(stats.shape, config.pilot_power_w)
        err_mmse = np.max(
            ver.mmse_orthogonality_check(stats, p_hat, "mmse", 1_000_000, _rng(seed, 30))
        )
        err_ew = np.max(
            ver.mmse_orthogonality_check(stats, p_hat, "ewmmse", 1_000_000, _rng(seed, 31))
        )
        ok = err_mmse <= 0.02 and err_ew > 5 * err_mmse
        _check(
            "estimate-error-correlation",
            ok,
            f"mmse {err_mmse:.4f}, ew-mmse {err_ew:.4f}",
            report,
        )

        model = chan.estimation_model(stats, p_hat)
        n_batches, batch = 5, 200_000
        factors = chan.channel_factors(stats)
        emp = np.zeros_like(stats.corr)
        emp_psi = np.zeros_like(model.psi)
        cov_rng = _rng(seed, 32)
        for child in cov_rng.spawn(n_batches):
            h = chan.sample_channels(stats, child, batch, factors)
            emp += np.einsum("lkpmb,lkpnb->lkpmn", h, h.conj())
            y = chan.pilot_observation(h, p_hat, stats.sigma2, stats.tau_p, child)
            emp_psi += np.einsum("pkmb,pknb->pkmn", y, y.conj()) / stats.tau_p
        emp /= n_batches * batch
        emp_psi /= n_batches * batch
        rel = np.max(
            np.linalg.norm(emp - stats.corr, axis=(-2, -1))
            / np.linalg.norm(stats.corr, axis=(-2, -1))
        )
        _check("channel-covariance", rel <= 0.02, f"max rel Frobenius {rel:.4f}", report)
        rel = np.max(
            np.linalg.norm(emp_psi - model.psi, axis=(-2, -1))
            / np.linalg.norm(model.psi, axis=(-2, -1))
        )
        _check("pilot-covariance", rel <= 0.02, f"max rel Frobenius {rel:.4f}", report)

    passed = all(report)
    print(f"{'all checks passed' if passed else 'VERIFICATION FAILED'} "
          f"({sum(report)}/{len(report)})")
    return passed


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _output_base(name: str, override_dir: str | None) -> str:
    out_dir = override_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lsfdsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment spec (JSON file)")
    p_run.add_argument("spec", help="path to the experiment JSON document")
    p_run.add_argument("--output", help="output base name (default: spec stem)")
    p_run.add_argument("--output-dir", help=f"output directory (or ${OUTPUT_DIR_ENV})")
    p_run.add_argument("--workers", type=int, default=None, help="worker processes")

    p_preset = sub.add_parser("preset", help="run a packaged benchmark preset")
    p_preset.add_argument("name", choices=PRESETS)
    p_preset.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p_preset.add_argument("--output", help="output base name (default: preset name)")
    p_preset.add_argument("--output-dir", help=f"output directory (or ${OUTPUT_DIR_ENV})")
    p_preset.add_argument("--workers", type=int, default=None)

    p_verify = sub.add_parser("verify", help="run the self-verification battery")
    p_verify.add_argument("level", choices=("quick", "full"))
    p_verify.add_argument("--seed", type=int, default=0)

    p_flops = sub.add_parser("flops", help="arithmetic operations of the optimizer")
    p_flops.add_argument("--L", type=int, required=True, help="number of cells")
    p_flops.add_argument("--K", type=int, required=True, help="users per cell")
    p_flops.add_argument("--N", type=int, required=True, help="iterations")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE

    try:
        if args.command == "flops":
            print(opt.arithmetic_op_count(args.L, args.K, args.N))
            return EXIT_OK

        if args.command == "verify":
            return EXIT_OK if verify_suite(args.level, args.seed) else EXIT_VERIFY

        if args.command == "run":
            with open(args.spec) as fh:
                spec = spec_from_dict(json.load(fh))
            if args.workers:
                spec = replace(spec, workers=args.workers)
            rows, traces = run_experiment(spec)
            name = args.output or spec.output_path or os.path.splitext(
                os.path.basename(args.spec)
            )[0]
            for path in export(rows, _output_base(name, args.output_dir), spec, traces):
                print(path)
            return EXIT_OK

        if args.command == "preset":
            all_rows, all_traces, specs = [], [], []
            for spec in _preset_specs(args.name, args.scale):
                if args.workers:
                    spec = replace(spec, workers=args.workers)
                rows, traces = run_experiment(spec)
                specs.append(spec)
                all_rows.extend(rows)
                all_traces.extend(traces)
            name = args.output or f"{args.name}_{args.scale}"
            for path in export(
                all_rows, _output_base(name, args.output_dir), specs, all_traces
            ):
                print(path)
            return EXIT_OK
    except (ConfigurationError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
