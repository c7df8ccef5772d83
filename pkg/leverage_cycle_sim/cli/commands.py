"""Command-line surface: one subcommand per experiment, each writing CSV tables and a manifest."""

import argparse
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from leverage_cycle_sim.analysis.risk_metrics import (
    cycle_period,
    equity_returns,
    peak_to_trough,
    poincare_section,
    realized_shortfall,
)
from leverage_cycle_sim.analysis.stability import (
    Regime,
    classify_regime,
    critical_alpha,
    fixed_point,
    lyapunov_clone,
    lyapunov_leading,
    stability_report,
)
from leverage_cycle_sim.cli.output_writer import OutputWriter, new_manifest
from leverage_cycle_sim.common.exceptions import (
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_FAILURE,
    EXIT_OK,
    CalibrationError,
    ConfigError,
    DivergenceError,
    InsufficientCyclesError,
    InvalidSeriesError,
    LeverageCycleError,
)
from leverage_cycle_sim.common.logger import get_logger
from leverage_cycle_sim.common.run_config import RunConfigManager, load_config
from leverage_cycle_sim.experiments.calibration import TargetSpec
from leverage_cycle_sim.experiments.cell_runner import CellRunner, default_thread_count, seed_list
from leverage_cycle_sim.experiments.sweeps import (
    DEFAULT_B_GRID,
    DEFAULT_DELTA_GRID,
    DEFAULT_THETA_TAU_GRID,
    REFERENCE_B,
    bifurcation_scan,
    delta_sweep,
    optimal_b,
    policy_sweep,
    stochastic_stability_scan,
    theta_sweep,
)
from leverage_cycle_sim.model.core import default_initial_state, policy_curve, simulate
from leverage_cycle_sim.model.stochastic import shock_source

logger = get_logger(__name__)

DEFAULT_LEVERAGE_GRID = tuple(float(v) for v in np.geomspace(1.0, 1000.0, 25))
DEFAULT_PROCYCLICAL_GRID = (-0.5, -0.4, -0.3, -0.2, -0.1)
POLICY_CURVE_GRID = tuple(float(v) for v in np.geomspace(1e-4, 1.0, 41))


@dataclass
class CommandResult:
    summary: str
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    exit_code: int = EXIT_OK
    status: str = "ok"


def _parse_grid(text: Optional[str], default: Sequence[float]) -> List[float]:
    if text is None:
        return list(default)
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--grid expects comma-separated numbers, got {text!r}")
    if not values:
        raise ConfigError("--grid is empty")
    return values


def _runner(args, manager: RunConfigManager, label: str) -> CellRunner:
    threads = args.threads if args.threads is not None else default_thread_count(manager.runtime.max_threads)
    return CellRunner(max_threads=threads, progress=logger.isEnabledFor(logging.INFO), label=label)


def _seeds(manager: RunConfigManager) -> List[int]:
    """One seed in the deterministic limit, ``n_seeds`` derived seeds otherwise."""
    config = manager.config
    if manager.garch_params() is None:
        return [config.seed]
    return seed_list(config.seed, config.n_seeds)


def run_simulate(args, manager: RunConfigManager) -> CommandResult:
    params, config = manager.model_params(), manager.config
    trajectory = simulate(default_initial_state(params), params, shock_source(manager.garch_params(), config.seed),
                          config.n_steps)
    if trajectory.is_diverged:
        raise DivergenceError(f"trajectory diverged at step {trajectory.diverged_at}: {trajectory.final_status.reason}",
                              step=trajectory.diverged_at)
    prices = trajectory.prices
    summary = (f"simulate: {len(trajectory)} steps, final price {prices[-1]:.6g}, "
               f"price range [{prices.min():.6g}, {prices.max():.6g}], t_delta {params.t_delta:.4g} years, "
               f"clamped {trajectory.clamp_count}, insolvent steps {trajectory.insolvent_steps}")
    return CommandResult(summary, {manager.generate_output_name("simulate"): trajectory.to_frame()})


def run_fixed_point(args, manager: RunConfigManager) -> CommandResult:
    params = manager.model_params()
    point = fixed_point(params)
    state = point.state
    table = pd.DataFrame([{
        "b": params.policy.b, "alpha": params.policy.alpha, "sigma_sq": state.sigma_sq, "w_f": state.w_f,
        "price": state.p, "n": state.n, "l_b": state.l_b, "p_lag": state.p_lag,
        "lambda_star": point.lambda_star, "r_star": point.r_star, "feasible": point.feasible,
    }])
    curve = policy_curve(POLICY_CURVE_GRID, params.policy)
    summary = (f"fixed-point: lambda*={point.lambda_star:.6g}, R*={point.r_star:.6g}, n*={state.n:.6g}"
               f"{'' if point.feasible else ' (infeasible: n* outside (0, 1))'}")
    return CommandResult(summary, {
        manager.generate_output_name("fixed-point"): table,
        manager.generate_output_name("policy-curve"): curve,
    })


def _eigenvalue_rows(kind: str, values) -> pd.DataFrame:
    return pd.DataFrame({"set": kind, "real": values.real, "imag": values.imag, "modulus": np.abs(values)})


def run_stability(args, manager: RunConfigManager) -> CommandResult:
    params = manager.model_params()
    report = stability_report(params)
    regime = classify_regime(params)
    estimate = lyapunov_leading(params, seed=manager.config.seed, n_steps=manager.config.n_steps,
                                burn_in=manager.config.burn_in)
    table = pd.concat([_eigenvalue_rows("full", report.eigenvalues),
                       _eigenvalue_rows("transverse", report.transverse_eigenvalues)], ignore_index=True)
    summary_row = pd.DataFrame([{
        "spectral_radius": report.spectral_radius, "lyapunov": estimate.exponent, "regime": regime.value,
    }])
    summary = (f"stability: spectral radius {report.spectral_radius:.6g}, "
               f"lyapunov {estimate.exponent:.4g}/year, regime {regime.value}")
    unstable = regime is Regime.GLOBALLY_UNSTABLE
    return CommandResult(
        summary,
        {manager.generate_output_name("stability-eigenvalues"): table,
         manager.generate_output_name("stability"): summary_row},
        exit_code=EXIT_DIVERGENCE if unstable else EXIT_OK,
        status="globally_unstable" if unstable else "ok",
    )


def run_critical_alpha(args, manager: RunConfigManager) -> CommandResult:
    params = manager.model_params()
    point = critical_alpha(params, params.policy.b)
    table = pd.DataFrame([{"b": point.b, "alpha_c": point.alpha_c, "lambda_c": point.lambda_c, "r_c": point.r_c}])
    summary = f"critical-alpha: b={point.b:g}, alpha_c={point.alpha_c:.6g}, lambda_c={point.lambda_c:.6g}"
    return CommandResult(summary, {manager.generate_output_name("critical-alpha"): table})


def run_lyapunov(args, manager: RunConfigManager) -> CommandResult:
    params, config = manager.model_params(), manager.config
    estimator = lyapunov_clone if args.method == "clone" else lyapunov_leading
    garch = manager.garch_params()

    def cell(seed):
        estimate = estimator(params, seed, config.n_steps, config.burn_in, garch)
        return {"seed": seed, "exponent": estimate.exponent, "reliable": estimate.reliable,
                "steps": estimate.steps, "mean_target_leverage": estimate.mean_target_leverage}

    rows = _runner(args, manager, "lyapunov seeds").map(cell, _seeds(manager))
    table = pd.DataFrame(rows)
    reliable = table[table["reliable"]]
    if reliable.empty:
        raise DivergenceError("no seed produced a reliable Lyapunov estimate")
    median = float(reliable["exponent"].median())
    summary = f"lyapunov ({args.method}): median exponent {median:.6g}/year over {len(reliable)} seed(s)"
    return CommandResult(summary, {manager.generate_output_name("lyapunov"): table})


def run_bifurcation(args, manager: RunConfigManager) -> CommandResult:
    params = manager.model_params()
    b_grid = _parse_grid(args.grid, DEFAULT_B_GRID)
    leverage_grid = _parse_grid(args.leverage_grid, DEFAULT_LEVERAGE_GRID)
    result = bifurcation_scan(b_grid, leverage_grid, params, as_leverage=True,
                              runner=_runner(args, manager, "regime cells"))
    counts = result.cells["regime"].value_counts().to_dict()
    summary = "bifurcation: " + ", ".join(f"{regime.value} {counts.get(regime.value, 0)}" for regime in Regime)
    return CommandResult(summary, {
        manager.generate_output_name("bifurcation"): result.cells,
        manager.generate_output_name("bifurcation-boundary"): result.boundary,
    })


def run_policy_sweep(args, manager: RunConfigManager) -> CommandResult:
    config = manager.config
    spec = TargetSpec(lambda_hat=config.lambda_hat, r_hat=config.r_hat, b=config.b,
                      seeds=tuple(_seeds(manager)), t_len=config.n_steps, burn_in=config.burn_in)
    b_grid = _parse_grid(args.grid, DEFAULT_B_GRID)
    if not any(math.isclose(b, REFERENCE_B) for b in b_grid):
        raise ConfigError(f"policy-sweep grid must contain the reference b = {REFERENCE_B}")
    table = policy_sweep(b_grid, spec, manager.model_params(), manager.garch_params(), q=config.q,
                         runner=_runner(args, manager, "policy cells"))
    reference = table[np.isclose(table["b"], REFERENCE_B)]
    if (table["status"] != "ok").all():
        raise CalibrationError("every policy cell failed")
    if (reference["status"] != "ok").any():
        raise CalibrationError("the b = -0.5 reference cell failed, RS cannot be normalized")
    b_star = optimal_b(table)
    failed = int((table["status"] != "ok").sum())
    summary = f"policy-sweep: b* = {b_star:.3g} over {len(table)} cells ({failed} failed)"
    return CommandResult(summary, {manager.generate_output_name("policy-sweep"): table})


def run_theta_sweep(args, manager: RunConfigManager) -> CommandResult:
    grid = _parse_grid(args.grid, DEFAULT_THETA_TAU_GRID)
    table = theta_sweep(grid, manager.model_params(), runner=_runner(args, manager, "theta cells"))
    summary = "theta-sweep: " + ", ".join(f"theta_tau={r.theta_tau:g} lambda_c={r.lambda_c:.4g}"
                                          for r in table.itertuples())
    return CommandResult(summary, {manager.generate_output_name("theta-sweep"): table})


def run_stochastic_stability(args, manager: RunConfigManager) -> CommandResult:
    garch = manager.garch_params()
    if garch is None:
        raise ConfigError("stochastic-stability needs nonzero GARCH parameters (a0, a1, b1)")
    config = manager.config
    grid = _parse_grid(args.grid, DEFAULT_PROCYCLICAL_GRID)
    table = stochastic_stability_scan(grid, manager.model_params(), garch, seed_list(config.seed, config.n_seeds),
                                      n_steps=config.n_steps, burn_in=config.burn_in,
                                      runner=_runner(args, manager, "stochastic stability cells"))
    summary = "stochastic-stability: " + ", ".join(
        f"b={r.b:g} det={r.deterministic_lambda_c:.4g} stoch={r.stochastic_lambda_c:.4g}" for r in table.itertuples())
    return CommandResult(summary, {manager.generate_output_name("stochastic-stability"): table})


def run_poincare(args, manager: RunConfigManager) -> CommandResult:
    params, config = manager.model_params(), manager.config
    trajectory = simulate(default_initial_state(params), params, shock_source(manager.garch_params(), config.seed),
                          config.burn_in + config.n_steps)
    if trajectory.is_diverged:
        raise DivergenceError(f"trajectory diverged at step {trajectory.diverged_at}", step=trajectory.diverged_at)
    points = poincare_section(trajectory.tail(config.burn_in), plane_price=config.plane_price)
    table = pd.DataFrame(points, columns=["n", "sigma_sq"])
    summary = f"poincare: {len(table)} upward crossings of p = {config.plane_price:g}"
    return CommandResult(summary, {manager.generate_output_name("poincare"): table})


def _risk_cell(seed: int, manager: RunConfigManager) -> dict:
    params, config = manager.model_params(), manager.config
    row = {"seed": seed, "rs_q": math.nan, "period": math.nan, "peak_to_trough": math.nan}
    trajectory = simulate(default_initial_state(params), params, shock_source(manager.garch_params(), seed),
                          config.burn_in + config.n_steps + 1)
    if trajectory.is_diverged:
        return {**row, "status": "diverged"}
    window = trajectory.tail(config.burn_in)
    try:
        row["rs_q"] = realized_shortfall(equity_returns(window), config.q).rs_q
    except InvalidSeriesError:
        return {**row, "status": "invalid_returns"}
    row["peak_to_trough"] = peak_to_trough(window.prices)
    try:
        row["period"] = cycle_period(window.prices, params.tau)
    except InsufficientCyclesError:
        return {**row, "status": "no_cycles"}
    return {**row, "status": "ok"}


def run_risk(args, manager: RunConfigManager) -> CommandResult:
    rows = _runner(args, manager, "risk seeds").map(lambda seed: _risk_cell(seed, manager), _seeds(manager))
    table = pd.DataFrame(rows)
    if (table["status"] == "diverged").all():
        raise DivergenceError("every risk run diverged")
    medians = table[["rs_q", "period", "peak_to_trough"]].median()
    summary = (f"risk: median RS_q {medians['rs_q']:.6g}, period {medians['period']:.4g} years, "
               f"peak-to-trough {medians['peak_to_trough']:.4g} over {len(table)} run(s)")
    return CommandResult(summary, {manager.generate_output_name("risk"): table})


def run_delta_sweep(args, manager: RunConfigManager) -> CommandResult:
    config = manager.config
    grid = _parse_grid(args.grid, DEFAULT_DELTA_GRID)
    table = delta_sweep(grid, manager.model_params(), n_steps=config.n_steps, burn_in=config.burn_in,
                        runner=_runner(args, manager, "delta cells"))
    summary = "delta-sweep: " + ", ".join(f"delta={r.delta:g} period={r.period:.4g}" for r in table.itertuples())
    return CommandResult(summary, {manager.generate_output_name("delta-sweep"): table})


COMMANDS: Dict[str, Callable] = {
    "simulate": run_simulate,
    "fixed-point": run_fixed_point,
    "stability": run_stability,
    "critical-alpha": run_critical_alpha,
    "lyapunov": run_lyapunov,
    "bifurcation": run_bifurcation,
    "policy-sweep": run_policy_sweep,
    "theta-sweep": run_theta_sweep,
    "stochastic-stability": run_stochastic_stability,
    "poincare": run_poincare,
    "risk": run_risk,
    "delta-sweep": run_delta_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leverage-cycle-sim",
                                     description="Leverage-targeting bank and fundamentalist fund simulator")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="key = value configuration document")
        sub.add_argument("--seed", type=int, help="override the config seed")
        sub.add_argument("--b", type=float, help="override the policy cyclicality b")
        sub.add_argument("--alpha", type=float, help="override the bank riskiness alpha")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--threads", type=int, help="worker threads for sweep cells (GIL-bound, little speedup)")
        sub.add_argument("--grid", help="comma-separated sweep values")
        if name == "bifurcation":
            sub.add_argument("--leverage-grid", help="comma-separated fixed-point leverage values")
        if name == "lyapunov":
            sub.add_argument("--method", choices=("tangent", "clone"), default="tangent")
    return parser


def run_command(argv: Sequence[str], runtime: Optional[dict] = None) -> int:
    """Run one subcommand and return its exit code; nothing is written unless it succeeds."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    try:
        manager = RunConfigManager(load_config(args.config), runtime)
        manager = manager.with_overrides(seed=args.seed, b=args.b, alpha=args.alpha)
        logger.info(f"Running {args.command} (env={manager.env_name}, seed={manager.config.seed})")
        manifest = new_manifest(args.command, list(argv), manager.config)
        result = COMMANDS[args.command](args, manager)
        writer = OutputWriter(args.out or manager.runtime.output_dir, manifest)
        for name, frame in result.frames.items():
            writer.add_frame(name, frame)
        writer.commit(manager.generate_output_name(args.command, "manifest.json"), status=result.status)
    except LeverageCycleError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {str(e)}")
        return EXIT_FAILURE

    print(result.summary)
    return result.exit_code
