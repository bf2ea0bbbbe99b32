#!/usr/bin/env python3
"""
Command-line entry point for the lab.

Generates scenario-tree markets, runs the solvers and verification suites,
the stability experiments and the counterexample simulation, and writes a
JSON report plus CSV tables per run. Exit codes: 0 all checks pass,
1 a check failed (or the market admits no consistent price system),
2 input error, 3 solver non-convergence.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from config import load_settings, ADMISSIBILITY_TOL
from counterexample_sim import CxConfig, run_counterexample, statistics_table, path_dump
from dual_solver import solve_dual, is_cps, is_deflator, arbitrage_certificate, Deflator
from duality_lab import (
    verify_duality, deflator_sandwich, local_mart_equivalence, positivity_martingale_check,
    extract_shadow, verify_shadow,
)
from errors import LabError, InputError, InfeasibleMarketError, SolverError, EXIT_INPUT, EXIT_SOLVER
from market import Market, load_market, market_to_dict, is_admissible, check_self_financing
from preferences import UtilitySpec
from primal_solver import solve_primal, brute_force_primal, BRUTE_FORCE_MAX_NODES
from reports import CheckResult, flag_check, build_report, write_report, write_table
from stability_lab import load_schedule, run_static, run_dynamic, shadow_stability
from tree_core import ScenarioTree, StoppingRegion

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

TREE_KINDS = ("binomial", "trinomial", "random")
ORACLE_TOL = 1e-3


def gen_tree(kind, depth, branching=2, vol=0.2, lam=0.1, seed=0):
    """
    Build a full scenario tree market of the given depth.

    Children of every node carry log-returns of both signs, so the node price
    lies strictly inside the range of its children's prices and a strictly
    consistent price system exists for every lambda in [0, 1).

    Raises:
        InputError: invalid parameters
    """
    if kind not in TREE_KINDS:
        raise InputError(f"unknown tree kind '{kind}', expected one of {TREE_KINDS}")
    if depth < 1:
        raise InputError("depth must be at least 1")
    if kind == "random" and branching < 2:
        raise InputError("random trees need branching >= 2")
    if not vol > 0:
        raise InputError("price volatility must be positive")
    if not 0.0 <= lam < 1.0:
        raise InputError(f"lambda must lie in [0, 1), got {lam}")
    rng = np.random.default_rng(seed)
    parents, times, probs, prices = [None], [0], [1.0], [1.0]
    frontier = [0]
    for t in range(1, depth + 1):
        nxt = []
        for node in frontier:
            if kind == "binomial":
                moves, weights = np.array([vol, -vol]), np.full(2, 0.5)
            elif kind == "trinomial":
                moves, weights = np.array([vol, 0.0, -vol]), np.full(3, 1.0 / 3.0)
            else:
                k = int(rng.integers(2, branching + 1))
                moves = np.sort(vol * rng.standard_normal(k))[::-1]
                moves[0] = abs(moves[0]) + 0.1 * vol
                moves[-1] = -abs(moves[-1]) - 0.1 * vol
                weights = rng.dirichlet(np.full(k, 2.0))
            for move, weight in zip(moves, weights):
                parents.append(node)
                times.append(t)
                probs.append(float(weight))
                prices.append(prices[node] * float(np.exp(move)))
                nxt.append(len(parents) - 1)
        frontier = nxt
    tree = ScenarioTree.build(parents, times, probs, depth)
    market = Market.build(tree, prices, lam)
    certificate = arbitrage_certificate(market)
    if certificate is not None:
        logger.warning(f"Generated market admits no consistent price system at node {certificate['node']}")
    logger.info(f"Generated {kind} market: {tree.size} nodes, depth {depth}, lambda={lam}")
    return market, certificate


def _market(params):
    market = params.get("market")
    if market is None:
        raise InputError("a market is required (--market FILE)")
    return market


def _spec(settings):
    return UtilitySpec.parse(settings.utility)


def _require(params, key):
    value = params.get(key)
    if value is None:
        raise InputError(f"missing required parameter '{key}'")
    return value


def cmd_gen_tree(params, settings):
    market, certificate = gen_tree(
        params.get("kind", "binomial"), int(params.get("depth", 3)), int(params.get("branching", 2)),
        float(params.get("vol", 0.2)), float(params.get("lam", 0.1)), int(settings.seed))
    checks = [flag_check("cps_feasible", certificate is None)]
    result = {"market": market_to_dict(market), "nodes": market.tree.size, "certificate": certificate}
    return checks, result, {}


def cmd_solve_primal(params, settings):
    market = _market(params)
    spec = _spec(settings)
    x = float(_require(params, "x"))
    sol = solve_primal(market, spec, x, settings.solver_options())
    adm = is_admissible(market, sol.strategy, x, ADMISSIBILITY_TOL)
    checks = [
        flag_check("admissible", adm.admissible),
        flag_check("self_financing", check_self_financing(market, sol.holdings, ADMISSIBILITY_TOL)),
    ]
    result = sol.to_dict()
    if params.get("oracle"):
        if market.tree.non_leaves.size <= BRUTE_FORCE_MAX_NODES:
            brute = brute_force_primal(market, spec, x)
            err = abs(sol.value - brute) / max(abs(sol.value), 1.0)
            checks.append(CheckResult("brute_force_oracle", err, ORACLE_TOL))
            result["brute_force_value"] = brute
        else:
            logger.warning("Brute-force oracle skipped: too many trading nodes")
    leaves = market.tree.leaves
    table = [{"leaf": int(l), "wealth": float(w)} for l, w in zip(leaves, sol.terminal)]
    return checks, result, {"primal_leaves.csv": table}


def cmd_solve_dual(params, settings):
    market = _market(params)
    spec = _spec(settings)
    y = float(_require(params, "y"))
    sol = solve_dual(market, spec, y, settings.solver_options())
    cps = is_cps(market, sol.price_system)
    defl = is_deflator(market, sol.deflator, tol=1e-9 * max(1.0, y))
    checks = [flag_check("consistent_price_system", cps.feasible), flag_check("deflator", defl.passed)]
    result = sol.to_dict()
    result["cps"] = cps.to_dict()
    result["deflator"] = defl.to_dict()
    table = [{"node": n, "Z0": float(sol.price_system.z0[n]), "Z1": float(sol.price_system.z1[n])}
             for n in range(market.tree.size)]
    return checks, result, {"price_system.csv": table}


def cmd_verify_duality(params, settings):
    market = _market(params)
    spec = _spec(settings)
    x = float(_require(params, "x"))
    report = verify_duality(market, spec, x, settings.solver_options())
    checks = list(report.checks)
    result = report.to_dict()
    if params.get("positivity"):
        result["positivity"] = positivity_martingale_check(market, spec, x, opts=settings.solver_options())
    leaves = market.tree.leaves
    table = [{"leaf": int(l), "g": float(g), "h": float(h)}
             for l, g, h in zip(leaves, report.primal.terminal, report.dual.terminal)]
    return checks, result, {"leaves.csv": table}


def cmd_shadow(params, settings):
    market = _market(params)
    spec = _spec(settings)
    x = float(_require(params, "x"))
    opts = settings.solver_options()
    primal = solve_primal(market, spec, x, opts)
    dual = solve_dual(market, spec, primal.marginal, opts)
    shadow = extract_shadow(market, dual)
    verified = verify_shadow(market, spec, x, shadow, opts=opts, primal=primal)
    checks = [CheckResult(c["name"], c["residual"], c["tolerance"]) for c in verified["checks"]]
    result = {"shadow": shadow.to_dict(), "verify": verified}
    table = [{"node": n, "ask": float(market.ask[n]), "bid": float(market.bid[n]),
              "shadow": float(shadow.price[n])} for n in range(market.tree.size)]
    return checks, result, {"shadow.csv": table}


def cmd_sandwich(params, settings):
    market = _market(params)
    spec = _spec(settings)
    x = float(_require(params, "x"))
    opts = settings.solver_options()
    primal = solve_primal(market, spec, x, opts)
    dual = solve_dual(market, spec, primal.marginal, opts)
    d = dual.deflator
    decay = float(params.get("decay", 1.0))
    if not 0.0 < decay <= 1.0:
        raise InputError("decay factor must lie in (0, 1]")
    factor = decay ** market.tree.time
    d = Deflator(d.y0 * factor, d.y1 * factor)
    level = int(params.get("sigma_level", 0))
    sigma = StoppingRegion.at_level(market.tree, level)
    sandwich = deflator_sandwich(market, d, sigma, params.get("eps"), int(params.get("extra", 0)))
    equivalence = local_mart_equivalence(market, d)
    checks = [CheckResult(c["name"], c["residual"], c["tolerance"]) for c in sandwich["checks"]]
    checks.append(flag_check("local_martingale_equivalence", equivalence["pass"]))
    result = {"sandwich": sandwich, "equivalence": equivalence, "decay": decay}
    return checks, result, {"sandwich_levels.csv": sandwich["levels"]}


def cmd_stability(params, settings):
    market = _market(params)
    mode = params.get("mode", "static")
    schedule = params.get("schedule")
    if schedule is None:
        raise InputError("a schedule is required (--schedule FILE)")
    opts = settings.solver_options()
    if mode == "static":
        report = run_static(market, schedule, opts, settings.parallel)
        return list(report.checks), report.to_dict(), {"stability_static.csv": report.rows}
    if mode != "dynamic":
        raise InputError(f"unknown stability mode '{mode}'")
    dynamic = run_dynamic(market, schedule, opts, settings.parallel, params.get("cesaro", "window"))
    checks = list(dynamic["checks"])
    result = {k: v for k, v in dynamic.items() if k not in ("limit", "mapped", "checks")}
    result["checks"] = [c.to_dict() for c in dynamic["checks"]]
    if params.get("shadow"):
        shadow = shadow_stability(market, schedule, opts, settings.parallel, dynamic=dynamic)
        checks.extend(shadow["checks"])
        result["shadow"] = {k: v for k, v in shadow.items() if k != "checks"}
    return checks, result, {"stability_dynamic.csv": dynamic["rows"]}


def cmd_counterexample(params, settings):
    cfg = CxConfig(
        lam=float(params.get("lam", 0.1)),
        delta=float(params.get("delta", 0.05)),
        m=int(params.get("m", 40)),
        depth=int(params.get("depth", 250_000)),
        eps_low=float(params.get("eps_low", 1e-3)),
        paths=int(params.get("paths", 100_000)),
        seed=int(settings.seed),
        grid_points=int(params.get("grid_points", 51)),
        parallel=max(1, int(settings.parallel)),
    )
    report, ens = run_counterexample(cfg, float(params.get("x", 1.0)))
    tables = {"counterexample_stats.csv": statistics_table(ens)}
    dump = int(params.get("dump_paths", 0))
    if dump > 0:
        tables["paths.csv"] = path_dump(ens, dump)
    return list(report.checks), report.to_dict(), tables


COMMANDS = {
    "gen-tree": cmd_gen_tree,
    "solve-primal": cmd_solve_primal,
    "solve-dual": cmd_solve_dual,
    "verify-duality": cmd_verify_duality,
    "shadow": cmd_shadow,
    "sandwich": cmd_sandwich,
    "stability": cmd_stability,
    "counterexample": cmd_counterexample,
}


def _config_view(params, settings):
    view = dict(settings.to_dict())
    for key, value in params.items():
        if key == "market":
            view["market_nodes"] = value.tree.size if value is not None else None
            view["lambda"] = value.lam if value is not None else None
        elif key == "schedule":
            view["schedule"] = value.to_dict() if value is not None else None
        else:
            view[key] = value
    return view


def execute(command, params, settings):
    """
    Run one command and assemble its report.

    Returns:
        (report dict, tables dict of CSV name -> rows)
    """
    if command not in COMMANDS:
        raise InputError(f"unknown command '{command}'")
    config = _config_view(params, settings)
    try:
        checks, result, tables = COMMANDS[command](params, settings)
    except InfeasibleMarketError as e:
        logger.error(f"Error running {command}: {e}")
        return build_report(command, config, settings.seed, [flag_check("cps_feasible", False)],
                            {"error": e.to_dict()}, e.exit_code), {}
    except LabError as e:
        logger.error(f"Error running {command}: {e}")
        return build_report(command, config, settings.seed, [], {"error": e.to_dict()}, e.exit_code), {}
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error(f"Numerical failure running {command}: {e}")
        error = SolverError(f"numerical failure: {e}", diagnostics={"cause": type(e).__name__})
        return build_report(command, config, settings.seed, [], {"error": error.to_dict()}, error.exit_code), {}
    return build_report(command, config, settings.seed, checks, result), tables


def parse_args(argv=None):
    """Parse command-line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--utility", default=None,
                        help="Utility: 'log' or 'crra:<gamma>' (default: LAB_UTILITY or log)")
    common.add_argument("--tol", type=float, default=None,
                        help="Barrier solver tolerance (default: LAB_TOL or 1e-8)")
    common.add_argument("--max-iter", type=int, default=None,
                        help="Newton iteration cap (default: LAB_MAX_ITER or 500)")
    common.add_argument("--seed", type=int, default=None,
                        help="Random seed (default: LAB_SEED or 0)")
    common.add_argument("--out", default=None,
                        help="Output directory for reports and tables (default: LAB_OUT_DIR or runs)")
    common.add_argument("--parallel", type=int, default=None,
                        help="Worker threads for batched solves (default: LAB_PARALLEL or 1)")
    common.add_argument("--log-level", default=None,
                        help="Logging level (default: LAB_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(description="Utility maximization under proportional transaction costs")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-tree", parents=[common], help="Generate a market file")
    gen.add_argument("--kind", choices=TREE_KINDS, default="binomial", help="Tree shape (default: binomial)")
    gen.add_argument("--depth", type=int, default=3, help="Number of periods (default: 3)")
    gen.add_argument("--branching", type=int, default=3, help="Max children for random trees (default: 3)")
    gen.add_argument("--vol", type=float, default=0.2, help="One-step log-price move (default: 0.2)")
    gen.add_argument("--lambda", dest="lam", type=float, default=0.1, help="Transaction cost level (default: 0.1)")
    gen.add_argument("--output", default=None, help="Market file to write (default: <out>/market.json)")

    for name, needs in (("solve-primal", "x"), ("solve-dual", "y"), ("verify-duality", "x"),
                        ("shadow", "x"), ("sandwich", "x")):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--market", required=True, help="Market JSON file")
        p.add_argument(f"--{needs}", type=float, required=True, help=f"Value of {needs}")
        if name == "solve-primal":
            p.add_argument("--oracle", action="store_true", help="Compare with brute force on small trees")
        if name == "verify-duality":
            p.add_argument("--positivity", action="store_true", help="Also report the liquidation-value check")
        if name == "sandwich":
            p.add_argument("--sigma-level", type=int, default=0, help="Time of the stopping region (default: 0)")
            p.add_argument("--eps", type=float, default=None,
                           help="Band half-width (default: largest one-step relative move below sigma)")
            p.add_argument("--extra", type=int, default=0, help="Additional +/-1/n strategies (default: 0)")
            p.add_argument("--decay", type=float, default=1.0,
                           help="Deterministic per-period factor applied to the deflator (default: 1.0)")

    stab = sub.add_parser("stability", parents=[common], help="Stability experiments")
    stab.add_argument("mode", choices=["static", "dynamic"])
    stab.add_argument("--market", required=True, help="Market JSON file")
    stab.add_argument("--schedule", required=True, help="Schedule JSON or TOML file")
    stab.add_argument("--cesaro", choices=["window", "full"], default="window",
                      help="Averaging of the dual sequence (default: window)")
    stab.add_argument("--shadow", action="store_true", help="Also check shadow prices of the limit")

    cx = sub.add_parser("counterexample", parents=[common], help="Path simulation of two dual optimizers")
    cx.add_argument("--lambda", dest="lam", type=float, default=0.1, help="Transaction cost level (default: 0.1)")
    cx.add_argument("--delta", type=float, default=0.05, help="Coin amplitude (default: 0.05)")
    cx.add_argument("--m", type=int, default=40, help="Lattice steps to the upper barrier (default: 40)")
    cx.add_argument("--depth", type=int, default=250_000, help="Step cap per path (default: 250000)")
    cx.add_argument("--eps-low", type=float, default=1e-3, help="Lower absorbing level (default: 0.001)")
    cx.add_argument("--paths", type=int, default=100_000, help="Number of paths (default: 100000)")
    cx.add_argument("--x", type=float, default=1.0, help="Initial endowment (default: 1.0)")
    cx.add_argument("--grid-points", type=int, default=51, help="Normalized time grid size (default: 51)")
    cx.add_argument("--dump-paths", type=int, default=0, help="Paths to write to paths.csv (default: 0)")

    return parser.parse_args(argv)


PARAM_KEYS = ("kind", "depth", "branching", "vol", "lam", "x", "y", "oracle", "positivity", "sigma_level",
              "eps", "extra", "decay", "mode", "cesaro", "shadow", "delta", "m", "eps_low", "paths",
              "grid_points", "dump_paths")


def main(argv=None):
    """Main function: parse flags, run the command, write the report."""
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else 0
    settings = load_settings(tol=args.tol, max_iter=args.max_iter, seed=args.seed, out_dir=args.out,
                             parallel=args.parallel, utility=args.utility, log_level=args.log_level)
    logging.getLogger().setLevel(settings.log_level.upper())
    params = {k: getattr(args, k) for k in PARAM_KEYS if hasattr(args, k)}
    try:
        if hasattr(args, "market"):
            params["market"] = load_market(args.market)
        if getattr(args, "schedule", None):
            params["schedule"] = load_schedule(args.schedule)
    except LabError as e:
        logger.error(f"Error reading input: {e}")
        report = build_report(args.command, {"argv": list(argv or sys.argv[1:])}, settings.seed, [],
                              {"error": e.to_dict()}, e.exit_code)
        write_report(report, settings.out_dir)
        return e.exit_code

    report, tables = execute(args.command, params, settings)
    try:
        write_report(report, settings.out_dir)
        for name, rows in tables.items():
            write_table(rows, settings.out_dir, name)
        if args.command == "gen-tree" and report["exit_code"] in (0, 1) and "market" in report["result"]:
            path = args.output or os.path.join(settings.out_dir, "market.json")
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, 'w') as f:
                json.dump(report["result"]["market"], f, indent=2, sort_keys=True)
            logger.info(f"Wrote {path}")
    except OSError as e:
        logger.error(f"Error writing outputs: {e}")
        return EXIT_INPUT
    code = report["exit_code"]
    if code == EXIT_SOLVER:
        logger.error("Solver did not converge")
    logger.info(f"{args.command} finished with exit code {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
