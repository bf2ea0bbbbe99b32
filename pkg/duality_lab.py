"""
Checks of the duality relations between the primal and dual optimizers,
structural checks of supermartingale deflators, and shadow prices.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config import (
    SolverOptions, DUALITY_GAP_TOL, FOC_TOL, COMPLEMENTARITY_TOL, PRODUCT_MARTINGALE_TOL,
    SHADOW_VALUE_TOL, SHADOW_WEALTH_TOL, SANDWICH_SLACK, COMPENSATOR_TOL,
    POSITIVITY_THRESHOLD,
)
from dual_solver import solve_dual, conjugate_cross_check, is_deflator
from errors import PreconditionError, ExtractionError, DomainError
from market import Market, TradingStrategy, holdings, forced_liquidation, liquidation_value, is_admissible
from primal_solver import solve_primal
from reports import CheckResult, flag_check, all_passed
from tree_core import (
    one_step_drift, doob_decompose, region_expectation, first_crossing,
    region_min, region_shift, classify_martingale, MARTINGALE, SUPERMARTINGALE,
)

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# relative errors of values near zero are measured against this floor
VALUE_FLOOR = 1.0
SPREAD_ROUNDING = 1e-9


@dataclass
class DualityReport:
    x: float
    y: float
    u: float
    v: float
    gap: float
    foc_residual: float
    inverse_residual: float
    complementarity: float
    product_martingale: float
    checks: list
    primal: object = None
    dual: object = None
    cross_check: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all_passed(self.checks)

    def to_dict(self):
        return {
            "x": self.x,
            "y": self.y,
            "u": self.u,
            "v": self.v,
            "gap": self.gap,
            "foc_residual": self.foc_residual,
            "inverse_residual": self.inverse_residual,
            "complementarity": self.complementarity,
            "product_martingale": self.product_martingale,
            "cross_check": self.cross_check,
            "checks": [c.to_dict() for c in self.checks],
            "pass": self.passed,
        }


def deflated_value(market, h, d):
    """phi0 Y0 + phi1 Y1 with post-trade holdings at every node."""
    return h.bond * d.y0 + h.stock * d.y1


def verify_duality(market, spec, x, opts=None):
    """
    Solve both problems at y = u'(x) and check every duality relation.

    Raises:
        propagated solver and infeasibility errors
    """
    opts = opts or SolverOptions()
    primal = solve_primal(market, spec, x, opts)
    y = primal.marginal
    dual = solve_dual(market, spec, y, opts)
    g = primal.terminal
    h = dual.terminal
    foc = float(np.max(np.abs(h - spec.dU(g)) / h))
    inverse = float(np.max(np.abs(g - spec.I(h)) / g))
    expect_gh = float(np.dot(market.tree.leaf_prob, g * h))
    complementarity = abs(expect_gh - x * y) / (x * y)
    value = deflated_value(market, primal.holdings, dual.deflator)
    product = float(np.max(np.abs(one_step_drift(market.tree, value)))) / (x * y)
    cross = conjugate_cross_check(market, spec, x, primal, opts)
    scale = max(abs(primal.value), VALUE_FLOOR)
    gap = abs(primal.value - cross["min_value"]) / scale
    identity = abs(primal.value - (dual.value + x * y)) / scale
    checks = [
        CheckResult("first_order_condition", foc, FOC_TOL),
        CheckResult("inverse_marginal", inverse, FOC_TOL),
        CheckResult("complementarity", complementarity, COMPLEMENTARITY_TOL),
        CheckResult("product_martingale", product, PRODUCT_MARTINGALE_TOL),
        CheckResult("duality_gap", gap, DUALITY_GAP_TOL),
        CheckResult("conjugate_identity", identity, DUALITY_GAP_TOL),
    ]
    report = DualityReport(
        x=float(x), y=y, u=primal.value, v=dual.value, gap=gap, foc_residual=foc,
        inverse_residual=inverse, complementarity=complementarity, product_martingale=product,
        checks=checks, primal=primal, dual=dual, cross_check=cross)
    failed = [c.name for c in checks if not c.passed]
    if failed:
        logger.warning(f"Duality checks failed at x={x}: {failed}")
    else:
        logger.info(f"Duality checks passed at x={x} (gap {gap:.2e})")
    return report


def default_eps(market, sigma):
    """Largest one-step relative move of S at or below sigma, capped at 1 - lambda."""
    tree = market.tree
    owner = sigma.owner(tree)
    kids = np.arange(1, tree.size)
    below = kids[owner[tree.parent[kids]] >= 0]
    if below.size == 0:
        return 1.0 - market.lam
    moves = np.abs(market.price[below] / market.price[tree.parent[below]] - 1.0)
    return float(min(max(moves.max(), 1e-12), 1.0 - market.lam))


def _sigma_strategy(market, sigma, bond, shares):
    """
    Hold x bonds until sigma, switch to (bond, shares / S_sigma) there and
    liquidate at the next step.

    Returns:
        (strategy, x)
    """
    tree = market.tree
    buy = np.zeros(tree.size)
    sell = np.zeros(tree.size)
    for node in sigma.nodes:
        if tree.is_leaf[node]:
            continue
        vol = abs(shares) / market.price[node]
        kids = tree.children[node]
        if shares > 0:
            buy[node] = vol
            sell[kids] = vol
        else:
            sell[node] = vol
            buy[kids] = vol
    cost = shares if shares > 0 else (1.0 - market.lam) * shares
    return forced_liquidation(market, TradingStrategy(buy, sell)), bond + cost


def _strategy_check(market, d, sigma, bond, shares, label, tol):
    strat, x = _sigma_strategy(market, sigma, bond, shares)
    adm = is_admissible(market, strat, x)
    h = holdings(market, strat, x)
    value = deflated_value(market, h, d)
    drift = one_step_drift(market.tree, value)
    kind = classify_martingale(market.tree, value, tol=tol).kind
    return {
        "strategy": label,
        "x": x,
        "admissible": adm.admissible,
        "min_liquidation": adm.worst_value,
        "max_drift": float(drift.max()),
        "kind": kind,
        "supermartingale": kind in (MARTINGALE, SUPERMARTINGALE),
    }


def deflator_sandwich(market, d, sigma, eps=None, extra_strategies=0, slack=SANDWICH_SLACK):
    """
    Compare the compensator increments of (Y0, Y1) between sigma and every
    level up to the first exit of S / S_sigma from [1 - eps, 1 + eps]:

        (1-eps)(1-lam) S_sigma E[dA0] <= E[dA1] <= (1+eps) S_sigma E[dA0]

    Raises:
        PreconditionError: eps <= 0 or eps + lambda > 1
        DecompositionError: a component is not a supermartingale
    """
    tree = market.tree
    eps = default_eps(market, sigma) if eps is None else float(eps)
    if not eps > 0:
        raise PreconditionError(f"eps must be positive, got {eps}")
    if eps + market.lam > 1.0 + 1e-15:
        raise PreconditionError(f"eps + lambda = {eps + market.lam:.6g} exceeds 1")
    tol = COMPENSATOR_TOL * max(1.0, abs(d.root))
    dec0 = doob_decompose(tree, d.y0, tol=tol)
    dec1 = doob_decompose(tree, d.y1, tol=tol)
    owner = sigma.owner(tree)
    s_sigma = np.where(owner >= 0, market.price[np.maximum(owner, 0)], np.nan)
    ratio = np.where(owner >= 0, market.price / s_sigma, 1.0)
    tau_eps = first_crossing(tree, ratio, 1.0 - eps, 1.0 + eps, sigma)
    sig_nodes = np.array(sigma.sorted())
    rows = []
    worst = np.inf
    for k in range(1, tree.horizon + 1):
        tau = region_min(tree, tau_eps, region_shift(tree, sigma, k))
        inc0 = region_expectation(tree, dec0.compensator, tau)[sig_nodes] - dec0.compensator[sig_nodes]
        inc1 = region_expectation(tree, dec1.compensator, tau)[sig_nodes] - dec1.compensator[sig_nodes]
        s = market.price[sig_nodes]
        lower = inc1 - (1.0 - eps) * (1.0 - market.lam) * s * inc0
        upper = (1.0 + eps) * s * inc0 - inc1
        level_worst = float(min(lower.min(), upper.min()))
        worst = min(worst, level_worst)
        rows.append({"level": k, "min_lower_slack": float(lower.min()),
                     "min_upper_slack": float(upper.min())})
        if tau == tau_eps:
            break
    if not np.isfinite(worst):
        worst = 0.0
    strategies = [
        _strategy_check(market, d, sigma, -(1.0 - market.lam) * (1.0 - eps), 1.0, "long", tol),
        _strategy_check(market, d, sigma, 1.0 + eps, -1.0, "short", tol),
    ]
    for j in range(1, extra_strategies + 1):
        strategies.append(_strategy_check(market, d, sigma, 1.0 - 1.0 / j, 1.0 / j, f"long_1/{j}", tol))
        strategies.append(_strategy_check(market, d, sigma, 1.0 + 1.0 / j, -1.0 / j, f"short_1/{j}", tol))
    checks = [CheckResult("sandwich_slack", max(0.0, -worst), -slack)]
    for strat in strategies[:2]:
        checks.append(flag_check(f"{strat['strategy']}_strategy_admissible", strat["admissible"]))
        checks.append(flag_check(f"{strat['strategy']}_strategy_supermartingale", strat["supermartingale"]))
    return {
        "eps": eps,
        "sigma": sigma.sorted(),
        "tau_eps": tau_eps.sorted(),
        "min_slack": worst,
        "levels": rows,
        "strategies": strategies,
        "checks": [c.to_dict() for c in checks],
        "pass": all_passed(checks),
    }


def local_mart_equivalence(market, d, tol=COMPENSATOR_TOL):
    """Zero compensator of Y0 if and only if zero compensator of Y1."""
    if tol < 0:
        raise PreconditionError("tolerance must be non-negative")
    defl = is_deflator(market, d)
    if not defl.passed:
        return {"applicable": False, "reason": "input is not a supermartingale deflator",
                "deflator": defl.to_dict(), "pass": False}
    tree = market.tree
    slack = tol * max(1.0, abs(d.root))
    inc0 = doob_decompose(tree, d.y0, tol=slack).max_increment(tree)
    inc1 = doob_decompose(tree, d.y1, tol=slack).max_increment(tree)
    zero0 = inc0 <= slack
    zero1 = inc1 <= slack
    return {
        "applicable": True,
        "max_increment_y0": inc0,
        "max_increment_y1": inc1,
        "y0_local_martingale": zero0,
        "y1_local_martingale": zero1,
        "pass": zero0 == zero1,
    }


def positivity_martingale_check(market, spec, x, threshold=POSITIVITY_THRESHOLD, shift=None, opts=None):
    """
    Minimum liquidation value of the primal optimizer and the compensators of
    the dual optimizer. A minimum below threshold * x is flagged.

    The shifted variant solves at x - shift and adds the shift back as bonds,
    which keeps the liquidation value at least `shift`.
    """
    if not threshold > 0:
        raise PreconditionError("threshold must be positive")
    opts = opts or SolverOptions()
    tree = market.tree
    primal = solve_primal(market, spec, x, opts)
    liq = liquidation_value(market, primal.holdings)
    min_liq = float(liq[tree.non_leaves].min()) if tree.non_leaves.size else float(x)
    dual = solve_dual(market, spec, primal.marginal, opts)
    d = dual.deflator
    slack = COMPENSATOR_TOL * max(1.0, abs(d.root))
    inc0 = doob_decompose(tree, d.y0, tol=slack).max_increment(tree)
    inc1 = doob_decompose(tree, d.y1, tol=slack).max_increment(tree)
    shift = 0.1 * x if shift is None else float(shift)
    shifted = None
    if 0 < shift < x:
        lower = solve_primal(market, spec, x - shift, opts)
        lower_liq = liquidation_value(market, lower.holdings)
        shifted = float(lower_liq[tree.non_leaves].min()) + shift if tree.non_leaves.size else float(x)
    flagged = min_liq < threshold * x
    if flagged:
        logger.warning(f"Optimal liquidation value {min_liq:.3e} below threshold at x={x}")
    return {
        "x": float(x),
        "min_liquidation": min_liq,
        "threshold": threshold * x,
        "flagged": flagged,
        "compensator_y0": inc0,
        "compensator_y1": inc1,
        "compensators_vanish": bool(inc0 <= slack and inc1 <= slack),
        "shift": shift,
        "shifted_min_liquidation": shifted,
    }


@dataclass(frozen=True)
class ShadowPrice:
    price: np.ndarray
    provenance: dict

    def to_dict(self):
        return {"S_shadow": self.price.tolist(), "provenance": self.provenance}


def extract_shadow(market, dual):
    """
    Shadow price Z1 / Z0 of a dual solution.

    Raises:
        ExtractionError: the ratio leaves the bid-ask spread
    """
    z = dual.price_system
    if np.any(z.z0 <= 0):
        raise ExtractionError("first component of the price system is not strictly positive")
    ratio = z.z1 / z.z0
    band = SPREAD_ROUNDING * market.price
    below = market.bid - band - ratio
    above = ratio - market.ask - band
    if np.any(below > 0) or np.any(above > 0):
        node = int(np.argmax(np.maximum(below, above)))
        raise ExtractionError(f"shadow price leaves the spread at node {node}")
    price = np.clip(ratio, market.bid, market.ask)
    provenance = {"y": dual.y, "dual_value": dual.value, "lambda": market.lam}
    return ShadowPrice(price, provenance)


def verify_shadow(market, spec, x, shadow, value_tol=SHADOW_VALUE_TOL, wealth_tol=SHADOW_WEALTH_TOL,
                  opts=None, primal=None):
    """Re-solve the frictionless problem at the shadow price and compare."""
    if not x > 0:
        raise DomainError(f"initial endowment must be positive, got {x}")
    opts = opts or SolverOptions()
    frictionless = Market.build(market.tree, shadow.price, 0.0)
    with ThreadPoolExecutor(max_workers=2) as pool:
        shadow_job = pool.submit(solve_primal, frictionless, spec, x, opts)
        if primal is None:
            primal = pool.submit(solve_primal, market, spec, x, opts).result()
        shadow_sol = shadow_job.result()
    value_err = abs(shadow_sol.value - primal.value) / max(abs(primal.value), VALUE_FLOOR)
    wealth_err = float(np.max(np.abs(shadow_sol.terminal - primal.terminal) / primal.terminal))
    checks = [
        CheckResult("shadow_value", value_err, value_tol),
        CheckResult("shadow_wealth", wealth_err, wealth_tol),
    ]
    return {
        "u_frictional": primal.value,
        "u_shadow": shadow_sol.value,
        "value_error": value_err,
        "wealth_error": wealth_err,
        "checks": [c.to_dict() for c in checks],
        "pass": all_passed(checks),
    }
