"""
Stability experiments: perturb endowment, dual variable, utility and the
probability measure along a geometric schedule and watch value functions,
derivatives, optimizers and optimal dual processes converge.
"""

import json
import logging
import math
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config import SolverOptions, TILT_MIN_WEIGHT, MEASURE_CHANGE_TOL, SHADOW_WEALTH_TOL
from dual_solver import Deflator, DualSolution, PriceSystem, solve_dual, is_deflator, is_cps
from duality_lab import extract_shadow, verify_shadow, VALUE_FLOOR, SPREAD_ROUNDING
from errors import InputError, NumericError, TiltTooLargeError, PreconditionError
from preferences import UtilitySpec, perturbed_family
from primal_solver import solve_primal
from reports import CheckResult, all_passed

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

RATIO_TARGET = 0.1
ERROR_FLOOR = 1e-9
TV_HALVING_TOL = 0.1
DYNAMIC_VALUE_TOL = 1e-4
SHADOW_STABILITY_TOL = 1e-4
DENSITY_FLOOR = 1e-300
ROUND_TRIP_TOL = 1e-14


@dataclass(frozen=True)
class PerturbationSchedule:
    """
    Geometric schedule x_n = x(1 + r^n a), y_n = y(1 + r^n b), gamma_n from
    perturbed_family, tilt theta_n = r^n theta, for n = 0..N-1.
    """
    x: float = 1.0
    y: float = 1.0
    spec: UtilitySpec = field(default_factory=UtilitySpec)
    a: float = 0.0
    b: float = 0.0
    kappa: float = 0.0
    theta: object = 0.0
    n_steps: int = 10
    rate: float = 0.5
    lam_kappa: float = 0.0

    def __post_init__(self):
        if not (self.x > 0 and self.y > 0):
            raise InputError("schedule base x and y must be positive")
        if self.n_steps < 1:
            raise InputError("schedule needs at least one step")
        if not 0.0 < self.rate < 1.0:
            raise InputError("schedule rate must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data):
        known = {"x", "y", "utility", "a", "b", "kappa", "theta", "N", "rate", "lam_kappa"}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown schedule keys: {sorted(unknown)}")
        try:
            return cls(
                x=float(data.get("x", 1.0)),
                y=float(data.get("y", 1.0)),
                spec=UtilitySpec.parse(data.get("utility", "log")),
                a=float(data.get("a", 0.0)),
                b=float(data.get("b", 0.0)),
                kappa=float(data.get("kappa", 0.0)),
                theta=data.get("theta", 0.0),
                n_steps=int(data.get("N", 10)),
                rate=float(data.get("rate", 0.5)),
                lam_kappa=float(data.get("lam_kappa", 0.0)),
            )
        except (TypeError, ValueError) as e:
            raise InputError(f"invalid schedule: {e}") from e

    def to_dict(self):
        theta = self.theta.tolist() if isinstance(self.theta, np.ndarray) else self.theta
        return {"x": self.x, "y": self.y, "utility": self.spec.label, "a": self.a, "b": self.b,
                "kappa": self.kappa, "theta": theta, "N": self.n_steps, "rate": self.rate,
                "lam_kappa": self.lam_kappa}

    def weight(self, n):
        return self.rate ** n

    def x_n(self, n):
        return self.x * (1.0 + self.weight(n) * self.a)

    def y_n(self, n):
        return self.y * (1.0 + self.weight(n) * self.b)

    def utility(self, n):
        return perturbed_family(self.spec, n, self.kappa, self.rate)

    def theta_n(self, n):
        return self.weight(n) * np.asarray(self.theta, dtype=float)

    def lam_n(self, lam, n):
        return lam * (1.0 + self.weight(n) * self.lam_kappa)


def load_schedule(path):
    """Read a schedule from a JSON or TOML file."""
    try:
        if str(path).endswith('.toml'):
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        else:
            with open(path, 'r') as f:
                data = json.load(f)
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise InputError(f"cannot read schedule {path}: {e}") from e
    return PerturbationSchedule.from_dict(data)


@dataclass(frozen=True)
class MeasureTilt:
    """Density process of the tilted measure and the tilted tree."""
    density: np.ndarray
    tree: object
    tv: float

    @property
    def terminal(self):
        return self.density[self.tree.leaves]


def tilt_measure(tree, theta):
    """
    Multiply the child weights at each non-leaf node by exp(theta_k s_i),
    s_i running linearly from +1 to -1 over the children, and renormalize.

    Raises:
        TiltTooLargeError: a tilted weight underflows
    """
    nodes = tree.non_leaves
    theta = np.broadcast_to(np.asarray(theta, dtype=float), nodes.shape)
    cond = np.array(tree.cond_prob, dtype=float)
    for node, th in zip(nodes, theta):
        if th == 0.0:
            continue
        kids = tree.children[node]
        k = kids.size
        signs = np.linspace(1.0, -1.0, k) if k > 1 else np.zeros(1)
        weights = cond[kids] * np.exp(th * signs)
        weights /= weights.sum()
        if weights.min() < TILT_MIN_WEIGHT:
            raise TiltTooLargeError(f"tilt {th:.3g} at node {node} drives a weight below {TILT_MIN_WEIGHT}")
        cond[kids] = weights
    tilted = tree.with_probabilities(cond)
    density = tilted.prob / tree.prob
    tv = 0.5 * float(np.abs(tilted.leaf_prob - tree.leaf_prob).sum())
    return MeasureTilt(density, tilted, tv)


def deflator_measure_change(market, d, tilt, direction="to_base"):
    """
    Move a deflator between the tilted measure and the base measure.

    'to_base' multiplies both components by the density process, 'to_tilted'
    divides by it.

    Raises:
        NumericError: density too close to zero to divide by
    """
    if direction == "to_base":
        return Deflator(d.y0 * tilt.density, d.y1 * tilt.density)
    if direction == "to_tilted":
        if np.any(tilt.density < DENSITY_FLOOR):
            raise NumericError("density process vanishes; cannot divide")
        return Deflator(d.y0 / tilt.density, d.y1 / tilt.density)
    raise InputError(f"unknown direction '{direction}'")


def _instance(market, schedule, n):
    tilt = tilt_measure(market.tree, schedule.theta_n(n))
    lam = schedule.lam_n(market.lam, n)
    return market.with_tree(tilt.tree).with_price(market.price, lam), tilt


def _l0_distance(tree, a, b):
    """E_P[|a - b| ^ 1] over the leaves."""
    return float(np.dot(tree.leaf_prob, np.minimum(np.abs(a - b), 1.0)))


def fit_decay_rate(errors):
    """Per-step geometric decay factor fitted with numpy.polyfit; None if undetermined."""
    errors = np.asarray(errors, dtype=float)
    steps = np.arange(errors.size)
    mask = errors > ERROR_FLOOR
    if mask.sum() < 2:
        return None
    slope = np.polyfit(steps[mask], np.log(errors[mask]), 1)[0]
    return float(math.exp(slope))


def _ratio_check(name, column):
    first, last = column[0], column[-1]
    if first <= ERROR_FLOOR:
        return CheckResult(name, 0.0 if last <= ERROR_FLOOR else math.inf, RATIO_TARGET)
    return CheckResult(name, last / first, RATIO_TARGET)


def _tv_check(tvs, rate):
    ratios = [b / a for a, b in zip(tvs[:-1], tvs[1:]) if a > ERROR_FLOOR]
    if not ratios:
        return CheckResult("tv_halving", 0.0, TV_HALVING_TOL)
    return CheckResult("tv_halving", max(abs(r / rate - 1.0) for r in ratios), TV_HALVING_TOL)


@dataclass
class StabilityReport:
    rows: list
    rates: dict
    checks: list
    base: dict

    @property
    def passed(self):
        return all_passed(self.checks)

    def to_dict(self):
        return {"base": self.base, "rates": self.rates, "rows": self.rows,
                "checks": [c.to_dict() for c in self.checks], "pass": self.passed}


def _warn_experimental(schedule):
    if schedule.lam_kappa:
        logger.warning("Transaction-cost perturbation is experimental and not covered by the checks")


def run_static(market, schedule, opts=None, parallel=1):
    """Solve the perturbed primal and dual problems for every n and measure the errors."""
    opts = opts or SolverOptions()
    _warn_experimental(schedule)
    tree = market.tree
    base_primal = solve_primal(market, schedule.spec, schedule.x, opts)
    base_dual = solve_dual(market, schedule.spec, schedule.y, opts)

    def solve_step(n):
        inst, tilt = _instance(market, schedule, n)
        spec_n = schedule.utility(n)
        primal = solve_primal(inst, spec_n, schedule.x_n(n), opts)
        dual = solve_dual(inst, spec_n, schedule.y_n(n), opts)
        return n, tilt, spec_n, primal, dual

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        results = list(pool.map(solve_step, range(schedule.n_steps)))
    rows = []
    for n, tilt, spec_n, primal, dual in results:
        rows.append({
            "n": n,
            "x_n": schedule.x_n(n),
            "y_n": schedule.y_n(n),
            "gamma_n": spec_n.gamma,
            "tv": tilt.tv,
            "u_n": primal.value,
            "v_n": dual.value,
            "du_n": primal.marginal,
            "dv_n": dual.marginal,
            "err_u": abs(primal.value - base_primal.value),
            "err_v": abs(dual.value - base_dual.value),
            "err_du": abs(primal.marginal - base_primal.marginal),
            "err_dv": abs(dual.marginal - base_dual.marginal),
            "dist_g": _l0_distance(tree, primal.terminal, base_primal.terminal),
            "dist_h": _l0_distance(tree, dual.terminal, base_dual.terminal),
        })
    columns = ["err_u", "err_v", "err_du", "err_dv", "dist_g", "dist_h"]
    rates = {c: fit_decay_rate([r[c] for r in rows]) for c in columns + ["tv"]}
    checks = []
    if schedule.n_steps >= 10:
        checks = [_ratio_check(c, [r[c] for r in rows]) for c in columns]
    checks.append(_tv_check([r["tv"] for r in rows], schedule.rate))
    base = {"u": base_primal.value, "v": base_dual.value, "du": base_primal.marginal, "dv": base_dual.marginal}
    logger.info(f"Static stability over {schedule.n_steps} steps: rates {rates}")
    return StabilityReport(rows, rates, checks, base)


def measure_change_checks(market, dual, tilt, tol=MEASURE_CHANGE_TOL):
    """A tilted-measure optimal price system moved to the base measure, and back."""
    moved = deflator_measure_change(market, dual.deflator, tilt, "to_base")
    back = deflator_measure_change(market, moved, tilt, "to_tilted")
    scale = max(1.0, float(np.max(np.abs(dual.deflator.y0))), float(np.max(np.abs(dual.deflator.y1))))
    as_cps = is_cps(market, PriceSystem(moved.y0 / dual.y, moved.y1 / dual.y), tol=tol)
    as_defl = is_deflator(market, moved, tol=tol * max(1.0, abs(dual.y)))
    round_trip = max(float(np.max(np.abs(back.y0 - dual.deflator.y0))),
                     float(np.max(np.abs(back.y1 - dual.deflator.y1)))) / scale
    return {"cps": as_cps.to_dict(), "deflator": as_defl.to_dict(), "round_trip": round_trip}


def uiz_diagnostic(market, schedule, z0, y):
    """sup_n E_P[Z_n V_n^+(y Z0_T / Z_n)] over the schedule; finite on a finite tree."""
    tree = market.tree
    z_leaf = np.asarray(z0, dtype=float)[tree.leaves]
    values = []
    for n in range(schedule.n_steps):
        tilt = tilt_measure(tree, schedule.theta_n(n))
        dens = tilt.terminal
        spec_n = schedule.utility(n)
        v_plus = np.maximum(spec_n.V(y * z_leaf / dens), 0.0)
        values.append(float(np.dot(tree.leaf_prob, dens * v_plus)))
    sup = max(values)
    return {"values": values, "sup": sup, "argmax": int(np.argmax(values)), "finite": bool(np.isfinite(sup))}


def _cesaro(calibrated, n, mode):
    start = 0 if mode == "full" else math.ceil(n / 2)
    window = calibrated[start:n + 1]
    return (np.mean([c.y0 for c in window], axis=0), np.mean([c.y1 for c in window], axis=0))


def run_dynamic(market, schedule, opts=None, parallel=1, cesaro="window"):
    """
    Map each perturbed optimal dual process to the base measure, average the
    calibrated sequence and test the limit as an optimal dual process at y.
    """
    if cesaro not in ("window", "full"):
        raise InputError(f"unknown averaging mode '{cesaro}'")
    opts = opts or SolverOptions()
    _warn_experimental(schedule)
    tree = market.tree
    y = schedule.y
    base = solve_dual(market, schedule.spec, y, opts)

    def solve_step(n):
        inst, tilt = _instance(market, schedule, n)
        dual = solve_dual(inst, schedule.utility(n), schedule.y_n(n), opts)
        return n, tilt, dual

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        results = list(pool.map(solve_step, range(schedule.n_steps)))
    mapped = []
    calibrated = []
    change = []
    for n, tilt, dual in results:
        moved = deflator_measure_change(market, dual.deflator, tilt, "to_base")
        mapped.append(moved)
        calibrated.append(moved.scaled(1.0 / schedule.y_n(n)))
        change.append(measure_change_checks(market, dual, tilt))
    rows = []
    averages = []
    for n in range(schedule.n_steps):
        c0, c1 = _cesaro(calibrated, n, cesaro)
        averages.append((c0, c1))
        rows.append({
            "n": n,
            "terminal_deviation": _l0_distance(tree, mapped[n].y0[tree.leaves], base.terminal),
            "cesaro_deviation": _l0_distance(tree, y * c0[tree.leaves], base.terminal),
            "round_trip": change[n]["round_trip"],
        })
    last0, last1 = averages[-1]
    for n, (c0, c1) in enumerate(averages):
        rows[n]["cauchy"] = float(max(np.max(np.abs(c0 - last0)), np.max(np.abs(c1 - last1)))) * y
    limit = Deflator(y * last0, y * last1)
    defl = is_deflator(market, limit)
    limit_value = float(np.dot(tree.leaf_prob, schedule.spec.V(limit.y0[tree.leaves])))
    value_err = abs(limit_value - base.value) / max(abs(base.value), VALUE_FLOOR)
    tail = rows[schedule.n_steps // 2:]
    cauchy = max(r["cauchy"] for r in tail)
    first = rows[0]["terminal_deviation"]
    last = rows[-1]["cesaro_deviation"]
    checks = [
        CheckResult("limit_is_deflator", 0.0 if defl.passed else 1.0, 0.0),
        CheckResult("limit_dual_value", value_err, DYNAMIC_VALUE_TOL),
        CheckResult("terminal_convergence",
                    (0.0 if last <= ERROR_FLOOR else math.inf) if first <= ERROR_FLOOR else last / first,
                    RATIO_TARGET),
        CheckResult("measure_change_round_trip", max(c["round_trip"] for c in change), ROUND_TRIP_TOL),
        CheckResult("measure_change_feasible",
                    0.0 if all(c["cps"]["feasible"] and c["deflator"]["passed"] for c in change) else 1.0, 0.0),
    ]
    if cauchy > 10 * ERROR_FLOOR and rows[-1]["cesaro_deviation"] > ERROR_FLOOR:
        logger.warning(f"Averaged sequence tail still moves by {cauchy:.3e}")
    return {
        "y": y,
        "v": base.value,
        "limit_value": limit_value,
        "limit": limit,
        "deflator": defl.to_dict(),
        "cauchy_tail": cauchy,
        "rows": rows,
        "mapped": mapped,
        "checks": checks,
        "pass": all_passed(checks),
    }


def shadow_stability(market, schedule, opts=None, parallel=1, dynamic=None):
    """Shadow prices of the mapped optimal dual processes and of their averaged limit."""
    opts = opts or SolverOptions()
    dynamic = dynamic or run_dynamic(market, schedule, opts, parallel)
    limit = dynamic["limit"]
    if np.any(limit.y0 <= 0):
        raise PreconditionError("averaged limit has a non-positive first component")
    band = SPREAD_ROUNDING * market.price
    limit_price = limit.y1 / limit.y0
    violations = 0
    rows = []
    for n, d in enumerate(dynamic["mapped"]):
        s_n = d.y1 / d.y0
        violations += int(np.sum((s_n < market.bid - band) | (s_n > market.ask + band)))
        rows.append({"n": n, "max_deviation": float(np.max(np.abs(s_n - limit_price) / limit_price))})
    violations += int(np.sum((limit_price < market.bid - band) | (limit_price > market.ask + band)))
    base = solve_dual(market, schedule.spec, schedule.y, opts)
    x = -base.marginal
    limit_dual = DualSolution(PriceSystem(limit.y0 / schedule.y, limit.y1 / schedule.y), schedule.y,
                            limit.y0[market.tree.leaves], dynamic["limit_value"], base.marginal)
    shadow = extract_shadow(market, limit_dual)
    verified = verify_shadow(market, schedule.spec, x, shadow, SHADOW_STABILITY_TOL, SHADOW_WEALTH_TOL, opts)
    checks = [
        CheckResult("spread_violations", float(violations), 0.0),
        CheckResult("limit_shadow_verified", 0.0 if verified["pass"] else 1.0, 0.0),
    ]
    return {
        "x": x,
        "rows": rows,
        "shadow": shadow.to_dict(),
        "verify": verified,
        "checks": checks,
        "pass": all_passed(checks),
    }
