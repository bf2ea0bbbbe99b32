"""
Dual problem: minimize E[V(y Z0_T)] over consistent price systems.

The price system is carried by leaf masses of an equivalent measure Q and of
W = Z1 * P. Node values are sub-tree sums, so both Z0 = Q/P and Z1 = W/P are
martingales by construction; the conditional one-step densities are Q(c)/Q(n).
The bid-ask constraints are linear in (Q, W). A frictionless market drops W
and imposes the martingale property of S under Q as linear equalities.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from barrier import BarrierProblem, BarrierNewton
from config import SolverOptions, MARTINGALE_TOL
from errors import DomainError, InfeasibleMarketError, SolverError
from tree_core import one_step_drift

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

MIN_MARGIN = 1e-12


@dataclass(frozen=True)
class PriceSystem:
    """Martingale pair (Z0, Z1) with Z1 / Z0 inside the bid-ask spread."""
    z0: np.ndarray
    z1: np.ndarray

    @property
    def ratio(self):
        return self.z1 / self.z0

    def scaled(self, y):
        return Deflator(y * self.z0, y * self.z1)

    def to_dict(self):
        return {"Z0": self.z0.tolist(), "Z1": self.z1.tolist()}


@dataclass(frozen=True)
class Deflator:
    """Supermartingale pair (Y0, Y1); Y0 at the root is y."""
    y0: np.ndarray
    y1: np.ndarray

    @property
    def root(self):
        return float(self.y0[0])

    @property
    def ratio(self):
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(self.y0 > 0, self.y1 / self.y0, np.nan)

    def scaled(self, c):
        return Deflator(self.y0 * c, self.y1 * c)

    def to_dict(self):
        return {"Y0": self.y0.tolist(), "Y1": self.y1.tolist()}


@dataclass
class DualSolution:
    price_system: PriceSystem
    y: float
    terminal: np.ndarray
    value: float
    marginal: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def deflator(self):
        return self.price_system.scaled(self.y)

    def to_dict(self):
        return {
            "y": self.y,
            "value": self.value,
            "marginal": self.marginal,
            "terminal": self.terminal.tolist(),
            "price_system": self.price_system.to_dict(),
            "diagnostics": self.diagnostics,
        }


def _intersect(a, b):
    lo, lo_closed = (a[0], a[2]) if a[0] > b[0] else (b[0], b[2]) if b[0] > a[0] else (a[0], a[2] and b[2])
    hi, hi_closed = (a[1], a[3]) if a[1] < b[1] else (b[1], b[3]) if b[1] < a[1] else (a[1], a[3] and b[3])
    return lo, hi, lo_closed, hi_closed


def _empty(iv):
    lo, hi, lo_closed, hi_closed = iv
    return lo > hi or (lo == hi and not (lo_closed and hi_closed))


def arbitrage_certificate(market):
    """
    Backward recursion of the prices a strictly consistent price system can
    take at each node. Returns None when one exists, otherwise the deepest
    node whose spread misses every attainable conditional expectation.
    """
    tree = market.tree
    frictionless = market.frictionless
    own = []
    for node in range(tree.size):
        if frictionless:
            own.append((market.price[node], market.price[node], True, True))
        else:
            own.append((market.bid[node], market.ask[node], False, False))
    attain = [None] * tree.size
    for node in tree.order[::-1]:
        kids = tree.children[node]
        if kids.size == 0:
            attain[node] = own[node]
            continue
        lows = [attain[c][0] for c in kids]
        highs = [attain[c][1] for c in kids]
        lo, hi = min(lows), max(highs)
        lo_closed = all(attain[c][0] == lo and attain[c][2] for c in kids)
        hi_closed = all(attain[c][1] == hi and attain[c][3] for c in kids)
        from_children = (lo, hi, lo_closed, hi_closed)
        merged = _intersect(own[node], from_children)
        if _empty(merged):
            return {
                "node": int(node),
                "time": int(tree.time[node]),
                "spread": [float(own[node][0]), float(own[node][1])],
                "attainable": [float(lo), float(hi)],
                "reason": "no martingale selector inside the spread",
            }
        attain[node] = merged
    return None


class _DualProgram:
    """Constraint data of the dual problem for one market."""

    def __init__(self, market):
        self.market = market
        tree = market.tree
        self.tree = tree
        self.n_leaf = tree.leaves.size
        self.G = sp.csr_matrix(tree.leaf_matrix)
        self.p_leaf = tree.leaf_prob
        if market.frictionless:
            self.n_vars = self.n_leaf
            self.A = sp.identity(self.n_leaf, format='csr')
            self.b = np.zeros(self.n_leaf)
            rows = []
            for node in tree.non_leaves:
                kids = tree.children[node]
                row = np.asarray(market.price[kids] @ tree.leaf_matrix[kids]).ravel() \
                    - market.price[node] * tree.leaf_matrix[node]
                if np.max(np.abs(row)) > 1e-14 * market.price.max():
                    rows.append(row)
            self.E = sp.csr_matrix(np.vstack([np.ones(self.n_leaf)] + rows))
        else:
            G = self.G
            bid = sp.diags(market.bid)
            ask = sp.diags(market.ask)
            zero = sp.csr_matrix((self.n_leaf, self.n_leaf))
            self.n_vars = 2 * self.n_leaf
            self.A = sp.vstack([
                sp.hstack([-bid @ G, G]),
                sp.hstack([ask @ G, -G]),
                sp.hstack([sp.identity(self.n_leaf), zero]),
            ]).tocsr()
            self.b = np.zeros(self.A.shape[0])
            self.E = sp.csr_matrix(np.concatenate([np.ones(self.n_leaf), np.zeros(self.n_leaf)])[None, :])
        self.e = np.zeros(self.E.shape[0])
        self.e[0] = 1.0

    def start(self):
        """Phase I: maximize the common margin of all inequalities."""
        tree = self.tree
        if self.market.frictionless:
            margin = self.p_leaf
        else:
            width = (self.market.ask - self.market.bid) * tree.prob
            margin = np.concatenate([width, width, self.p_leaf])
        a_ub = sp.hstack([-self.A, sp.csr_matrix(margin[:, None])]).tocsr()
        a_eq = sp.hstack([self.E, sp.csr_matrix((self.E.shape[0], 1))]).tocsr()
        cost = np.zeros(self.n_vars + 1)
        cost[-1] = -1.0
        bounds = [(None, None)] * self.n_vars + [(None, 1.0)]
        res = linprog(cost, A_ub=a_ub, b_ub=self.b, A_eq=a_eq, b_eq=self.e, bounds=bounds, method='highs')
        if res.status != 0 or -res.fun <= MIN_MARGIN:
            return None, (0.0 if res.status != 0 else -res.fun)
        return res.x[:-1], -res.fun

    def system(self, z):
        """Node values (Z0, Z1) from leaf masses."""
        tree = self.tree
        q_node = self.G @ z[:self.n_leaf]
        if self.market.frictionless:
            w_node = self.market.price * q_node
        else:
            w_node = self.G @ z[self.n_leaf:]
        return PriceSystem(q_node / tree.prob, w_node / tree.prob)


def solve_dual(market, spec, y, opts=None):
    """
    Minimize E[V(y Z0_T)] over consistent price systems.

    Raises:
        DomainError: y <= 0
        InfeasibleMarketError: no strictly consistent price system
        SolverError: non-convergence
    """
    if not y > 0:
        raise DomainError(f"dual variable must be positive, got {y}")
    opts = opts or SolverOptions()
    certificate = arbitrage_certificate(market)
    if certificate is not None:
        raise InfeasibleMarketError(
            f"no consistent price system: node {certificate['node']} admits arbitrage", certificate)
    prog = _DualProgram(market)
    z0, margin = prog.start()
    if z0 is None:
        raise InfeasibleMarketError(
            "no strictly interior consistent price system", {"node": None, "margin": margin,
                                                              "reason": "phase-I margin vanished"})
    p = prog.p_leaf
    n_leaf = prog.n_leaf

    def objective(z):
        return float(np.dot(p, spec.V(y * z[:n_leaf] / p)))

    def gradient(z):
        grad = np.zeros_like(z)
        grad[:n_leaf] = y * spec.dV(y * z[:n_leaf] / p)
        return grad

    def hessian_diag(z):
        diag = np.zeros_like(z)
        diag[:n_leaf] = y * y / p * spec.d2V(y * z[:n_leaf] / p)
        return diag

    problem = BarrierProblem(objective, gradient, hessian_diag, prog.A, prog.b, prog.E, prog.e)
    result = BarrierNewton(problem, opts).solve(z0)
    system = prog.system(result.z)
    z_leaf = system.z0[market.tree.leaves]
    terminal = y * z_leaf
    value = float(np.dot(p, spec.V(terminal)))
    marginal = float(np.dot(p, z_leaf * spec.dV(terminal)))
    diagnostics = result.diagnostics()
    diagnostics["phase_one_margin"] = float(margin)
    logger.info(f"Dual solve: {market.tree.size} nodes, lambda={market.lam}, {spec.label}, y={y:.6g}: "
                f"v={value:.10g} after {result.iterations} Newton steps")
    return DualSolution(system, float(y), terminal, value, marginal, diagnostics)


@dataclass(frozen=True)
class CpsReport:
    feasible: bool
    martingale_residual: float
    spread_violation: float
    positive: bool
    root_value: float

    def to_dict(self):
        return {
            "feasible": self.feasible,
            "martingale_residual": self.martingale_residual,
            "spread_violation": self.spread_violation,
            "positive": self.positive,
            "root_value": self.root_value,
        }


def _spread_violation(market, num, den):
    mask = den > 0
    ratio = num[mask] / den[mask]
    bid, ask = market.bid[mask], market.ask[mask]
    excess = np.maximum(np.maximum(bid - ratio, ratio - ask), 0.0) / market.price[mask]
    return float(excess.max()) if excess.size else 0.0


def is_cps(market, z, tol=MARTINGALE_TOL):
    """Z0 starting at 1, martingale property of both components, positivity, spread containment."""
    tree = market.tree
    resid = max(float(np.max(np.abs(one_step_drift(tree, z.z0)))),
                float(np.max(np.abs(one_step_drift(tree, z.z1)))))
    positive = bool(np.all(z.z0 > 0) and np.all(z.z1 >= 0))
    spread = _spread_violation(market, z.z1, z.z0)
    normalized = abs(float(z.z0[0]) - 1.0) <= tol
    feasible = positive and normalized and resid <= tol and spread <= tol
    return CpsReport(feasible, resid, spread, positive, float(z.z0[0]))


@dataclass(frozen=True)
class DeflatorReport:
    passed: bool
    drift_y0: float
    drift_y1: float
    spread_violation: float
    cone_violation: float
    worst_node: int

    def to_dict(self):
        return {
            "passed": self.passed,
            "drift_y0": self.drift_y0,
            "drift_y1": self.drift_y1,
            "spread_violation": self.spread_violation,
            "cone_violation": self.cone_violation,
            "worst_node": self.worst_node,
        }


def is_deflator(market, d, tol=MARTINGALE_TOL):
    """
    Supermartingale deflator test on a tree: both components are
    supermartingales, the ratio lies in the spread, and the deflated value of
    every generator of the solvency cone (bond, long stock at zero liquidation
    value, short stock at zero liquidation value) loses value in one step.
    """
    tree = market.tree
    d0 = one_step_drift(tree, d.y0)
    d1 = one_step_drift(tree, d.y1)
    nodes = tree.non_leaves
    cone = np.vstack([
        d0[nodes],
        -market.bid[nodes] * d0[nodes] + d1[nodes],
        market.ask[nodes] * d0[nodes] - d1[nodes],
    ])
    cone_worst = cone.max(axis=0) if nodes.size else np.zeros(0)
    cone_violation = float(cone_worst.max()) if nodes.size else 0.0
    worst_node = int(nodes[np.argmax(cone_worst)]) if nodes.size else 0
    drift0 = float(d0.max())
    drift1 = float(d1.max())
    spread = _spread_violation(market, d.y1, d.y0)
    nonneg = bool(np.all(d.y0 >= 0) and np.all(d.y1 >= 0))
    passed = nonneg and drift0 <= tol and drift1 <= tol and spread <= tol and cone_violation <= tol
    return DeflatorReport(passed, drift0, drift1, spread, cone_violation, worst_node)


def v_curve(market, spec, ys, opts=None, parallel=1, rel_step=1e-3):
    """Batch dual solves with envelope and central-difference slopes."""
    ys = [float(y) for y in ys]
    if any(y <= 0 for y in ys) or ys != sorted(ys):
        raise DomainError("dual variables must be positive and sorted")
    points = []
    for y in ys:
        h = rel_step * y
        points.extend([y - h, y, y + h])
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        sols = list(pool.map(lambda y: solve_dual(market, spec, y, opts), points))
    rows = []
    for i, y in enumerate(ys):
        lo, mid, hi = sols[3 * i:3 * i + 3]
        rows.append({
            "y": y,
            "v": mid.value,
            "dv_kkt": mid.marginal,
            "dv_fd": (hi.value - lo.value) / (2.0 * rel_step * y),
        })
    return rows


def conjugate_cross_check(market, spec, x, primal, opts=None, log_step=1e-2):
    """
    Compare u(x) with min_y [v(y) + xy] over a log-grid around y* = u'(x),
    refined by a parabola through the three grid values.
    """
    y_star = primal.marginal
    if not y_star > 0:
        raise SolverError("primal marginal value is not positive", diagnostics={"marginal": y_star})
    cache = {}

    def conj(y):
        if y not in cache:
            cache[y] = solve_dual(market, spec, y, opts).value + x * y
        return cache[y]

    logs = np.log(y_star) + np.array([-log_step, 0.0, log_step])
    vals = np.array([conj(float(np.exp(s))) for s in logs])
    curv = vals[0] - 2.0 * vals[1] + vals[2]
    if curv > 0:
        shift = 0.5 * log_step * (vals[0] - vals[2]) / curv
        conj(float(np.exp(logs[1] + np.clip(shift, -log_step, log_step))))
    y_min = min(cache, key=cache.get)
    best = cache[y_min]
    gap = abs(primal.value - best)
    return {
        "u": primal.value,
        "y_star": y_star,
        "conjugate_at_y_star": cache[float(np.exp(logs[1]))],
        "min_value": best,
        "y_min": y_min,
        "gap": gap,
        "relative_gap": gap / max(abs(primal.value), 1e-12),
    }
