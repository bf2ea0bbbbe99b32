"""
Primal problem: maximize E[U(terminal liquidation value)] over admissible
self-financing strategies on a scenario tree.

Decision variables are per-node trade volumes (buy/sell, or a single net
trade when the market is frictionless) plus one terminal-wealth variable per
leaf bounded by both leaf liquidation expressions. All constraints are linear,
so the problem goes straight to the barrier Newton engine.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from barrier import BarrierProblem, BarrierNewton
from config import SolverOptions, DEGENERATE_WEALTH
from errors import DomainError, PreconditionError, SolverError
from market import TradingStrategy, holdings, forced_liquidation

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_NODES = 3


@dataclass
class PrimalSolution:
    strategy: TradingStrategy
    terminal: np.ndarray
    value: float
    marginal: float
    x: float
    holdings: object = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "x": self.x,
            "value": self.value,
            "marginal": self.marginal,
            "terminal_wealth": self.terminal.tolist(),
            "strategy": self.strategy.to_dict(),
            "holdings": self.holdings.to_dict() if self.holdings is not None else None,
            "diagnostics": self.diagnostics,
        }


def _ancestor_rows(tree, trading):
    """Sparse N x K matrix with a 1 where trading node k lies on the path to node n."""
    col = {int(n): k for k, n in enumerate(trading)}
    rows, cols = [], []
    members = [[] for _ in range(tree.size)]
    for node in tree.order:
        par = tree.parent[node]
        members[node] = list(members[par]) if par >= 0 else []
        if node in col:
            members[node].append(col[node])
        rows.extend([node] * len(members[node]))
        cols.extend(members[node])
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(tree.size, len(trading)))


class _PrimalProgram:
    """Linear constraint data of the primal problem for one market and endowment."""

    def __init__(self, market, x):
        self.market = market
        self.x = x
        tree = market.tree
        self.trading = tree.non_leaves
        self.leaves = tree.leaves
        self.anc = _ancestor_rows(tree, self.trading)
        price_k = market.price[self.trading]
        if market.frictionless:
            # one free net-trade column per trading node
            self.share = np.ones(len(self.trading))
            self.cash = -price_k
            self.n_trade = len(self.trading)
        else:
            self.share = np.concatenate([np.ones(len(self.trading)), -np.ones(len(self.trading))])
            self.cash = np.concatenate([-price_k, market.bid[self.trading]])
            self.n_trade = 2 * len(self.trading)
        self.n_wealth = len(self.leaves)
        self.n_vars = self.n_trade + self.n_wealth
        self._build_constraints()

    def _trade_block(self):
        if self.market.frictionless:
            return self.anc
        return sp.hstack([self.anc, self.anc]).tocsr()

    def _liquidation_rows(self, nodes, prices):
        """Rows of x + sum(cash + price * share) over trades on the path to each node."""
        block = self._trade_block()[nodes]
        cash = sp.diags(self.cash)
        share = sp.diags(self.share)
        return (block @ cash + sp.diags(prices) @ block @ share).tocsr()

    def _build_constraints(self):
        market = self.market
        tree = market.tree
        blocks, offsets = [], []
        n_trade, n_wealth = self.n_trade, self.n_wealth
        zeros_w = lambda rows: sp.csr_matrix((rows, n_wealth))
        if not market.frictionless:
            blocks.append(sp.hstack([sp.identity(n_trade), zeros_w(n_trade)]))
            offsets.append(np.zeros(n_trade))
        price_rows = [market.bid] if market.frictionless else [market.bid, market.ask]
        for prices in price_rows:
            rows = self._liquidation_rows(self.trading, prices[self.trading])
            blocks.append(sp.hstack([rows, zeros_w(len(self.trading))]))
            offsets.append(np.full(len(self.trading), self.x))
        parents = tree.parent[self.leaves]
        for prices in price_rows:
            rows = self._liquidation_rows(parents, prices[self.leaves])
            blocks.append(sp.hstack([rows, -sp.identity(n_wealth)]))
            offsets.append(np.full(n_wealth, self.x))
        blocks.append(sp.hstack([sp.csr_matrix((n_wealth, n_trade)), sp.identity(n_wealth)]))
        offsets.append(np.zeros(n_wealth))
        self.A = sp.vstack(blocks).tocsr()
        self.b = np.concatenate(offsets)
        self.budget_rows = self.b != 0.0

    def start(self, start_eps):
        z = np.zeros(self.n_vars)
        if not self.market.frictionless:
            eps = start_eps * self.x / self.market.price[self.trading]
            z[:self.n_trade] = np.concatenate([eps, eps])
        slack = self.A[:, :self.n_trade] @ z[:self.n_trade] + self.b
        n_w = self.n_wealth
        leaf_slack = slack[-3 * n_w:-n_w] if not self.market.frictionless else slack[-2 * n_w:-n_w]
        leaf_slack = leaf_slack.reshape(-1, n_w).min(axis=0)
        z[self.n_trade:] = 0.5 * leaf_slack
        return z

    def strategy(self, z):
        """Netted strategy with forced liquidation at the leaves."""
        tree = self.market.tree
        k = len(self.trading)
        buy = np.zeros(tree.size)
        sell = np.zeros(tree.size)
        if self.market.frictionless:
            net = z[:k]
            buy[self.trading] = np.maximum(net, 0.0)
            sell[self.trading] = np.maximum(-net, 0.0)
        else:
            buy[self.trading] = z[:k]
            sell[self.trading] = z[k:2 * k]
        strat = TradingStrategy(buy, sell).netted()
        return forced_liquidation(self.market, strat)


def solve_primal(market, spec, x, opts=None):
    """
    Maximize expected utility of terminal wealth from endowment x.

    Returns:
        PrimalSolution with the netted optimal strategy, leaf wealth, value
        and the marginal value read off the budget multipliers.

    Raises:
        DomainError: x <= 0
        SolverError: non-convergence or degenerate terminal wealth
    """
    if not x > 0:
        raise DomainError(f"initial endowment must be positive, got {x}")
    opts = opts or SolverOptions()
    tree = market.tree
    if tree.non_leaves.size == 0:
        wealth = np.full(tree.leaves.size, float(x))
        strat = TradingStrategy.zero(tree)
        return PrimalSolution(strat, wealth, float(spec.U(x)), float(spec.dU(x)), float(x),
                              holdings(market, strat, x), {"iterations": 0})

    prog = _PrimalProgram(market, float(x))
    p_leaf = tree.leaf_prob
    n_trade = prog.n_trade

    def objective(z):
        return -float(np.dot(p_leaf, spec.U(z[n_trade:])))

    def gradient(z):
        grad = np.zeros_like(z)
        grad[n_trade:] = -p_leaf * spec.dU(z[n_trade:])
        return grad

    def hessian_diag(z):
        diag = np.zeros_like(z)
        diag[n_trade:] = -p_leaf * spec.d2U(z[n_trade:])
        return diag

    problem = BarrierProblem(objective, gradient, hessian_diag, prog.A, prog.b)
    result = BarrierNewton(problem, opts).solve(prog.start(opts.start_eps))

    strat = prog.strategy(result.z)
    hold = holdings(market, strat, x)
    wealth = hold.bond[tree.leaves]
    if np.any(wealth < DEGENERATE_WEALTH * x):
        raise SolverError(
            f"terminal wealth {wealth.min():.3e} below degenerate level", best_iterate=result.z,
            diagnostics=result.diagnostics())
    marginal = float(np.sum(result.multipliers[prog.budget_rows]))
    value = float(np.dot(p_leaf, spec.U(wealth)))
    diagnostics = result.diagnostics()
    logger.info(f"Primal solve: {tree.size} nodes, lambda={market.lam}, {spec.label}, x={x}: "
                f"u={value:.10g} after {result.iterations} Newton steps")
    return PrimalSolution(strat, wealth, value, marginal, float(x), hold, diagnostics)


def brute_force_primal(market, spec, x, grid_size=41, refine=8):
    """
    Grid search over post-trade stock holdings at each trading node.

    Raises:
        PreconditionError: more than three trading nodes
    """
    if not x > 0:
        raise DomainError(f"initial endowment must be positive, got {x}")
    tree = market.tree
    trading = tree.non_leaves
    if trading.size > BRUTE_FORCE_MAX_NODES:
        raise PreconditionError(
            f"brute force limited to {BRUTE_FORCE_MAX_NODES} trading nodes, tree has {trading.size}")
    if trading.size == 0:
        return float(spec.U(x))
    index = {int(n): k for k, n in enumerate(trading)}
    par_idx = np.array([index.get(int(tree.parent[n]), -1) for n in trading])
    leaf_par = np.array([index[int(tree.parent[leaf])] for leaf in tree.leaves])
    order = np.argsort(tree.time[trading], kind="stable")
    ask_k, bid_k = market.ask[trading], market.bid[trading]
    ask_l, bid_l = market.ask[tree.leaves], market.bid[tree.leaves]
    growth = (market.price.max() / (market.bid.min())) ** max(tree.horizon, 1)
    half = 2.0 * x * growth / market.bid.min()
    centre = np.zeros(trading.size)
    best = -np.inf
    for _ in range(refine + 1):
        axes = [np.linspace(c - half, c + half, grid_size) for c in centre]
        grid = np.array(list(itertools.product(*axes)))
        value, ok = _grid_values(grid, order, par_idx, leaf_par, ask_k, bid_k, ask_l, bid_l, x, spec, tree.leaf_prob)
        if not np.any(ok):
            half /= 4.0
            continue
        value = np.where(ok, value, -np.inf)
        k = int(np.argmax(value))
        if value[k] >= best:
            best = float(value[k])
            centre = grid[k]
        half *= 4.0 / (grid_size - 1)
    return best


def _grid_values(grid, order, par_idx, leaf_par, ask_k, bid_k, ask_l, bid_l, x, spec, leaf_prob):
    parent_hold = np.where(par_idx >= 0, grid[:, np.maximum(par_idx, 0)], 0.0)
    trade = grid - parent_hold
    cash = -ask_k * np.maximum(trade, 0.0) + bid_k * np.maximum(-trade, 0.0)
    bond = np.zeros_like(grid)
    for k in order:
        prev = bond[:, par_idx[k]] if par_idx[k] >= 0 else x
        bond[:, k] = prev + cash[:, k]
    liq = bond + np.maximum(grid, 0.0) * bid_k - np.maximum(-grid, 0.0) * ask_k
    hold = grid[:, leaf_par]
    wealth = bond[:, leaf_par] + np.maximum(hold, 0.0) * bid_l - np.maximum(-hold, 0.0) * ask_l
    ok = np.all(liq >= 0.0, axis=1) & np.all(wealth > 0.0, axis=1)
    safe = np.where(wealth > 0.0, wealth, 1.0)
    return spec.U(safe) @ leaf_prob, ok


def u_curve(market, spec, xs, opts=None, parallel=1, rel_step=1e-3):
    """
    Batch solves along sorted endowments with KKT and central-difference slopes.

    Returns:
        list of dicts {x, u, du_kkt, du_fd}
    """
    xs = [float(x) for x in xs]
    if any(x <= 0 for x in xs) or xs != sorted(xs):
        raise DomainError("endowments must be positive and sorted")
    points = []
    for x in xs:
        h = rel_step * x
        points.extend([x - h, x, x + h])
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        sols = list(pool.map(lambda x: solve_primal(market, spec, x, opts), points))
    rows = []
    for i, x in enumerate(xs):
        lo, mid, hi = sols[3 * i:3 * i + 3]
        rows.append({
            "x": x,
            "u": mid.value,
            "du_kkt": mid.marginal,
            "du_fd": (hi.value - lo.value) / (2.0 * rel_step * x),
        })
    return rows


def merton_binomial(spec, x, s0, s_up, s_down, p_up):
    """
    Frictionless one-period binomial optimum in closed form.

    Returns:
        (value, shares held at the root, terminal wealth (up, down))
    """
    q = (s0 - s_down) / (s_up - s_down)
    if not 0.0 < q < 1.0:
        raise PreconditionError("binomial prices admit arbitrage")
    probs = np.array([p_up, 1.0 - p_up])
    density = np.array([q, 1.0 - q]) / probs
    gamma = 1.0 if spec.family == "log" else spec.gamma
    wealth = x * density ** (-1.0 / gamma) / np.dot(probs, density ** (1.0 - 1.0 / gamma))
    shares = (wealth[0] - wealth[1]) / (s_up - s_down)
    return float(np.dot(probs, spec.U(wealth))), float(shares), wealth
