"""
Frictional market on a scenario tree.
Ask price S, bid price (1 - lambda) S, self-financing strategies given as
per-node buy/sell volumes, liquidation values and admissibility.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from config import ADMISSIBILITY_TOL
from errors import StructuralError, DomainError, InputError
from tree_core import ScenarioTree, tree_to_dict, tree_from_dict

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Market:
    """Tree, strictly positive ask price per node, proportional cost level."""
    tree: ScenarioTree
    price: np.ndarray
    lam: float

    @classmethod
    def build(cls, tree, price, lam):
        price = tree.process(price).copy()
        if np.any(~np.isfinite(price)) or np.any(price <= 0):
            raise StructuralError("price must be strictly positive at every node")
        lam = float(lam)
        # lam = 0 is the frictionless market used by shadow-price checks
        if not (0.0 <= lam < 1.0):
            raise StructuralError(f"transaction cost level {lam} not in [0, 1)")
        price.setflags(write=False)
        return cls(tree, price, lam)

    @property
    def ask(self):
        return self.price

    @property
    def bid(self):
        return (1.0 - self.lam) * self.price

    @property
    def frictionless(self):
        return self.lam == 0.0

    def with_tree(self, tree):
        return Market.build(tree, self.price, self.lam)

    def with_price(self, price, lam=None):
        return Market.build(self.tree, price, self.lam if lam is None else lam)


@dataclass(frozen=True)
class TradingStrategy:
    """Volumes bought and sold at each node, at that node's prices."""
    buy: np.ndarray
    sell: np.ndarray

    @classmethod
    def zero(cls, tree):
        return cls(np.zeros(tree.size), np.zeros(tree.size))

    @classmethod
    def from_net(cls, net):
        """Split net trades into buy/sell volumes."""
        net = np.asarray(net, dtype=float)
        return cls(np.maximum(net, 0.0), np.maximum(-net, 0.0))

    def scaled(self, c):
        return TradingStrategy(self.buy * c, self.sell * c)

    def netted(self):
        """Cancel min(buy, sell) at every node."""
        common = np.minimum(self.buy, self.sell)
        return TradingStrategy(self.buy - common, self.sell - common)

    def to_dict(self):
        return {"buy": self.buy.tolist(), "sell": self.sell.tolist()}


@dataclass(frozen=True)
class HoldingsProcess:
    """Post-trade bond and stock holdings per node; `x` is the root endowment."""
    bond: np.ndarray
    stock: np.ndarray
    x: float

    def to_dict(self):
        return {"bond": self.bond.tolist(), "stock": self.stock.tolist(), "x": self.x}


def holdings(market, strategy, x):
    """
    Run the self-financing recursion from the endowment (x, 0).

    Buying costs the ask S per share, selling earns the bid (1 - lambda) S.
    """
    if not x > 0:
        raise DomainError(f"initial endowment must be positive, got {x}")
    tree = market.tree
    buy = tree.process(strategy.buy)
    sell = tree.process(strategy.sell)
    if not (np.all(np.isfinite(buy)) and np.all(np.isfinite(sell))):
        raise StructuralError("strategy volumes must be finite")
    cash = -market.ask * buy + market.bid * sell
    shares = buy - sell
    bond = np.zeros(tree.size)
    stock = np.zeros(tree.size)
    for node in tree.order:
        par = tree.parent[node]
        prev_bond, prev_stock = (x, 0.0) if par < 0 else (bond[par], stock[par])
        bond[node] = prev_bond + cash[node]
        stock[node] = prev_stock + shares[node]
    return HoldingsProcess(bond, stock, float(x))


def forced_liquidation(market, strategy):
    """Replace leaf volumes so that the terminal stock position is closed."""
    tree = market.tree
    buy = np.array(strategy.buy, dtype=float)
    sell = np.array(strategy.sell, dtype=float)
    buy[tree.leaves] = 0.0
    sell[tree.leaves] = 0.0
    stock = holdings(market, TradingStrategy(buy, sell), 1.0).stock
    held = stock[tree.parent[tree.leaves]]
    sell[tree.leaves] = np.maximum(held, 0.0)
    buy[tree.leaves] = np.maximum(-held, 0.0)
    return TradingStrategy(buy, sell)


def liquidation_value(market, h):
    """Bond plus long stock at the bid, minus short stock at the ask."""
    long = np.maximum(h.stock, 0.0)
    short = np.maximum(-h.stock, 0.0)
    return h.bond + long * market.bid - short * market.ask


@dataclass(frozen=True)
class AdmissibilityReport:
    admissible: bool
    worst_node: int
    worst_value: float
    max_terminal_stock: float

    def to_dict(self):
        return {
            "admissible": self.admissible,
            "worst_node": self.worst_node,
            "worst_value": self.worst_value,
            "max_terminal_stock": self.max_terminal_stock,
        }


def is_admissible(market, strategy, x, tol=ADMISSIBILITY_TOL):
    """Liquidation value >= -tol everywhere and no stock left at the leaves."""
    if tol < 0:
        raise StructuralError("tolerance must be non-negative")
    h = holdings(market, strategy, x)
    liq = liquidation_value(market, h)
    worst = int(np.argmin(liq))
    terminal = float(np.max(np.abs(h.stock[market.tree.leaves])))
    ok = bool(liq[worst] >= -tol and terminal <= tol)
    return AdmissibilityReport(ok, worst, float(liq[worst]), terminal)


def self_financing_residual(market, h):
    """
    Largest excess of a bond increment over the cash flow its stock
    increment allows (positive means violated).
    """
    tree = market.tree
    par = tree.parent
    prev_bond = np.where(par < 0, h.x, h.bond[np.maximum(par, 0)])
    prev_stock = np.where(par < 0, 0.0, h.stock[np.maximum(par, 0)])
    d_bond = h.bond - prev_bond
    d_stock = h.stock - prev_stock
    allowed = -market.ask * np.maximum(d_stock, 0.0) + market.bid * np.maximum(-d_stock, 0.0)
    return float(np.max(d_bond - allowed))


def check_self_financing(market, h, tol=0.0):
    if tol < 0:
        raise StructuralError("tolerance must be non-negative")
    return self_financing_residual(market, h) <= tol


def round_trip_cost(market, node, volume):
    """Bond lost by buying then selling `volume` shares at one node."""
    return float(market.ask[node] * volume - market.bid[node] * volume)


def market_to_dict(market):
    data = tree_to_dict(market.tree)
    data["lambda"] = market.lam
    data["S"] = [float(s) for s in market.price]
    return data


def market_from_dict(data):
    tree = tree_from_dict(data)
    for key in ("lambda", "S"):
        if key not in data:
            raise InputError(f"missing field '{key}'")
    if not isinstance(data["S"], list) or len(data["S"]) != tree.size:
        raise InputError(f"field 'S' must list one price per node ({tree.size})")
    try:
        return Market.build(tree, data["S"], data["lambda"])
    except (StructuralError, TypeError, ValueError) as e:
        raise InputError(f"invalid market: {e}") from e


def load_market(path):
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise InputError(f"cannot read market file {path}: {e}") from e
    logger.info(f"Loaded market from {path}")
    return market_from_dict(data)


def dump_market(market, path):
    with open(path, 'w') as f:
        json.dump(market_to_dict(market), f, indent=2, sort_keys=True)
