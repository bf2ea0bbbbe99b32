"""
Tests for the frictional market: holdings recursion, liquidation and admissibility
"""

import numpy as np
import pytest

from errors import StructuralError, DomainError, InputError
from market import (
    Market, TradingStrategy, HoldingsProcess, holdings, forced_liquidation, liquidation_value, is_admissible,
    self_financing_residual, check_self_financing, round_trip_cost, market_to_dict, market_from_dict,
    load_market, dump_market,
)


def buy_at_root(market, volume):
    buy = np.zeros(market.tree.size)
    buy[0] = volume
    return forced_liquidation(market, TradingStrategy(buy, np.zeros(market.tree.size)))


class TestMarketBuild:
    """Price and cost validation"""

    def test_bid_is_discounted_ask(self, binomial_market):
        assert np.allclose(binomial_market.bid, 0.9 * binomial_market.ask)
        assert not binomial_market.frictionless

    def test_lambda_range(self, binomial_market):
        tree = binomial_market.tree
        with pytest.raises(StructuralError):
            Market.build(tree, binomial_market.price, 1.0)
        with pytest.raises(StructuralError):
            Market.build(tree, binomial_market.price, -0.1)
        assert Market.build(tree, binomial_market.price, 0.0).frictionless

    def test_price_must_be_positive(self, binomial_market):
        price = np.array(binomial_market.price)
        price[3] = 0.0
        with pytest.raises(StructuralError, match="positive"):
            Market.build(binomial_market.tree, price, 0.1)

    def test_price_is_read_only(self, binomial_market):
        with pytest.raises(ValueError):
            binomial_market.price[0] = 2.0


class TestHoldings:
    """Self-financing recursion"""

    def test_buying_at_the_ask(self, one_period_costly):
        h = holdings(one_period_costly, buy_at_root(one_period_costly, 1.0), 2.0)
        assert h.bond[0] == pytest.approx(1.0)
        assert h.stock[0] == pytest.approx(1.0)
        # the leaves sell at the bid 0.9 * S
        assert h.bond[1] == pytest.approx(1.0 + 0.9 * 1.2)
        assert h.bond[2] == pytest.approx(1.0 + 0.9 * 0.9)
        assert np.all(h.stock[one_period_costly.tree.leaves] == 0.0)

    def test_forced_liquidation_closes_short(self, one_period_costly):
        sell = np.zeros(3)
        sell[0] = 1.0
        strat = forced_liquidation(one_period_costly, TradingStrategy(np.zeros(3), sell))
        assert strat.buy[1] == pytest.approx(1.0)
        assert strat.buy[2] == pytest.approx(1.0)

    def test_endowment_must_be_positive(self, one_period_costly):
        with pytest.raises(DomainError):
            holdings(one_period_costly, TradingStrategy.zero(one_period_costly.tree), 0.0)

    def test_self_financing_residual(self, binomial_market):
        strat = buy_at_root(binomial_market, 0.3)
        h = holdings(binomial_market, strat, 1.0)
        assert self_financing_residual(binomial_market, h) <= 1e-12
        assert check_self_financing(binomial_market, h, 1e-12)

    def test_money_from_nowhere_is_not_self_financing(self, binomial_market):
        h = holdings(binomial_market, TradingStrategy.zero(binomial_market.tree), 1.0)
        bond = np.array(h.bond)
        bond[1] += 0.5
        forged = type(h)(bond, h.stock, h.x)
        assert self_financing_residual(binomial_market, forged) == pytest.approx(0.5)
        assert not check_self_financing(binomial_market, forged)

    def test_netting_keeps_holdings(self, binomial_market):
        tree = binomial_market.tree
        strat = TradingStrategy(np.full(tree.size, 0.2), np.full(tree.size, 0.1))
        netted = strat.netted()
        assert np.all(np.minimum(netted.buy, netted.sell) == 0.0)
        h_raw = holdings(binomial_market, strat, 1.0)
        h_net = holdings(binomial_market, netted, 1.0)
        assert np.allclose(h_raw.stock, h_net.stock)
        # netting saves the round-trip cost
        assert np.all(h_net.bond >= h_raw.bond - 1e-15)

    def test_buy_at_one_sell_at_two(self, one_period):
        market = one_period.with_price([1.0, 2.0, 0.5], 0.1)
        h = holdings(market, buy_at_root(market, 1.0), 1.5)
        assert h.bond[1] == pytest.approx(1.5 - 1.0 + 2.0 * (1.0 - 0.1))
        assert h.stock[1] == 0.0

    def test_discarding_bonds_stays_self_financing(self, binomial_market):
        tree = binomial_market.tree
        h = holdings(binomial_market, buy_at_root(binomial_market, 0.3), 1.0)
        # throw away 0.2 bonds at node 1, which carries to its sub-tree
        below = np.array([1 in tree.path(node) for node in range(tree.size)])
        lowered = HoldingsProcess(h.bond - 0.2 * below, h.stock, h.x)
        assert check_self_financing(binomial_market, lowered, 1e-12)
        assert self_financing_residual(binomial_market, lowered) <= self_financing_residual(binomial_market, h) + 1e-15


class TestAdmissibility:
    """Liquidation value bounds"""

    def test_zero_strategy_is_admissible(self, binomial_market):
        report = is_admissible(binomial_market, TradingStrategy.zero(binomial_market.tree), 1.0)
        assert report.admissible
        assert report.worst_value == pytest.approx(1.0)

    def test_leverage_is_not_admissible(self, binomial_market):
        report = is_admissible(binomial_market, buy_at_root(binomial_market, 10.0), 1.0)
        assert not report.admissible
        assert report.worst_value < 0

    def test_open_terminal_position_is_not_admissible(self, one_period_costly):
        buy = np.zeros(3)
        buy[0] = 0.1
        report = is_admissible(one_period_costly, TradingStrategy(buy, np.zeros(3)), 1.0)
        assert not report.admissible
        assert report.max_terminal_stock == pytest.approx(0.1)

    def test_liquidation_value_uses_bid_and_ask(self, one_period_costly):
        h = holdings(one_period_costly, buy_at_root(one_period_costly, 1.0), 2.0)
        liq = liquidation_value(one_period_costly, h)
        assert liq[0] == pytest.approx(1.0 + 0.9)

    @pytest.mark.parametrize("scale", [0.5, 3.0])
    def test_liquidation_is_positively_homogeneous(self, binomial_market, scale):
        strat = buy_at_root(binomial_market, 0.4)
        base = liquidation_value(binomial_market, holdings(binomial_market, strat, 1.0))
        scaled = liquidation_value(binomial_market, holdings(binomial_market, strat.scaled(scale), scale))
        assert np.allclose(scaled, scale * base)

    def test_liquidation_is_the_bond_at_the_leaves(self, binomial_market):
        tree = binomial_market.tree
        h = holdings(binomial_market, buy_at_root(binomial_market, 0.4), 1.0)
        liq = liquidation_value(binomial_market, h)
        assert np.array_equal(liq[tree.leaves], h.bond[tree.leaves])

    def test_round_trip_cost(self, binomial_market):
        node = 3
        cost = round_trip_cost(binomial_market, node, 2.0)
        assert cost == pytest.approx(2.0 * 0.1 * binomial_market.price[node])


class TestMarketFiles:
    """Market JSON format"""

    def test_dump_and_load(self, binomial_market, tmp_path):
        path = tmp_path / "market.json"
        dump_market(binomial_market, str(path))
        again = load_market(str(path))
        assert again.lam == binomial_market.lam
        assert np.allclose(again.price, binomial_market.price)

    def test_missing_price_field(self, binomial_market):
        data = market_to_dict(binomial_market)
        del data["S"]
        with pytest.raises(InputError, match="'S'"):
            market_from_dict(data)

    def test_wrong_price_length(self, binomial_market):
        data = market_to_dict(binomial_market)
        data["S"] = data["S"][:-1]
        with pytest.raises(InputError):
            market_from_dict(data)

    def test_bad_lambda_is_input_error(self, binomial_market):
        data = market_to_dict(binomial_market)
        data["lambda"] = 1.5
        with pytest.raises(InputError, match="invalid market"):
            market_from_dict(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_market(str(tmp_path / "absent.json"))
