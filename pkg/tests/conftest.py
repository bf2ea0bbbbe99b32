"""
Shared fixtures: small markets built the same way the CLI builds them.
"""

import numpy as np
import pytest

from cli import gen_tree
from market import Market
from preferences import UtilitySpec
from tree_core import ScenarioTree

UP, DOWN = 1.2, 0.9


def one_period_tree(p_up=0.5):
    return ScenarioTree.build([None, 0, 0], [0, 1, 1], [1.0, p_up, 1.0 - p_up])


@pytest.fixture
def log_spec():
    return UtilitySpec.parse("log")


@pytest.fixture
def crra_spec():
    return UtilitySpec.parse("crra:2")


@pytest.fixture
def one_period():
    """Frictionless one-period binomial with S0 = 1, moves to 1.2 / 0.9."""
    return Market.build(one_period_tree(), [1.0, UP, DOWN], 0.0)


@pytest.fixture
def one_period_costly():
    return Market.build(one_period_tree(), [1.0, UP, DOWN], 0.1)


@pytest.fixture
def binomial_market():
    """Full two-period binomial with lambda = 0.1 (7 nodes)."""
    market, certificate = gen_tree("binomial", 2, lam=0.1)
    assert certificate is None
    return market


@pytest.fixture
def three_period_market():
    market, _ = gen_tree("binomial", 3, lam=0.1)
    return market


@pytest.fixture
def arbitrage_market():
    """Both children bid above the root ask: buying at the root is an arbitrage."""
    return Market.build(one_period_tree(), [1.0, 1.3, 1.2], 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
