"""
Tests for scenario trees, stopping regions and martingale tools
"""

import json

import numpy as np
import pytest

from cli import gen_tree
from errors import StructuralError, DecompositionError, InputError
from tree_core import (
    ScenarioTree, StoppingRegion, one_step_drift, region_expectation, conditional_expectation,
    classify_martingale, doob_decompose, first_crossing, region_min, region_shift,
    tree_to_dict, tree_from_dict, load_tree, MARTINGALE, SUPERMARTINGALE, SUBMARTINGALE, NONE,
)


class TestScenarioTreeBuild:
    """Validation of tree structure"""

    def test_probabilities_are_derived(self, binomial_market):
        tree = binomial_market.tree
        assert tree.size == 7
        assert tree.horizon == 2
        assert np.allclose(tree.leaf_prob, 0.25)
        assert tree.leaf_prob.sum() == pytest.approx(1.0)

    def test_children_probabilities_must_sum_to_one(self):
        with pytest.raises(StructuralError, match="summing"):
            ScenarioTree.build([None, 0, 0], [0, 1, 1], [1.0, 0.5, 0.4])

    def test_time_must_increase_by_one(self):
        with pytest.raises(StructuralError, match="parent time"):
            ScenarioTree.build([None, 0, 0], [0, 1, 2], [1.0, 0.5, 0.5])

    def test_leaves_must_sit_at_horizon(self):
        with pytest.raises(StructuralError, match="horizon"):
            ScenarioTree.build([None, 0, 0, 1], [0, 1, 1, 2], [1.0, 0.5, 0.5, 1.0])

    def test_zero_probability_rejected(self):
        with pytest.raises(StructuralError):
            ScenarioTree.build([None, 0, 0], [0, 1, 1], [1.0, 1.0, 0.0])

    def test_single_node_tree(self):
        tree = ScenarioTree.build([None], [0], [1.0])
        assert tree.horizon == 0
        assert list(tree.leaves) == [0]
        assert tree.non_leaves.size == 0

    def test_path_and_ancestor(self, binomial_market):
        tree = binomial_market.tree
        leaf = int(tree.leaves[-1])
        path = tree.path(leaf)
        assert path[0] == 0
        assert path[-1] == leaf
        assert tree.ancestor_at(leaf, 1) == path[1]
        with pytest.raises(StructuralError):
            tree.ancestor_at(path[1], 2)

    def test_leaf_matrix_marks_subtrees(self, binomial_market):
        tree = binomial_market.tree
        G = tree.leaf_matrix
        assert np.all(G[0] == 1.0)
        assert np.all(G[tree.leaves].sum(axis=1) == 1.0)


class TestStoppingRegion:
    """Antichains and their algebra"""

    def test_region_must_cut_every_path_once(self, binomial_market):
        tree = binomial_market.tree
        with pytest.raises(StructuralError):
            StoppingRegion.of(tree, [0, int(tree.leaves[0])])
        with pytest.raises(StructuralError):
            StoppingRegion.of(tree, [1])

    def test_shift_and_min(self, binomial_market):
        tree = binomial_market.tree
        root = StoppingRegion.root(tree)
        level1 = StoppingRegion.at_level(tree, 1)
        terminal = StoppingRegion.terminal(tree)
        assert region_shift(tree, root, 1) == level1
        assert region_shift(tree, root, 10) == terminal
        assert region_min(tree, level1, terminal) == level1

    def test_owner_marks_nodes_above_region(self, binomial_market):
        tree = binomial_market.tree
        owner = StoppingRegion.at_level(tree, 1).owner(tree)
        assert owner[0] == -1
        for node in tree.leaves:
            assert owner[node] == tree.parent[node]

    def test_first_crossing_on_price(self, binomial_market):
        tree = binomial_market.tree
        region = first_crossing(tree, binomial_market.price, 0.9, 1.1, StoppingRegion.root(tree))
        assert region == StoppingRegion.at_level(tree, 1)

    def test_first_crossing_rejects_empty_band(self, binomial_market):
        tree = binomial_market.tree
        with pytest.raises(StructuralError):
            first_crossing(tree, binomial_market.price, 1.0, 1.0, StoppingRegion.root(tree))

    def test_constant_process_runs_to_the_leaves(self, three_period_market):
        tree = three_period_market.tree
        region = first_crossing(tree, np.ones(tree.size), 0.5, 1.5, StoppingRegion.root(tree))
        assert region == StoppingRegion.terminal(tree)


class TestConditionalExpectation:
    """Expectations at stopping regions"""

    def test_root_expectation_matches_leaf_average(self, binomial_market):
        tree = binomial_market.tree
        price = binomial_market.price
        terminal = StoppingRegion.terminal(tree)
        expected = tree.expect_leaves(price[tree.leaves])
        assert conditional_expectation(tree, price, terminal, 0) == pytest.approx(expected)
        assert region_expectation(tree, price, terminal)[0] == pytest.approx(expected)

    def test_nodes_below_region_are_rejected(self, binomial_market):
        tree = binomial_market.tree
        level1 = StoppingRegion.at_level(tree, 1)
        with pytest.raises(StructuralError, match="below"):
            conditional_expectation(tree, binomial_market.price, level1, int(tree.leaves[0]))
        assert np.all(np.isnan(region_expectation(tree, binomial_market.price, level1)[tree.leaves]))

    def test_region_nodes_return_their_own_value(self, binomial_market):
        tree = binomial_market.tree
        x = np.arange(tree.size, dtype=float) * 0.3 + 1.0
        level1 = StoppingRegion.at_level(tree, 1)
        for node in level1.sorted():
            assert conditional_expectation(tree, x, level1, node) == x[node]
        assert conditional_expectation(tree, x, StoppingRegion.root(tree), 0) == x[0]

    def test_matches_path_sum(self, three_period_market, rng):
        tree = three_period_market.tree
        x = rng.normal(size=tree.size)
        terminal = StoppingRegion.terminal(tree)
        for node in range(tree.size):
            below = [leaf for leaf in tree.leaves if node in tree.path(leaf)]
            expected = sum(tree.prob[leaf] * x[leaf] for leaf in below) / tree.prob[node]
            assert conditional_expectation(tree, x, terminal, node) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_tower_property(self, seed):
        market, _ = gen_tree("random", 3, branching=3, seed=seed)
        tree = market.tree
        x = np.random.default_rng(seed).normal(size=tree.size)
        inner = region_expectation(tree, x, StoppingRegion.terminal(tree))
        outer = region_expectation(tree, inner, StoppingRegion.at_level(tree, 2))
        level1 = tree.level(1)
        assert np.allclose(outer[level1], inner[level1], atol=1e-12)
        stopped = first_crossing(tree, market.price, 0.9, 1.1, StoppingRegion.root(tree))
        at_stop = region_expectation(tree, inner, stopped)
        assert at_stop[0] == pytest.approx(tree.expect_leaves(x[tree.leaves]), abs=1e-12)


class TestMartingaleClassification:
    """One-step drift classification and the Doob decomposition"""

    def test_kinds(self, binomial_market):
        tree = binomial_market.tree
        price = binomial_market.price
        # E[e^{+-0.2}] = cosh(0.2) > 1
        assert classify_martingale(tree, price).kind == SUBMARTINGALE
        assert classify_martingale(tree, -price).kind == SUPERMARTINGALE
        assert classify_martingale(tree, np.ones(tree.size)).kind == MARTINGALE
        mixed = np.array(price)
        mixed[1] = 10.0
        assert classify_martingale(tree, mixed).kind == NONE

    def test_drift_vanishes_at_leaves(self, binomial_market):
        tree = binomial_market.tree
        drift = one_step_drift(tree, binomial_market.price)
        assert np.all(drift[tree.leaves] == 0.0)
        assert drift[0] == pytest.approx(np.cosh(0.2) - 1.0)

    def test_doob_decomposition(self, binomial_market):
        tree = binomial_market.tree
        y = -binomial_market.price
        dec = doob_decompose(tree, y)
        assert dec.compensator[0] == 0.0
        assert classify_martingale(tree, dec.martingale).kind == MARTINGALE
        assert np.allclose(dec.martingale - dec.compensator, y)
        assert dec.max_increment(tree) > 0

    def test_doob_decomposition_rejects_upward_drift(self, binomial_market):
        with pytest.raises(DecompositionError) as info:
            doob_decompose(binomial_market.tree, binomial_market.price)
        assert info.value.node is not None
        assert info.value.drift > 0

    def test_deterministic_decay(self, three_period_market):
        tree = three_period_market.tree
        dec = doob_decompose(tree, 1.0 - tree.time / 10.0)
        assert np.allclose(dec.compensator, tree.time / 10.0)
        assert np.allclose(dec.martingale, 1.0)
        assert dec.max_increment(tree) == pytest.approx(0.1)

    def test_nonpositive_tolerance_rejected(self, binomial_market):
        with pytest.raises(StructuralError):
            classify_martingale(binomial_market.tree, binomial_market.price, tol=0.0)


class TestTreeFiles:
    """Tree JSON format"""

    def test_round_trip(self, binomial_market):
        tree = binomial_market.tree
        again = tree_from_dict(tree_to_dict(tree))
        assert np.array_equal(again.parent, tree.parent)
        assert np.allclose(again.cond_prob, tree.cond_prob)

    def test_missing_field(self):
        with pytest.raises(InputError, match="nodes"):
            tree_from_dict({"horizon": 1})

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "tree.json"
        path.write_text('{"horizon": 1, "nodes": [')
        with pytest.raises(InputError, match="line"):
            load_tree(str(path))

    def test_structural_errors_become_input_errors(self, tmp_path):
        data = {"horizon": 1, "nodes": [
            {"id": 0, "parent": None, "t": 0, "p": 1.0},
            {"id": 1, "parent": 0, "t": 1, "p": 0.7},
            {"id": 2, "parent": 0, "t": 1, "p": 0.7},
        ]}
        path = tmp_path / "tree.json"
        path.write_text(json.dumps(data))
        with pytest.raises(InputError, match="invalid tree"):
            load_tree(str(path))

    def test_non_integer_id(self):
        data = {"horizon": 1, "nodes": [{"id": "root", "parent": None, "t": 0, "p": 1.0}]}
        with pytest.raises(InputError, match="id"):
            tree_from_dict(data)

    @pytest.mark.parametrize("field,value", [("p", "half"), ("parent", [0]), ("t", "one")])
    def test_non_numeric_node_fields(self, field, value):
        nodes = [
            {"id": 0, "parent": None, "t": 0, "p": 1.0},
            {"id": 1, "parent": 0, "t": 1, "p": 0.5},
            {"id": 2, "parent": 0, "t": 1, "p": 0.5},
        ]
        nodes[1][field] = value
        with pytest.raises(InputError, match="invalid tree"):
            tree_from_dict({"horizon": 1, "nodes": nodes})

    def test_non_numeric_horizon(self):
        data = {"horizon": "one", "nodes": [{"id": 0, "parent": None, "t": 0, "p": 1.0}]}
        with pytest.raises(InputError):
            tree_from_dict(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="cannot read"):
            load_tree(str(tmp_path / "nothing.json"))
