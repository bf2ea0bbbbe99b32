"""
Finite scenario trees.
Rooted trees carrying conditional transition probabilities, node-indexed
processes, conditional expectations at stopping regions, one-step
(super)martingale classification, the discrete Doob decomposition and
first-crossing stopping regions.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from config import PROBABILITY_SUM_TOL, MARTINGALE_TOL
from errors import StructuralError, DecompositionError, InputError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

MARTINGALE = "martingale"
SUPERMARTINGALE = "supermartingale"
SUBMARTINGALE = "submartingale"
NONE = "none"


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """
    Finite filtered probability space as a rooted tree.

    Only conditional one-step probabilities are stored; unconditional node
    probabilities are derived. Node ids are dense 0..N-1 with the root at 0.
    """
    parent: np.ndarray
    time: np.ndarray
    cond_prob: np.ndarray
    horizon: int

    @classmethod
    def build(cls, parents, times, probs, horizon=None):
        """
        Validate and build a tree.

        Args:
            parents: parent id per node, None or -1 at the root
            times: time index per node
            probs: conditional probability per node (ignored at the root)
            horizon: T; inferred from the deepest node when omitted
        """
        parent = np.array([-1 if p is None else int(p) for p in parents], dtype=np.int64)
        time = np.asarray(times, dtype=np.int64)
        prob = np.asarray(probs, dtype=float).copy()
        n = parent.size
        if n == 0:
            raise StructuralError("tree has no nodes")
        if time.size != n or prob.size != n:
            raise StructuralError("parents, times and probs must have equal length")
        if parent[0] != -1 or time[0] != 0:
            raise StructuralError("node 0 must be the root with time index 0")
        if np.count_nonzero(parent == -1) != 1:
            raise StructuralError("exactly one root expected")
        if horizon is None:
            horizon = int(time.max())
        prob[0] = 1.0
        for node in range(1, n):
            par = parent[node]
            if par < 0 or par >= n or par == node:
                raise StructuralError(f"node {node}: invalid parent {par}")
            if time[node] != time[par] + 1:
                raise StructuralError(f"node {node}: time {time[node]} is not parent time + 1")
            if not (0.0 < prob[node] <= 1.0):
                raise StructuralError(f"node {node}: conditional probability {prob[node]} not in (0, 1]")
        tree = cls(_frozen(parent, np.int64), _frozen(time, np.int64), _frozen(prob, float), int(horizon))
        tree._validate()
        return tree

    def _validate(self):
        # the BFS order touches every node only if the parent graph is a tree
        if len(self.order) != self.size:
            raise StructuralError("parent links do not form a tree rooted at 0")
        for node in range(self.size):
            kids = self.children[node]
            if kids.size == 0:
                if self.time[node] != self.horizon:
                    raise StructuralError(f"leaf {node} has time {self.time[node]}, expected horizon {self.horizon}")
                continue
            total = self.cond_prob[kids].sum()
            if abs(total - 1.0) > PROBABILITY_SUM_TOL:
                raise StructuralError(f"children of node {node} have probabilities summing to {total}")
        if np.any(self.prob <= 0.0):
            raise StructuralError("every node needs strictly positive probability")

    @property
    def size(self):
        return int(self.parent.size)

    @cached_property
    def children(self):
        kids = [[] for _ in range(self.size)]
        for node in range(1, self.size):
            kids[self.parent[node]].append(node)
        return tuple(np.array(k, dtype=np.int64) for k in kids)

    @cached_property
    def order(self):
        """Nodes in breadth-first order (parents before children)."""
        seen = []
        queue = deque([0])
        while queue:
            node = queue.popleft()
            seen.append(node)
            queue.extend(int(c) for c in self.children[node])
            if len(seen) > self.size:
                break
        return np.array(seen, dtype=np.int64)

    @cached_property
    def prob(self):
        """Unconditional node probabilities."""
        prob = np.zeros(self.size)
        prob[0] = 1.0
        for node in self.order[1:]:
            prob[node] = prob[self.parent[node]] * self.cond_prob[node]
        prob.setflags(write=False)
        return prob

    @cached_property
    def is_leaf(self):
        return np.array([k.size == 0 for k in self.children])

    @cached_property
    def leaves(self):
        return np.flatnonzero(self.is_leaf)

    @cached_property
    def non_leaves(self):
        return np.flatnonzero(~self.is_leaf)

    @cached_property
    def leaf_prob(self):
        return self.prob[self.leaves]

    @cached_property
    def leaf_matrix(self):
        """Dense 0/1 matrix G with G[n, j] = 1 when leaf j lies in the sub-tree of n."""
        mat = np.zeros((self.size, self.leaves.size))
        for j, leaf in enumerate(self.leaves):
            for node in self.path(leaf):
                mat[node, j] = 1.0
        return mat

    def path(self, node):
        """Root-to-node path as a list of ids."""
        out = []
        node = int(node)
        while node >= 0:
            out.append(node)
            node = int(self.parent[node])
        return out[::-1]

    def ancestor_at(self, node, t):
        """Ancestor (or self) of node with time index t."""
        node = int(node)
        if t > self.time[node]:
            raise StructuralError(f"node {node} has no ancestor at time {t}")
        while self.time[node] > t:
            node = int(self.parent[node])
        return node

    def level(self, t):
        return np.flatnonzero(self.time == t)

    def process(self, values):
        """Coerce values to a node-indexed float array."""
        arr = np.asarray(values, dtype=float)
        if arr.shape != (self.size,):
            raise StructuralError(f"process needs {self.size} node values, got shape {arr.shape}")
        return arr

    def expect_leaves(self, leaf_values):
        """E[X_T] for a per-leaf array."""
        return float(np.dot(self.leaf_prob, leaf_values))

    def with_probabilities(self, cond_prob):
        """Same shape, new conditional weights (validated)."""
        return ScenarioTree.build(self.parent, self.time, cond_prob, self.horizon)


@dataclass(frozen=True)
class StoppingRegion:
    """Antichain of nodes meeting every root-to-leaf path exactly once."""
    nodes: frozenset

    @classmethod
    def of(cls, tree, nodes):
        region = cls(frozenset(int(n) for n in nodes))
        region.validate(tree)
        return region

    @classmethod
    def at_level(cls, tree, t):
        return cls.of(tree, tree.level(min(int(t), tree.horizon)))

    @classmethod
    def terminal(cls, tree):
        return cls.of(tree, tree.leaves)

    @classmethod
    def root(cls, tree):
        return cls.of(tree, [0])

    def validate(self, tree):
        for node in self.nodes:
            if node < 0 or node >= tree.size:
                raise StructuralError(f"region node {node} not in tree")
        for leaf in tree.leaves:
            hits = sum(1 for n in tree.path(leaf) if n in self.nodes)
            if hits != 1:
                raise StructuralError(f"region meets the path to leaf {leaf} {hits} times")

    def owner(self, tree):
        """For each node, the region node at or above it; -1 for nodes above the region."""
        owner = np.full(tree.size, -1, dtype=np.int64)
        for node in tree.order:
            par = tree.parent[node]
            if par >= 0 and owner[par] >= 0:
                owner[node] = owner[par]
            elif node in self.nodes:
                owner[node] = node
        return owner

    def sorted(self):
        return sorted(self.nodes)


def one_step_drift(tree, x):
    """E[x_child | n] - x_n at every node (0 at leaves)."""
    x = tree.process(x)
    mean = np.zeros(tree.size)
    kids = np.arange(1, tree.size)
    np.add.at(mean, tree.parent[kids], tree.cond_prob[kids] * x[kids])
    drift = mean - x
    drift[tree.is_leaf] = 0.0
    return drift


def region_expectation(tree, x, region):
    """
    Backward induction of E[x_region | F_n] for every node on or above region.
    Nodes strictly below the region get NaN.
    """
    x = tree.process(x)
    owner = region.owner(tree)
    values = np.full(tree.size, np.nan)
    for node in tree.order[::-1]:
        if node in region.nodes:
            values[node] = x[node]
        elif owner[node] < 0:
            kids = tree.children[node]
            values[node] = float(np.dot(tree.cond_prob[kids], values[kids]))
    return values


def conditional_expectation(tree, x, region, node):
    """
    E[x_tau | F_node] for the stopping region tau.

    Raises:
        StructuralError: node lies strictly below the region
    """
    node = int(node)
    owner = region.owner(tree)
    if owner[node] >= 0 and owner[node] != node:
        raise StructuralError(f"node {node} lies strictly below the stopping region")
    x = tree.process(x)
    if node in region.nodes:
        return float(x[node])
    total = 0.0
    stack = [node]
    while stack:
        cur = stack.pop()
        if cur in region.nodes:
            total += tree.prob[cur] * x[cur]
        else:
            stack.extend(int(c) for c in tree.children[cur])
    return float(total / tree.prob[node])


@dataclass(frozen=True)
class MartingaleReport:
    kind: str
    max_residual: float
    residuals: np.ndarray

    def to_dict(self):
        return {"kind": self.kind, "max_residual": self.max_residual}


def classify_martingale(tree, x, tol=MARTINGALE_TOL):
    """Classify x from its one-step residuals E[x_child | n] - x_n."""
    if tol <= 0:
        raise StructuralError("tolerance must be positive")
    drift = one_step_drift(tree, x)[tree.non_leaves]
    if drift.size == 0:
        return MartingaleReport(MARTINGALE, 0.0, drift)
    worst = float(np.max(np.abs(drift)))
    if worst <= tol:
        kind = MARTINGALE
    elif drift.max() <= tol:
        kind = SUPERMARTINGALE
    elif drift.min() >= -tol:
        kind = SUBMARTINGALE
    else:
        kind = NONE
    return MartingaleReport(kind, worst, drift)


@dataclass(frozen=True)
class DoobDecomposition:
    """Y = M - A with M a martingale and A predictable, non-decreasing, A_0 = 0."""
    martingale: np.ndarray
    compensator: np.ndarray

    def max_increment(self, tree):
        kids = np.arange(1, tree.size)
        if kids.size == 0:
            return 0.0
        return float(np.max(self.compensator[kids] - self.compensator[tree.parent[kids]]))


def doob_decompose(tree, y, tol=MARTINGALE_TOL):
    """
    Discrete Doob decomposition of a supermartingale.

    Raises:
        DecompositionError: positive drift beyond tol at some node
    """
    y = tree.process(y)
    drift = one_step_drift(tree, y)
    worst = int(np.argmax(drift))
    if drift[worst] > tol:
        raise DecompositionError(
            f"process drifts upward by {drift[worst]:.3e} at node {worst}", node=worst, drift=float(drift[worst]))
    comp = np.zeros(tree.size)
    for node in tree.order[1:]:
        par = tree.parent[node]
        comp[node] = comp[par] - drift[par]
    return DoobDecomposition(martingale=y + comp, compensator=comp)


def first_crossing(tree, x, lower, upper, start):
    """
    First node at or after `start` where x <= lower or x >= upper, else the leaf.
    """
    if not lower < upper:
        raise StructuralError("lower bound must be below upper bound")
    x = tree.process(x)
    hits = set()
    stack = list(start.nodes)
    while stack:
        node = stack.pop()
        if x[node] <= lower or x[node] >= upper or tree.is_leaf[node]:
            hits.add(node)
        else:
            stack.extend(int(c) for c in tree.children[node])
    return StoppingRegion(frozenset(hits))


def region_min(tree, first, second):
    """Path-wise earlier of two stopping regions."""
    own_a = first.owner(tree)
    own_b = second.owner(tree)
    picks = set()
    for leaf in tree.leaves:
        a, b = own_a[leaf], own_b[leaf]
        picks.add(int(a if tree.time[a] <= tree.time[b] else b))
    return StoppingRegion(frozenset(picks))


def region_shift(tree, region, k):
    """Region reached k steps after `region` (capped at the leaves)."""
    owner = region.owner(tree)
    picks = set()
    for leaf in tree.leaves:
        t = min(int(tree.time[owner[leaf]]) + k, tree.horizon)
        picks.add(tree.ancestor_at(leaf, t))
    return StoppingRegion(frozenset(picks))


def tree_to_dict(tree):
    nodes = []
    for node in range(tree.size):
        par = int(tree.parent[node])
        nodes.append({
            "id": node,
            "parent": None if par < 0 else par,
            "t": int(tree.time[node]),
            "p": float(tree.cond_prob[node]),
        })
    return {"horizon": tree.horizon, "nodes": nodes}


def tree_from_dict(data):
    """Parse the tree file format; raises InputError with a field diagnostic."""
    if not isinstance(data, dict):
        raise InputError("tree document must be a JSON object")
    for key in ("horizon", "nodes"):
        if key not in data:
            raise InputError(f"missing field '{key}'")
    nodes = data["nodes"]
    if not isinstance(nodes, list) or not nodes:
        raise InputError("field 'nodes' must be a non-empty list")
    by_id = {}
    for i, entry in enumerate(nodes):
        for key in ("id", "parent", "t", "p"):
            if not isinstance(entry, dict) or key not in entry:
                raise InputError(f"nodes[{i}]: missing field '{key}'")
        try:
            by_id[int(entry["id"])] = entry
        except (TypeError, ValueError) as e:
            raise InputError(f"nodes[{i}]: id must be an integer, got {entry['id']!r}") from e
    if sorted(by_id) != list(range(len(nodes))):
        raise InputError("node ids must be dense 0..N-1")
    ordered = [by_id[i] for i in range(len(nodes))]
    try:
        return ScenarioTree.build(
            [e["parent"] for e in ordered],
            [e["t"] for e in ordered],
            [1.0 if e["parent"] is None else e["p"] for e in ordered],
            int(data["horizon"]),
        )
    except (StructuralError, TypeError, ValueError) as e:
        raise InputError(f"invalid tree: {e}") from e


def load_tree(path):
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise InputError(f"cannot read tree file {path}: {e}") from e
    return tree_from_dict(data)


def dump_tree(tree, path):
    with open(path, 'w') as f:
        json.dump(tree_to_dict(tree), f, indent=2)
