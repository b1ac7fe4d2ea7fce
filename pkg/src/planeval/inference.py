"""Probability queries over finalized PE-nets.

Three engines answer the same question (probability of a conjunction of
node states, optionally given evidence):

* ``exact_query`` - variable elimination with greedy min-fill ordering and
  an induced-width guard;
* ``mc_query`` - forward sampling with likelihood weighting, vectorized and
  reproducible for a given seed;
* ``oracle_enumerate`` - brute-force joint enumeration, kept dead simple so
  it can serve as ground truth for the other two.

``plan_success`` and ``leads_to_success`` wrap these for the two plan
metrics: goals plus the selected detailed path, versus goals alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleEvidence, PlanEvalError, TooLarge, WidthExceeded, ZeroWeight
from .net import PENet, atom_node

EXACT = "exact"
MC = "mc"

DEFAULT_WIDTH_LIMIT = 20
DEFAULT_ORACLE_BOUND = 10 ** 7


@dataclass
class Query:
    targets: list  # [(NodeId, state), ...] conjunction
    evidence: dict = field(default_factory=dict)  # NodeId -> state
    mode: str = EXACT
    samples: int = 10000
    seed: int = 0


@dataclass
class QueryResult:
    probability: float
    estimator: str
    standard_error: float = None
    elimination_width: int = None
    sample_count: int = None


def _check_evidence(net: PENet, evidence: dict):
    for nid, state in evidence.items():
        if nid not in net.nodes:
            raise InfeasibleEvidence(f"evidence node {nid} is not in the net")
        if state not in net.nodes[nid].states:
            raise InfeasibleEvidence(f"evidence state {state!r} is not a state of {nid}")


def _targets_reachable(net: PENet, targets) -> bool:
    for nid, state in targets:
        if nid not in net.nodes:
            raise PlanEvalError(f"target node {nid} is not in the net")
        if state not in net.nodes[nid].states:
            return False
    return True


# ---------------------------------------------------------------------------
# exact inference: variable elimination
# ---------------------------------------------------------------------------


class _Factor:
    __slots__ = ("vars", "table")

    def __init__(self, vars, table):
        self.vars = tuple(vars)
        self.table = table  # {assignment tuple: prob}


def _node_factor(net: PENet, nid, evidence: dict) -> _Factor:
    node = net.nodes[nid]
    vars = tuple(node.parents) + (nid,)
    table = {}
    for combo, dist in node.cpt.items():
        for state, prob in dist.items():
            if prob == 0.0:
                continue
            table[combo + (state,)] = prob
    return _restrict(_Factor(vars, table), evidence)


def _restrict(factor: _Factor, evidence: dict) -> _Factor:
    hits = [i for i, v in enumerate(factor.vars) if v in evidence]
    if not hits:
        return factor
    keep = [i for i in range(len(factor.vars)) if i not in hits]
    table = {}
    for combo, prob in factor.table.items():
        if all(combo[i] == evidence[factor.vars[i]] for i in hits):
            key = tuple(combo[i] for i in keep)
            table[key] = table.get(key, 0.0) + prob
    return _Factor([factor.vars[i] for i in keep], table)


def _multiply(a: _Factor, b: _Factor) -> _Factor:
    shared = [v for v in a.vars if v in b.vars]
    b_only = [v for v in b.vars if v not in a.vars]
    out_vars = a.vars + tuple(b_only)
    a_shared = [a.vars.index(v) for v in shared]
    b_shared = [b.vars.index(v) for v in shared]
    b_extra = [b.vars.index(v) for v in b_only]
    grouped = {}
    for combo, prob in b.table.items():
        key = tuple(combo[i] for i in b_shared)
        grouped.setdefault(key, []).append((tuple(combo[i] for i in b_extra), prob))
    table = {}
    for combo, prob in a.table.items():
        key = tuple(combo[i] for i in a_shared)
        for extra, prob_b in grouped.get(key, ()):
            table[combo + extra] = table.get(combo + extra, 0.0) + prob * prob_b
    return _Factor(out_vars, table)


def _sum_out(factor: _Factor, var) -> _Factor:
    idx = factor.vars.index(var)
    keep = [i for i in range(len(factor.vars)) if i != idx]
    table = {}
    for combo, prob in factor.table.items():
        key = tuple(combo[i] for i in keep)
        table[key] = table.get(key, 0.0) + prob
    return _Factor([factor.vars[i] for i in keep], table)


def _min_fill_order(scopes: list) -> list:
    """Greedy min-fill elimination order, ties broken by variable name."""
    neighbors = {}
    for scope in scopes:
        for v in scope:
            neighbors.setdefault(v, set())
            neighbors[v].update(u for u in scope if u != v)
    order = []
    remaining = set(neighbors)
    while remaining:
        best = None
        for v in sorted(remaining, key=str):
            around = [u for u in neighbors[v] if u in remaining]
            fill = 0
            for i in range(len(around)):
                for j in range(i + 1, len(around)):
                    if around[j] not in neighbors[around[i]]:
                        fill += 1
            if best is None or fill < best[0]:
                best = (fill, v, around)
        _fill, v, around = best
        order.append(v)
        remaining.discard(v)
        for i in range(len(around)):
            for j in range(len(around)):
                if i != j:
                    neighbors[around[i]].add(around[j])
    return order


def _eliminate_all(net: PENet, evidence: dict, width_limit: int):
    """Sum the whole restricted joint down to a scalar; returns (value, width)."""
    factors = [_node_factor(net, nid, evidence) for nid in sorted(net.nodes, key=net.node_key)]
    order = _min_fill_order([f.vars for f in factors if f.vars])
    width = 0
    for var in order:
        bucket = [f for f in factors if var in f.vars]
        factors = [f for f in factors if var not in f.vars]
        product = bucket[0]
        for f in bucket[1:]:
            product = _multiply(product, f)
        width = max(width, len(product.vars) - 1)
        if width > width_limit:
            raise WidthExceeded(width, width_limit)
        factors.append(_sum_out(product, var))
    value = 1.0
    for f in factors:
        value *= f.table.get((), 0.0)
    return value, width


def exact_query(net: PENet, q: Query, width_limit: int = DEFAULT_WIDTH_LIMIT) -> QueryResult:
    """Exact conditional probability of the target conjunction by variable elimination."""
    if not net.finalized:
        raise PlanEvalError("exact_query requires a finalized net")
    if q.mode != EXACT:
        raise PlanEvalError(f"exact_query called with mode {q.mode!r}")
    _check_evidence(net, q.evidence)
    z_e, width_e = _eliminate_all(net, dict(q.evidence), width_limit)
    if z_e <= 0.0:
        raise InfeasibleEvidence("evidence has probability zero")
    if not _targets_reachable(net, q.targets):
        return QueryResult(0.0, EXACT, elimination_width=width_e)
    both = dict(q.evidence)
    for nid, state in q.targets:
        if both.get(nid, state) != state:
            return QueryResult(0.0, EXACT, elimination_width=width_e)
        both[nid] = state
    z_te, width_t = _eliminate_all(net, both, width_limit)
    return QueryResult(min(max(z_te / z_e, 0.0), 1.0), EXACT, elimination_width=max(width_e, width_t))


# ---------------------------------------------------------------------------
# Monte Carlo: forward sampling with likelihood weighting
# ---------------------------------------------------------------------------


def mc_query(net: PENet, q: Query) -> QueryResult:
    """Likelihood-weighted estimate of the target conjunction; reproducible by seed."""
    if not net.finalized:
        raise PlanEvalError("mc_query requires a finalized net")
    _check_evidence(net, q.evidence)
    n = q.samples
    rng = np.random.Generator(np.random.PCG64(q.seed))
    order = net.topological_nodes()
    values = {}
    weights = np.ones(n)

    for nid in order:
        node = net.nodes[nid]
        index = {s: i for i, s in enumerate(node.states)}
        pools = [net.nodes[p].states for p in node.parents]
        strides = []
        acc = 1
        for pool in reversed(pools):
            strides.append(acc)
            acc *= len(pool)
        strides = list(reversed(strides))
        row_index = np.zeros(n, dtype=np.int64)
        for parent, stride in zip(node.parents, strides):
            row_index += values[parent] * stride
        matrix = _cpt_matrix(net, nid)
        if nid in q.evidence:
            col = index[q.evidence[nid]]
            weights = weights * matrix[row_index, col]
            values[nid] = np.full(n, col, dtype=np.int64)
        else:
            cdf = np.cumsum(matrix, axis=1)[row_index]
            draws = rng.random(n)
            picked = (draws[:, None] > cdf).sum(axis=1)
            values[nid] = np.minimum(picked, len(node.states) - 1).astype(np.int64)

    total = weights.sum()
    if total <= 0.0:
        raise ZeroWeight("all samples are inconsistent with the evidence")
    hit = np.ones(n, dtype=bool)
    for nid, state in q.targets:
        node = net.nodes[nid]
        if state not in node.states:
            hit[:] = False
            break
        hit &= values[nid] == node.states.index(state)
    x = hit.astype(float)
    estimate = float((weights * x).sum() / total)
    residual = x - estimate
    se = float(np.sqrt(((weights * residual) ** 2).sum()) / total)
    return QueryResult(estimate, MC, standard_error=se, sample_count=n)


def _cpt_matrix(net: PENet, nid) -> np.ndarray:
    node = net.nodes[nid]
    pools = [net.nodes[p].states for p in node.parents]
    rows = []
    for combo in itertools.product(*pools):
        dist = node.cpt[combo]
        rows.append([dist.get(s, 0.0) for s in node.states])
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def oracle_enumerate(net: PENet, q: Query, bound: float = DEFAULT_ORACLE_BOUND) -> QueryResult:
    """Ground-truth query by summing the fully expanded joint (zero-pruned DFS)."""
    if not net.finalized:
        raise PlanEvalError("oracle_enumerate requires a finalized net")
    _check_evidence(net, q.evidence)
    size = 1.0
    for node in net.nodes.values():
        size *= len(node.states)
        if size > bound:
            raise TooLarge(f"joint state space exceeds the {bound:g} bound")
    order = net.topological_nodes()
    targets = dict()
    for nid, state in q.targets:
        if targets.get(nid, state) != state:
            return QueryResult(0.0, "oracle")
        targets[nid] = state
    reachable = _targets_reachable(net, q.targets)

    z_e = 0.0
    z_te = 0.0
    assignment = {}

    def walk(depth: int, prob: float):
        nonlocal z_e, z_te
        if depth == len(order):
            z_e += prob
            if reachable and all(assignment[nid] == state for nid, state in targets.items()):
                z_te += prob
            return
        nid = order[depth]
        node = net.nodes[nid]
        combo = tuple(assignment[p] for p in node.parents)
        dist = node.cpt[combo]
        pinned = q.evidence.get(nid)
        for state, p in dist.items():
            if p == 0.0:
                continue
            if pinned is not None and state != pinned:
                continue
            assignment[nid] = state
            walk(depth + 1, prob * p)
        assignment.pop(nid, None)

    walk(0, 1.0)
    if z_e <= 0.0:
        raise InfeasibleEvidence("evidence has probability zero")
    return QueryResult(min(max(z_te / z_e, 0.0), 1.0), "oracle")


def joint_distribution(net: PENet, keep=None, bound: float = DEFAULT_ORACLE_BOUND) -> dict:
    """Joint over ``keep`` nodes (default: all), marginalizing the rest.

    Returns {assignment tuple aligned with sorted(keep): probability} with
    zero outcomes omitted. Test plumbing for joint-equivalence checks.
    """
    if keep is None:
        keep = list(net.nodes)
    keep = sorted(keep, key=net.node_key)
    size = 1.0
    for node in net.nodes.values():
        size *= len(node.states)
        if size > bound:
            raise TooLarge(f"joint state space exceeds the {bound:g} bound")
    order = net.topological_nodes()
    out = {}
    assignment = {}

    def walk(depth: int, prob: float):
        if depth == len(order):
            key = tuple(assignment[nid] for nid in keep)
            out[key] = out.get(key, 0.0) + prob
            return
        nid = order[depth]
        node = net.nodes[nid]
        combo = tuple(assignment[p] for p in node.parents)
        for state, p in node.cpt[combo].items():
            if p == 0.0:
                continue
            assignment[nid] = state
            walk(depth + 1, prob * p)
        assignment.pop(nid, None)

    walk(0, 1.0)
    return out


# ---------------------------------------------------------------------------
# plan metrics
# ---------------------------------------------------------------------------


def _goal_targets(net: PENet, plan) -> list:
    final = net.final_situation()
    return [(atom_node(atom, final), state) for atom, state in plan.goals]


def _selected_path_targets(net: PENet) -> list:
    selected_of = {rec.node: rec.selected for rec in net.selection_records if rec.origin == "expansion"}
    targets = []
    for rec in net.selection_records:
        if rec.origin != "expansion":
            continue
        on_path = all(selected_of.get(gnode) == glabel for gnode, glabel in rec.guards)
        if on_path:
            targets.append((rec.node, rec.selected))
    return targets


def _run(net: PENet, targets, mode: str, samples: int, seed: int, width_limit: int) -> QueryResult:
    query = Query(targets=targets, mode=EXACT if mode == EXACT else MC, samples=samples, seed=seed)
    if mode == EXACT:
        return exact_query(net, query, width_limit=width_limit)
    return mc_query(net, query)


def plan_success(net: PENet, plan, mode: str = EXACT, samples: int = 10000, seed: int = 0,
                 width_limit: int = DEFAULT_WIDTH_LIMIT) -> QueryResult:
    """Probability that the goals hold in the final situation and every
    expansion-selection node on the selected detailed path takes its
    planner-chosen alternative."""
    targets = _goal_targets(net, plan) + _selected_path_targets(net)
    return _run(net, targets, mode, samples, seed, width_limit)


def leads_to_success(net: PENet, plan, mode: str = EXACT, samples: int = 10000, seed: int = 0,
                     width_limit: int = DEFAULT_WIDTH_LIMIT) -> QueryResult:
    """Probability of the goal conjunction in the final situation, whichever
    branches actually execute."""
    return _run(net, _goal_targets(net, plan), mode, samples, seed, width_limit)
