"""The plan-evaluation network substrate.

A PENet is a situation-layered DAG. Node CPTs are stored sparsely as rows
keyed by full parent-state combinations; fragments carry rows with partial
conditions which are expanded over the remaining parents when pasted.

Two merge operations build nets from model fragments:

* ``paste_onto``: fragment rows replace conflicting rows already in the net
  (last writer wins, at row granularity).
* ``paste_into``: fragment rows fill gaps only; existing rows are untouched.

Layering rules, enforced on every arc:

* a primitive node's atom parents live in strictly earlier situations
  (gating nodes - selection, clock, relative-end-time - may share its
  situation, but never a predicate node);
* a derived node's parents are primitive nodes in the same situation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import IncompleteCPT, LayeringViolation, PlanEvalError
from .model import OTHER, PROB_TOL, GroundAtom, label_sort_key

PRIMITIVE = "primitive"
DERIVED = "derived"
SELECTION = "action-selection"
CLOCK = "clock"
RELATIVE_END_TIME = "relative-end-time"

_KIND_RANK = {PRIMITIVE: 0, DERIVED: 1, SELECTION: 2, CLOCK: 3, RELATIVE_END_TIME: 4}

ATOM_KINDS = (PRIMITIVE, DERIVED)


@dataclass(frozen=True)
class SituationId:
    index: int
    sub: str = ""  # "" | "a" | "b"

    def __str__(self):
        return f"S{self.index}{self.sub}"


def parse_situation(token: str) -> SituationId:
    text = token[1:] if token[:1] in ("S", "s") else token
    sub = ""
    if text and text[-1] in ("a", "b"):
        sub = text[-1]
        text = text[:-1]
    return SituationId(int(text), sub)


@dataclass(frozen=True)
class NodeId:
    """A node address: what it stands for plus the situation it lives in.

    ``ref`` is a discriminated tuple:
    ("atom", name, args) | ("sel", boundary) | ("clock",) |
    ("ret", earlier_step, later_step) | ("dur", step_id)
    """

    ref: tuple
    sit: SituationId

    def __str__(self):
        kind = self.ref[0]
        if kind == "atom":
            return f"{GroundAtom(self.ref[1], self.ref[2])}@{self.sit}"
        if kind == "sel":
            return f"sel({self.ref[1]})@{self.sit}"
        if kind == "clock":
            return f"clock@{self.sit}"
        if kind == "ret":
            return f"ret({self.ref[1]},{self.ref[2]})@{self.sit}"
        return f"dur({self.ref[1]})@{self.sit}"

    @property
    def atom(self) -> GroundAtom:
        if self.ref[0] != "atom":
            raise ValueError(f"{self} is not an atom node")
        return GroundAtom(self.ref[1], self.ref[2])


def atom_node(atom: GroundAtom, sit: SituationId) -> NodeId:
    return NodeId(("atom", atom.name, tuple(atom.args)), sit)


def sel_node(boundary: str, sit: SituationId) -> NodeId:
    return NodeId(("sel", boundary), sit)


def clock_node(sit: SituationId) -> NodeId:
    return NodeId(("clock",), sit)


def ret_node(step_earlier: str, step_later: str, sit: SituationId) -> NodeId:
    return NodeId(("ret", step_earlier, step_later), sit)


def dur_node(step_id: str, sit: SituationId) -> NodeId:
    return NodeId(("dur", step_id), sit)


@dataclass
class Node:
    id: NodeId
    kind: str
    states: list
    parents: list = field(default_factory=list)  # kept sorted by the net's node key
    cpt: dict = field(default_factory=dict)  # combo tuple -> {state: prob}
    provenance: dict = field(default_factory=dict)  # combo tuple -> str


@dataclass
class FragmentNode:
    id: NodeId
    kind: str
    states: list
    parents: list = field(default_factory=list)


@dataclass
class FragmentRow:
    node: NodeId
    condition: dict  # NodeId -> state (partial; expanded over remaining parents)
    distribution: dict
    provenance: str = ""


@dataclass
class Fragment:
    """A PENet-shaped piece produced by instantiating one model."""

    nodes: list = field(default_factory=list)
    rows: list = field(default_factory=list)


class PENet:
    """Situation-layered belief network over plan-evaluation nodes."""

    def __init__(self, situation_order=()):
        self.nodes: dict = {}
        self.situation_order: list = list(situation_order)
        self._positions = {sit: i for i, sit in enumerate(self.situation_order)}
        self.finalized = False
        self.context = None  # construction schedule, attached by the build pipeline
        self.selection_records: list = []

    # -- situations ------------------------------------------------------

    def ensure_situation(self, sit: SituationId):
        if sit in self._positions:
            return
        # Ad-hoc nets register situations in index order; pipeline nets fix the
        # order up front (splits deliberately deviate from numeric order).
        self.situation_order.append(sit)
        self.situation_order.sort(key=lambda s: (s.index, s.sub))
        self._positions = {s: i for i, s in enumerate(self.situation_order)}

    def position(self, sit: SituationId) -> int:
        return self._positions[sit]

    def node_key(self, nid: NodeId):
        kind_rank = _KIND_RANK.get(self.nodes[nid].kind, 9) if nid in self.nodes else 9
        return (self._positions[nid.sit], kind_rank, str(nid))

    # -- structure -------------------------------------------------------

    def ensure_node(self, spec: FragmentNode) -> Node:
        self._mutable()
        self.ensure_situation(spec.id.sit)
        node = self.nodes.get(spec.id)
        if node is None:
            node = Node(spec.id, spec.kind, list(spec.states))
            self.nodes[spec.id] = node
        else:
            if node.kind != spec.kind:
                raise PlanEvalError(f"node {spec.id} exists with kind {node.kind}, fragment says {spec.kind}")
            for state in spec.states:
                if state not in node.states:
                    node.states.append(state)
        for parent in spec.parents:
            self.add_parent(node, parent)
        return node

    def add_parent(self, node: Node, parent: NodeId):
        if parent in node.parents:
            return
        self._mutable()
        if parent not in self.nodes:
            raise PlanEvalError(f"parent {parent} of {node.id} is not in the net")
        self._check_layering(parent, node)
        node.parents.append(parent)
        node.parents.sort(key=self.node_key)
        index = node.parents.index(parent)
        if node.cpt:
            # Existing rows never mentioned the new parent: expand them over it.
            old_cpt, old_prov = node.cpt, node.provenance
            node.cpt, node.provenance = {}, {}
            for combo, dist in old_cpt.items():
                for value in self.nodes[parent].states:
                    new_combo = combo[:index] + (value,) + combo[index:]
                    node.cpt[new_combo] = dict(dist)
                    node.provenance[new_combo] = old_prov[combo]
        self._assert_acyclic()

    def _check_layering(self, parent: NodeId, child: Node):
        pkind = self.nodes[parent].kind
        ppos, cpos = self._positions[parent.sit], self._positions[child.id.sit]
        if child.kind == PRIMITIVE:
            if pkind in ATOM_KINDS and ppos >= cpos:
                raise LayeringViolation(
                    f"arc {parent} -> {child.id}: predicate parents of a primitive node "
                    "must lie in an earlier situation"
                )
            if pkind not in ATOM_KINDS and ppos > cpos:
                raise LayeringViolation(f"arc {parent} -> {child.id}: parent follows the child situation")
        elif child.kind == DERIVED:
            if ppos != cpos:
                raise LayeringViolation(f"arc {parent} -> {child.id}: derived nodes take same-situation parents only")
            if pkind != PRIMITIVE:
                raise LayeringViolation(f"arc {parent} -> {child.id}: derived nodes take primitive parents only")

    def _assert_acyclic(self):
        seen, active = set(), set()

        def visit(nid):
            if nid in seen:
                return
            if nid in active:
                raise PlanEvalError(f"paste created a cycle through {nid}")
            active.add(nid)
            for parent in self.nodes[nid].parents:
                visit(parent)
            active.discard(nid)
            seen.add(nid)

        for nid in self.nodes:
            visit(nid)

    def topological_nodes(self) -> list:
        """Nodes with every parent before its child; deterministic order."""
        order = []
        placed = set()
        pending = sorted(self.nodes, key=self.node_key)
        while pending:
            progressed = False
            remaining = []
            for nid in pending:
                if all(p in placed for p in self.nodes[nid].parents):
                    order.append(nid)
                    placed.add(nid)
                    progressed = True
                else:
                    remaining.append(nid)
            if not progressed:
                raise PlanEvalError("net is cyclic")
            pending = remaining
        return order

    # -- row writing -----------------------------------------------------

    def _write_rows(self, frag: Fragment, overwrite: bool):
        for row in frag.rows:
            node = self.nodes[row.node]
            for parent in row.condition:
                if parent not in node.parents:
                    self.add_parent(node, parent)
            pools = []
            feasible = True
            for parent in node.parents:
                if parent in row.condition:
                    pin = row.condition[parent]
                    if pin not in self.nodes[parent].states:
                        feasible = False  # row keyed on an unreachable parent state
                        break
                    pools.append((pin,))
                else:
                    pools.append(tuple(self.nodes[parent].states))
            if not feasible:
                continue
            targets = [
                combo for combo in itertools.product(*pools)
                if overwrite or combo not in node.cpt
            ]
            if not targets:
                continue
            dist = self._fit_distribution(node, row.distribution)
            for combo in targets:
                node.cpt[combo] = dict(dist)
                node.provenance[combo] = row.provenance

    def _fit_distribution(self, node: Node, dist: dict) -> dict:
        fitted = {}
        for state, prob in dist.items():
            if prob == 0.0:
                continue
            if state not in node.states:
                if OTHER in node.states:
                    state = OTHER
                else:
                    raise PlanEvalError(f"state {state!r} not among {node.id}'s states {node.states}")
            fitted[state] = fitted.get(state, 0.0) + prob
        return {s: fitted[s] for s in sorted(fitted, key=label_sort_key)}

    def _mutable(self):
        if self.finalized:
            raise PlanEvalError("net is finalized and immutable")

    # -- queries over structure -------------------------------------------

    def find(self, atom, situation) -> NodeId:
        """Node id for an atom (GroundAtom or '(Loc A)' text) at a situation ('S1' or SituationId)."""
        if isinstance(atom, str):
            parts = atom.strip().lstrip("(").rstrip(")").split()
            atom = GroundAtom(parts[0], tuple(parts[1:]))
        if isinstance(situation, str):
            situation = parse_situation(situation)
        nid = atom_node(atom, situation)
        if nid not in self.nodes:
            raise KeyError(f"no node {nid} in net")
        return nid

    def row_provenance(self, nid: NodeId, combo: tuple) -> str:
        return self.nodes[nid].provenance[combo]

    def final_situation(self) -> SituationId:
        return self.situation_order[-1]


def paste_onto(net: PENet, frag: Fragment) -> PENet:
    """Merge a fragment, replacing conflicting rows (last writer wins per row)."""
    net._mutable()
    for spec in frag.nodes:
        net.ensure_node(spec)
    net._write_rows(frag, overwrite=True)
    net._assert_acyclic()
    return net


def paste_into(net: PENet, frag: Fragment) -> PENet:
    """Merge a fragment without disturbing anything already present."""
    net._mutable()
    for spec in frag.nodes:
        net.ensure_node(spec)
    net._write_rows(frag, overwrite=False)
    net._assert_acyclic()
    return net


def finalize(net: PENet) -> PENet:
    """Check full CPT coverage, normalize rows exactly, and freeze the net."""
    if net.finalized:
        return net
    for nid in sorted(net.nodes, key=net.node_key):
        node = net.nodes[nid]
        pools = [net.nodes[p].states for p in node.parents]
        for combo in itertools.product(*pools):
            if combo not in node.cpt:
                raise IncompleteCPT(nid, _describe_combo(node, combo))
        expected = 1
        for pool in pools:
            expected *= len(pool)
        if len(node.cpt) != expected:
            extra = set(node.cpt) - set(itertools.product(*pools))
            raise PlanEvalError(f"node {nid} carries rows for unreachable combinations {sorted(extra)[:3]}")
        for combo, dist in node.cpt.items():
            total = sum(dist.values())
            if abs(total - 1.0) > PROB_TOL:
                raise PlanEvalError(f"row {nid}{combo} sums to {total!r}")
            if total != 1.0:
                node.cpt[combo] = {s: p / total for s, p in dist.items()}
    net.finalized = True
    return net


def _describe_combo(node: Node, combo: tuple) -> str:
    return ", ".join(f"{p}={v}" for p, v in zip(node.parents, combo))


def canonical_dump(net: PENet) -> str:
    """Deterministic text rendering of the whole net; equal nets dump equal bytes."""
    lines = [f"situations {' '.join(str(s) for s in net.situation_order)}"]
    for nid in sorted(net.nodes, key=net.node_key):
        node = net.nodes[nid]
        lines.append(
            f"node {nid} kind={node.kind} states={{{' '.join(str(s) for s in node.states)}}}"
            f" parents=[{', '.join(str(p) for p in node.parents)}]"
        )
        for combo in sorted(node.cpt, key=lambda c: tuple(str(v) for v in c)):
            dist = node.cpt[combo]
            body = " ".join(f"{s}:{dist[s]:.12g}" for s in sorted(dist, key=label_sort_key))
            src = node.provenance.get(combo, "")
            lines.append(f"  row ({', '.join(str(v) for v in combo)}) -> {{{body}}}  # {src}")
    return "\n".join(lines) + "\n"
