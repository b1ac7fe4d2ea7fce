"""Construction pipeline: worked scenarios, completion, compaction, determinism."""

import pytest

from planeval import (
    BuildOptions,
    BuildError,
    GroundAtom,
    Query,
    build_pe_net,
    canonical_dump,
    exact_query,
    flatten_hierarchy,
    leads_to_success,
    linearize,
    validate_kb,
)
from planeval.build import enumerate_states, make_schedule
from planeval.net import atom_node

import instance_gen
import trajectory_oracle as oracle
from fixtures import (
    CONTINGENT_KB,
    DURING_KB,
    DURING_PLAN,
    HIERARCHY_KB,
    HIERARCHY_PLAN,
    INVERTED_KB,
    MOVE_KB,
    RELIABLE_MOVE_KB,
    RELIABLE_MOVE_PLAN,
    TWO_STEP_PLAN,
    contingent_plan,
    load,
    load_kb,
)


def build(kb_text, plan_text, opts=None):
    kb, plan = load(kb_text, plan_text)
    return kb, plan, build_pe_net(plan, kb, opts)


# -- the two-step worked example ------------------------------------------


def test_two_step_plan_structure():
    _kb, _plan, net = build(MOVE_KB, TWO_STEP_PLAN)
    a1 = net.find("(Loc A)", "S1")
    b1 = net.find("(Loc B)", "S1")
    b2 = net.find("(Loc B)", "S2")
    assert net.row_provenance(a1, ("L1",)) == "action s1"
    assert net.row_provenance(b1, ("L3",)) == "default-persistence"
    assert net.row_provenance(b2, ("L3",)) == "action s2"
    # the partially covered (Loc A)@S2 mixes KB persistence and the default
    a2 = net.nodes[net.find("(Loc A)", "S2")]
    sources = set(a2.provenance.values())
    assert sources == {"persistence (Loc ?obj)", "default-persistence"}


def test_empty_plan_keeps_priors():
    kb, plan = load(MOVE_KB, "initial { (Loc A)=L1:0.25 (Loc A)=L2:0.75 }\ngoal { (Loc A)=L2 }")
    net = build_pe_net(plan, kb)
    assert [str(s) for s in net.situation_order] == ["S0"]
    assert leads_to_success(net, plan).probability == 0.75


def test_build_requires_clean_kb():
    kb = load_kb(INVERTED_KB)
    from planeval import Plan
    with pytest.raises(BuildError):
        build_pe_net(Plan(), kb)


def test_invalid_caps_rejected():
    kb, plan = load(MOVE_KB, TWO_STEP_PLAN)
    from planeval import PlanEvalError
    with pytest.raises(PlanEvalError):
        build_pe_net(plan, kb, BuildOptions(state_cap=1))


def test_unknown_selector_reference_rejected():
    from planeval import SourceDocument, UnknownConditionNode, parse_kb, parse_plan

    plan_text = """
step f1 a1 (FixA m) start=b0 end=b1
contingent at b0 {
  sel(nowhere)=f9 -> f1
}
initial { (S m)=ok (R m)=lo }
goal { (R m)=hi }
"""
    kb, _ = parse_kb(SourceDocument(CONTINGENT_KB, "kb"))
    plan, _diags = parse_plan(SourceDocument(plan_text, "plan"), kb)
    with pytest.raises((BuildError, UnknownConditionNode)):
        build_pe_net(plan, kb)


# -- derived-effect regression ---------------------------------------------


def test_reliable_move_derived_regression():
    _kb, plan, net = build(RELIABLE_MOVE_KB, RELIABLE_MOVE_PLAN)
    p_loc = exact_query(net, Query(targets=[(net.find("(Loc X)", "S1"), "L2")])).probability
    p_at = exact_query(net, Query(targets=[(net.find("(At L1)", "S1"), "X")])).probability
    assert abs(p_loc - 1.0) <= 1e-12
    assert abs(p_at - 0.0) <= 1e-12
    # the action model, not persistence, supplies the moved object's row
    assert net.row_provenance(net.find("(Loc X)", "S1"), ("L1",)) == "action s1"


# -- partial-model completion -----------------------------------------------


PARTIAL_KB = """
predicate (P) kind=primitive states { a b c }
action (Poke) level=0 {
  effect (P) { (P)=a -> { b:1.0 } }
}
persistence (P) {
  b -> { b:0.5 c:0.5 }
}
"""

PARTIAL_PLAN = """
step s1 ag (Poke) start=b0 end=b1
initial { (P)=a:0.5 (P)=b:0.25 (P)=c:0.25 }
goal { (P)=b }
"""


def test_partial_action_rows_completed_by_persistence_then_default():
    _kb, plan, net = build(PARTIAL_KB, PARTIAL_PLAN)
    node = net.nodes[net.find("(P)", "S1")]
    assert net.row_provenance(node.id, ("a",)) == "action s1"
    assert net.row_provenance(node.id, ("b",)) == "persistence (P)"
    assert net.row_provenance(node.id, ("c",)) == "default-persistence"
    assert node.cpt[("c",)] == {"c": 1.0}
    # joint sanity: P(P=b @S1) = 0.5 (action) + 0.25*0.5 (persistence)
    p = exact_query(net, Query(targets=[(node.id, "b")])).probability
    assert abs(p - 0.625) <= 1e-12


def test_no_incomplete_cpts_after_backward_pass():
    for seed in range(20):
        kb, plan = instance_gen.generate(seed)
        net = build_pe_net(plan, kb)  # finalize inside raises IncompleteCPT on any gap
        assert net.finalized


# -- contingency merging ------------------------------------------------------


@pytest.mark.parametrize("weight", [0.0, 0.2, 0.5, 1.0])
def test_contingent_mixture_matches_single_action_nets(weight):
    kb, plan, net = build(CONTINGENT_KB, contingent_plan(weight))
    p = leads_to_success(net, plan).probability
    expected = weight * 0.7 + (1.0 - weight) * 0.2
    assert abs(p - expected) <= 1e-9


def test_selector_on_prior_selection_node():
    kb_text = CONTINGENT_KB
    plan_text = """
step f1 a1 (FixA m) start=b0 end=b1
step f2 a2 (FixB m) start=b0 end=b1
step g1 a3 (FixA m) start=b1 end=b2
step g2 a4 (FixB m) start=b1 end=b2
contingent at b0 {
  (S m)=ok -> { f1:0.5 f2:0.5 }
}
contingent at b1 {
  sel(b0)=f1 -> g2
  sel(b0)=f2 -> g1
}
initial { (S m)=ok (R m)=lo }
goal { (R m)=hi }
"""
    kb, plan, net = build(kb_text, plan_text)
    sel_nodes = [nid for nid in net.nodes if nid.ref[0] == "sel"]
    assert len(sel_nodes) == 2
    later = [nid for nid in sel_nodes if nid.ref[1] == "b1"][0]
    assert any(p.ref == ("sel", "b0") for p in net.nodes[later].parents)
    # mixture: half the worlds run f1 then g2, half f2 then g1
    p = leads_to_success(net, plan).probability
    expected = 0.5 * 0.2 + 0.5 * 0.7
    assert abs(p - expected) <= 1e-9


def test_noop_alternative_falls_back_to_persistence():
    plan_text = """
step f1 a1 (FixA m) start=b0 end=b1
contingent at b0 {
  (S m)=ok -> { f1:0.5 noop:0.5 }
}
initial { (S m)=ok (R m)=lo }
goal { (R m)=hi }
"""
    kb, plan, net = build(CONTINGENT_KB, plan_text)
    sel = [nid for nid in net.nodes if nid.ref[0] == "sel"][0]
    assert "noop" in net.nodes[sel].states
    p = leads_to_success(net, plan).probability
    assert abs(p - 0.5 * 0.7) <= 1e-9


# -- during conditions and effects -------------------------------------------


def test_during_effect_lands_on_intermediate_situation():
    _kb, plan, net = build(DURING_KB, DURING_PLAN)
    noise = net.find("(Noise)", "S1")
    assert net.row_provenance(noise, ("quiet",)) == "during asm"
    p = exact_query(net, Query(targets=[(noise, "loud")])).probability
    assert abs(p - 1.0) <= 1e-12


def test_during_condition_gates_named_effect_only():
    _kb, plan, net = build(DURING_KB, DURING_PLAN)
    p_built = leads_to_success(net, plan).probability
    p_mark = exact_query(net, Query(targets=[(net.find("(Mark W)", "S2"), "yes")])).probability
    assert abs(p_built - 0.6) <= 1e-9  # gated by (Power)=on at S1
    assert abs(p_mark - 1.0) <= 1e-9  # ungated consequence fires regardless


def test_nullify_action_reverts_all_consequences():
    _kb, plan, net = build(DURING_KB, DURING_PLAN, BuildOptions(during_failure_semantics="nullify-action"))
    p_mark = exact_query(net, Query(targets=[(net.find("(Mark W)", "S2"), "yes")])).probability
    assert abs(p_mark - 0.6) <= 1e-9


def test_step_without_intermediates_unaffected():
    kb_text = DURING_KB
    plan_text = """
step asm a1 (Assemble W) start=b0 end=b1
initial { (Power)=on (Noise)=quiet (Built W)=no (Mark W)=no }
goal { (Built W)=yes }
"""
    _kb, plan, net = build(kb_text, plan_text)
    assert leads_to_success(net, plan).probability == 1.0


def test_during_condition_over_two_intermediates():
    plan_text = """
step asm a1 (Assemble W) start=b0 end=b3
step cut1 a2 (Cut) start=b0 end=b1
step cut2 a2 (Cut) start=b1 end=b2
before b2 b3
initial { (Power)=on (Noise)=quiet (Built W)=no (Mark W)=no }
goal { (Built W)=yes }
"""
    _kb, plan, net = build(DURING_KB, plan_text)
    # the gate must hold at both S1 and S2: P(on,on) = 0.6 * 0.6
    p = leads_to_success(net, plan).probability
    assert abs(p - 0.36) <= 1e-9
    gates = [p for p in net.nodes[net.find("(Built W)", "S3")].parents if p.ref[0] == "atom" and p.ref[1] == "Power"]
    assert len(gates) == 2


def test_contingent_step_with_during_clauses_matches_oracle():
    kb_text = DURING_KB + """
predicate (Go) kind=primitive states { ok no }
"""
    plan_text = """
step asm a1 (Assemble W) start=b0 end=b2
step cut a2 (Cut) start=b0 end=b1
before b1 b2
contingent at b0 {
  (Go)=ok -> { asm:0.5 noop:0.5 }
}
initial { (Go)=ok (Power)=on (Noise)=quiet (Built W)=no (Mark W)=no }
goal { (Built W)=yes }
"""
    kb, plan, net = build(kb_text, plan_text)
    flat = flatten_hierarchy(plan)
    order = linearize(flat)
    worlds = oracle.enumerate_trajectories(kb, flat, order)
    atoms = oracle._universe(kb, flat)
    final = len(order) - 1
    for atom in atoms:
        expected = oracle.marginal(worlds, atom, final)
        nid = atom_node(atom, net.situation_order[-1])
        for state in net.nodes[nid].states:
            got = exact_query(net, Query(targets=[(nid, state)])).probability
            assert abs(got - expected.get(state, 0.0)) <= 1e-9, (str(atom), state)
    # sanity: the guarded during effect fires only when the step is selected
    noise = net.find("(Noise)", "S1")
    p_loud = exact_query(net, Query(targets=[(noise, "loud")])).probability
    assert abs(p_loud - 0.5) <= 1e-9


def test_always_false_during_condition_under_nullify_equals_no_action():
    kb_text = """
predicate (Flag) kind=primitive states { off on }
predicate (Goal) kind=primitive states { no yes }
predicate (Tick) kind=primitive states { t0 t1 }
action (Work) level=0 {
  effect (Goal) { * -> { yes:1.0 } }
  during-cond (Flag)=on
}
action (Beat) level=0 { effect (Tick) { * -> { t1:1.0 } } }
"""
    plan_text = """
step w a1 (Work) start=b0 end=b2
step t a2 (Beat) start=b0 end=b1
before b1 b2
initial { (Flag)=off (Goal)=no (Tick)=t0 }
goal { (Goal)=yes }
"""
    kb, plan = load(kb_text, plan_text)
    net = build_pe_net(plan, kb, BuildOptions(during_failure_semantics="nullify-action"))
    assert leads_to_success(net, plan).probability == 0.0


# -- hierarchy ---------------------------------------------------------------


def test_hierarchy_residual_comes_from_abstract_model():
    _kb, plan, net = build(HIERARCHY_KB, HIERARCHY_PLAN)
    side = net.find("(Side T)", "S2")
    node = net.nodes[side]
    assert all(src == "residual big" for src in node.provenance.values())
    p = exact_query(net, Query(targets=[(side, "dirty")])).probability
    assert abs(p - 0.3) <= 1e-9


def test_abstract_step_without_expansion_uses_abstract_model():
    plan_text = """
step big a1 (BigFix T) start=b0 end=b1
initial { (Done T)=no (Side T)=clean (Risk)=low }
goal { (Done T)=yes }
"""
    _kb, plan, net = build(HIERARCHY_KB, plan_text)
    assert abs(leads_to_success(net, plan).probability - 0.9) <= 1e-9


NESTED_KB = HIERARCHY_KB + """
predicate (Extra) kind=primitive states { off on }
action (MidFix ?t) level=1 {
  effect (Done ?t) { * -> { yes:0.7 no:0.3 } }
  effect (Extra) { * -> { on:0.6 off:0.4 } }
}
"""

NESTED_PLAN = """
step big a1 (BigFix T) start=b0 end=b9
expand big {
  selected c1 (MidFix T)
  alt c2 (AltFix T) cond=(Risk)=high
}
expand c1 {
  selected w {
    step w1 a1 (StepOne T) start=b0 end=m1
    step w2 a1 (StepTwo T) start=m1 end=b9
  }
}
initial { (Done T)=no (Side T)=clean (Extra)=off (Risk)=low:0.75 (Risk)=high:0.25 }
goal { (Done T)=yes }
"""


def test_nested_expansion_from_dsl():
    from planeval import plan_success

    kb, plan, net = build(NESTED_KB, NESTED_PLAN)
    # the inner expansion has one alternative: spliced, no second selection node
    sels = [nid for nid in net.nodes if nid.ref[0] == "sel"]
    assert len(sels) == 1
    lead = leads_to_success(net, plan).probability
    succ = plan_success(net, plan).probability
    assert abs(lead - (0.75 * 0.8 + 0.25 * 0.5)) <= 1e-9
    assert abs(succ - 0.75 * 0.8) <= 1e-9
    # the mid-level model's untouched consequence survives on its branch only
    extra = net.find("(Extra)", "S2")
    p_on = exact_query(net, Query(targets=[(extra, "on")])).probability
    assert abs(p_on - 0.75 * 0.6) <= 1e-9
    assert "residual c1" in set(net.nodes[extra].provenance.values())


# -- state enumeration and OTHER compaction -----------------------------------


SPREAD_KB = """
predicate (Reg) kind=primitive states { x1 x2 x3 x4 x5 x6 x7 x8 x9 x10 x11 x12 x13 x14 x15 OTHER }
action (Spread) level=0 {
  effect (Reg) {
    (Reg)=x1 -> { x2:0.5 x3:0.5 }
    (Reg)=x2 -> { x4:0.5 x5:0.5 }
    (Reg)=x3 -> { x6:0.5 x7:0.5 }
    (Reg)=x4 -> { x8:0.5 x9:0.5 }
    (Reg)=x5 -> { x10:0.5 x11:0.5 }
    (Reg)=x6 -> { x12:0.5 x13:0.5 }
    (Reg)=x7 -> { x14:0.5 x15:0.5 }
  }
}
"""


def spread_plan(length):
    lines = [f"step s{i} ag (Spread) start=b{i} end=b{i + 1}" for i in range(length)]
    lines.append("initial { (Reg)=x1 }")
    lines.append("goal { (Reg)=x2 }")
    return "\n".join(lines)


def test_enumerate_states_doubles_until_capped():
    kb, plan = load(SPREAD_KB, spread_plan(6))
    opts = BuildOptions(state_cap=4)
    flat = flatten_hierarchy(plan)
    schedule = make_schedule(flat, kb, opts, linearize(flat))
    states = enumerate_states(schedule)
    reg = GroundAtom("Reg")
    sizes = [len(states[atom_node(reg, sit.sid)]) for sit in schedule.situations]
    assert sizes[0] == 1 and sizes[1] == 2
    assert all(size <= 4 for size in sizes)
    assert "OTHER" in states[atom_node(reg, schedule.situations[3].sid)]
    # uncapped enumeration confirms the true support kept growing
    wide = enumerate_states(make_schedule(flat, kb, BuildOptions(state_cap=32), linearize(flat)))
    assert len(wide[atom_node(reg, schedule.situations[3].sid)]) == 8


def test_capped_net_still_builds_and_normalizes():
    kb, plan = load(SPREAD_KB, spread_plan(6))
    net = build_pe_net(plan, kb, BuildOptions(state_cap=4))
    for node in net.nodes.values():
        assert len(node.states) <= 4


def test_identity_persistence_keeps_state_sets_constant():
    kb, plan = load(MOVE_KB, "step s1 a1 (Move A L1 L2) start=b0 end=b1\ninitial { (Loc A)=L1 (Loc B)=L3 }\ngoal { (Loc B)=L3 }")
    flat = flatten_hierarchy(plan)
    schedule = make_schedule(flat, kb, BuildOptions(), linearize(flat))
    states = enumerate_states(schedule)
    b = GroundAtom("Loc", ("B",))
    assert states[atom_node(b, schedule.situations[0].sid)] == states[atom_node(b, schedule.situations[1].sid)]


# -- growth and determinism ----------------------------------------------------


def shuttle_plan(length):
    lines = []
    spots = ["L1", "L2"]
    for i in range(length):
        frm, to = spots[i % 2], spots[(i + 1) % 2]
        lines.append(f"step s{i} ag (Move A {frm} {to}) start=b{i} end=b{i + 1}")
    lines.append("initial { (Loc A)=L1 }")
    lines.append("goal { (Loc A)=L2 }")
    return "\n".join(lines)


def test_linear_plan_node_count_affine():
    counts = {}
    for length in range(1, 7):
        kb, plan = load(MOVE_KB, shuttle_plan(length))
        net = build_pe_net(plan, kb)
        counts[length] = len(net.nodes)
    slope = counts[2] - counts[1]
    intercept = counts[1] - slope * (1 + 1)  # node count = slope*(steps+1) + intercept
    for length in range(1, 7):
        assert counts[length] == slope * (length + 1) + intercept


def test_build_bit_deterministic():
    kb, plan = load(HIERARCHY_KB, HIERARCHY_PLAN)
    first = canonical_dump(build_pe_net(plan, kb))
    kb2, plan2 = load(HIERARCHY_KB, HIERARCHY_PLAN)
    second = canonical_dump(build_pe_net(plan2, kb2))
    assert first == second


# -- joint equivalence against the trajectory oracle ----------------------------


def net_assignment_probability(net, assignment):
    p = 1.0
    for nid, value in assignment.items():
        node = net.nodes[nid]
        combo = tuple(assignment[parent] for parent in node.parents)
        p *= node.cpt[combo].get(value, 0.0)
    return p


@pytest.mark.parametrize("seed", range(12))
def test_joint_matches_trajectory_oracle(seed):
    kb, plan = instance_gen.generate(seed)
    assert not validate_kb(kb)
    flat = flatten_hierarchy(plan)
    order = linearize(flat)
    worlds = oracle.enumerate_trajectories(kb, flat, order)
    assert abs(sum(w.prob for w in worlds) - 1.0) <= 1e-9

    net = build_pe_net(plan, kb)
    atoms = oracle._universe(kb, flat)
    sel_bounds = [g.boundary for g in flat.contingencies]
    keyed = [atom_node(a, sit) for sit in net.situation_order for a in atoms]
    for boundary in sel_bounds:
        keyed.extend(nid for nid in net.nodes if nid.ref == ("sel", boundary))

    joint = oracle.joint(worlds, atoms, len(order), sel_bounds)
    for key, p_expected in joint.items():
        assignment = dict(zip(keyed, key))
        assert abs(net_assignment_probability(net, assignment) - p_expected) <= 1e-9
