"""Inference engines: exact VE, Monte Carlo, enumeration oracle, plan metrics."""

import pytest

from planeval import (
    InfeasibleEvidence,
    Query,
    TooLarge,
    WidthExceeded,
    build_pe_net,
    exact_query,
    leads_to_success,
    mc_query,
    oracle_enumerate,
    plan_success,
    validate_kb,
)

import instance_gen
from fixtures import HIERARCHY_KB, HIERARCHY_PLAN, MOVE_KB, TWO_STEP_PLAN, load


def build(kb_text, plan_text):
    kb, plan = load(kb_text, plan_text)
    return kb, plan, build_pe_net(plan, kb)


@pytest.fixture(scope="module")
def two_step():
    return build(MOVE_KB, TWO_STEP_PLAN)


def test_prior_recovery_empty_plan():
    kb, plan = load(MOVE_KB, "initial { (Loc A)=L1:0.3 (Loc A)=L2:0.7 }\ngoal { (Loc A)=L1 }")
    net = build_pe_net(plan, kb)
    q = Query(targets=[(net.find("(Loc A)", "S0"), "L1")])
    assert abs(exact_query(net, q).probability - 0.3) <= 1e-12
    assert abs(oracle_enumerate(net, q).probability - 0.3) <= 1e-12


def test_exact_matches_oracle_on_two_step(two_step):
    _kb, _plan, net = two_step
    q = Query(targets=[(net.find("(Loc B)", "S2"), "L1")])
    assert abs(exact_query(net, q).probability - oracle_enumerate(net, q).probability) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_exact_matches_oracle_random_nets(seed):
    kb, plan = instance_gen.generate(100 + seed)
    assert not validate_kb(kb)
    net = build_pe_net(plan, kb)
    import random

    rng = random.Random(seed)
    nodes = sorted(net.nodes, key=net.node_key)
    for _ in range(5):
        nid = rng.choice(nodes)
        state = rng.choice(net.nodes[nid].states)
        q = Query(targets=[(nid, state)])
        a = exact_query(net, q).probability
        b = oracle_enumerate(net, q, bound=float("inf")).probability
        assert abs(a - b) <= 1e-9


def test_conditioning_coherence(two_step):
    _kb, _plan, net = two_step
    target = (net.find("(Loc B)", "S2"), "L1")
    evidence = {net.find("(Loc A)", "S1"): "L2"}
    cond = exact_query(net, Query(targets=[target], evidence=evidence)).probability
    joint_te = oracle_enumerate(net, Query(targets=[target, (net.find("(Loc A)", "S1"), "L2")])).probability
    joint_e = oracle_enumerate(net, Query(targets=[(net.find("(Loc A)", "S1"), "L2")])).probability
    assert abs(cond - joint_te / joint_e) <= 1e-9


def test_infeasible_evidence_raises(two_step):
    _kb, _plan, net = two_step
    ev = {net.find("(Loc B)", "S0"): "L1"}  # prior fixes it at L3
    with pytest.raises(InfeasibleEvidence):
        exact_query(net, Query(targets=[(net.find("(Loc B)", "S2"), "L1")], evidence=ev))


def test_unreachable_target_scores_zero(two_step):
    _kb, _plan, net = two_step
    q = Query(targets=[(net.find("(Loc B)", "S0"), "L2")])  # L2 not in the node's states
    assert exact_query(net, q).probability == 0.0


def test_contradictory_conjunction_scores_zero(two_step):
    _kb, _plan, net = two_step
    nid = net.find("(Loc B)", "S2")
    q = Query(targets=[(nid, "L1"), (nid, "L3")])
    assert exact_query(net, q).probability == 0.0
    assert oracle_enumerate(net, q).probability == 0.0


def test_width_guard_fires(two_step):
    _kb, _plan, net = two_step
    q = Query(targets=[(net.find("(Loc B)", "S2"), "L1")])
    with pytest.raises(WidthExceeded):
        exact_query(net, q, width_limit=0)


def test_oracle_bound_enforced(two_step):
    _kb, _plan, net = two_step
    q = Query(targets=[(net.find("(Loc B)", "S2"), "L1")])
    with pytest.raises(TooLarge):
        oracle_enumerate(net, q, bound=2)


# -- Monte Carlo ---------------------------------------------------------------


def test_mc_deterministic_given_seed(two_step):
    _kb, _plan, net = two_step
    q = Query(targets=[(net.find("(Loc B)", "S2"), "L1")], mode="mc", samples=2000, seed=7)
    first = mc_query(net, q)
    second = mc_query(net, q)
    assert first.probability == second.probability
    assert first.standard_error == second.standard_error


def test_mc_on_deterministic_net_is_exact():
    kb, plan = load(MOVE_KB, "initial { (Loc A)=L1 }\ngoal { (Loc A)=L1 }")
    net = build_pe_net(plan, kb)
    q = Query(targets=[(net.find("(Loc A)", "S0"), "L1")], mode="mc", samples=500, seed=1)
    result = mc_query(net, q)
    assert result.probability == 1.0
    assert result.standard_error == 0.0


def test_mc_close_to_exact(two_step):
    _kb, _plan, net = two_step
    target = [(net.find("(Loc B)", "S2"), "L1")]
    exact = exact_query(net, Query(targets=target)).probability
    result = mc_query(net, Query(targets=target, mode="mc", samples=40000, seed=11))
    assert abs(result.probability - exact) <= 4 * result.standard_error + 1e-12


def test_mc_likelihood_weighting_with_evidence(two_step):
    _kb, _plan, net = two_step
    target = [(net.find("(Loc B)", "S2"), "L1")]
    evidence = {net.find("(Loc A)", "S1"): "L2"}
    exact = exact_query(net, Query(targets=target, evidence=evidence)).probability
    result = mc_query(net, Query(targets=target, evidence=evidence, mode="mc", samples=40000, seed=3))
    assert result.standard_error > 0.0
    assert abs(result.probability - exact) <= 4 * result.standard_error + 1e-12


# -- plan metrics ---------------------------------------------------------------


def test_plan_success_equals_leads_without_contingencies():
    kb, plan = load(MOVE_KB, "step s1 a1 (Move A L1 L2) start=b0 end=b1\ninitial { (Loc A)=L1 }\ngoal { (Loc A)=L2 }")
    net = build_pe_net(plan, kb)
    assert plan_success(net, plan).probability == leads_to_success(net, plan).probability


def test_deterministic_success_is_one():
    kb_text = """
predicate (G) kind=primitive states { no yes }
action (Win) level=0 { effect (G) { * -> { yes:1.0 } } }
"""
    kb, plan = load(kb_text, "step s1 a1 (Win) start=b0 end=b1\ninitial { (G)=no }\ngoal { (G)=yes }")
    net = build_pe_net(plan, kb)
    assert plan_success(net, plan).probability == 1.0


def test_hierarchy_metrics_split_branch_mass():
    kb, plan = load(HIERARCHY_KB, HIERARCHY_PLAN)
    net = build_pe_net(plan, kb)
    lead = leads_to_success(net, plan).probability
    succ = plan_success(net, plan).probability
    assert succ <= lead + 1e-12
    # non-selected branch success mass: Risk=high (0.25) times AltFix success 0.5
    assert abs((lead - succ) - 0.25 * 0.5) <= 1e-9


@pytest.mark.parametrize("seed", range(6))
def test_plan_success_bounded_by_leads(seed):
    kb, plan = instance_gen.generate(200 + seed)
    net = build_pe_net(plan, kb)
    assert plan_success(net, plan).probability <= leads_to_success(net, plan).probability + 1e-12


def test_unreachable_goal_state_scores_zero():
    # L3 never enters (Loc A)'s enumerated states on this plan
    kb, plan = load(MOVE_KB, "step s1 a1 (Move A L1 L2) start=b0 end=b1\ninitial { (Loc A)=L1 }\ngoal { (Loc A)=L3 }")
    net = build_pe_net(plan, kb)
    assert leads_to_success(net, plan).probability == 0.0


def test_mc_zero_weight_on_jointly_impossible_evidence():
    from planeval import ZeroWeight
    from test_build import SPREAD_KB, spread_plan

    kb, plan = load(SPREAD_KB, spread_plan(2))
    net = build_pe_net(plan, kb)
    # x4 is reachable only from x2, so pinning x3 upstream zeroes every sample
    evidence = {net.find("(Reg)", "S1"): "x3", net.find("(Reg)", "S2"): "x4"}
    with pytest.raises(ZeroWeight):
        mc_query(net, Query(targets=[(net.find("(Reg)", "S0"), "x1")], evidence=evidence,
                            mode="mc", samples=200, seed=0))
