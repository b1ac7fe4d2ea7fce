"""Shared scenario fixtures, written in the DSL so every test exercises the parser."""

from planeval import SourceDocument, parse_kb, parse_plan, validate_kb

MOVE_KB = """
predicate (Loc ?obj) kind=primitive states { L1 L2 L3 }
action (Move ?obj ?from ?to) level=0 {
  effect (Loc ?obj) {
    (Loc ?obj)=?from -> { ?to:0.9 ?from:0.1 }
  }
}
persistence (Loc ?obj) {
  L1 -> { L1:0.95 L2:0.05 }
}
"""

TWO_STEP_PLAN = """
step s1 a1 (Move A L1 L2) start=b0 end=b1
step s2 a1 (Move B L3 L1) start=b1 end=b2
initial { (Loc A)=L1 (Loc B)=L3 }
goal { (Loc B)=L1 }
"""

RELIABLE_MOVE_KB = """
predicate (Loc ?obj) kind=primitive states { L1 L2 }
predicate (At ?loc) kind=derived states { X NONE }
action (Move ?obj ?from ?to) level=0 {
  effect (Loc ?obj) { (Loc ?obj)=?from -> { ?to:1.0 } }
}
derived (At L1) from { (Loc X) } {
  (Loc X)=L1 -> { X:1.0 }
  (Loc X)=L2 -> { NONE:1.0 }
}
"""

RELIABLE_MOVE_PLAN = """
step s1 a1 (Move X L1 L2) start=b0 end=b1
initial { (Loc X)=L1 }
goal { (Loc X)=L2 (At L1)=NONE }
"""

INVERTED_KB = """
predicate (Loc ?obj) kind=derived states { L1 L2 }
predicate (At ?loc) kind=primitive states { X NONE }
action (Move ?obj ?from ?to) level=0 {
  effect (Loc ?obj) { (Loc ?obj)=?from -> { ?to:1.0 } }
}
"""

OVERLAP_KB = """
predicate (P ?x) kind=primitive states { u v }
action (First) level=0 { duration { 2:0.5 4:0.5 } effect (P x1) { * -> { v:1.0 } } }
action (Second) level=0 { duration { 1:0.5 6:0.5 } effect (P x2) { * -> { v:1.0 } } }
action (Third) level=0 { duration { 1:1.0 } effect (P x3) { * -> { v:1.0 } } }
persistence (P ?x) elapsed { [0,3) [3,inf) } {
  u [0,3) -> { u:0.9 v:0.1 }
  u [3,inf) -> { u:0.5 v:0.5 }
}
"""

OVERLAP_PLAN = """
step a1 agent1 (First) start=b0 end=b1
step a2 agent2 (Second) start=b0 end=b2
step a3 agent2 (Third) start=b2 end=b3
initial { (P x1)=u (P x2)=u (P x3)=u (P q)=u }
goal { (P q)=v }
"""

HIERARCHY_KB = """
predicate (Done ?t) kind=primitive states { no yes }
predicate (Side ?t) kind=primitive states { clean dirty }
predicate (Risk) kind=primitive states { low high }
action (BigFix ?t) level=1 {
  effect (Done ?t) { * -> { yes:0.9 no:0.1 } }
  effect (Side ?t) { * -> { dirty:0.3 clean:0.7 } }
}
action (AltFix ?t) level=1 {
  effect (Done ?t) { * -> { yes:0.5 no:0.5 } }
}
action (StepOne ?t) level=0 { effect (Done ?t) { * -> { no:1.0 } } }
action (StepTwo ?t) level=0 { effect (Done ?t) { (Done ?t)=no -> { yes:0.8 no:0.2 } } }
"""

HIERARCHY_PLAN = """
step big a1 (BigFix T) start=b0 end=b9
expand big {
  selected c1 {
    step w1 a1 (StepOne T) start=b0 end=m1
    step w2 a1 (StepTwo T) start=m1 end=b9
  }
  alt c2 (AltFix T) cond=(Risk)=high
}
initial { (Done T)=no (Side T)=clean (Risk)=low:0.75 (Risk)=high:0.25 }
goal { (Done T)=yes }
"""

DURING_KB = """
predicate (Power) kind=primitive states { on off }
predicate (Noise) kind=primitive states { quiet loud }
predicate (Built ?x) kind=primitive states { no yes }
predicate (Mark ?x) kind=primitive states { no yes }
action (Assemble ?x) level=0 {
  effect (Built ?x) { * -> { yes:1.0 } }
  effect (Mark ?x) { * -> { yes:1.0 } }
  during-cond (Power)=on gates (Built ?x)
  during-effect (Noise) { * -> { loud:1.0 } }
}
action (Cut) level=0 {
  effect (Power) { (Power)=on -> { off:0.4 on:0.6 } }
}
"""

DURING_PLAN = """
step asm a1 (Assemble W) start=b0 end=b2
step cut a2 (Cut) start=b0 end=b1
before b1 b2
initial { (Power)=on (Noise)=quiet (Built W)=no (Mark W)=no }
goal { (Built W)=yes }
"""

CONTINGENT_KB = """
predicate (S ?x) kind=primitive states { ok bad }
predicate (R ?x) kind=primitive states { lo hi }
action (FixA ?x) level=0 { effect (R ?x) { * -> { hi:0.7 lo:0.3 } } }
action (FixB ?x) level=0 { effect (R ?x) { * -> { hi:0.2 lo:0.8 } } }
"""


def contingent_plan(weight: float) -> str:
    return f"""
step f1 a1 (FixA m) start=b0 end=b1
step f2 a2 (FixB m) start=b0 end=b1
contingent at b0 {{
  (S m)=ok -> {{ f1:{weight} f2:{1.0 - weight} }}
}}
initial {{ (S m)=ok (R m)=lo }}
goal {{ (R m)=hi }}
"""


def load(kb_text: str, plan_text: str):
    kb, kb_diags = parse_kb(SourceDocument(kb_text, "kb"))
    assert not kb_diags, [d.message for d in kb_diags]
    sem = validate_kb(kb)
    assert not sem, [d.message for d in sem]
    plan, plan_diags = parse_plan(SourceDocument(plan_text, "plan"), kb)
    assert not plan_diags, [d.message for d in plan_diags]
    return kb, plan


def load_kb(kb_text: str):
    kb, diags = parse_kb(SourceDocument(kb_text, "kb"))
    assert not diags, [d.message for d in diags]
    return kb
