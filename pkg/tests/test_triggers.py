import random

import pytest

from studykit.model import AfterNPrompts, AfterNQueries, BeforeSubmission, Periodic, TriggerRule
from studykit.triggers import (
    Acknowledgment,
    AlreadyAnswered,
    SubmitAttempt,
    TriggerEvent,
    TriggerState,
    UnknownInstance,
    acknowledge,
    observe,
    pending_before_submission,
    rebuild,
)

from trigger_oracle import oracle_firings, random_actions, random_rules


def engine_firings(rules, actions):
    """Drive the real engine through an oracle action list."""
    state = TriggerState(rules=list(rules))
    firings = []
    for act in actions:
        t = act["ms"]
        kind = act["type"]
        if kind == "task_started":
            observe(state, TriggerEvent(kind="task_started", at_ms=t, task_id=act["task"]))
        elif kind == "task_ended":
            observe(state, TriggerEvent(kind="task_ended", at_ms=t))
        elif kind in ("prompt", "response", "query"):
            fired = observe(state, TriggerEvent(kind=kind, at_ms=t, task_id=act["task"]))
            firings.extend((f.rule_id, t, "event") for f in fired)
        elif kind == "tick":
            fired = observe(state, TriggerEvent(kind="tick", at_ms=t))
            firings.extend((f.rule_id, t, "tick") for f in fired)
        elif kind == "ack_oldest":
            pending = state.pending()
            if pending:
                acknowledge(state, pending[0].instance_id, f"resp-{len(firings)}", t)
        elif kind == "submit_attempt":
            before = {i.instance_id for i in state.instances}
            pending = pending_before_submission(state, t)
            firings.extend((i.rule_id, t, "submit") for i in pending if i.instance_id not in before)
    return firings, state


def prompts(state, times, task="tA"):
    fired = []
    for t in times:
        fired.extend(observe(state, TriggerEvent(kind="prompt", at_ms=t, task_id=task)))
    return fired


def start_task(state, task="tA", at_ms=0):
    observe(state, TriggerEvent(kind="task_started", at_ms=at_ms, task_id=task))


def rule_after_prompts(n, repeat="once", rule_id="r1", scope=None):
    return TriggerRule(rule_id=rule_id, survey_id="pulse", condition=AfterNPrompts(n=n), repeat=repeat, scope=scope)


def test_after_n_prompts_once_fires_exactly_at_threshold():
    state = TriggerState(rules=[rule_after_prompts(2)])
    start_task(state)
    fired = prompts(state, [10, 20, 30])
    assert len(fired) == 1
    assert fired[0].fired_at == 20
    assert fired[0].rule_id == "r1"


def test_after_n_queries_every_multiple_fires_each_time():
    rule = TriggerRule(rule_id="r1", survey_id="pulse", condition=AfterNQueries(n=1), repeat="every_multiple")
    state = TriggerState(rules=[rule])
    start_task(state)
    fired = []
    for t in (5, 6, 7):
        fired.extend(observe(state, TriggerEvent(kind="query", at_ms=t, task_id="tA")))
    assert len(fired) == 3


def test_no_rules_never_fires():
    state = TriggerState(rules=[])
    start_task(state)
    assert prompts(state, [1, 2, 3]) == []
    assert observe(state, TriggerEvent(kind="tick", at_ms=10_000)) == []


def test_counting_rules_queue_while_other_popup_pending():
    rules = [rule_after_prompts(1, rule_id="r1"), rule_after_prompts(2, rule_id="r2")]
    state = TriggerState(rules=rules)
    start_task(state)
    first = prompts(state, [10])
    assert [f.rule_id for f in first] == ["r1"]
    # r1's popup is still pending; r2 must fire on the exact second prompt.
    second = prompts(state, [20])
    assert [f.rule_id for f in second] == ["r2"]
    assert len(state.pending()) == 2


def test_simultaneous_firings_in_declaration_order():
    rules = [rule_after_prompts(2, rule_id="late"), rule_after_prompts(2, rule_id="early")]
    state = TriggerState(rules=rules)
    start_task(state)
    fired = prompts(state, [10, 20])
    assert [f.rule_id for f in fired] == ["late", "early"]


def test_acknowledge_lifecycle():
    state = TriggerState(rules=[rule_after_prompts(1)])
    start_task(state)
    (instance,) = prompts(state, [10])
    answered = acknowledge(state, instance.instance_id, "resp-1", 20)
    assert answered.state == "answered"
    assert answered.response_id == "resp-1"
    with pytest.raises(AlreadyAnswered):
        acknowledge(state, instance.instance_id, "resp-2", 30)
    with pytest.raises(UnknownInstance):
        acknowledge(state, "nope", "resp-3", 30)


def test_periodic_suppressed_boundary_is_not_backfilled():
    # interval 60s; fires at t=60s, answered at t=130s; the suppressed
    # 120s boundary is skipped and the next fire is at 180s.
    rule = TriggerRule(rule_id="p1", survey_id="pulse", condition=Periodic(interval_s=60), repeat="every_multiple")
    state = TriggerState(rules=[rule])
    start_task(state, at_ms=0)
    fired = []
    for second in range(1, 200):
        t = second * 1000
        fired.extend((f.rule_id, t) for f in observe(state, TriggerEvent(kind="tick", at_ms=t)))
        if t == 130_000:
            pending = state.pending()
            assert len(pending) == 1
            acknowledge(state, pending[0].instance_id, "resp-1", t)
    assert fired == [("p1", 60_000), ("p1", 180_000)]


def test_periodic_anchors_at_task_entry():
    rule = TriggerRule(rule_id="p1", survey_id="pulse", condition=Periodic(interval_s=10), repeat="once")
    state = TriggerState(rules=[rule])
    start_task(state, at_ms=5_000)
    assert observe(state, TriggerEvent(kind="tick", at_ms=10_000)) == []
    fired = observe(state, TriggerEvent(kind="tick", at_ms=15_000))
    assert [f.fired_at for f in fired] == [15_000]


def test_before_submission_materializes_once():
    rule = TriggerRule(rule_id="b1", survey_id="pulse", condition=BeforeSubmission())
    state = TriggerState(rules=[rule])
    start_task(state)
    first = pending_before_submission(state, 100)
    assert len(first) == 1
    again = pending_before_submission(state, 200)
    assert [i.instance_id for i in again] == [i.instance_id for i in first]
    acknowledge(state, first[0].instance_id, "resp-1", 300)
    assert pending_before_submission(state, 400) == []


def test_no_before_submission_rules_means_empty():
    state = TriggerState(rules=[rule_after_prompts(5)])
    start_task(state)
    assert pending_before_submission(state, 50) == []


def test_replay_rebuilds_identical_state():
    rng = random.Random(7)
    for _ in range(25):
        rules = random_rules(rng)
        actions = random_actions(rng, max_len=80)
        state = TriggerState(rules=list(rules))
        items = []
        for act in actions:
            t = act["ms"]
            kind = act["type"]
            if kind == "task_started":
                event = TriggerEvent(kind="task_started", at_ms=t, task_id=act["task"])
                observe(state, event)
                items.append(event)
            elif kind == "task_ended":
                event = TriggerEvent(kind="task_ended", at_ms=t)
                observe(state, event)
                items.append(event)
            elif kind in ("prompt", "response", "query"):
                event = TriggerEvent(kind=kind, at_ms=t, task_id=act["task"])
                observe(state, event)
                items.append(event)
            elif kind == "tick":
                event = TriggerEvent(kind="tick", at_ms=t)
                observe(state, event)
                items.append(event)
            elif kind == "ack_oldest":
                pending = state.pending()
                if pending:
                    ack = Acknowledgment(pending[0].instance_id, f"resp-{t}", t)
                    acknowledge(state, ack.instance_id, ack.response_id, ack.at_ms)
                    items.append(ack)
            elif kind == "submit_attempt":
                pending_before_submission(state, t)
                items.append(SubmitAttempt(at_ms=t))
        replayed = rebuild(rules, items)
        assert replayed.instances == state.instances
        assert replayed.counters == state.counters
        assert replayed.fire_counts == state.fire_counts
        assert replayed.last_fire_ms == state.last_fire_ms
        assert replayed.last_drain_ms == state.last_drain_ms
        assert replayed.next_instance_no == state.next_instance_no


def test_engine_matches_bruteforce_oracle_on_random_cases():
    rng = random.Random(42)
    for _ in range(200):
        rules = random_rules(rng)
        actions = random_actions(rng)
        expected = oracle_firings(rules, actions)
        actual, _ = engine_firings(rules, actions)
        assert sorted(actual) == sorted(expected)
