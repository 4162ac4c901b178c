"""Brute-force re-scan oracle for popup trigger semantics, plus random
case generation. Deliberately structured unlike the engine: counting-rule
firings are precomputed arithmetically over the matching-event index list,
and only the pending-queue timeline is simulated (it feeds periodic
suppression and before-submission one-shots).

Action dicts:
    {"type": "task_started", "task": str, "ms": int}
    {"type": "task_ended", "ms": int}
    {"type": "prompt" | "response" | "query", "task": str, "ms": int}
    {"type": "tick", "ms": int}
    {"type": "ack_oldest", "ms": int}
    {"type": "submit_attempt", "ms": int}

A firing is (rule_id, at_ms, cause_kind) with cause_kind in
{"event", "tick", "submit"}.
"""

import random

from studykit.model import (
    AfterNPrompts,
    AfterNQueries,
    AfterNResponses,
    BeforeSubmission,
    Periodic,
    TriggerRule,
)

_EVENT_FOR_KIND = {
    "after_n_prompts": "prompt",
    "after_n_responses": "response",
    "after_n_queries": "query",
}


def _counting_fire_positions(rule, actions):
    """Indices of actions on which this counting rule fires."""
    wanted = _EVENT_FOR_KIND[rule.condition.kind]
    matching = [
        i
        for i, act in enumerate(actions)
        if act["type"] == wanted and (rule.scope is None or rule.scope == act.get("task"))
    ]
    n = rule.condition.n
    if rule.repeat == "once":
        return matching[n - 1 : n]
    return matching[n - 1 :: n]


def oracle_firings(rules, actions):
    """All firings a correct engine must produce for this input."""
    firings = []

    # Counting rules: pure arithmetic, independent of the pending queue.
    fires_at_action = {}
    for rule in rules:
        if rule.condition.kind in _EVENT_FOR_KIND:
            for index in _counting_fire_positions(rule, actions):
                fires_at_action.setdefault(index, []).append(rule)

    # Pending-queue timeline: drives periodic suppression and drain times.
    pending_count = 0
    drain_ms = None
    periodic_last_fire = {}
    periodic_fired_once = set()
    submission_fired = set()
    current_task = None
    anchors = {}

    for index, act in enumerate(actions):
        t = act["ms"]
        kind = act["type"]
        if kind == "task_started":
            current_task = act["task"]
            anchors.setdefault(act["task"], t)
        elif kind == "task_ended":
            current_task = None
        elif kind in ("prompt", "response", "query"):
            for rule in fires_at_action.get(index, []):
                firings.append((rule.rule_id, t, "event"))
                pending_count += 1
        elif kind == "tick":
            suppressed = pending_count > 0
            for rule in rules:
                if rule.condition.kind != "periodic" or suppressed:
                    continue
                if current_task is None or (rule.scope is not None and rule.scope != current_task):
                    continue
                if rule.repeat == "once" and rule.rule_id in periodic_fired_once:
                    continue
                anchor = anchors[current_task]
                interval = rule.condition.interval_s * 1000
                floor = anchor
                if rule.rule_id in periodic_last_fire:
                    floor = max(floor, periodic_last_fire[rule.rule_id])
                if drain_ms is not None:
                    floor = max(floor, drain_ms)
                first_due = anchor + ((floor - anchor) // interval + 1) * interval
                if first_due <= t:
                    firings.append((rule.rule_id, t, "tick"))
                    pending_count += 1
                    periodic_last_fire[rule.rule_id] = t
                    periodic_fired_once.add(rule.rule_id)
        elif kind == "ack_oldest":
            if pending_count > 0:
                pending_count -= 1
                if pending_count == 0:
                    drain_ms = t
        elif kind == "submit_attempt":
            for rule in rules:
                if rule.condition.kind != "before_submission":
                    continue
                if rule.rule_id in submission_fired:
                    continue
                if rule.scope is not None and rule.scope != current_task:
                    continue
                firings.append((rule.rule_id, t, "submit"))
                submission_fired.add(rule.rule_id)
                pending_count += 1
        else:
            raise ValueError(kind)
    return firings


def random_rules(rng: random.Random, survey_id: str = "pulse"):
    count = rng.randint(1, 5)
    rules = []
    for i in range(count):
        kind = rng.choice(["after_n_prompts", "after_n_responses", "after_n_queries", "periodic", "before_submission"])
        if kind == "periodic":
            condition = Periodic(interval_s=rng.randint(1, 5))
        elif kind == "before_submission":
            condition = BeforeSubmission()
        else:
            cls = {"after_n_prompts": AfterNPrompts, "after_n_responses": AfterNResponses, "after_n_queries": AfterNQueries}[kind]
            condition = cls(n=rng.randint(1, 5))
        repeat = "once" if kind == "before_submission" else rng.choice(["once", "every_multiple"])
        scope = rng.choice([None, None, "tA", "tB"])
        rules.append(
            TriggerRule(rule_id=f"rule-{i}", survey_id=survey_id, condition=condition, repeat=repeat, scope=scope)
        )
    return rules


def random_actions(rng: random.Random, max_len: int = 200):
    actions = [{"type": "task_started", "task": "tA", "ms": 0}]
    t = 0
    current = "tA"
    length = rng.randint(1, max_len - 1)
    for _ in range(length):
        t += rng.randint(0, 2500)
        roll = rng.random()
        if current is None:
            current = rng.choice(["tA", "tB"])
            actions.append({"type": "task_started", "task": current, "ms": t})
        elif roll < 0.22:
            actions.append({"type": "prompt", "task": current, "ms": t})
        elif roll < 0.38:
            actions.append({"type": "response", "task": current, "ms": t})
        elif roll < 0.56:
            actions.append({"type": "query", "task": current, "ms": t})
        elif roll < 0.78:
            actions.append({"type": "tick", "ms": t})
        elif roll < 0.90:
            actions.append({"type": "ack_oldest", "ms": t})
        elif roll < 0.96:
            actions.append({"type": "submit_attempt", "ms": t})
        else:
            actions.append({"type": "task_ended", "ms": t})
            current = None
    return actions
