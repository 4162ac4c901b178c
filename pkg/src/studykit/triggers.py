"""In-situ popup trigger evaluation.

The engine consumes one session's interaction stream (prompts, responses,
queries, clock ticks) and decides when popup surveys fire. Semantics:

* Counting rules (after N prompts / responses / queries) fire on the exact
  event that reaches the threshold: at count == n for ``repeat="once"``,
  at every multiple of n for ``repeat="every_multiple"``. Counting rules
  are never suppressed; new instances queue even while other popups are
  pending, and popups are drained FIFO.
* Periodic rules fire at interval boundaries anchored at the moment the
  scoped task started. A boundary that elapses while any popup is pending
  is skipped, not queued: after the queue drains, the next eligible
  boundary is the first one after the drain time.
* Before-submission rules materialize when a task submit is attempted and
  are always one-shot.

Simultaneous firings are emitted in rule-declaration order. State is a
pure fold over the stream: replaying the same events rebuilds it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .model import StudyKitError, TriggerRule


class UnknownInstance(StudyKitError):
    pass


class AlreadyAnswered(StudyKitError):
    pass


# Observable session occurrences, deliberately minimal: the engine does not
# care about payloads, only about kind, owning task, and time.
COUNT_EVENT_KINDS = {
    "prompt": "after_n_prompts",
    "response": "after_n_responses",
    "query": "after_n_queries",
}


@dataclass(frozen=True)
class TriggerEvent:
    kind: str  # prompt | response | query | tick | task_started | task_ended
    at_ms: int
    task_id: Optional[str] = None
    event_id: Optional[str] = None


@dataclass
class FiredTrigger:
    instance_id: str
    rule_id: str
    survey_id: str
    fired_at: int
    cause: str
    state: str = "pending"  # pending | answered | dismissed_not_allowed
    response_id: Optional[str] = None


@dataclass
class TriggerState:
    """Mutable per-session trigger bookkeeping, owned by the session's
    serialized apply path (no internal locking)."""

    rules: list[TriggerRule]
    counters: dict[str, int] = field(default_factory=dict)  # rule_id -> matched events
    fire_counts: dict[str, int] = field(default_factory=dict)  # rule_id -> times fired
    last_fire_ms: dict[str, int] = field(default_factory=dict)
    instances: list[FiredTrigger] = field(default_factory=list)
    current_task: Optional[str] = None
    task_anchor_ms: dict[str, int] = field(default_factory=dict)
    last_drain_ms: Optional[int] = None  # when the pending queue last became empty
    next_instance_no: int = 1

    def pending(self) -> list[FiredTrigger]:
        return [i for i in self.instances if i.state == "pending"]

    def find_instance(self, instance_id: str) -> Optional[FiredTrigger]:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        return None


def _scope_matches(rule: TriggerRule, task_id: Optional[str]) -> bool:
    return rule.scope is None or rule.scope == task_id


def _fire(state: TriggerState, rule: TriggerRule, at_ms: int, cause: str) -> FiredTrigger:
    inst = FiredTrigger(
        instance_id=f"pop-{state.next_instance_no}",
        rule_id=rule.rule_id,
        survey_id=rule.survey_id,
        fired_at=at_ms,
        cause=cause,
    )
    state.next_instance_no += 1
    state.instances.append(inst)
    state.fire_counts[rule.rule_id] = state.fire_counts.get(rule.rule_id, 0) + 1
    state.last_fire_ms[rule.rule_id] = at_ms
    return inst


def observe(state: TriggerState, event: TriggerEvent) -> list[FiredTrigger]:
    """Feed one occurrence into the engine; returns instances fired by it.

    Mutates ``state`` in place (the session apply path serializes calls)
    and returns newly created pending instances in rule-declaration order.
    """
    fired: list[FiredTrigger] = []
    if event.kind == "task_started":
        state.current_task = event.task_id
        state.task_anchor_ms.setdefault(event.task_id, event.at_ms)
        return fired

    if event.kind == "task_ended":
        state.current_task = None
        return fired

    if event.kind in COUNT_EVENT_KINDS:
        condition_kind = COUNT_EVENT_KINDS[event.kind]
        for rule in state.rules:
            if rule.condition.kind != condition_kind:
                continue
            if not _scope_matches(rule, event.task_id):
                continue
            count = state.counters.get(rule.rule_id, 0) + 1
            state.counters[rule.rule_id] = count
            n = rule.condition.n
            hit = count == n if rule.repeat == "once" else count % n == 0
            if hit:
                fired.append(_fire(state, rule, event.at_ms, f"event:{event.event_id or event.kind}"))
        return fired

    if event.kind == "tick":
        # Boundaries that elapse while any popup is pending are skipped;
        # the floor below keeps them from back-filling after the drain.
        pending_before = bool(state.pending())
        for rule in state.rules:
            if rule.condition.kind != "periodic":
                continue
            task = state.current_task
            if task is None or not _scope_matches(rule, task):
                continue
            anchor = state.task_anchor_ms.get(task)
            if anchor is None or pending_before:
                continue
            if rule.repeat == "once" and state.fire_counts.get(rule.rule_id, 0) > 0:
                continue
            interval = rule.condition.interval_s * 1000
            floor = max(anchor, state.last_fire_ms.get(rule.rule_id, anchor), state.last_drain_ms or anchor)
            # first boundary strictly after the floor
            k = (floor - anchor) // interval + 1
            if anchor + k * interval <= event.at_ms:
                fired.append(_fire(state, rule, event.at_ms, f"tick:{event.at_ms}"))
        return fired

    raise ValueError(f"unknown trigger event kind {event.kind!r}")


def acknowledge(state: TriggerState, instance_id: str, response_id: str, at_ms: int) -> FiredTrigger:
    """Mark a pending instance answered; lifts periodic suppression once
    the pending queue drains."""
    inst = state.find_instance(instance_id)
    if inst is None:
        raise UnknownInstance(instance_id)
    if inst.state == "answered":
        raise AlreadyAnswered(instance_id)
    inst.state = "answered"
    inst.response_id = response_id
    if not state.pending():
        state.last_drain_ms = at_ms
    return inst


def pending_before_submission(state: TriggerState, at_ms: int) -> list[FiredTrigger]:
    """Materialize unfired before-submission rules, then list all pending.

    Idempotent: calling again without acknowledgments creates nothing new.
    The flow engine refuses task submission until this list is empty.
    """
    for rule in state.rules:
        if rule.condition.kind != "before_submission":
            continue
        if not _scope_matches(rule, state.current_task):
            continue
        if state.fire_counts.get(rule.rule_id, 0) > 0:
            continue
        _fire(state, rule, at_ms, "submit_attempt")
    return state.pending()


@dataclass(frozen=True)
class Acknowledgment:
    instance_id: str
    response_id: str
    at_ms: int


@dataclass(frozen=True)
class SubmitAttempt:
    at_ms: int


ReplayItem = "TriggerEvent | Acknowledgment | SubmitAttempt"


def rebuild(rules: list[TriggerRule], items: list) -> TriggerState:
    """Rebuild state by replaying the session's occurrences in log order.

    ``items`` mixes TriggerEvent, Acknowledgment, and SubmitAttempt entries
    exactly as they happened. Suppressed ticks leave no state behind, so a
    replay that injects ticks only where a periodic instance actually fired
    reconstructs the identical state.
    """
    state = TriggerState(rules=list(rules))
    for item in items:
        if isinstance(item, TriggerEvent):
            observe(state, item)
        elif isinstance(item, Acknowledgment):
            acknowledge(state, item.instance_id, item.response_id, item.at_ms)
        elif isinstance(item, SubmitAttempt):
            pending_before_submission(state, item.at_ms)
        else:
            raise ValueError(f"unknown replay item {item!r}")
    return state
