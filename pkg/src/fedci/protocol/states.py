"""Task lifecycle state machine.

A run moves through a fixed graph: it is submitted, optionally parked for
reviewer approval, queued for its endpoint, claimed by an agent, staged
(working directory prepared, repository checked out), executed, and finally
lands in a terminal state. Terminal states have no outgoing edges.
"""

from __future__ import annotations

from enum import Enum


class RunState(str, Enum):
    SUBMITTED = "submitted"
    PENDING_APPROVAL = "pending_approval"
    QUEUED = "queued"
    CLAIMED = "claimed"
    STAGING = "staging"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    REJECTED = "rejected"
    EXPIRED = "expired"


LEGAL_EDGES: frozenset[tuple[RunState, RunState]] = frozenset(
    {
        (RunState.SUBMITTED, RunState.PENDING_APPROVAL),
        (RunState.SUBMITTED, RunState.QUEUED),
        (RunState.PENDING_APPROVAL, RunState.QUEUED),
        (RunState.PENDING_APPROVAL, RunState.REJECTED),
        (RunState.PENDING_APPROVAL, RunState.EXPIRED),
        (RunState.QUEUED, RunState.CLAIMED),
        (RunState.CLAIMED, RunState.STAGING),
        (RunState.STAGING, RunState.RUNNING),
        (RunState.STAGING, RunState.FAILED),
        (RunState.RUNNING, RunState.COMPLETED),
        (RunState.RUNNING, RunState.FAILED),
    }
)

TERMINAL_STATES: frozenset[RunState] = frozenset(
    {RunState.COMPLETED, RunState.FAILED, RunState.REJECTED, RunState.EXPIRED}
)

INITIAL_STATE = RunState.SUBMITTED


def validate_transition(current: RunState, next_state: RunState) -> bool:
    """True iff current -> next_state is a legal edge of the lifecycle graph."""
    return (current, next_state) in LEGAL_EDGES


def is_terminal(state: RunState) -> bool:
    return state in TERMINAL_STATES


def shortest_path(start: RunState, goal: RunState) -> list[RunState] | None:
    """Shortest legal state sequence from start to goal, inclusive.

    Used to fast-forward a run through intermediate states when an agent
    reports only the terminal outcome (e.g. claimed -> staging -> failed).
    Returns None when goal is unreachable from start.
    """
    if start == goal:
        return [start]
    frontier = [[start]]
    seen = {start}
    while frontier:
        path = frontier.pop(0)
        for a, b in LEGAL_EDGES:
            if a != path[-1] or b in seen:
                continue
            if b == goal:
                return path + [b]
            seen.add(b)
            frontier.append(path + [b])
    return None
