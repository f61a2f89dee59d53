import random

import pytest

from fedci.protocol import (
    LEGAL_EDGES,
    TERMINAL_STATES,
    RunState,
    shortest_path,
    validate_transition,
)

# Independent enumeration of the lifecycle edge list, written out by hand so a
# typo in states.py cannot silently agree with itself.
EXPECTED_EDGES = {
    ("submitted", "pending_approval"),
    ("submitted", "queued"),
    ("pending_approval", "queued"),
    ("pending_approval", "rejected"),
    ("pending_approval", "expired"),
    ("queued", "claimed"),
    ("claimed", "staging"),
    ("staging", "running"),
    ("staging", "failed"),
    ("running", "completed"),
    ("running", "failed"),
}


def test_listed_edges_are_legal():
    assert validate_transition(RunState.QUEUED, RunState.CLAIMED) is True


def test_terminal_states_have_no_exits():
    assert validate_transition(RunState.COMPLETED, RunState.RUNNING) is False
    for term in TERMINAL_STATES:
        for b in RunState:
            assert not validate_transition(term, b)


def test_edge_set_matches_hand_enumeration():
    got = {(a.value, b.value) for a, b in LEGAL_EDGES}
    assert got == EXPECTED_EDGES


def test_full_pair_enumeration_count():
    # Brute-force over all 10x10 pairs; the edge list enumerates to 11 legal
    # pairs (2 + 3 + 1 + 1 + 2 + 2).
    states = list(RunState)
    assert len(states) == 10
    true_pairs = [(a, b) for a in states for b in states if validate_transition(a, b)]
    assert len(true_pairs) == len(EXPECTED_EDGES) == 11


@pytest.mark.parametrize("seed", range(20))
def test_random_pairs_match_edge_set(seed):
    rng = random.Random(seed)
    a = rng.choice(list(RunState))
    b = rng.choice(list(RunState))
    assert validate_transition(a, b) == ((a.value, b.value) in EXPECTED_EDGES)


def test_shortest_path_fast_forward():
    assert shortest_path(RunState.CLAIMED, RunState.FAILED) == [
        RunState.CLAIMED,
        RunState.STAGING,
        RunState.FAILED,
    ]
    assert shortest_path(RunState.CLAIMED, RunState.COMPLETED) == [
        RunState.CLAIMED,
        RunState.STAGING,
        RunState.RUNNING,
        RunState.COMPLETED,
    ]
    assert shortest_path(RunState.RUNNING, RunState.RUNNING) == [RunState.RUNNING]
    assert shortest_path(RunState.COMPLETED, RunState.QUEUED) is None
