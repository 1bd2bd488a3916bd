"""Exhaustive reachable-state search for the decoder mask (shared helper)."""

import numpy as np

from molspan.masking import DecoderState, init_state


def state_key(st: DecoderState):
    """Canonical digest of everything the mask depends on.

    Live atoms (frontier, branch-return chain, open anchors) are relabeled in
    first-appearance order; dead subtrees can never influence future masks.
    """
    live: list[int] = []

    def label(a: int) -> int:
        if a not in live:
            live.append(a)
        return live.index(a)

    cur = label(st.cur) if st.cur >= 0 else -1
    stack = tuple(label(a) for a in st.branch_stack)
    anchors = tuple(label(a) for a, _ in st.anchors)
    rems = tuple(st.rem[a] for a in live)
    bonds = frozenset(
        (min(label(a), label(b)), max(label(a), label(b)), o)
        for a, b, o in st.bonds if a in live and b in live
    )
    return (st.finished, st.last_kind, st.pending_bond if st.last_kind == 7 else 0,
            st.tokens_remaining, cur, stack, anchors, rems, bonds)


def exhaustive_no_deadlock(vocab, max_len: int):
    """BFS all reachable states; returns (n_states, deadlocked_states)."""
    init = init_state(vocab, max_len)
    seen = {state_key(init)}
    queue = [init]
    n_states = 0
    deadlocks = []
    while queue:
        st = queue.pop()
        n_states += 1
        if st.finished:
            continue
        options = np.flatnonzero(st.mask())
        if len(options) == 0:
            deadlocks.append(st)
            continue
        for tid in options:
            child = st.copy().advance(int(tid))
            key = state_key(child)
            if key not in seen:
                seen.add(key)
                queue.append(child)
    return n_states, deadlocks
