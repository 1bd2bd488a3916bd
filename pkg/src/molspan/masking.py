"""Incremental decoder state and per-step token masks.

Every completed sequence sampled under these masks decodes to a molecule
that respects the vocabulary's valency table. The rules fall in three
groups:

* structure -- which token kinds may follow which (atom after bond, bond
  tokens only inside a fresh branch, ring ends only after a bond, ...);
* valency -- bonds, branch opens and ring anchors must fit the frontier
  atom's remaining valency; opening a ring anchor reserves one unit on the
  anchor atom so the eventual ring bond can always be paid for;
* completion -- a token is only admitted if the sequence can still be
  finished afterwards: every open branch closed, every open ring anchor
  consumed, and EOS placed, all within the token budget.

The completion rule is checked against an explicit "finisher": a greedy
closing policy (close reachable anchors, grow a short tail when the current
atom cannot legally close one, pop branches, emit EOS) whose exact token
cost is simulated. A token is admitted only when the finisher succeeds
within the remaining budget, which makes deadlock impossible by induction:
the finisher's own first move is always among the admitted tokens.
"""

from __future__ import annotations

import math

import numpy as np

from . import vocab as V
from .vocab import Vocab

INF = math.inf


class MaskViolation(Exception):
    """A token was applied that the current mask forbids."""

    def __init__(self, rule: str, token: str, position: int, detail: str = ""):
        self.rule = rule
        self.token = token
        self.position = position
        msg = f"token {token!r} at position {position} violates rule {rule}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DecoderState:
    """Grammar state after a BOS and ``position`` generated tokens.

    ``max_len`` bounds the full sequence length including BOS and EOS.
    States are values: ``advance`` mutates in place, ``copy`` forks.
    """

    def __init__(self, vocab: Vocab, max_len: int, slack: int = 0,
                 enforce_budget: bool = True):
        if max_len < 3 + slack:
            raise ValueError("max_len must be at least 3 plus slack")
        self.vocab = vocab
        self.max_len = max_len
        self.slack = slack
        self.enforce_budget = enforce_budget
        self.position = 0
        self.last_kind = V.K_BOS
        self.finished = False
        self.atoms: list[int] = []          # atom token ids
        self.rem: list[int] = []            # remaining valency (reservations taken)
        self.adj: list[dict[int, int]] = []  # neighbor -> bond order
        self.bonds: list[tuple[int, int, int]] = []
        self.cur = -1                        # frontier atom index
        self.branch_stack: list[int] = []
        self.anchors: list[tuple[int, int]] = []  # (atom index, [bor] seq position)
        self.pending_bond = 0

    def copy(self) -> "DecoderState":
        st = object.__new__(DecoderState)
        st.vocab = self.vocab
        st.max_len = self.max_len
        st.slack = self.slack
        st.enforce_budget = self.enforce_budget
        st.position = self.position
        st.last_kind = self.last_kind
        st.finished = self.finished
        st.atoms = list(self.atoms)
        st.rem = list(self.rem)
        st.adj = [dict(d) for d in self.adj]
        st.bonds = list(self.bonds)
        st.cur = self.cur
        st.branch_stack = list(self.branch_stack)
        st.anchors = list(self.anchors)
        st.pending_bond = self.pending_bond
        return st

    # -- derived quantities ---------------------------------------------------

    @property
    def tokens_remaining(self) -> int:
        """Generated-token budget left (BOS occupies one slot of max_len)."""
        return self.max_len - 1 - self.position

    @property
    def open_branch_count(self) -> int:
        return len(self.branch_stack)

    @property
    def open_anchor_count(self) -> int:
        return len(self.anchors)

    @property
    def anchor_positions(self) -> list[int]:
        """Sequence positions of the open [bor] tokens, oldest first."""
        return [pos for _, pos in self.anchors]

    def _atom_like(self) -> bool:
        return self.last_kind in (V.K_ATOM, V.K_EOR, V.K_CLOSE)

    def _bonded(self, a: int, b: int) -> bool:
        return b in self.adj[a]

    def _eor_eligible(self, anchor_idx: int, order: int) -> bool:
        atom, _ = self.anchors[anchor_idx]
        if atom == self.cur or self._bonded(self.cur, atom):
            return False
        return self.rem[atom] >= order - 1  # 1 unit was reserved at [bor]

    def _bond_continuable(self, order: int) -> bool:
        """After a bond of this order, can anything legally follow?"""
        if self.vocab.max_atom_valency >= order:
            return True
        return any(self._eor_eligible(i, order) for i in range(len(self.anchors)))

    # -- local (budget-free) rules ---------------------------------------------

    def _local_violation(self, token_id: int) -> str | None:
        """Structure/valency rule violated by the token, or None."""
        kind = self.vocab.kind(token_id)
        lk = self.last_kind
        if kind in (V.K_BOS, V.K_PAD):
            return "R1"

        if lk in (V.K_BOS, V.K_DOT):
            return None if kind == V.K_ATOM else "R1"

        if lk == V.K_BOND:
            if kind == V.K_ATOM:
                if self.vocab.valency_of(token_id) < self.pending_bond:
                    return "R3"
                return None
            if kind == V.K_EOR:
                i = self.vocab.eor_index(token_id)
                if i > len(self.anchors):
                    return "R5"
                if not self._eor_eligible(i - 1, self.pending_bond):
                    return "R5"
                return None
            return "R1"

        if lk == V.K_OPEN:
            if kind != V.K_BOND:
                return "R1"
            order = self.vocab.bond_order(token_id)
            if self.rem[self.cur] < order or not self._bond_continuable(order):
                return "R2"
            return None

        # Remaining contexts are atom-like (atom, [bor], [eor-i], ")").
        if kind == V.K_BOND:
            order = self.vocab.bond_order(token_id)
            if self.rem[self.cur] < order or not self._bond_continuable(order):
                return "R2"
            return None
        if kind == V.K_BOR:
            if self.rem[self.cur] < 1:
                return "R4"
            if len(self.anchors) >= self.vocab.r_max:
                return "R4"
            return None
        if kind == V.K_OPEN:
            if self.rem[self.cur] < 1 or not self._bond_continuable(1):
                return "R6"
            return None
        if kind == V.K_CLOSE:
            if not self.branch_stack:
                return "R6"
            if not self._atom_like():
                return "R6"
            return None
        if kind in (V.K_EOS, V.K_DOT):
            if self.branch_stack or self.anchors or not self._atom_like():
                return "R8"
            return None
        return "R1"  # atom or [eor-i] directly after an atom-like token

    # -- completion rule --------------------------------------------------------

    def _cost_after(self, token_id: int) -> float:
        """Finisher token count needed after consuming the token (inf = stuck)."""
        kind = self.vocab.kind(token_id)
        nb = len(self.branch_stack)
        if kind == V.K_EOS:
            return 0
        if kind == V.K_DOT:
            return 2  # one atom plus EOS
        if not self.anchors:
            # Anchor-free closed forms; only ring tokens change anchor count.
            if kind == V.K_CLOSE:
                return nb  # ")" ... ")" then EOS
            if kind == V.K_ATOM:
                return nb + 1
            if kind == V.K_BOND:
                return nb + 2  # forced atom, then close out
            if kind == V.K_OPEN:
                return nb + 4  # bond, atom, this ")" and out
            # [bor]: falls through to simulation with one fresh anchor
        return self._simulate_finisher(token_id)

    def _simulate_finisher(self, token_id: int) -> float:
        vocab = self.vocab
        kind = vocab.kind(token_id)
        best = vocab.max_atom_valency

        rem = {}

        def get_rem(a: int) -> int:
            return rem[a] if a in rem else (self.rem[a] if a < len(self.rem) else 0)

        def dec_rem(a: int, by: int):
            rem[a] = get_rem(a) - by

        extra: set[tuple[int, int]] = set()

        def bonded(a: int, b: int) -> bool:
            if a < len(self.adj) and b in self.adj[a]:
                return True
            return (a, b) in extra or (b, a) in extra

        anchors = [a for a, _ in self.anchors]
        branches = list(self.branch_stack)
        cur = self.cur
        last = self.last_kind
        pending = self.pending_bond
        fresh = len(self.atoms)
        cost = 0

        # Apply the candidate token to the scratch state.
        if kind == V.K_ATOM:
            a = fresh
            fresh += 1
            rem[a] = vocab.valency_of(token_id) - (pending if last == V.K_BOND else 0)
            if last == V.K_BOND:
                extra.add((cur, a))
            cur = a
            last = V.K_ATOM
        elif kind == V.K_BOND:
            pending = vocab.bond_order(token_id)
            dec_rem(cur, pending)
            last = V.K_BOND
        elif kind == V.K_OPEN:
            branches.append(cur)
            last = V.K_OPEN
        elif kind == V.K_CLOSE:
            cur = branches.pop()
            last = V.K_CLOSE
        elif kind == V.K_BOR:
            anchors.append(cur)
            dec_rem(cur, 1)
            last = V.K_BOR
        elif kind == V.K_EOR:
            i = vocab.eor_index(token_id) - 1
            atom = anchors.pop(i)
            dec_rem(atom, pending - 1)
            extra.add((cur, atom))
            last = V.K_EOR
        else:
            raise AssertionError(f"unexpected candidate kind {kind}")

        def closable_index() -> int:
            for i, atom in enumerate(anchors):
                if atom != cur and not bonded(cur, atom) and get_rem(atom) >= 0:
                    return i
            return -1

        # Resolve a half-finished attachment first: bond needs an atom or a
        # ring end right away. Closing keeps the frontier where it is, so it
        # is only taken when it cannot strand the remaining anchors.
        if last == V.K_OPEN:
            if get_rem(cur) < 1:
                return INF
            dec_rem(cur, 1)
            pending = 1
            last = V.K_BOND
            cost += 1
        if last == V.K_BOND:
            idx = -1
            for i, atom in enumerate(anchors):
                if atom != cur and not bonded(cur, atom) and get_rem(atom) >= pending - 1:
                    idx = i
                    break
            if idx >= 0 and (len(anchors) == 1 or get_rem(cur) >= 1
                             or best < pending):
                atom = anchors.pop(idx)
                dec_rem(atom, pending - 1)
                extra.add((cur, atom))
                last = V.K_EOR
            elif best >= pending:
                a = fresh
                fresh += 1
                rem[a] = best - pending
                extra.add((cur, a))
                cur = a
                last = V.K_ATOM
            else:
                return INF
            cost += 1

        ext_run = 0
        max_iter = 4 * (len(anchors) + len(branches)) + 8
        for _ in range(max_iter):
            if anchors:
                idx = closable_index()
                spare = get_rem(cur)
                can_extend = spare >= 1 and best >= 2 and ext_run < 2
                # Closing spends the frontier's mobility; with several anchors
                # left, extend first unless spare valency stays positive.
                close_now = (idx >= 0 and spare >= 1
                             and (spare >= 2 or len(anchors) == 1
                                  or not can_extend))
                if close_now:
                    atom = anchors.pop(idx)
                    dec_rem(cur, 1)
                    extra.add((cur, atom))
                    cost += 2
                    ext_run = 0
                    last = V.K_EOR
                elif can_extend:
                    dec_rem(cur, 1)
                    a = fresh
                    fresh += 1
                    rem[a] = best - 1
                    extra.add((cur, a))
                    cur = a
                    cost += 2
                    ext_run += 1
                    last = V.K_ATOM
                elif branches and last != V.K_BOR:
                    cur = branches.pop()
                    cost += 1
                    ext_run = 0
                    last = V.K_CLOSE
                else:
                    return INF
            elif branches:
                cur = branches.pop()
                cost += 1
                last = V.K_CLOSE
            else:
                return cost + 1  # EOS
        return INF

    def _budget_ok(self, token_id: int) -> bool:
        if not self.enforce_budget:
            return True
        return self._cost_after(token_id) <= self.tokens_remaining - 1 - self.slack

    # -- public surface -----------------------------------------------------------

    def violation(self, token_id: int) -> str | None:
        """Rule id the token would violate, or None if it is allowed."""
        if self.finished:
            return "R1"
        if not 0 <= token_id < len(self.vocab):
            return "R1"
        rule = self._local_violation(token_id)
        if rule is not None:
            return rule
        if not self._budget_ok(token_id):
            return "R7"
        return None

    def mask(self) -> np.ndarray:
        """Boolean admissibility vector over the vocabulary."""
        if self.finished:
            raise RuntimeError("mask() called on a finished state")
        vocab = self.vocab
        allowed = np.zeros(len(vocab), dtype=bool)
        lk = self.last_kind

        if lk in (V.K_BOS, V.K_DOT):
            # Only atom tokens; all share the same finisher cost of 1.
            if self.tokens_remaining - 1 - self.slack >= 1:
                allowed[V.ATOM_BASE:vocab.eor_base] = True
            return allowed

        if lk == V.K_BOND:
            seen_cost: dict[int, bool] = {}
            for tid in range(V.ATOM_BASE, vocab.eor_base):
                val = vocab.valency_of(tid)
                if val < self.pending_bond:
                    continue
                ok = seen_cost.get(val)
                if ok is None:
                    ok = self._budget_ok(tid)
                    seen_cost[val] = ok
                allowed[tid] = ok
            for i in range(len(self.anchors)):
                if self._eor_eligible(i, self.pending_bond):
                    tid = vocab.eor_id(i + 1)
                    allowed[tid] = self._budget_ok(tid)
            return allowed

        candidates: list[int] = []
        if lk == V.K_OPEN:
            candidates.extend(V.BOND_IDS)
        else:
            candidates.extend(V.BOND_IDS)
            candidates.append(V.OPEN_ID)
            candidates.append(V.BOR_ID)
            candidates.append(V.CLOSE_ID)
            candidates.append(V.DOT_ID)
            candidates.append(V.EOS)
        for tid in candidates:
            if self._local_violation(tid) is None and self._budget_ok(tid):
                allowed[tid] = True
        return allowed

    def allowed_ids(self) -> np.ndarray:
        return np.flatnonzero(self.mask())

    def advance(self, token_id: int) -> "DecoderState":
        """Consume one token, mutating this state. Returns self."""
        rule = self.violation(token_id)
        if rule is not None:
            raise MaskViolation(rule, self.vocab.tokens[token_id], self.position + 1)
        vocab = self.vocab
        kind = vocab.kind(token_id)
        self.position += 1
        if kind == V.K_ATOM:
            idx = len(self.atoms)
            self.atoms.append(token_id)
            self.rem.append(vocab.valency_of(token_id))
            self.adj.append({})
            if self.last_kind == V.K_BOND:
                self._add_bond(self.cur, idx, self.pending_bond)
                self.rem[idx] -= self.pending_bond
            self.cur = idx
        elif kind == V.K_BOND:
            self.pending_bond = vocab.bond_order(token_id)
            self.rem[self.cur] -= self.pending_bond
        elif kind == V.K_OPEN:
            self.branch_stack.append(self.cur)
        elif kind == V.K_CLOSE:
            self.cur = self.branch_stack.pop()
        elif kind == V.K_BOR:
            self.anchors.append((self.cur, self.position))
            self.rem[self.cur] -= 1
        elif kind == V.K_EOR:
            i = vocab.eor_index(token_id) - 1
            atom, _ = self.anchors.pop(i)
            self._add_bond(self.cur, atom, self.pending_bond)
            self.rem[atom] -= self.pending_bond - 1
        elif kind == V.K_DOT:
            self.cur = -1
        elif kind == V.K_EOS:
            self.finished = True
        self.last_kind = kind
        return self

    def _add_bond(self, a: int, b: int, order: int):
        self.bonds.append((a, b, order))
        self.adj[a][b] = order
        self.adj[b][a] = order


def init_state(vocab: Vocab, max_len: int, slack: int = 0,
               enforce_budget: bool = True) -> DecoderState:
    return DecoderState(vocab, max_len, slack=slack, enforce_budget=enforce_budget)


def rollout_uniform(vocab: Vocab, max_len: int, rng: np.random.Generator) -> list[int]:
    """Sample uniformly over allowed tokens until EOS; always decodable."""
    state = init_state(vocab, max_len)
    ids = [V.BOS]
    while not state.finished:
        options = state.allowed_ids()
        tid = int(options[rng.integers(len(options))])
        state.advance(tid)
        ids.append(tid)
    return ids


def replay(vocab: Vocab, ids: list[int], max_len: int | None = None,
           enforce_budget: bool = False) -> DecoderState:
    """Advance through a full sequence (BOS first); raises MaskViolation."""
    if not ids or ids[0] != V.BOS:
        raise MaskViolation("R1", "?", 0, "sequence must start with BOS")
    if max_len is None:
        max_len = max(len(ids), 3)
    state = init_state(vocab, max_len, enforce_budget=enforce_budget)
    for tid in ids[1:]:
        if state.finished:
            raise MaskViolation("R1", vocab.tokens[tid], state.position + 1,
                                "token after EOS")
        state.advance(tid)
    return state


def annotate_sequence(vocab: Vocab, ids: list[int]) -> tuple[list[int], list[list[int]]]:
    """Per-position open-ring counts and [bor] positions for the model.

    Entry t describes the state after consuming ids[t] (ids[0] is BOS), which
    is the state in which the model predicts ids[t+1].
    """
    if not ids or ids[0] != V.BOS:
        raise ValueError("sequence must start with BOS")
    state = init_state(vocab, max(len(ids), 3), enforce_budget=False)
    ring_counts = [0]
    anchor_positions: list[list[int]] = [[]]
    for tid in ids[1:]:
        state.advance(tid)
        ring_counts.append(state.open_anchor_count)
        anchor_positions.append(state.anchor_positions)
    return ring_counts, anchor_positions
