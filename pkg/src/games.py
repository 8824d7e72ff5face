"""Safety and parity games between a controller and successor nondeterminism.

The controller owns states and picks an enabled action; the environment
owns the resulting (state, action) pairs and picks any successor.  Both
kinds of vertices are handled as boolean masks so that attractors are
computed with sparse matrix-vector products over the whole arena.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

CONTROLLER = 0
ENVIRONMENT = 1
NO_ACTION = -1


@dataclass(frozen=True, eq=False)
class Arena:
    num_states: int
    colors: np.ndarray
    pair_state: np.ndarray
    pair_action: np.ndarray
    succ: sp.csr_matrix

    @property
    def num_pairs(self):
        return self.pair_state.size

    def enabled(self, q):
        return self.pair_action[self.pair_state == q]

    def successors(self, q, u):
        rows = np.flatnonzero((self.pair_state == q) & (self.pair_action == u))
        if rows.size == 0:
            return np.empty(0, dtype=np.int64)
        row = rows[0]
        return self.succ.indices[self.succ.indptr[row]:self.succ.indptr[row + 1]].astype(np.int64)

    def restrict_pairs(self, keep):
        keep = np.asarray(keep, dtype=bool)
        return Arena(self.num_states, self.colors, self.pair_state[keep], self.pair_action[keep], self.succ[keep])

    @classmethod
    def from_transitions(cls, num_states, colors, transitions):
        """Build an arena from ``{(q, u): successors}``; empty sets are dropped."""
        pairs = sorted(key for key, succ in transitions.items() if len(succ) > 0)
        rows = [i for i, p in enumerate(pairs) for _ in transitions[p]]
        cols = [c for p in pairs for c in transitions[p]]
        succ = sp.csr_matrix((np.ones(len(rows), dtype=np.int32), (rows, cols)), shape=(len(pairs), num_states))
        succ.sum_duplicates()
        succ.data[:] = 1
        succ.sort_indices()
        return cls(
            num_states=num_states,
            colors=np.asarray(colors, dtype=np.int64),
            pair_state=np.array([q for q, _ in pairs], dtype=np.int64),
            pair_action=np.array([u for _, u in pairs], dtype=np.int64),
            succ=succ,
        )


@dataclass(frozen=True, eq=False)
class WinningResult:
    winning: np.ndarray
    controller: np.ndarray

    @property
    def losing(self):
        return ~self.winning

    @property
    def winning_region(self):
        return set(np.flatnonzero(self.winning).tolist())

    @property
    def losing_region(self):
        return set(np.flatnonzero(~self.winning).tolist())


def normal_arena(gamma, exclude_pairs=None):
    """Spike-free arena of a bimodal abstraction, optionally without some pairs."""
    keep = gamma.enabled.copy()
    if exclude_pairs is not None:
        keep &= ~exclude_pairs
    return Arena(gamma.num_states, gamma.colors, gamma.pair_state[keep], gamma.pair_action[keep],
                 gamma.delta_nor[keep])


def union_arena(gamma):
    """Arena whose successors are normal and disturbance successors together."""
    keep = gamma.enabled
    succ = (gamma.delta_nor + gamma.delta_dist).tocsr()[keep]
    succ.data[:] = 1
    return Arena(gamma.num_states, gamma.colors, gamma.pair_state[keep], gamma.pair_action[keep], succ)


def _states_with(arena, pair_mask):
    return np.bincount(arena.pair_state[pair_mask], minlength=arena.num_states) > 0


def _first_pair(arena, pair_mask, states):
    """Lowest-index pair in pair_mask for each state in states."""
    choice = np.full(arena.num_states, NO_ACTION, dtype=np.int64)
    idx = np.flatnonzero(pair_mask & states[arena.pair_state])
    owners, first = np.unique(arena.pair_state[idx], return_index=True)
    choice[owners] = idx[first]
    return choice


def _attractor(arena, states, pairs, target, player):
    """Attractor of target for player inside the subgame (states, pairs).

    Returns the attracted states, the attracted pairs and, for the
    controller, the pair chosen in each newly attracted state.
    """
    attr = target & states
    strategy = np.full(arena.num_states, NO_ACTION, dtype=np.int64)
    while True:
        if player == CONTROLLER:
            outside = (states & ~attr).astype(np.int32)
            pair_in = pairs & ((arena.succ @ outside) == 0)
            new = _states_with(arena, pair_in) & states & ~attr
            if new.any():
                chosen = _first_pair(arena, pair_in, new)
                strategy[new] = chosen[new]
        else:
            pair_in = pairs & ((arena.succ @ attr.astype(np.int32)) > 0)
            escapes = _states_with(arena, pairs & ~pair_in)
            new = states & ~attr & ~escapes
        if not new.any():
            return attr, pair_in, strategy
        attr = attr | new


def _subgame(arena, states, pairs, removed_states, removed_pairs):
    states = states & ~removed_states
    pairs = pairs & ~removed_pairs & states[arena.pair_state]
    return states, pairs


def _zielonka(arena, states, pairs):
    """Controller winning region and strategy (pair per state) of a subgame.

    Recursion depth is bounded by the number of distinct colors; the
    recursion on the complement of an attractor is unrolled into the loop.
    """
    win = np.zeros(arena.num_states, dtype=bool)
    strategy = np.full(arena.num_states, NO_ACTION, dtype=np.int64)
    while states.any():
        top_color = int(arena.colors[states].max())
        player = top_color % 2
        top = states & (arena.colors == top_color)
        attr, attr_pairs, attr_strategy = _attractor(arena, states, pairs, top, player)
        sub_states, sub_pairs = _subgame(arena, states, pairs, attr, attr_pairs)
        sub_win, sub_strategy = _zielonka(arena, sub_states, sub_pairs)

        if player == CONTROLLER:
            sub_lose = sub_states & ~sub_win
            if not sub_lose.any():
                strategy[sub_states] = sub_strategy[sub_states]
                pulled = attr & ~top
                strategy[pulled] = attr_strategy[pulled]
                stay = top & states
                strategy[stay] = _first_pair(arena, pairs, stay)[stay]
                win |= states
                return win, strategy
            lost, lost_pairs, _ = _attractor(arena, states, pairs, sub_lose, ENVIRONMENT)
            states, pairs = _subgame(arena, states, pairs, lost, lost_pairs)
        else:
            if not sub_win.any():
                return win, strategy
            won, won_pairs, won_strategy = _attractor(arena, states, pairs, sub_win, CONTROLLER)
            strategy[sub_win] = sub_strategy[sub_win]
            pulled = won & ~sub_win
            strategy[pulled] = won_strategy[pulled]
            win |= won
            states, pairs = _subgame(arena, states, pairs, won, won_pairs)
    return win, strategy


def _to_result(arena, win, strategy):
    controller = np.full(arena.num_states, NO_ACTION, dtype=np.int64)
    chosen = win & (strategy >= 0)
    controller[chosen] = arena.pair_action[strategy[chosen]]
    return WinningResult(winning=win, controller=controller)


def _solve_parity_in(arena, states, pairs):
    dead = states & ~_states_with(arena, pairs)
    if dead.any():
        lost, lost_pairs, _ = _attractor(arena, states, pairs, dead, ENVIRONMENT)
        states, pairs = _subgame(arena, states, pairs, lost, lost_pairs)
    return _zielonka(arena, states, pairs)


def solve_safety(arena, unsafe):
    """Greatest fixed point of the controllable predecessor outside unsafe."""
    unsafe = np.asarray(unsafe, dtype=bool)
    win = ~unsafe
    while True:
        safe_pairs = (arena.succ @ (~win).astype(np.int32)) == 0
        shrunk = win & _states_with(arena, safe_pairs)
        if np.array_equal(shrunk, win):
            break
        win = shrunk
    strategy = _first_pair(arena, safe_pairs, win)
    return _to_result(arena, win, strategy)


def solve_parity(arena):
    states = np.ones(arena.num_states, dtype=bool)
    pairs = np.ones(arena.num_pairs, dtype=bool)
    win, strategy = _solve_parity_in(arena, states, pairs)
    logger.debug("Parity game with %d states: %d winning", arena.num_states, int(win.sum()))
    return _to_result(arena, win, strategy)


def solve_parity_and_safety(arena, unsafe):
    """Parity restricted to the safety winning region and the actions that stay in it."""
    safe = solve_safety(arena, unsafe).winning
    pairs = safe[arena.pair_state] & ((arena.succ @ (~safe).astype(np.int32)) == 0)
    win, strategy = _solve_parity_in(arena, safe.copy(), pairs)
    return _to_result(arena, win, strategy)
