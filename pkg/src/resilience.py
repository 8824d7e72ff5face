"""Resilience ranking fixed point, classification and controller stitching.

Rankings are kept as integer arrays with ``UNRANKED`` for states (and
(state, action) pairs) outside the domain.  Resilience values are coded
as integers as well so that their total order is the integer order:
``Fin(k)`` is ``k``, followed by ``OMEGA`` and ``OMEGA_PLUS_ONE``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
import scipy.sparse as sp

from abstraction import BimodalAbstraction
from errors import InternalError
from games import Arena, NO_ACTION, normal_arena, solve_parity, solve_parity_and_safety, union_arena

logger = logging.getLogger(__name__)

UNRANKED = -1
OMEGA = 2**31 - 2
OMEGA_PLUS_ONE = OMEGA + 1
_INF = np.iinfo(np.int64).max // 4

SWITCHING_RULE = "switch-on-spike/1"
SPIKE_FREE_RULE = "spike-free/1"
MAX_ORACLE_STATES = 16


class Mode(str, Enum):
    REFERENCE = "reference"
    PAPER_LITERAL = "paper-literal"


@dataclass(frozen=True, order=True)
class ResilienceValue:
    code: int

    @classmethod
    def fin(cls, k):
        if k < 0:
            raise ValueError(f"finite resilience must be nonnegative, got {k}")
        return cls(int(k))

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text == "omega":
            return OMEGA_VALUE
        if text == "omega+1":
            return OMEGA_PLUS_ONE_VALUE
        try:
            return cls.fin(int(text))
        except ValueError:
            raise ValueError(f"not a resilience value: {text!r}") from None

    @property
    def is_finite(self):
        return self.code < OMEGA

    def __str__(self):
        if self.code == OMEGA:
            return "omega"
        if self.code == OMEGA_PLUS_ONE:
            return "omega+1"
        return str(self.code)


OMEGA_VALUE = ResilienceValue(OMEGA)
OMEGA_PLUS_ONE_VALUE = ResilienceValue(OMEGA_PLUS_ONE)


def value_label(code):
    return str(ResilienceValue(int(code)))


@dataclass(eq=False)
class ResilienceMap:
    values: np.ndarray

    def __getitem__(self, q):
        return ResilienceValue(int(self.values[q]))

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ResilienceMap):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def labels(self):
        return [value_label(v) for v in self.values]

    def as_dict(self):
        return {q: self[q] for q in range(self.values.size)}

    def finite_values(self):
        return sorted(set(int(v) for v in self.values if v < OMEGA))


@dataclass(eq=False)
class Ranking:
    states: np.ndarray
    pairs: np.ndarray

    @classmethod
    def empty(cls, num_states, num_pairs):
        return cls(np.full(num_states, UNRANKED, dtype=np.int64), np.full(num_pairs, UNRANKED, dtype=np.int64))

    @property
    def domain(self):
        return self.states >= 0

    def image(self):
        ranks = np.concatenate([self.states[self.states >= 0], self.pairs[self.pairs >= 0]])
        return np.unique(ranks).tolist()

    def as_dict(self):
        return {int(q): int(self.states[q]) for q in np.flatnonzero(self.domain)}

    def __eq__(self, other):
        if not isinstance(other, Ranking):
            return NotImplemented
        return np.array_equal(self.states, other.states) and np.array_equal(self.pairs, other.pairs)


@dataclass(eq=False)
class ResilientController:
    """Memoryless sub-controllers stitched by a selector and a switching rule.

    ``actions[j, q]`` is the action of sub-controller j at state q (or
    ``NO_ACTION``); ``selector[q]`` is the sub-controller taken over at q
    on start-up and after every observed spike.
    """

    actions: np.ndarray
    labels: list
    selector: np.ndarray
    rule: str = SWITCHING_RULE

    @property
    def num_sub_controllers(self):
        return len(self.labels)

    def select(self, q):
        return int(self.selector[q])

    def action(self, sub, q):
        if sub < 0:
            return NO_ACTION
        return int(self.actions[sub, q])

    def value_of(self, q):
        """Resilience value implied by the sub-controller selected at q."""
        sub = self.select(q)
        if sub < 0:
            return ResilienceValue.fin(0)
        label = self.labels[sub]
        if label.startswith("level-"):
            return ResilienceValue.fin(int(label[len("level-"):]))
        return ResilienceValue.parse(label)


def _as_rank(values):
    return np.where(values >= 0, values, _INF)


def _from_rank(values):
    return np.where(values < _INF, values, UNRANKED)


def _row_min(matrix, state_ranks):
    """Minimum rank among each row's successors inside the domain, _INF if none."""
    out = np.full(matrix.shape[0], _INF, dtype=np.int64)
    if matrix.nnz == 0:
        return out
    values = _as_rank(state_ranks)[matrix.indices]
    nonempty = np.diff(matrix.indptr) > 0
    out[nonempty] = np.minimum.reduceat(values, matrix.indptr[:-1][nonempty])
    return out


def _states_with(gamma, pair_mask):
    return np.bincount(gamma.pair_state[pair_mask], minlength=gamma.num_states) > 0


def initial_ranking(gamma):
    winning = solve_parity(normal_arena(gamma)).winning
    ranking = Ranking.empty(gamma.num_states, gamma.num_pairs)
    ranking.states[~winning] = 0
    return ranking


def disturbance_update(r, gamma, mode=Mode.REFERENCE):
    """Propagate known ranks backwards over disturbance edges.

    A state is ranked when it has a safe action (no ranked normal
    successor) and every safe action can spike into the domain.  In
    reference mode each enabled pair keeps its own rank, the lowest
    spike successor rank plus one, and the state takes the best action:
    the maximum over its actions of min(normal rank, spike rank + 1).
    Paper-literal mode takes the minimum of spike rank + 1 over the safe
    actions instead, which undervalues a state whose actions spike into
    differently ranked states.

    Args:
        r (Ranking): Current state and pair ranks.
        gamma (BimodalAbstraction): Abstraction whose disturbance edges are followed.
        mode (Mode): Computation mode.

    Returns:
        Ranking: New ranking; ranks only appear or decrease.
    """
    mode = Mode(mode)
    enabled = gamma.enabled
    normal_min = _row_min(gamma.delta_nor, r.states)
    spike_min = _row_min(gamma.delta_dist, r.states)
    spike_min = np.where(spike_min < _INF, spike_min + 1, _INF)

    safe = enabled & (normal_min >= _INF)
    # every safe action must be able to spike into the domain, and one must exist
    spiking = _states_with(gamma, safe) & ~_states_with(gamma, safe & (spike_min >= _INF))

    states = _as_rank(r.states)
    if mode is Mode.PAPER_LITERAL:
        candidate = np.full(gamma.num_states, _INF, dtype=np.int64)
        np.minimum.at(candidate, gamma.pair_state[safe], spike_min[safe])
        states = np.where(spiking, np.minimum(states, candidate), states)
        return Ranking(_from_rank(states), r.pairs.copy())

    pairs = np.where(enabled, np.minimum(_as_rank(r.pairs), spike_min), _as_rank(r.pairs))
    best = np.minimum(normal_min, spike_min)
    candidate = np.full(gamma.num_states, -1, dtype=np.int64)
    np.maximum.at(candidate, gamma.pair_state[enabled], best[enabled])
    states = np.where(spiking, np.minimum(states, candidate), states)
    return Ranking(_from_rank(states), _from_rank(pairs))


def strategy_pruning(r, gamma, mode=Mode.REFERENCE):
    """Drop every action touching the ranked domain (paper-literal mode only)."""
    if Mode(mode) is Mode.REFERENCE:
        return gamma
    dom = r.domain.astype(np.int32)
    touched = ((gamma.delta_nor @ dom) > 0) | ((gamma.delta_dist @ dom) > 0)
    if not touched.any():
        return gamma
    keep = sp.diags((~touched).astype(np.int32))
    delta_nor = (keep @ gamma.delta_nor).tocsr()
    delta_dist = (keep @ gamma.delta_dist).tocsr()
    for matrix in (delta_nor, delta_dist):
        matrix.eliminate_zeros()
        matrix.sort_indices()
    logger.debug("Pruned %d actions", int(touched.sum()))
    return gamma.with_transitions(delta_nor, delta_dist)


class LevelGames:
    """Memoized spike-free games avoiding ranks <= k, one instance per abstraction."""

    def __init__(self, gamma, mode=Mode.REFERENCE):
        self.gamma = gamma
        self.mode = Mode(mode)
        self._solved = {}

    def solve(self, r, k):
        unsafe = r.domain & (r.states <= k)
        if self.mode is Mode.REFERENCE:
            excluded = (r.pairs >= 0) & (r.pairs <= k)
            key = (np.packbits(unsafe).tobytes(), np.packbits(excluded).tobytes())
        else:
            excluded = None
            key = (np.packbits(unsafe).tobytes(), b"")
        if key not in self._solved:
            self._solved[key] = solve_parity_and_safety(normal_arena(self.gamma, excluded), unsafe)
        return self._solved[key]


def risk_update(r, gamma, mode=Mode.REFERENCE, games=None):
    """Rank states that cannot avoid low-ranked states without spikes.

    Returns the new ranking and the winning result of each level game.
    """
    mode = Mode(mode)
    games = games if games is not None else LevelGames(gamma, mode)
    levels = r.image() if mode is Mode.REFERENCE else sorted(set(r.states[r.domain].tolist()))
    reached = np.full(gamma.num_states, _INF, dtype=np.int64)
    controllers = {}
    for k in levels:
        result = games.solve(r, k)
        controllers[k] = result
        fresh = result.losing & (reached >= _INF)
        reached[fresh] = k
    if mode is Mode.REFERENCE:
        states = np.minimum(_as_rank(r.states), reached)
        return Ranking(_from_rank(states), r.pairs.copy()), controllers
    return Ranking(_from_rank(reached), r.pairs.copy()), controllers


@dataclass(eq=False)
class FiniteResilience:
    ranking: Ranking
    gamma: BimodalAbstraction
    mode: Mode
    iterations: int
    level_controllers: dict = field(default_factory=dict)
    games: LevelGames = None
    history: list = field(default_factory=list)

    def level_controller(self, k):
        if k not in self.level_controllers:
            self.level_controllers[k] = self.games.solve(self.ranking, k)
        return self.level_controllers[k]


def finite_resilience(gamma, mode=Mode.REFERENCE):
    """Iterate disturbance update, pruning and risk update to the fixed point."""
    mode = Mode(mode)
    r = initial_ranking(gamma)
    games = LevelGames(gamma, mode)
    history = [r.states.copy()]
    iteration = 0
    while True:
        iteration += 1
        image = r.image()
        guard = (gamma.num_states + gamma.num_pairs) * ((max(image) if image else 0) + 2)
        if iteration > guard:
            raise InternalError(f"resilience fixed point did not stabilize after {guard} iterations")
        r_spiked = disturbance_update(r, gamma, mode)
        pruned = strategy_pruning(r, gamma, mode)
        if pruned is not gamma:
            games = LevelGames(pruned, mode)
        r_next, controllers = risk_update(r_spiked, pruned, mode, games)
        gamma = pruned
        history.append(r_next.states.copy())
        logger.info("Iteration %d: %d ranked states, %d levels", iteration,
                    int(r_next.domain.sum()), len(controllers))
        if r_next == r:
            return FiniteResilience(r_next, gamma, mode, iteration, controllers, games, history)
        r = r_next


def classify(gamma, mode=Mode.REFERENCE):
    """
    Total resilience map and the stitched optimally resilient controller.

    Args:
        gamma (BimodalAbstraction): Risk-aware abstraction to classify
        mode (Mode): Computation mode for the finite ranks

    Returns:
        tuple: (ResilienceMap, ResilientController)

    Raises:
        InternalError: In reference mode, when the finite ranks and the
            omega+1 region overlap or the omega controller does not win
    """
    mode = Mode(mode)
    finite = finite_resilience(gamma, mode)
    ranks = finite.ranking.states
    ranked = ranks >= 0
    union = solve_parity(union_arena(gamma))

    overlap = ranked & union.winning
    if overlap.any():
        message = f"states {np.flatnonzero(overlap)[:10].tolist()} are both finitely ranked and omega+1"
        if mode is Mode.REFERENCE:
            raise InternalError(message)
        logger.warning("%s; keeping the finite ranks", message)

    values = np.full(gamma.num_states, OMEGA, dtype=np.int64)
    values[ranked] = ranks[ranked]
    values[union.winning & ~ranked] = OMEGA_PLUS_ONE

    labels, tables = [], []
    selector = np.full(gamma.num_states, NO_ACTION, dtype=np.int64)
    for k in sorted(set(ranks[ranks >= 1].tolist())):
        selector[values == k] = len(labels)
        labels.append(f"level-{k}")
        tables.append(finite.level_controller(k - 1).controller)

    omega = values == OMEGA
    if omega.any():
        image = finite.ranking.image()
        if image:
            result = finite.level_controller(max(image))
        else:
            result = solve_parity(normal_arena(finite.gamma))
        if mode is Mode.REFERENCE and not result.winning[omega].all():
            raise InternalError("omega controller is not winning on every omega state")
        selector[omega] = len(labels)
        labels.append("omega")
        tables.append(result.controller)

    if (values == OMEGA_PLUS_ONE).any():
        selector[values == OMEGA_PLUS_ONE] = len(labels)
        labels.append("omega+1")
        tables.append(union.controller)

    actions = np.vstack(tables) if tables else np.empty((0, gamma.num_states), dtype=np.int64)
    logger.info("Classified %d states in %s mode: %d finite values, %d omega, %d omega+1",
                gamma.num_states, mode.value, len(set(values[values < OMEGA].tolist())),
                int(omega.sum()), int((values == OMEGA_PLUS_ONE).sum()))
    return ResilienceMap(values), ResilientController(actions, labels, selector)


def spike_free_controller(gamma):
    """Classical controller that ignores spikes, as a one-level stitched controller.

    It wins the spike-free parity game and nothing more, so its only
    sub-controller is labelled ``level-1``.

    Args:
        gamma (BimodalAbstraction): Abstraction whose normal edges define the game.

    Returns:
        ResilientController: Selector 0 on the spike-free winning region, -1 elsewhere.
    """
    result = solve_parity(normal_arena(gamma))
    selector = np.where(result.winning, 0, NO_ACTION).astype(np.int64)
    return ResilientController(result.controller[None, :].copy(), ["level-1"], selector, SPIKE_FREE_RULE)


def _budget_arena(gamma, k_max):
    """Product with a spike counter; disturbance edges are usable while counter < k_max."""
    layers = k_max + 1
    transitions = {}
    for p in np.flatnonzero(gamma.enabled):
        q, u = int(gamma.pair_state[p]), int(gamma.pair_action[p])
        nor = gamma.delta_nor.indices[gamma.delta_nor.indptr[p]:gamma.delta_nor.indptr[p + 1]]
        dist = gamma.delta_dist.indices[gamma.delta_dist.indptr[p]:gamma.delta_dist.indptr[p + 1]]
        for c in range(layers):
            succ = [int(s) * layers + c for s in nor]
            if c < k_max:
                succ += [int(s) * layers + c + 1 for s in dist]
            transitions[(q * layers + c, u)] = succ
    return Arena.from_transitions(gamma.num_states * layers, np.repeat(gamma.colors, layers), transitions)


def brute_force_resilience(gamma, k_max=None):
    """Resilience by solving the spike-budget product game directly."""
    n = gamma.num_states
    if n > MAX_ORACLE_STATES:
        raise ValueError(f"oracle limited to {MAX_ORACLE_STATES} states, got {n}")
    k_max = n + 1 if k_max is None else k_max
    win = solve_parity(_budget_arena(gamma, k_max)).winning.reshape(n, k_max + 1)
    # column c wins against k_max - c further spikes; count winning budgets
    budgets = win[:, ::-1].cumprod(axis=1).sum(axis=1)
    values = budgets.astype(np.int64)
    unbounded = budgets == k_max + 1
    union = solve_parity(union_arena(gamma)).winning
    values[unbounded] = np.where(union[unbounded], OMEGA_PLUS_ONE, OMEGA)
    return ResilienceMap(values)


def random_bimodal(seed, num_states=None, max_states=10, max_actions=3, num_colors=3,
                   nor_density=0.3, dist_density=0.2, disable_prob=0.1):
    """Seeded random bimodal abstraction with Erdos-Renyi successor sets."""
    rng = np.random.default_rng(seed)
    n = int(num_states or rng.integers(1, max_states + 1))
    num_actions = int(rng.integers(1, max_actions + 1))
    colors = rng.integers(0, num_colors, size=n)
    nor, dist = {}, {}
    for q in range(n):
        for u in range(num_actions):
            if rng.random() < disable_prob:
                continue
            succ = np.flatnonzero(rng.random(n) < nor_density)
            if succ.size == 0:
                succ = np.array([rng.integers(n)])
            rest = np.setdiff1d(np.arange(n), succ)
            spikes = rest[rng.random(rest.size) < dist_density]
            nor[(q, u)] = succ.tolist()
            if spikes.size:
                dist[(q, u)] = spikes.tolist()
    return BimodalAbstraction.from_transitions(n, colors, nor, dist, num_actions=num_actions)


def resilience_histogram(rmap):
    codes, counts = np.unique(rmap.values, return_counts=True)
    return pd.DataFrame({"value": [value_label(c) for c in codes], "count": counts})


@dataclass(frozen=True, eq=False)
class ModeComparison:
    report: pd.DataFrame
    change_matrix: pd.DataFrame

    @property
    def divergent_states(self):
        return self.report.loc[self.report["differs"], "state_id"].tolist()


def compare_modes(gamma):
    """Per-state values under both modes plus a value-change matrix."""
    reference, _ = classify(gamma, Mode.REFERENCE)
    literal, _ = classify(gamma, Mode.PAPER_LITERAL)
    report = pd.DataFrame({
        "state_id": np.arange(gamma.num_states),
        "reference": reference.labels(),
        "paper_literal": literal.labels(),
        "differs": reference.values != literal.values,
    })
    order = [value_label(c) for c in np.unique(np.concatenate([reference.values, literal.values]))]
    matrix = pd.crosstab(
        pd.Categorical(report["reference"], categories=order),
        pd.Categorical(report["paper_literal"], categories=order),
        rownames=["reference"], colnames=["paper_literal"], dropna=False,
    )
    if report["differs"].any():
        logger.warning("Modes disagree on %d of %d states", int(report["differs"].sum()), gamma.num_states)
    return ModeComparison(report, matrix)
