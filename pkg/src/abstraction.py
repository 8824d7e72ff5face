"""Grid quantizer and bimodal (risk-aware) finite abstractions.

Cells are numbered in C order over the per-dimension cell counts; the
id ``num_cells`` is the absorbing OutOfDomain sink.  Transition maps are
CSR matrices with one row per (state, action) pair and one column per
state, sorted by (state, action).
"""

import logging
import os
from dataclasses import dataclass, field, replace

import joblib
import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed

from errors import ColorStraddleError, UnknownReferenceError
from system import color_of, integrate_growth, integrate_nominal, is_obstacle

logger = logging.getLogger(__name__)

ABSTRACTION_FORMAT = "rescot-abstraction"
ABSTRACTION_VERSION = 1

# cell-boundary tolerance, in units of eta
EDGE_TOL = 1e-9
CHUNK_SIZE = 8192


@dataclass(frozen=True, eq=False)
class GridParams:
    state_lo: np.ndarray
    state_hi: np.ndarray
    eta: np.ndarray
    periodic: np.ndarray = None
    inputs: np.ndarray = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.state_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.state_hi, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        n = lo.size
        if hi.shape != (n,) or eta.shape != (n,):
            raise ValueError("state_lo, state_hi and eta must have the same length")
        if np.any(eta <= 0) or np.any(hi <= lo):
            raise ValueError(f"need eta > 0 and state_hi > state_lo, got eta={eta}, lo={lo}, hi={hi}")
        ratio = (hi - lo) / eta
        if np.any(np.abs(hi - lo - np.rint(ratio) * eta) > 1e-9):
            raise ValueError(f"domain widths {hi - lo} are not integer multiples of eta {eta}")
        periodic = np.zeros(n, dtype=bool) if self.periodic is None else np.asarray(self.periodic, dtype=bool)
        if periodic.shape != (n,):
            raise ValueError("periodic flags must have one entry per dimension")
        if self.inputs is None:
            raise ValueError("inputs must be given")
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if inputs.ndim != 2 or inputs.shape[0] == 0 or not np.all(np.isfinite(inputs)):
            raise ValueError("inputs must be a non-empty list of finite vectors")
        for name, value in (("state_lo", lo), ("state_hi", hi), ("eta", eta),
                            ("periodic", periodic), ("inputs", inputs)):
            object.__setattr__(self, name, value)

    @property
    def state_dim(self):
        return self.state_lo.size

    @property
    def num_inputs(self):
        return self.inputs.shape[0]

    def to_dict(self):
        return {
            "lo": self.state_lo.tolist(),
            "hi": self.state_hi.tolist(),
            "eta": self.eta.tolist(),
            "periodic": self.periodic.tolist(),
            "inputs": self.inputs.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["lo"], data["hi"], data["eta"], data.get("periodic"), data["inputs"])


class Quantizer:
    """Uniform grid quantizer; the relation x -> {quantize(x)}."""

    def __init__(self, grid):
        self.grid = grid
        self.counts = np.rint((grid.state_hi - grid.state_lo) / grid.eta).astype(np.int64)
        self.num_cells = int(np.prod(self.counts))
        self.out_of_domain = self.num_cells
        self.strides = np.ones_like(self.counts)
        for d in range(self.counts.size - 2, -1, -1):
            self.strides[d] = self.strides[d + 1] * self.counts[d + 1]

    def quantize(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.grid.state_lo) / self.grid.eta).astype(np.int64)
        idx = np.where(self.grid.periodic, np.mod(idx, self.counts), idx)
        inside = np.all((idx >= 0) & (idx < self.counts), axis=-1)
        cells = np.where(inside, (np.clip(idx, 0, self.counts - 1) * self.strides).sum(axis=-1), self.out_of_domain)
        return int(cells) if cells.ndim == 0 else cells

    def cell_index(self, cells):
        cells = np.asarray(cells, dtype=np.int64)
        return (cells[..., None] // self.strides) % self.counts

    def cell_lower(self, cells):
        return self.grid.state_lo + self.cell_index(cells) * self.grid.eta

    def cell_center(self, cells):
        return self.grid.state_lo + (self.cell_index(cells) + 0.5) * self.grid.eta

    def cell_bounds(self, cells):
        """Lower and upper corners of the half-open cells."""
        lower = self.cell_lower(cells)
        return lower, lower + self.grid.eta


@dataclass(frozen=True, eq=False)
class TransitionMap:
    """Successor sets of every (cell, input) pair under one disturbance box."""

    num_states: int
    pair_state: np.ndarray
    pair_action: np.ndarray
    successors: sp.csr_matrix

    def successors_of(self, pair):
        return _row(self.successors, pair)


@dataclass(frozen=True, eq=False)
class BimodalAbstraction:
    num_states: int
    num_actions: int
    pair_state: np.ndarray
    pair_action: np.ndarray
    delta_nor: sp.csr_matrix
    delta_dist: sp.csr_matrix
    colors: np.ndarray
    obstacle: np.ndarray
    out_of_domain: int = None
    grid: GridParams = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # lookup tables for pair_index, rebuilt by replace()
        object.__setattr__(self, "_pair_key", self.pair_state * self.num_actions + self.pair_action)
        object.__setattr__(self, "_enabled", np.diff(self.delta_nor.indptr) > 0)

    @property
    def num_pairs(self):
        return self.pair_state.size

    @property
    def enabled(self):
        """Pairs whose normal successor set is non-empty."""
        return self._enabled

    @property
    def pair_offsets(self):
        return np.searchsorted(self.pair_state, np.arange(self.num_states + 1))

    def pair_index(self, q, u):
        """Position of the enabled pair (q, u) in the pair arrays.

        Args:
            q: Abstract state id.
            u: Action index.

        Returns:
            int: The pair position, or -1 when u is not enabled at q.
        """
        key = self._pair_key
        target = q * self.num_actions + u
        pos = int(np.searchsorted(key, target))
        if pos < key.size and key[pos] == target and self._enabled[pos]:
            return pos
        return -1

    def enabled_actions(self, q):
        offsets = self.pair_offsets
        pairs = np.arange(offsets[q], offsets[q + 1])
        return self.pair_action[pairs[self.enabled[pairs]]]

    def successors(self, q, u, kind="nor"):
        pair = self.pair_index(q, u)
        if pair < 0:
            return np.empty(0, dtype=np.int64)
        return _row(self.delta_nor if kind == "nor" else self.delta_dist, pair)

    def edge_counts(self):
        return {"normal": int(self.delta_nor.nnz), "dist": int(self.delta_dist.nnz)}

    def with_transitions(self, delta_nor, delta_dist):
        return replace(self, delta_nor=delta_nor, delta_dist=delta_dist)

    @classmethod
    def from_transitions(cls, num_states, colors, nor, dist=None, num_actions=None,
                         obstacle=None, out_of_domain=None):
        """Build an abstraction from ``{(q, u): successors}`` dictionaries."""
        dist = dist or {}
        pairs = sorted(key for key, succ in nor.items() if len(succ) > 0)
        unknown = set(k for k, v in dist.items() if len(v) > 0) - set(pairs)
        if unknown:
            raise ValueError(f"disturbance successors given for disabled pairs {sorted(unknown)}")
        if num_actions is None:
            num_actions = 1 + max((u for _, u in pairs), default=0)
        pair_state = np.array([q for q, _ in pairs], dtype=np.int64)
        pair_action = np.array([u for _, u in pairs], dtype=np.int64)
        shape = (len(pairs), num_states)
        delta_nor = _csr_from_sets([nor[p] for p in pairs], shape)
        delta_dist = _csr_from_sets([dist.get(p, ()) for p in pairs], shape)
        if delta_nor.multiply(delta_dist).nnz:
            raise ValueError("normal and disturbance successor sets must be disjoint")
        return cls(
            num_states=num_states,
            num_actions=num_actions,
            pair_state=pair_state,
            pair_action=pair_action,
            delta_nor=delta_nor,
            delta_dist=delta_dist,
            colors=np.asarray(colors, dtype=np.int64),
            obstacle=np.zeros(num_states, dtype=bool) if obstacle is None else np.asarray(obstacle, dtype=bool),
            out_of_domain=out_of_domain,
        )


def _row(matrix, row):
    return matrix.indices[matrix.indptr[row]:matrix.indptr[row + 1]].astype(np.int64)


def _csr(rows, cols, shape):
    rows = np.asarray(rows, dtype=np.int64)
    matrix = sp.csr_matrix((np.ones(rows.size, dtype=np.int32), (rows, np.asarray(cols, dtype=np.int64))), shape=shape)
    matrix.sum_duplicates()
    matrix.data[:] = 1
    matrix.sort_indices()
    return matrix


def _csr_from_sets(sets, shape):
    rows = [i for i, succ in enumerate(sets) for _ in succ]
    cols = [c for succ in sets for c in succ]
    return _csr(rows, cols, shape)


def _set_difference(a, b):
    diff = (a - a.multiply(b)).tocsr()
    diff.eliminate_zeros()
    diff.sort_indices()
    return diff.astype(np.int32)


def _chunk_successors(sys, quantizer, start, states, actions, w_center, w_radius):
    grid = quantizer.grid
    counts = quantizer.counts
    x = quantizer.cell_center(states)
    u = grid.inputs[actions]
    x_next = integrate_nominal(sys, x, u, np.broadcast_to(w_center, x.shape))
    r = integrate_growth(sys, np.broadcast_to(grid.eta / 2.0, x.shape), u, np.broadcast_to(w_radius, x.shape))

    first = np.floor((x_next - r - grid.state_lo) / grid.eta + EDGE_TOL).astype(np.int64)
    last = np.ceil((x_next + r - grid.state_lo) / grid.eta - EDGE_TOL).astype(np.int64) - 1
    last = np.maximum(last, first)
    size = last - first + 1

    periodic = grid.periodic
    too_wide = np.any((size > counts) & ~periodic, axis=1)
    full_turn = (size >= counts) & periodic
    first = np.where(full_turn, 0, first)
    last = np.where(full_turn, counts - 1, last)

    exits = np.any(((first < 0) | (last >= counts)) & ~periodic, axis=1)
    empty = np.any(((last < 0) | (first >= counts)) & ~periodic, axis=1)
    first = np.where(periodic, first, np.clip(first, 0, counts - 1))
    last = np.where(periodic, last, np.clip(last, 0, counts - 1))
    size = last - first + 1

    total = np.where(empty, 0, np.prod(size, axis=1))
    owner = np.repeat(np.arange(states.size), total)
    rem = np.arange(int(total.sum())) - np.repeat(np.cumsum(total) - total, total)
    cells = np.zeros(owner.size, dtype=np.int64)
    for d in range(counts.size - 1, -1, -1):
        width = size[owner, d]
        idx = first[owner, d] + rem % width
        rem = rem // width
        if periodic[d]:
            idx = np.mod(idx, counts[d])
        cells += idx * quantizer.strides[d]

    sink_rows = np.flatnonzero(exits)
    rows = np.concatenate([owner, sink_rows]) + start
    cols = np.concatenate([cells, np.full(sink_rows.size, quantizer.out_of_domain, dtype=np.int64)])
    return rows, cols, int(too_wide.sum())


def find_abstraction(sys, grid, w, jobs=1, chunk_size=CHUNK_SIZE):
    """Over-approximate one-step successors of every (cell, input) pair under W."""
    quantizer = Quantizer(grid)
    num_cells, num_inputs = quantizer.num_cells, grid.num_inputs
    pair_state = np.repeat(np.arange(num_cells, dtype=np.int64), num_inputs)
    pair_action = np.tile(np.arange(num_inputs, dtype=np.int64), num_cells)
    starts = range(0, pair_state.size, chunk_size)
    logger.info("Computing successors of %d pairs (%d cells x %d inputs) with %d job(s)",
                pair_state.size, num_cells, num_inputs, jobs)
    chunks = Parallel(n_jobs=jobs)(
        delayed(_chunk_successors)(
            sys, quantizer, s, pair_state[s:s + chunk_size], pair_action[s:s + chunk_size], w.center, w.radius
        )
        for s in starts
    )
    too_wide = sum(c[2] for c in chunks)
    if too_wide:
        logger.warning("%d pairs have attainable boxes wider than the whole domain", too_wide)
    rows = np.concatenate([c[0] for c in chunks]) if chunks else np.empty(0, dtype=np.int64)
    cols = np.concatenate([c[1] for c in chunks]) if chunks else np.empty(0, dtype=np.int64)
    successors = _csr(rows, cols, (pair_state.size, num_cells + 1))
    return TransitionMap(num_cells + 1, pair_state, pair_action, successors)


def _cell_samples(quantizer, cells):
    """Center plus all corners, pulled inside the cell by EDGE_TOL."""
    n = quantizer.counts.size
    corners = np.array(np.meshgrid(*[[EDGE_TOL, 1.0 - EDGE_TOL]] * n, indexing="ij")).reshape(n, -1).T
    offsets = np.vstack([np.full((1, n), 0.5), corners])
    lower = quantizer.cell_lower(cells)
    return lower[:, None, :] + offsets[None, :, :] * quantizer.grid.eta


def _lift(quantizer, values_of):
    values = np.empty(quantizer.num_cells, dtype=np.int64)
    for start in range(0, quantizer.num_cells, CHUNK_SIZE):
        cells = np.arange(start, min(start + CHUNK_SIZE, quantizer.num_cells))
        sampled = np.asarray(values_of(_cell_samples(quantizer, cells)), dtype=np.int64)
        straddling = np.flatnonzero(sampled.min(axis=1) != sampled.max(axis=1))
        if straddling.size:
            bad = cells[straddling[0]]
            raise ColorStraddleError(bad, quantizer.cell_lower(bad), sampled[straddling[0]])
        values[cells] = sampled[:, 0]
    return values


def sink_color(max_color):
    return max_color if max_color % 2 == 1 else max_color + 1


def lift_colors(quantizer, cmap):
    """Per-state colors, OutOfDomain included (last entry, worst odd color)."""
    colors = _lift(quantizer, lambda x: color_of(cmap, x))
    top = max(int(colors.max()) if colors.size else 0, cmap.max_color)
    return np.append(colors, sink_color(top))


def lift_obstacles(quantizer, cmap):
    return _lift(quantizer, lambda x: is_obstacle(cmap, x)).astype(bool)


def apply_obstacle_sinks(gamma, obstacle_cells, obstacle_color=None):
    """Turn obstacle states into absorbing sinks on both transition maps."""
    obstacle_cells = np.asarray(obstacle_cells)
    mask = np.zeros(gamma.num_states, dtype=bool)
    if obstacle_cells.dtype == bool:
        mask[np.flatnonzero(obstacle_cells)] = True
    else:
        mask[obstacle_cells.astype(np.int64)] = True
    if not mask.any():
        return gamma
    rewired = mask[gamma.pair_state] & gamma.enabled
    nor = gamma.delta_nor.tocoo()
    keep = ~rewired[nor.row]
    pairs = np.flatnonzero(rewired)
    delta_nor = _csr(np.concatenate([nor.row[keep], pairs]),
                     np.concatenate([nor.col[keep], gamma.pair_state[pairs]]),
                     gamma.delta_nor.shape)
    dist = gamma.delta_dist.tocoo()
    keep = ~rewired[dist.row]
    delta_dist = _csr(dist.row[keep], dist.col[keep], gamma.delta_dist.shape)
    colors = gamma.colors.copy()
    if obstacle_color is not None:
        colors[mask] = obstacle_color
    logger.info("Installed %d obstacle sinks", int(mask.sum()))
    return replace(gamma, delta_nor=delta_nor, delta_dist=delta_dist, colors=colors,
                   obstacle=gamma.obstacle | mask)


def find_risk_aware_abstraction(sys, grid, cmap, jobs=1, obstacle_color=None):
    """
    Build the bimodal abstraction of a system on a grid.

    Args:
        sys (SampledSystem): Sampled dynamics with normal and high disturbance boxes
        grid (GridParams): State grid and input values
        cmap (ColorMap): Colors and obstacle boxes in state space
        jobs (int): Worker processes for the successor computation
        obstacle_color (int): Color given to obstacle cells, or None

    Returns:
        BimodalAbstraction: Normal and spike-only successors, colors and the sink
    """
    quantizer = Quantizer(grid)
    colors = lift_colors(quantizer, cmap)
    obstacles = lift_obstacles(quantizer, cmap)
    normal = find_abstraction(sys, grid, sys.w_normal, jobs=jobs)
    high = find_abstraction(sys, grid, sys.w_high, jobs=jobs)
    delta_dist = _set_difference(high.successors, normal.successors)

    sink = quantizer.out_of_domain
    num_inputs = grid.num_inputs
    sink_pairs = np.arange(num_inputs) + normal.pair_state.size
    total_pairs = normal.pair_state.size + num_inputs
    nor = normal.successors.tocoo()
    delta_nor = _csr(np.concatenate([nor.row, sink_pairs]),
                     np.concatenate([nor.col, np.full(num_inputs, sink)]),
                     (total_pairs, sink + 1))
    delta_dist.resize((total_pairs, sink + 1))

    gamma = BimodalAbstraction(
        num_states=sink + 1,
        num_actions=num_inputs,
        pair_state=np.concatenate([normal.pair_state, np.full(num_inputs, sink)]),
        pair_action=np.concatenate([normal.pair_action, np.arange(num_inputs)]),
        delta_nor=delta_nor,
        delta_dist=delta_dist.tocsr(),
        colors=colors,
        obstacle=np.zeros(sink + 1, dtype=bool),
        out_of_domain=sink,
        grid=grid,
        meta={"system": sys.name, "tau": float(sys.tau),
              "w_normal": sys.w_normal.to_list(), "w_high": sys.w_high.to_list()},
    )
    gamma = apply_obstacle_sinks(gamma, np.append(obstacles, False), obstacle_color=obstacle_color)
    counts = gamma.edge_counts()
    logger.info("Risk-aware abstraction: %d states, %d actions, %d normal and %d disturbance edges",
                gamma.num_states, gamma.num_actions, counts["normal"], counts["dist"])
    return gamma


@dataclass(frozen=True)
class FrrReport:
    samples: int
    normal_violations: int
    high_violations: int

    @property
    def violations(self):
        return self.normal_violations + self.high_violations


def _contains(matrix, pairs, states):
    return np.asarray(matrix[pairs, states]).ravel() > 0


def check_frr_sample(sys, gamma, quantizer, samples=10_000, seed=0):
    """Monte-Carlo check of both refinement conditions of a risk-aware abstraction."""
    rng = np.random.default_rng(seed)
    cells = np.arange(quantizer.num_cells)
    enabled = gamma.enabled
    has_action = np.bincount(gamma.pair_state[enabled], minlength=gamma.num_states)[:quantizer.num_cells] > 0
    cells = cells[~gamma.obstacle[:quantizer.num_cells] & has_action]
    if cells.size == 0 or samples <= 0:
        return FrrReport(0, 0, 0)

    q = rng.choice(cells, size=samples)
    x = quantizer.cell_lower(q) + rng.uniform(0.0, 1.0, size=(samples, quantizer.counts.size)) * quantizer.grid.eta
    offsets = gamma.pair_offsets
    pair_ids = np.flatnonzero(enabled)
    first = np.searchsorted(pair_ids, offsets[q])
    count = np.searchsorted(pair_ids, offsets[q + 1]) - first
    pairs = pair_ids[first + rng.integers(0, count)]
    u = quantizer.grid.inputs[gamma.pair_action[pairs]]

    reached = quantizer.quantize(integrate_nominal(sys, x, u, sys.w_normal.sample(rng, samples)))
    normal_bad = ~_contains(gamma.delta_nor, pairs, reached)
    reached = quantizer.quantize(integrate_nominal(sys, x, u, sys.w_high.sample(rng, samples)))
    high_bad = ~(_contains(gamma.delta_nor, pairs, reached) | _contains(gamma.delta_dist, pairs, reached))
    report = FrrReport(samples, int(normal_bad.sum()), int(high_bad.sum()))
    if report.violations:
        logger.warning("Refinement check found %d normal and %d high-disturbance violations in %d samples",
                       report.normal_violations, report.high_violations, samples)
    return report


def save_abstraction(gamma, path):
    payload = {
        "format": ABSTRACTION_FORMAT,
        "version": ABSTRACTION_VERSION,
        "num_states": int(gamma.num_states),
        "num_actions": int(gamma.num_actions),
        "out_of_domain": None if gamma.out_of_domain is None else int(gamma.out_of_domain),
        "pair_state": gamma.pair_state,
        "pair_action": gamma.pair_action,
        "nor_indptr": gamma.delta_nor.indptr,
        "nor_indices": gamma.delta_nor.indices,
        "dist_indptr": gamma.delta_dist.indptr,
        "dist_indices": gamma.delta_dist.indices,
        "colors": gamma.colors,
        "obstacle": gamma.obstacle,
        "grid": None if gamma.grid is None else gamma.grid.to_dict(),
        "meta": dict(gamma.meta),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    joblib.dump(payload, path, compress=3)
    logger.info("Abstraction saved to %s", path)


def load_abstraction(path):
    if not os.path.exists(path):
        raise UnknownReferenceError(f"abstraction file not found: {path}")
    try:
        payload = joblib.load(path)
    except Exception as exc:
        raise UnknownReferenceError(f"cannot read abstraction file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != ABSTRACTION_FORMAT:
        raise UnknownReferenceError(f"{path} is not an abstraction dump")
    if payload.get("version") != ABSTRACTION_VERSION:
        raise UnknownReferenceError(
            f"{path} has abstraction format version {payload.get('version')}, expected {ABSTRACTION_VERSION}")

    num_pairs = payload["pair_state"].size
    shape = (num_pairs, payload["num_states"])

    def matrix(prefix):
        indptr = payload[f"{prefix}_indptr"]
        indices = payload[f"{prefix}_indices"]
        return sp.csr_matrix((np.ones(indices.size, dtype=np.int32), indices, indptr), shape=shape)

    return BimodalAbstraction(
        num_states=payload["num_states"],
        num_actions=payload["num_actions"],
        pair_state=payload["pair_state"],
        pair_action=payload["pair_action"],
        delta_nor=matrix("nor"),
        delta_dist=matrix("dist"),
        colors=payload["colors"],
        obstacle=payload["obstacle"],
        out_of_domain=payload["out_of_domain"],
        grid=None if payload["grid"] is None else GridParams.from_dict(payload["grid"]),
        meta=payload.get("meta", {}),
    )
