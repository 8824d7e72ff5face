"""Refined feedback controllers, closed-loop simulation and k-resilience checks."""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from errors import DomainError
from games import NO_ACTION
from resilience import OMEGA, OMEGA_PLUS_ONE, ResilienceValue
from system import integrate_nominal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Decision:
    action: int
    input: np.ndarray
    cell: int
    sub_controller: int
    spike: bool


class RefinedController:
    """Feedback law x -> input of the stitched controller at quantize(x).

    Carries switching state (sub-controller in force, last cell and
    action); use ``clone()`` for every independent run.
    """

    def __init__(self, quantizer, controller, gamma):
        self.quantizer = quantizer
        self.controller = controller
        self.gamma = gamma
        self.reset()

    def reset(self):
        self.sub_controller = NO_ACTION
        self.last = None

    def clone(self):
        return RefinedController(self.quantizer, self.controller, self.gamma)

    def cell_of(self, x):
        q = self.quantizer.quantize(x)
        if q >= self.gamma.num_states or q == self.gamma.out_of_domain:
            return None
        return q

    def in_domain(self, x):
        q = self.cell_of(x)
        return q is not None and self.controller.select(q) >= 0

    def act(self, x):
        q = self.cell_of(x)
        if q is None:
            raise DomainError(f"state {np.asarray(x).tolist()} is outside the abstraction domain")
        spike = False
        if self.last is not None:
            spike = q not in self.gamma.successors(*self.last, kind="nor")
        if spike or self.sub_controller < 0:
            self.sub_controller = self.controller.select(q)
        if self.sub_controller < 0:
            raise DomainError(f"cell {q} has resilience 0; no controller is defined there")
        action = self.controller.action(self.sub_controller, q)
        if action < 0:
            logger.warning("Sub-controller %s undefined at cell %d, re-selecting",
                           self.controller.labels[self.sub_controller], q)
            self.sub_controller = self.controller.select(q)
            action = self.controller.action(self.sub_controller, q)
            if action < 0:
                raise DomainError(f"no action available at cell {q}")
        self.last = (q, action)
        return Decision(action, self.quantizer.grid.inputs[action], q, self.sub_controller, spike)

    def __call__(self, x):
        return self.act(x).input


def refine(quantizer, controller, gamma):
    return RefinedController(quantizer, controller, gamma)


@dataclass(frozen=True, eq=False)
class SpikeSchedule:
    spikes: tuple = ()
    nominal: str = "zero"
    constant_w: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        spikes = tuple((int(step), np.asarray(w, dtype=float)) for step, w in self.spikes)
        steps = [step for step, _ in spikes]
        if any(b <= a for a, b in zip(steps, steps[1:])) or any(s < 0 for s in steps):
            raise ValueError(f"spike steps must be nonnegative and strictly increasing, got {steps}")
        if self.nominal not in ("zero", "random", "constant"):
            raise ValueError(f"unknown nominal disturbance policy {self.nominal!r}")
        if self.nominal == "constant" and self.constant_w is None:
            raise ValueError("constant nominal policy needs constant_w")
        object.__setattr__(self, "spikes", spikes)

    @staticmethod
    def parse_spike(text):
        """Parse ``STEP:w0,w1,...``."""
        try:
            step, values = text.split(":", 1)
            return int(step), np.array([float(v) for v in values.split(",")])
        except ValueError:
            raise ValueError(f"spike must look like STEP:w0,w1,..., got {text!r}") from None

    def validate(self, sys):
        for step, w in self.spikes:
            if w.shape != (sys.state_dim,):
                raise ValueError(f"spike at step {step} has dimension {w.size}, expected {sys.state_dim}")
            if not sys.w_high.contains(w) or sys.w_normal.contains(w):
                raise ValueError(f"spike at step {step} must lie in w_high but outside w_normal, got {w.tolist()}")
        if self.nominal == "constant" and not sys.w_normal.contains(self.constant_w):
            raise ValueError("constant nominal disturbance must lie in w_normal")

    def disturbance(self, step, sys, rng):
        for spike_step, w in self.spikes:
            if spike_step == step:
                return w
        if self.nominal == "random":
            return sys.w_normal.sample(rng, 1)[0]
        if self.nominal == "constant":
            return np.asarray(self.constant_w, dtype=float)
        return np.zeros(sys.state_dim)


@dataclass(eq=False)
class Trace:
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    cells: np.ndarray
    actions: np.ndarray
    sub_controllers: np.ndarray
    spikes: np.ndarray
    detected: np.ndarray
    violation_step: int = None
    verdict: str = "unknown"

    def __len__(self):
        return self.actions.size

    def to_frame(self):
        frame = {"step": np.arange(len(self))}
        for name, values in (("x", self.states[:len(self)]), ("u", self.inputs), ("w", self.disturbances)):
            for d in range(values.shape[1]):
                frame[f"{name}{d}"] = values[:, d]
        frame["cell_id"] = self.cells[:len(self)]
        frame["spike"] = self.spikes.astype(int)
        frame["verdict"] = [self.verdict] * len(self)
        return pd.DataFrame(frame)


@dataclass(eq=False)
class AbstractTrace:
    cells: list = field(default_factory=list)
    actions: list = field(default_factory=list)


def analyze_trace(trace, gamma, window=None):
    """Verdict of a finished trace: violation, or parity judged on its tail."""
    if trace.violation_step is not None:
        return "violation"
    if len(trace) == 0:
        return "empty"
    window = window or max(1, (len(trace) + 1) // 2)
    tail = trace.cells[-window:]
    return "satisfied" if int(gamma.colors[tail].max()) % 2 == 0 else "unsatisfied"


def simulate_closed_loop(sys, controller, x0, schedule, horizon):
    """
    Run the refined controller on the sampled system.

    Args:
        sys (SampledSystem): Plant to integrate
        controller (RefinedController): Controller; a fresh copy is used
        x0 (array-like): Initial state
        schedule (SpikeSchedule): Nominal disturbance and spike steps
        horizon (int): Number of steps

    Returns:
        Trace: States, inputs, cells and spikes, with its verdict
    """
    controller = controller.clone()
    if not controller.in_domain(x0):
        raise DomainError(f"initial state {np.asarray(x0).tolist()} is outside the controller domain")
    schedule.validate(sys)
    rng = np.random.default_rng(schedule.seed)
    n, m = sys.state_dim, sys.input_dim
    x = np.asarray(x0, dtype=float)
    states, inputs, disturbances = [x], [], []
    cells, actions, subs, spikes, detected = [], [], [], [], []
    violation = None
    for step in range(horizon):
        try:
            decision = controller.act(x)
        except DomainError as exc:
            logger.info("Violation at step %d: %s", step, exc)
            violation = step
            break
        w = schedule.disturbance(step, sys, rng)
        x = integrate_nominal(sys, x, decision.input, w)
        states.append(x)
        inputs.append(decision.input)
        disturbances.append(w)
        cells.append(decision.cell)
        actions.append(decision.action)
        subs.append(decision.sub_controller)
        spikes.append(not sys.w_normal.contains(w))
        detected.append(decision.spike)
    else:
        if horizon and not controller.in_domain(x):
            violation = horizon

    final = controller.quantizer.quantize(x)
    trace = Trace(
        states=np.array(states).reshape(-1, n),
        inputs=np.array(inputs).reshape(-1, m),
        disturbances=np.array(disturbances).reshape(-1, n),
        cells=np.array(cells + [final], dtype=np.int64),
        actions=np.array(actions, dtype=np.int64),
        sub_controllers=np.array(subs, dtype=np.int64),
        spikes=np.array(spikes, dtype=bool),
        detected=np.array(detected, dtype=bool),
        violation_step=violation,
    )
    trace.verdict = analyze_trace(trace, controller.gamma)
    return trace


def simulate_abstract(gamma, controller, q0, steps, spike_steps=(), seed=0):
    """Run the stitched controller on the abstraction; spikes use disturbance edges."""
    rng = np.random.default_rng(seed)
    trace = AbstractTrace([int(q0)], [])
    sub = controller.select(q0)
    q = int(q0)
    for step in range(steps):
        action = controller.action(sub, q)
        if action < 0:
            break
        dist = gamma.successors(q, action, kind="dist")
        if step in spike_steps and dist.size:
            q = int(rng.choice(dist))
            sub = controller.select(q)
        else:
            q = int(rng.choice(gamma.successors(q, action, kind="nor")))
        trace.actions.append(action)
        trace.cells.append(q)
    return trace


def num_spikes(trace, gamma=None):
    """Spike steps of a concrete trace, or disturbance-edge uses of an abstract one."""
    if isinstance(trace, AbstractTrace):
        if gamma is None:
            raise ValueError("counting spikes of an abstract trace needs the abstraction")
        return sum(
            int(q_next in gamma.successors(q, u, kind="dist"))
            for q, u, q_next in zip(trace.cells, trace.actions, trace.cells[1:])
        )
    return int(np.count_nonzero(trace.spikes))


def _budget(k, num_states):
    if isinstance(k, ResilienceValue):
        k = k.code
    if isinstance(k, str):
        k = ResilienceValue.parse(k).code
    if k == OMEGA:
        return num_states + 2
    if k == OMEGA_PLUS_ONE:
        return None
    return int(k)


def verify_k_resilient(gamma, controller, q0, k):
    """Model-check the stitched controller from q0 against fewer than k spikes.

    Explores the product of states, sub-controllers and spent spikes
    under the fixed strategy; every reachable cycle must have an even
    maximal color and no reachable node may lack an action.

    Args:
        gamma (BimodalAbstraction): Abstraction the controller was built on
        controller (ResilientController): Stitched controller
        q0 (int): Start state
        k (int | ResilienceValue | str): Spike bound, "omega" and "omega+1" included

    Returns:
        bool: Whether every run with fewer than k spikes satisfies the objective
    """
    budget = _budget(k, gamma.num_states)
    if budget == 0:
        return True
    unlimited = budget is None

    start = (int(q0), controller.select(q0), 0)
    index = {start: 0}
    queue = deque([start])
    rows, cols = [], []

    def visit(src, node):
        if node not in index:
            index[node] = len(index)
            queue.append(node)
        rows.append(src)
        cols.append(index[node])

    while queue:
        node = queue.popleft()
        q, sub, used = node
        action = controller.action(sub, q)
        if action < 0:
            return False
        src = index[node]
        for q_next in gamma.successors(q, action, kind="nor"):
            visit(src, (int(q_next), sub, used))
        if unlimited or used + 1 < budget:
            spent = 0 if unlimited else used + 1
            for q_next in gamma.successors(q, action, kind="dist"):
                visit(src, (int(q_next), controller.select(q_next), spent))

    size = len(index)
    colors = np.empty(size, dtype=np.int64)
    for (q, _, _), i in index.items():
        colors[i] = gamma.colors[q]
    graph = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(size, size))
    loops = graph.diagonal() > 0
    for p in sorted(set(colors[colors % 2 == 1].tolist())):
        keep = np.flatnonzero(colors <= p)
        sub_graph = graph[keep][:, keep]
        _, labels = connected_components(sub_graph, directed=True, connection="strong")
        sizes = np.bincount(labels)
        cyclic = (sizes[labels] > 1) | loops[keep]
        if np.any(cyclic & (colors[keep] == p)):
            return False
    return True
