"""Scenario configuration: a JSON document with system, grid, spec and run blocks.

Syntax errors carry the decoder's line number; semantic errors are
anchored to the first line on which the offending key appears.
"""

import copy
import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from abstraction import GridParams, Quantizer, lift_colors, lift_obstacles
from errors import ConfigError, UnknownReferenceError
from resilience import Mode
from system import Box, ColorMap, LinearDynamics, SampledSystem, Unicycle, validate_problem

logger = logging.getLogger(__name__)

BLOCKS = {
    "name": None,
    "system": {"dynamics", "A", "B", "tau", "w_normal", "w_high", "d"},
    "grid": {"lo", "hi", "eta", "periodic", "inputs"},
    "spec": {"default_color", "regions", "obstacles", "obstacle_color"},
    "run": {"mode", "seed", "horizon", "x0", "probes"},
}
DEFAULT_TAU = 0.3
DEFAULT_HORIZON = 60


@dataclass(eq=False)
class ScenarioConfig:
    name: str
    system: SampledSystem
    grid: GridParams
    cmap: ColorMap
    obstacle_color: int = None
    mode: Mode = Mode.REFERENCE
    seed: int = 0
    horizon: int = DEFAULT_HORIZON
    x0: np.ndarray = None
    probes: dict = field(default_factory=dict)
    document: dict = field(default_factory=dict)
    source: str = "<config>"

    @property
    def quantizer(self):
        return Quantizer(self.grid)

    def dump(self):
        return json.dumps(self.document, indent=2) + "\n"


class _Parser:
    def __init__(self, text, source):
        self.text = text
        self.source = source
        self.lines = text.splitlines()

    def line_of(self, key):
        pattern = re.compile(r'"%s"\s*:' % re.escape(key))
        for number, line in enumerate(self.lines, start=1):
            if pattern.search(line):
                return number
        return None

    def fail(self, key, message):
        raise ConfigError(message, line=self.line_of(key), source=self.source)

    def require(self, block, key, block_name):
        if key not in block:
            self.fail(block_name, f"{block_name} block is missing {key!r}")
        return block[key]

    def number(self, value, key, integer=False):
        kinds = (int,) if integer else (int, float)
        if isinstance(value, bool) or not isinstance(value, kinds):
            self.fail(key, f"{key} must be {'an integer' if integer else 'a number'}, got {value!r}")
        return value

    def vector(self, value, key, size=None):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            self.fail(key, f"{key} must be a list of numbers, got {value!r}")
        if size is not None and len(value) != size:
            self.fail(key, f"{key} must have {size} entries, got {len(value)}")
        return np.array(value, dtype=float)

    def box(self, value, key, size=None):
        if not isinstance(value, list) or len(value) != 2:
            self.fail(key, f"{key} must be a box [[lo...], [hi...]], got {value!r}")
        lo, hi = self.vector(value[0], key, size), self.vector(value[1], key, size)
        try:
            return Box(lo, hi)
        except ValueError as exc:
            self.fail(key, f"{key}: {exc}")


def _unicycle(parser, block, n):
    if n != 3:
        parser.fail("w_normal", f"unicycle disturbances have 3 components, got {n}")
    dynamics = Unicycle()
    return 3, 2, dynamics.field, dynamics.growth_bound


def _linear(parser, block, n):
    try:
        dynamics = LinearDynamics(parser.require(block, "A", "system"), parser.require(block, "B", "system"))
    except (ValueError, TypeError) as exc:
        parser.fail("A", f"invalid linear dynamics: {exc}")
    if dynamics.A.shape[0] != n:
        parser.fail("A", f"A is {dynamics.A.shape[0]}-dimensional but the disturbances have {n} components")
    return n, dynamics.B.shape[1], dynamics.field, dynamics.growth_bound


def _integrator(parser, block, n):
    dynamics = LinearDynamics(np.zeros((n, n)), np.eye(n))
    return n, n, dynamics.field, dynamics.growth_bound


DYNAMICS = {"unicycle": _unicycle, "linear": _linear, "integrator": _integrator}


def widen(w_normal, d):
    """w_high from a spike magnitude: [-d, d] wherever w_normal is not pinned to zero."""
    pinned = (w_normal.lo == 0.0) & (w_normal.hi == 0.0)
    return Box(np.where(pinned, 0.0, -d), np.where(pinned, 0.0, d))


def _parse_system(parser, block):
    if not isinstance(block, dict):
        parser.fail("system", "system must be an object")
    name = parser.require(block, "dynamics", "system")
    if name not in DYNAMICS:
        parser.fail("dynamics", f"unknown dynamics {name!r}, expected one of {sorted(DYNAMICS)}")
    tau = parser.number(block.get("tau", DEFAULT_TAU), "tau")
    if tau <= 0:
        parser.fail("tau", f"tau must be positive, got {tau}")
    w_normal = parser.box(parser.require(block, "w_normal", "system"), "w_normal")
    if ("w_high" in block) == ("d" in block):
        parser.fail("system", "give exactly one of 'w_high' and 'd'")
    if "d" in block:
        d = parser.number(block["d"], "d")
        if d < 0:
            parser.fail("d", f"d must be nonnegative, got {d}")
        w_high = widen(w_normal, d)
    else:
        w_high = parser.box(block["w_high"], "w_high", w_normal.dim)

    state_dim, input_dim, vector_field, growth_bound = DYNAMICS[name](parser, block, w_normal.dim)
    return SampledSystem(state_dim, input_dim, vector_field, w_normal, w_high, float(tau), growth_bound, name)


def _parse_grid(parser, block, sys):
    if not isinstance(block, dict):
        parser.fail("grid", "grid must be an object")
    n = sys.state_dim
    lo = parser.vector(parser.require(block, "lo", "grid"), "lo", n)
    hi = parser.vector(parser.require(block, "hi", "grid"), "hi", n)
    eta = parser.vector(parser.require(block, "eta", "grid"), "eta", n)
    periodic = block.get("periodic", [False] * n)
    if not isinstance(periodic, list) or len(periodic) != n or not all(isinstance(p, bool) for p in periodic):
        parser.fail("periodic", f"periodic must be a list of {n} booleans")
    inputs = parser.require(block, "inputs", "grid")
    if not isinstance(inputs, list) or not inputs:
        parser.fail("inputs", "inputs must be a non-empty list of input vectors")
    inputs = np.array([parser.vector(u, "inputs", sys.input_dim) for u in inputs])
    try:
        return GridParams(lo, hi, eta, periodic, inputs)
    except ValueError as exc:
        parser.fail("grid", str(exc))


def _parse_spec(parser, block, n):
    if not isinstance(block, dict):
        parser.fail("spec", "spec must be an object")
    default_color = parser.number(block.get("default_color", 0), "default_color", integer=True)
    regions = []
    for region in block.get("regions", []):
        if not isinstance(region, dict) or "color" not in region or "boxes" not in region:
            parser.fail("regions", "each region needs 'color' and 'boxes'")
        color = parser.number(region["color"], "color", integer=True)
        regions.append(([parser.box(b, "boxes", n) for b in region["boxes"]], color))
    obstacles = [parser.box(b, "obstacles", n) for b in block.get("obstacles", [])]
    obstacle_color = block.get("obstacle_color")
    if obstacle_color is not None:
        obstacle_color = parser.number(obstacle_color, "obstacle_color", integer=True)
        if obstacle_color < 0:
            parser.fail("obstacle_color", "obstacle_color must be nonnegative")
    if obstacle_color is not None and obstacles:
        regions.insert(0, (obstacles, obstacle_color))
    return ColorMap(tuple(regions), default_color, tuple(obstacles)), obstacle_color


def _parse_run(parser, block, n):
    if not isinstance(block, dict):
        parser.fail("run", "run must be an object")
    try:
        mode = Mode(block.get("mode", Mode.REFERENCE.value))
    except ValueError:
        parser.fail("mode", f"mode must be 'reference' or 'paper-literal', got {block.get('mode')!r}")
    seed = parser.number(block.get("seed", 0), "seed", integer=True)
    horizon = parser.number(block.get("horizon", DEFAULT_HORIZON), "horizon", integer=True)
    if horizon < 0:
        parser.fail("horizon", f"horizon must be nonnegative, got {horizon}")
    x0 = parser.vector(block["x0"], "x0", n) if "x0" in block else None
    probes = block.get("probes", {})
    if not isinstance(probes, dict):
        parser.fail("probes", "probes must map labels to points")
    probes = {label: parser.vector(point, "probes", n) for label, point in probes.items()}
    return mode, seed, horizon, x0, probes


def _check_keys(parser, doc):
    for key, value in doc.items():
        if key not in BLOCKS:
            parser.fail(key, f"unknown top-level key {key!r}")
        allowed = BLOCKS[key]
        if allowed is not None and isinstance(value, dict):
            for inner in value:
                if inner not in allowed:
                    parser.fail(inner, f"unknown key {inner!r} in {key} block")


def parse_config(text, source="<config>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno, source=source) from None
    parser = _Parser(text, source)
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", line=1, source=source)
    _check_keys(parser, doc)
    for block in ("system", "grid", "spec"):
        parser.require(doc, block, "top-level")

    sys = _parse_system(parser, doc["system"])
    grid = _parse_grid(parser, doc["grid"], sys)
    cmap, obstacle_color = _parse_spec(parser, doc["spec"], sys.state_dim)
    mode, seed, horizon, x0, probes = _parse_run(parser, doc.get("run", {}), sys.state_dim)

    problems = validate_problem(sys, cmap, seed=seed, strict=False)
    if problems:
        parser.fail("system", "; ".join(problems))
    quantizer = Quantizer(grid)
    try:
        lift_colors(quantizer, cmap)
        lift_obstacles(quantizer, cmap)
    except ConfigError as exc:
        parser.fail("spec", exc.message)

    name = doc.get("name", os.path.splitext(os.path.basename(source))[0])
    logger.debug("Parsed scenario %s from %s", name, source)
    return ScenarioConfig(name, sys, grid, cmap, obstacle_color, mode, seed, horizon, x0, probes, doc, source)


def load_config(path):
    if not os.path.exists(path):
        raise UnknownReferenceError(f"configuration file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), source=path)


def apply_overrides(doc, d=None, mode=None, seed=None):
    """Copy of a configuration document with command-line overrides applied."""
    doc = copy.deepcopy(doc)
    if d is not None:
        doc["system"].pop("w_high", None)
        doc["system"]["d"] = float(d)
    run = doc.setdefault("run", {})
    if mode is not None:
        run["mode"] = Mode(mode).value
    if seed is not None:
        run["seed"] = int(seed)
    return doc


def parse_document(doc, source="<config>"):
    return parse_config(json.dumps(doc, indent=2), source=source)
