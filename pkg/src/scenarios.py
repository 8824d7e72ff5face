"""Built-in desk-scale unicycle scenarios.

All three share a 6.4 x 6.0 workspace with 0.2 position cells and sixteen
heading cells centered on multiples of 22.5 degrees (a 32 x 30 x 16 grid).
The robot drives forward or backward at one speed, three position cells
per step, or turns on the spot by one or four heading cells.  A step
along an axis heading advances two to four cells and drifts at most one
cell sideways.
Region and wall boxes are aligned to the grid.  Passage widths and target
boxes are sized for this grid, so only the qualitative picture (wide
passage beats narrow) carries over to finer ones.
"""

import math

from errors import UnknownReferenceError

WORKSPACE = (6.4, 6.0)
ETA = 0.2
TAU = 0.3
SPEED = 2.0
HEADING_CELLS = 16
W_NOMINAL = 0.05

# wall column and its two gaps, in cell indices
WALL_X = 13
WIDE_PASSAGE = (3, 16)
NARROW_PASSAGE = (20, 23)


def _heading_eta():
    return 2.0 * math.pi / HEADING_CELLS


def _grid():
    eta_theta = _heading_eta()
    turn = eta_theta / TAU
    return {
        "lo": [0.0, 0.0, -eta_theta / 2.0],
        "hi": [WORKSPACE[0], WORKSPACE[1], 2.0 * math.pi - eta_theta / 2.0],
        "eta": [ETA, ETA, eta_theta],
        "periodic": [False, False, True],
        "inputs": [[SPEED, 0.0], [-SPEED, 0.0],
                   [0.0, turn], [0.0, -turn], [0.0, 4.0 * turn], [0.0, -4.0 * turn]],
    }


def _system(d):
    return {
        "dynamics": "unicycle",
        "tau": TAU,
        "w_normal": [[-W_NOMINAL, -W_NOMINAL, 0.0], [W_NOMINAL, W_NOMINAL, 0.0]],
        "d": float(d),
    }


def _cells(i0, i1, j0, j1):
    """Position box over x cells i0..i1-1 and y cells j0..j1-1, all headings."""
    eta_theta = _heading_eta()
    return [[i0 * ETA, j0 * ETA, -eta_theta / 2.0],
            [i1 * ETA, j1 * ETA, 2.0 * math.pi - eta_theta / 2.0]]


def reach_avoid_two_passages(d=0.5):
    """Reach a target beyond a wall with a wide and a narrow passage, infinitely often."""
    top = round(WORKSPACE[1] / ETA)
    rows = [(0, WIDE_PASSAGE[0]), (WIDE_PASSAGE[1], NARROW_PASSAGE[0]), (NARROW_PASSAGE[1], top)]
    walls = [_cells(WALL_X, WALL_X + 1, j0, j1) for j0, j1 in rows]
    return {
        "name": "reach_avoid_two_passages",
        "system": _system(d),
        "grid": _grid(),
        "spec": {
            "default_color": 1,
            "regions": [{"color": 2, "boxes": [_cells(18, 29, 9, 20)]}],
            "obstacles": walls,
            "obstacle_color": None,
        },
        "run": {
            "mode": "reference",
            "seed": 0,
            "horizon": 60,
            "x0": [1.3, 3.7, 0.0],
            # wide and narrow sit two cells in front of the wall, centered on their gap
            "probes": {"start": [1.3, 3.7, 0.0], "wide": [2.3, 1.9, 0.0], "narrow": [2.3, 4.3, 0.0]},
        },
    }


def _two_targets(d, small_left):
    left = _cells(5, 8, 13, 16) if small_left else _cells(2, 11, 9, 20)
    return {
        "system": _system(d),
        "grid": _grid(),
        "spec": {
            "default_color": 1,
            "regions": [
                {"color": 0, "boxes": [left]},
                {"color": 2, "boxes": [_cells(18, 29, 9, 20)]},
            ],
            "obstacles": [],
            "obstacle_color": None,
        },
        "run": {
            "mode": "reference",
            "seed": 0,
            "horizon": 60,
            "x0": [3.5, 0.9, 1.5707963267948966],
            "probes": {"left": [1.3, 2.9, 0.0], "middle": [3.1, 2.9, 0.0], "right": [4.7, 2.9, 0.0]},
        },
    }


def two_targets_buchi_cobuchi(d=0.5, small_left=False):
    """Visit the right target infinitely often or settle in the left one for good."""
    return {"name": "two_targets_buchi_cobuchi", **_two_targets(d, small_left)}


def two_targets_obstacles(d=0.5, small_left=False):
    """Two targets with obstacle blocks between them, colored 3."""
    doc = _two_targets(d, small_left)
    doc["spec"]["obstacles"] = [_cells(13, 15, 1, 8), _cells(13, 15, 22, 29)]
    doc["spec"]["obstacle_color"] = 3
    return {"name": "two_targets_obstacles", **doc}


SCENARIOS = {
    "reach_avoid_two_passages": reach_avoid_two_passages,
    "two_targets_buchi_cobuchi": two_targets_buchi_cobuchi,
    "two_targets_obstacles": two_targets_obstacles,
}


def scenario_document(name, **options):
    if name not in SCENARIOS:
        raise UnknownReferenceError(f"unknown scenario {name!r}, expected one of {sorted(SCENARIOS)}")
    if name == "reach_avoid_two_passages":
        options.pop("small_left", None)
    return SCENARIOS[name](**options)
