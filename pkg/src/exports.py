"""CSV and JSON exports of resilience maps, controllers, traces and reports.

All CSV files are written by pandas with a fixed column order, no index
and ``\\n`` line endings so that repeated runs are byte-identical.
"""

import json
import logging
import os

import numpy as np
import pandas as pd

from errors import UnknownReferenceError
from resilience import Mode, ResilientController, resilience_histogram

logger = logging.getLogger(__name__)

CONTROLLER_FORMAT = "rescot-controller"
CONTROLLER_VERSION = 1
FLOAT_FORMAT = "%.10g"


def _prepare(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_csv(frame, path):
    _prepare(path)
    frame.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    logger.info("Wrote %d rows to %s", len(frame), path)
    return path


def resilience_frame(rmap):
    return pd.DataFrame({"state_id": np.arange(len(rmap)), "value": rmap.labels()})


def resilience_cells_frame(rmap, quantizer):
    """Cell centers with their resilience value, one row per grid cell (plot data)."""
    cells = np.arange(quantizer.num_cells)
    centers = quantizer.cell_center(cells)
    frame = {"state_id": cells}
    for d in range(centers.shape[1]):
        frame[f"c{d}"] = centers[:, d]
    frame["value"] = rmap.labels()[:quantizer.num_cells]
    return pd.DataFrame(frame)


def write_resilience_csv(rmap, path):
    return write_csv(resilience_frame(rmap), path)


def write_histogram_csv(rmap, path):
    return write_csv(resilience_histogram(rmap), path)


def controller_document(controller, mode=Mode.REFERENCE):
    return {
        "format": CONTROLLER_FORMAT,
        "version": CONTROLLER_VERSION,
        "rule": controller.rule,
        "mode": Mode(mode).value,
        "num_states": int(controller.selector.size),
        "labels": list(controller.labels),
        "sub_controllers": controller.actions.tolist(),
        "selector": controller.selector.tolist(),
    }


def save_controller(controller, path, mode=Mode.REFERENCE):
    _prepare(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(controller_document(controller, mode), f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    logger.info("Controller with %d sub-controllers saved to %s", controller.num_sub_controllers, path)
    return path


def load_controller(path):
    """Read a controller document; returns the controller and its mode."""
    if not os.path.exists(path):
        raise UnknownReferenceError(f"controller file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UnknownReferenceError(f"cannot read controller file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CONTROLLER_FORMAT:
        raise UnknownReferenceError(f"{path} is not a controller document")
    if doc.get("version") != CONTROLLER_VERSION:
        raise UnknownReferenceError(
            f"{path} has controller format version {doc.get('version')}, expected {CONTROLLER_VERSION}")
    num_states = doc["num_states"]
    actions = np.array(doc["sub_controllers"], dtype=np.int64).reshape(len(doc["labels"]), num_states)
    controller = ResilientController(
        actions=actions,
        labels=list(doc["labels"]),
        selector=np.array(doc["selector"], dtype=np.int64),
        rule=doc["rule"],
    )
    return controller, Mode(doc["mode"])


def write_trace_csv(trace, path):
    return write_csv(trace.to_frame(), path)


def verify_frame(rows):
    """Rows of (probe, state_id, value, k, passed)."""
    return pd.DataFrame(rows, columns=["probe", "state_id", "value", "k", "passed"])


def write_divergence(comparison, out_dir):
    report = write_csv(comparison.report.assign(differs=comparison.report["differs"].astype(int)),
                       os.path.join(out_dir, "divergence.csv"))
    changes = pd.DataFrame(comparison.change_matrix.to_numpy(),
                           index=pd.Index(comparison.change_matrix.index.astype(str), name="reference"),
                           columns=comparison.change_matrix.columns.astype(str))
    matrix = write_csv(changes.reset_index(), os.path.join(out_dir, "value_changes.csv"))
    return report, matrix
