"""Command line front end: abstract, classify, simulate, verify, scenario.

    python src/rescot.py scenario reach_avoid_two_passages --d 0.5 --out results/ra
    python src/rescot.py abstract --config my.json --out results/abstraction.joblib
    python src/rescot.py classify --abstraction results/abstraction.joblib --out results
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from abstraction import Quantizer, check_frr_sample, find_risk_aware_abstraction, load_abstraction, save_abstraction
from errors import ConfigError, DomainError, RescotError, UnknownReferenceError
from exports import (load_controller, resilience_cells_frame, save_controller, verify_frame, write_csv,
                     write_divergence, write_histogram_csv, write_resilience_csv, write_trace_csv)
from resilience import Mode, classify, compare_modes, resilience_histogram, spike_free_controller
from runtime import SpikeSchedule, num_spikes, refine, simulate_closed_loop, verify_k_resilient
from scenario_config import apply_overrides, load_config, parse_document
from scenarios import SCENARIOS, scenario_document

logger = logging.getLogger("rescot")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def resolve_config(args):
    """Built-in scenario name or path to a JSON document, with flag overrides."""
    small_left = getattr(args, "small_left", False)
    if args.config in SCENARIOS:
        doc = scenario_document(args.config, small_left=small_left)
        source = args.config
    else:
        config = load_config(args.config)
        doc, source = config.document, args.config
        if args.d is None and args.mode is None and args.seed is None:
            return config
    return parse_document(apply_overrides(doc, d=args.d, mode=args.mode, seed=args.seed), source=source)


def _require_config(args):
    if not args.config:
        raise ConfigError("this command needs --config (a JSON file or a built-in scenario name)")
    return resolve_config(args)


def _parse_point(text, label):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"{label} must be a comma-separated list of numbers, got {text!r}") from None


def _schedule(args, config):
    try:
        spikes = [SpikeSchedule.parse_spike(s) for s in args.spike or []]
        nominal_w = _parse_point(args.nominal_w, "--nominal-w") if args.nominal_w else None
        schedule = SpikeSchedule(tuple(spikes), args.nominal, nominal_w, config.seed)
        schedule.validate(config.system)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return schedule


def _load_pair(args):
    gamma = load_abstraction(args.abstraction)
    controller, mode = load_controller(args.controller)
    if controller.selector.size != gamma.num_states:
        raise UnknownReferenceError(
            f"controller covers {controller.selector.size} states but the abstraction has {gamma.num_states}")
    return gamma, controller, mode


def _summary(gamma):
    counts = gamma.edge_counts()
    print(f"States: {gamma.num_states:,} (including the out-of-domain sink)")
    print(f"Actions: {gamma.num_actions}")
    print(f"Normal edges: {counts['normal']:,}")
    print(f"Disturbance edges: {counts['dist']:,}")


def build_abstraction(config, jobs):
    gamma = find_risk_aware_abstraction(config.system, config.grid, config.cmap, jobs=jobs,
                                        obstacle_color=config.obstacle_color)
    gamma.meta["scenario"] = config.name
    return gamma


def cmd_abstract(args):
    config = _require_config(args)
    gamma = build_abstraction(config, args.jobs)
    out = args.out or os.path.join("results", "abstraction.joblib")
    save_abstraction(gamma, out)
    print(f"\nAbstraction of {config.name} written to {out}")
    _summary(gamma)
    if args.frr_samples:
        report = check_frr_sample(config.system, gamma, Quantizer(config.grid), args.frr_samples, config.seed)
        print(f"Refinement check: {report.violations} violations in {report.samples:,} samples")
    return 0


def write_classification(gamma, rmap, controller, mode, out_dir):
    write_resilience_csv(rmap, os.path.join(out_dir, "resilience.csv"))
    write_histogram_csv(rmap, os.path.join(out_dir, "histogram.csv"))
    save_controller(controller, os.path.join(out_dir, "controller.json"), mode)
    if gamma.grid is not None:
        write_csv(resilience_cells_frame(rmap, Quantizer(gamma.grid)), os.path.join(out_dir, "resilience_cells.csv"))


def _print_histogram(rmap):
    print("\nResilience histogram:")
    for row in resilience_histogram(rmap).itertuples(index=False):
        print(f"  {row.value:>8}: {row.count:,} states")


def cmd_classify(args):
    if not args.abstraction:
        raise ConfigError("classify needs --abstraction")
    gamma = load_abstraction(args.abstraction)
    mode = Mode(args.mode or Mode.REFERENCE.value)
    rmap, controller = classify(gamma, mode)
    out_dir = args.out or "results"
    write_classification(gamma, rmap, controller, mode, out_dir)
    _print_histogram(rmap)
    print(f"Distinct finite values: {len(rmap.finite_values())}")
    if args.compare_modes:
        comparison = compare_modes(gamma)
        write_divergence(comparison, out_dir)
        print(f"States where the modes disagree: {len(comparison.divergent_states):,}")
    return 0


def run_simulation(config, gamma, controller, args, x0=None):
    x0 = config.x0 if x0 is None else x0
    if x0 is None:
        raise ConfigError("no initial state: give --x0 or run.x0 in the configuration")
    horizon = config.horizon if args.horizon is None else args.horizon
    if gamma.grid is None:
        raise UnknownReferenceError("abstraction carries no grid; cannot refine its controller")
    refined = refine(Quantizer(gamma.grid), controller, gamma)
    return simulate_closed_loop(config.system, refined, x0, _schedule(args, config), horizon)


def simulate_into(config, gamma, controller, args, path):
    """Simulate, write the trace CSV and return its summary, or None off the controller domain."""
    try:
        trace = run_simulation(config, gamma, controller, args)
    except DomainError as exc:
        logger.warning("Skipping simulation to %s: %s", path, exc)
        return None
    write_trace_csv(trace, path)
    print(f"Simulated {len(trace)} steps to {os.path.basename(path)}, verdict: {trace.verdict}")
    return {"steps": len(trace), "spikes": num_spikes(trace), "verdict": trace.verdict,
            "cells": [int(q) for q in trace.cells]}


def cmd_simulate(args):
    config = _require_config(args)
    gamma, controller, _ = _load_pair(args)
    x0 = _parse_point(args.x0, "--x0") if args.x0 else None
    trace = run_simulation(config, gamma, controller, args, x0)
    out = args.out or os.path.join("results", "trace.csv")
    write_trace_csv(trace, out)
    print(f"\nSimulated {len(trace)} steps, {num_spikes(trace)} spikes, verdict: {trace.verdict}")
    print(f"Trace written to {out}")
    return 0


def _check_cell(gamma, q):
    if not 0 <= q < gamma.num_states:
        raise UnknownReferenceError(f"unknown cell id {q} (abstraction has {gamma.num_states} states)")
    return q


def verify_probes(gamma, controller, probes, k=None):
    """One row per probe and budget; without k, checks r*(q) and r*(q) + 1."""
    rows = []
    for label, q in probes:
        value = controller.value_of(q)
        budgets = [k] if k is not None else [value] + ([value.code + 1] if value.is_finite else [])
        for budget in budgets:
            passed = verify_k_resilient(gamma, controller, q, budget)
            rows.append((label, q, str(value), str(budget), int(passed)))
    return verify_frame(rows)


def _probe_cells(args, gamma, config=None):
    probes = [(f"cell-{c}", _check_cell(gamma, c)) for c in args.cell or []]
    if config is not None:
        quantizer = Quantizer(gamma.grid)
        for label, point in config.probes.items():
            q = quantizer.quantize(point)
            if q == quantizer.out_of_domain:
                raise DomainError(f"probe {label} at {point.tolist()} lies outside the grid")
            probes.append((label, q))
    return probes


def cmd_verify(args):
    gamma, controller, _ = _load_pair(args)
    config = _require_config(args) if args.config else None
    probes = _probe_cells(args, gamma, config)
    if not probes:
        raise ConfigError("verify needs at least one --cell or a configuration with probes")
    report = verify_probes(gamma, controller, probes, args.k)
    out = args.out or os.path.join("results", "verify.csv")
    write_csv(report, out)
    print(f"\nVerified {len(report)} probe budgets, {int(report['passed'].sum())} passed")
    print(report.to_string(index=False))
    return 0


def cmd_scenario(args):
    if not args.config:
        raise ConfigError(f"name a scenario ({', '.join(sorted(SCENARIOS))}) or pass --config")
    if args.dump_config:
        doc = scenario_document(args.config, small_left=args.small_left) if args.config in SCENARIOS \
            else load_config(args.config).document
        print(json.dumps(apply_overrides(doc, d=args.d, mode=args.mode, seed=args.seed), indent=2))
        return 0
    config = resolve_config(args)
    out_dir = args.out or os.path.join("results", config.name)
    print(f"\nScenario {config.name}: d={config.system.w_high.hi.max():g}, mode {config.mode.value}")

    gamma = build_abstraction(config, args.jobs)
    save_abstraction(gamma, os.path.join(out_dir, "abstraction.joblib"))
    _summary(gamma)
    frr = check_frr_sample(config.system, gamma, Quantizer(config.grid), args.frr_samples, config.seed)

    rmap, controller = classify(gamma, config.mode)
    write_classification(gamma, rmap, controller, config.mode, out_dir)
    _print_histogram(rmap)

    summary = {
        "scenario": config.name,
        "mode": config.mode.value,
        "w_high": config.system.w_high.to_list(),
        "num_states": int(gamma.num_states),
        "num_actions": int(gamma.num_actions),
        "edges": gamma.edge_counts(),
        "frr": {"samples": frr.samples, "violations": frr.violations},
        "histogram": {row.value: int(row.count) for row in resilience_histogram(rmap).itertuples(index=False)},
        "distinct_finite_values": len(rmap.finite_values()),
    }

    probes = _probe_cells(args, gamma, config)
    if probes:
        report = verify_probes(gamma, controller, probes)
        write_csv(report, os.path.join(out_dir, "verify.csv"))
        summary["probes"] = {label: {"cell": int(q), "value": str(controller.value_of(q))} for label, q in probes}

    baseline = spike_free_controller(gamma)
    save_controller(baseline, os.path.join(out_dir, "baseline.json"), config.mode)
    summary["baseline"] = {"winning_states": int(np.count_nonzero(baseline.selector >= 0))}

    if config.x0 is not None:
        trace = simulate_into(config, gamma, controller, args, os.path.join(out_dir, "trace.csv"))
        if trace is not None:
            summary["trace"] = trace
        trace = simulate_into(config, gamma, baseline, args, os.path.join(out_dir, "trace_baseline.csv"))
        if trace is not None:
            summary["baseline"]["trace"] = trace

    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"Results written to {out_dir}")
    return 0


def _common(parser):
    parser.add_argument("--config", help="JSON scenario file or built-in scenario name")
    parser.add_argument("--mode", choices=[m.value for m in Mode], help="resilience computation mode")
    parser.add_argument("--d", type=float, help="spike magnitude, overrides the configured w_high")
    parser.add_argument("--seed", type=int, help="seed for sampling and random disturbances")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for abstraction construction")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")


def _simulation_flags(parser):
    parser.add_argument("--spike", action="append", metavar="STEP:W", help="spike at STEP with disturbance W")
    parser.add_argument("--nominal", choices=["zero", "random", "constant"], default="zero",
                        help="disturbance policy between spikes")
    parser.add_argument("--nominal-w", help="constant nominal disturbance, comma separated")
    parser.add_argument("--horizon", type=int, help="number of sampling steps")


def build_parser():
    parser = argparse.ArgumentParser(prog="rescot", description="Optimally resilient controllers for "
                                     "sampled-time systems under disturbance spikes")
    commands = parser.add_subparsers(dest="command", required=True)

    abstract = commands.add_parser("abstract", help="build and save the risk-aware abstraction")
    _common(abstract)
    abstract.add_argument("--frr-samples", type=int, default=0, help="Monte-Carlo refinement check samples")
    abstract.set_defaults(func=cmd_abstract)

    classify_cmd = commands.add_parser("classify", help="resilience map and stitched controller")
    _common(classify_cmd)
    classify_cmd.add_argument("--abstraction", help="abstraction dump written by 'abstract'")
    classify_cmd.add_argument("--compare-modes", action="store_true", help="also write the mode divergence report")
    classify_cmd.set_defaults(func=cmd_classify)

    simulate = commands.add_parser("simulate", help="closed-loop simulation of the refined controller")
    _common(simulate)
    simulate.add_argument("--abstraction", required=True)
    simulate.add_argument("--controller", required=True)
    simulate.add_argument("--x0", help="initial state, comma separated")
    _simulation_flags(simulate)
    simulate.set_defaults(func=cmd_simulate)

    verify = commands.add_parser("verify", help="check k-resilience of the controller at probe cells")
    _common(verify)
    verify.add_argument("--abstraction", required=True)
    verify.add_argument("--controller", required=True)
    verify.add_argument("--cell", type=int, action="append", help="probe cell id (repeatable)")
    verify.add_argument("--k", help="budget: integer, omega or omega+1 (default: each probe's value)")
    verify.set_defaults(func=cmd_verify)

    scenario = commands.add_parser("scenario", help="abstract, classify, verify and simulate in one go")
    scenario.add_argument("name", nargs="?", help="built-in scenario name (same as --config)")
    _common(scenario)
    _simulation_flags(scenario)
    scenario.add_argument("--cell", type=int, action="append", help="extra probe cell id (repeatable)")
    scenario.add_argument("--small-left", action="store_true", help="shrink the left target of the two-target scenarios")
    scenario.add_argument("--frr-samples", type=int, default=10_000, help="Monte-Carlo refinement check samples")
    scenario.add_argument("--dump-config", action="store_true", help="print the scenario document and exit")
    scenario.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "name", None) and not args.config:
        args.config = args.name
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    try:
        return args.func(args)
    except RescotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
