"""Command-line entry point.

Subcommands: gen-fleet, train-predictors, optimize, report, cost-table,
selftest. Exit codes: 0 success, 2 config error, 3 a result carried an
infeasibility flag. Everything is a batch run; outputs are JSON and CSV files
under --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .design_space import enumerate_all, reduced_space, StageChoice, DesignPoint
from .device_world import (
    FleetConfig,
    MeasurementLedger,
    Oracle,
    default_proxy,
    generate_fleet,
    latency_value,
    energy_value,
)
from .pipeline import cost_accounting, run_scenario
from .proxy_reuse import BisectionSettings, TCache, bisection_optimize, spearman
from .scenario import ConfigError, Scenario, load_scenario
from .search import SearchParams
from .surrogate import TrainingSettings, train_accuracy_predictor, train_device_specific_predictor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")


def _load(args) -> Scenario:
    if args.config:
        return load_scenario(args.config, seed_override=args.seed)
    if args.seed is None:
        raise ConfigError("either --config or --seed is required")
    return Scenario(seed=args.seed)


def _cmd_gen_fleet(args) -> int:
    scenario = _load(args)
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 0]))
    fleet = generate_fleet(scenario.fleet, rng)
    doc = json.dumps(fleet.to_dict(), indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "fleet.json")
        with open(path, "w") as f:
            f.write(doc + "\n")
        print(path)
    else:
        print(doc)
    return EXIT_OK


def _cmd_train_predictors(args) -> int:
    scenario = _load(args)
    if not args.out:
        raise ConfigError("train-predictors needs --out for the model files")
    run_scenario(scenario, out_dir=args.out, skip_training=False)
    print(os.path.join(args.out, "models"))
    return EXIT_OK


def _cmd_optimize(args) -> int:
    scenario = _load(args)
    if args.approach:
        if args.approach not in ("proxy", "amortized"):
            raise ConfigError(f"--approach: expected proxy or amortized, got {args.approach!r}")
        scenario = dataclasses.replace(scenario, approach=args.approach)
    report = run_scenario(scenario, out_dir=args.out, skip_training=args.skip_training)
    for row in report.rows:
        flag = "ok" if row["feasible"] else "INFEASIBLE"
        print(f"{row['device_id']}: design={row['design']} [{flag}]")
    if args.out:
        print(os.path.join(args.out, "report.json"))
    return EXIT_INFEASIBLE if report.infeasible_count else EXIT_OK


def _cmd_report(args) -> int:
    if not args.out:
        raise ConfigError("report needs --out pointing at a finished run")
    path = os.path.join(args.out, "report.json")
    try:
        with open(path) as f:
            report = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"no report at {path}") from None
    print(f"approach: {report['scenario']['approach']}  seed: {report['scenario']['seed']}")
    print(f"targets: {len(report['rows'])}  infeasible: {report['infeasible_count']}")
    for row in report["rows"]:
        bits = [f"{row['device_id']}", f"design={row['design']}"]
        if "measured_latency" in row:
            bits.append(f"latency={row['measured_latency']:.4f}")
        bits.append("feasible" if row["feasible"] else "INFEASIBLE")
        print("  " + "  ".join(bits))
    per_target = report["stage_counts"]["per_target"]
    if per_target:
        worst = max(per_target.values())
        print(f"max per-target measurements: {worst}")
    return EXIT_INFEASIBLE if report["infeasible_count"] else EXIT_OK


def _cmd_cost_table(args) -> int:
    table = cost_accounting(args.samples, args.seconds, args.devices)
    doc = json.dumps(table, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "cost_table.json")
        with open(path, "w") as f:
            f.write(doc + "\n")
        print(path)
    else:
        print(doc)
    return EXIT_OK


def _selftest_checks():
    space = reduced_space()
    ledger = MeasurementLedger()
    oracle = Oracle(space, ledger)
    proxy = default_proxy()

    x = DesignPoint(stages=(StageChoice(1, 0.5, 3), StageChoice(1, 0.5, 3)), bits=32)
    yield ("proxy latency of the reference design = 0.66 ms",
           abs(latency_value(x, proxy) - 0.66) < 1e-12)
    yield ("proxy energy of the reference design = 28.32 mJ",
           abs(energy_value(x, proxy) - 28.32) < 1e-12)
    yield ("reduced space enumerates 128 designs", len(enumerate_all(space)) == 128)
    yield ("spearman hand value (1,2,3) vs (1,3,2) = 0.5",
           abs(spearman([1, 2, 3], [1, 3, 2]) - 0.5) < 1e-12)

    accs = [oracle.accuracy(d) for d in enumerate_all(space)]
    best = enumerate_all(space)[int(np.argmax(accs))]
    all_max = space.design_at([1] * space.encoding_width)
    yield ("accuracy argmax is the all-max design", best == all_max)

    rng = np.random.default_rng(7)
    quick = TrainingSettings(epochs=200, batch_size=16)
    t_oracle = Oracle(space, MeasurementLedger())
    acc_m = train_accuracy_predictor(space, 96, t_oracle, rng, quick, (32,))
    lat_m = train_device_specific_predictor("latency", proxy, 96, t_oracle, rng, quick, (32,))
    fleet = generate_fleet(FleetConfig(0, 0, 1, 0), np.random.default_rng(3))
    target = fleet.holdout_monotone[0]
    cal = Oracle(space, MeasurementLedger())
    lats = sorted(cal.latency(d, target) for d in enumerate_all(space))
    bound = lats[len(lats) * 2 // 5]
    run_ledger = MeasurementLedger()
    result = bisection_optimize(
        target, bound, BisectionSettings.for_bound(bound), TCache(),
        acc_m, lat_m, Oracle(space, run_ledger), space, SearchParams(seed=5),
    )
    charges = run_ledger.count(target.device_id, "latency")
    yield ("bisection charges the target at most 10 latency measurements", charges <= 10)
    yield ("bisection result is feasible within the band",
           result.feasible and result.latency <= bound * 1.02 + 1e-9)

    two = [
        generate_fleet(FleetConfig(2, 2, 1, 1), np.random.default_rng(11)).to_dict()
        for _ in range(2)
    ]
    yield ("fleet generation is seed-deterministic", two[0] == two[1])


def _cmd_selftest(_args) -> int:
    failures = 0
    for label, ok in _selftest_checks():
        print(f"[{'PASS' if ok else 'FAIL'}] {label}")
        failures += 0 if ok else 1
    print(f"{failures} failures")
    return EXIT_OK if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetopt",
        description="Device-aware DNN design optimization against a simulated fleet",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fleet", help="generate and print/write the device fleet")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_fleet)

    p = sub.add_parser("train-predictors", help="run stage-1 training and save model files")
    _add_common(p)
    p.set_defaults(func=_cmd_train_predictors)

    p = sub.add_parser("optimize", help="optimize designs for every holdout device")
    _add_common(p)
    p.add_argument("--approach", help="proxy or amortized (overrides config)")
    p.add_argument("--skip-training", action="store_true",
                   help="reuse model files already in --out/models")
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("report", help="summarize a finished run directory")
    _add_common(p)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("cost-table", help="baseline measurement-cost arithmetic")
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--seconds", type=float, default=30.0)
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_cost_table)

    p = sub.add_parser("selftest", help="fast reduced-space oracle checks")
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
