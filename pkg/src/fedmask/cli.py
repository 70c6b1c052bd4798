"""Command-line entry point.

Subcommands:

* ``run``: execute the configured number of federated rounds and write
  transcript.log, ledger.csv, and trajectory.csv under --out.
* ``sweep {c,rounds,def}``: write the analytic cost curves as CSV;
  --check additionally asserts their expected shapes.
* ``verify``: run the property suites (cancellation, tamper, replay,
  threshold, metering, probability law) against a live simulation and
  print a pass/fail table.  --inject wires a fault into the simulations
  the suites drive, so a suite's failure under injection demonstrates
  the suite actually bites.

Exit codes: 0 success, 2 invalid configuration, 3 a round aborted or a
check/suite failed.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from fedmask.config import ConfigError, RunConfig, load_config
from fedmask.costmodel import (
    SizeProfile,
    analytic_agg_cost,
    analytic_init_cost,
    check_sweeps,
    init_cost_floor,
    p_key_exchange,
    sweep_model_size,
    sweep_rounds,
    sweep_selection_fraction,
)
from fedmask.flengine import plaintext_fedavg
from fedmask.orchestrator import Simulation
from fedmask.sigma import SigmaError, nwdaf_begin_session

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

INJECTIONS = ("tamper-sig", "reuse-t", "withhold")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmask",
        description="Privacy-preserving federated analytics simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", default="out",
                       help="output directory (default: ./out)")
        p.add_argument("--transport", choices=("bus", "socket"),
                       help="override the message transport")
        p.add_argument("--inject", choices=INJECTIONS,
                       help="wire a fault into the run")

    run = sub.add_parser("run", help="execute federated rounds")
    common(run)

    sweep = sub.add_parser("sweep", help="write analytic cost curves")
    sweep.add_argument("kind", choices=("c", "rounds", "def"))
    common(sweep)
    sweep.add_argument("--check", action="store_true",
                       help="assert the expected curve shapes")

    verify = sub.add_parser("verify", help="run the property suites")
    common(verify)
    return parser


def _load(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    config = config.with_overrides(seed=args.seed, transport=args.transport)
    config.validate()
    return config


def cmd_run(args) -> int:
    config = _load(args)
    sim = Simulation(config)
    if args.inject:
        sim.inject(args.inject)
    records = sim.run()
    sim.write_outputs(args.out)
    failed = [r for r in records if r.aborted]
    for record in records:
        status = f"ABORTED ({record.reason})" if record.aborted else "ok"
        print(f"round {record.round_no}: cohort={len(record.cohort)} "
              f"init={record.init_bytes}B agg={record.agg_bytes}B {status}")
    print(f"{len(records) - len(failed)}/{len(records)} rounds completed; "
          f"outputs in {args.out}")
    if failed:
        print(f"first abort: round {failed[0].round_no}: {failed[0].reason}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    profile = SizeProfile()
    os.makedirs(args.out, exist_ok=True)
    results = {"c": None, "rounds": None, "def": None}
    if args.kind == "c":
        path = os.path.join(args.out, "sweep_c.csv")
        results["c"] = sweep_selection_fraction(path, profile)
    elif args.kind == "rounds":
        path = os.path.join(args.out, "sweep_rounds.csv")
        results["rounds"] = sweep_rounds(
            path, profile, k=config.clients,
            fraction=config.selection_fraction, dim=config.model_dim,
            horizon=config.rounds)
    else:
        path = os.path.join(args.out, "sweep_def.csv")
        baseline = config.baseline if any(
            (config.baseline.per_client_fixed,
             config.baseline.per_client_per_weight,
             config.baseline.per_round_fixed)) else None
        results["def"] = sweep_model_size(
            path, profile, fraction=config.selection_fraction,
            baseline=baseline)
    print(f"wrote {path}")
    if not args.check:
        return EXIT_OK
    checks = check_sweeps(results["c"], results["rounds"], results["def"])
    failed = _print_table(checks)
    return EXIT_RUNTIME if failed else EXIT_OK


def _print_table(checks) -> int:
    width = max(len(name) for name, _, _ in checks)
    failed = 0
    for name, ok, detail in checks:
        mark = "PASS" if ok else "FAIL"
        failed += not ok
        print(f"{mark}  {name:<{width}}  {detail}")
    return failed


def _fresh_sim(config: RunConfig, inject: str | None) -> Simulation:
    sim = Simulation(config)
    if inject:
        sim.inject(inject)
    return sim


def _suite_cancellation(config: RunConfig, inject) -> tuple[bool, str]:
    small = config.with_overrides(rounds=min(config.rounds, 3))
    sim = _fresh_sim(small, inject)
    tolerance = 2.0 ** (-small.frac_bits + 1)
    try:
        for _ in range(small.rounds):
            record = sim.coordinator.run_round()
            if record.aborted:
                return False, f"round {record.round_no}: {record.reason}"
            oracle = plaintext_fedavg(
                [sim.actors[h].last_update for h in record.cohort])
            gap = float(np.max(np.abs(sim.coordinator.last_decoded - oracle)))
            if gap > tolerance:
                return False, f"gap {gap:.3e} above {tolerance:.3e}"
    finally:
        sim.bus.close()
    return True, f"{small.rounds} rounds within {tolerance:.1e} of plaintext"


def _suite_tamper(config: RunConfig, inject) -> tuple[bool, str]:
    control = _fresh_sim(config.with_overrides(rounds=1), inject)
    record = control.run(rounds=1)[0]
    if record.aborted:
        return False, f"honest round aborted: {record.reason}"
    adversarial = _fresh_sim(config.with_overrides(rounds=1), "tamper-sig")
    record = adversarial.run(rounds=1)[0]
    if not record.aborted:
        return False, "tampered handshake was accepted"
    return True, "honest round ok, tampered round aborted"


def _suite_replay(config: RunConfig, inject) -> tuple[bool, str]:
    control = _fresh_sim(config.with_overrides(rounds=2), inject)
    records = control.run(rounds=2)
    if any(r.aborted for r in records):
        bad = next(r for r in records if r.aborted)
        return False, f"round {bad.round_no} aborted: {bad.reason}"
    # full participation so the reused counter hits NFs that accepted it;
    # a partial cohort could be disjoint from round 0 and notice nothing
    adversarial = _fresh_sim(config.with_overrides(
        clients=min(config.clients, max(8, config.min_cohort)),
        selection_fraction=1.0, rounds=2), "reuse-t")
    records = adversarial.run(rounds=2)
    if not records[1].aborted or "REPLAY" not in records[1].reason:
        return False, "reused round counter was accepted"
    return True, "fresh counters accepted, reused counter aborted"


def _suite_threshold(config: RunConfig, inject) -> tuple[bool, str]:
    hosts = [f"gNB-{i:08X}.myran.example.com"
             for i in range(config.min_cohort - 1)]
    try:
        nwdaf_begin_session(hosts, 0, config.min_cohort)
    except SigmaError:
        return True, (f"cohort of {config.min_cohort - 1} refused at "
                      f"threshold {config.min_cohort}")
    return False, "undersized cohort was not refused"


def _suite_metering(config: RunConfig, inject) -> tuple[bool, str]:
    full = config.with_overrides(
        clients=min(config.clients, max(8, config.min_cohort)),
        selection_fraction=1.0, rounds=2)
    full.validate()
    sim = _fresh_sim(full, inject)
    records = sim.run(rounds=2)
    profile = SizeProfile()
    k = full.clients
    want = [
        (records[0].init_bytes, analytic_init_cost(k, k, profile, 0.0)),
        (records[1].init_bytes, init_cost_floor(k, profile)),
        (records[0].agg_bytes, analytic_agg_cost(full.model_dim, k, k,
                                                 profile)),
        (records[1].agg_bytes, analytic_agg_cost(full.model_dim, k, k,
                                                 profile)),
    ]
    for got, expected in want:
        if got != expected:
            return False, f"ledger says {got} bytes, closed form {expected}"
    return True, "ledger equals closed form for both rounds"


def _suite_probability(config: RunConfig, inject) -> tuple[bool, str]:
    rng = np.random.default_rng(config.seed)
    k, k_s, t, trials = 100, 10, 1, 2000
    want = p_key_exchange(k, k_s, t)
    scores = rng.random((trials, k))
    cohorts = np.argpartition(scores, k_s - 1, axis=1)[:, :k_s]
    both = (cohorts < 2).sum(axis=1) == 2
    got = float((~both).mean())
    se = math.sqrt(want * (1 - want) / trials)
    if abs(got - want) > 3 * se:
        return False, f"observed {got:.4f}, law {want:.4f}, 3SE {3 * se:.4f}"
    return True, f"observed {got:.4f} within 3SE of {want:.4f}"


SUITES = (
    ("cancellation", _suite_cancellation),
    ("tamper", _suite_tamper),
    ("replay", _suite_replay),
    ("threshold", _suite_threshold),
    ("analytic-metering", _suite_metering),
    ("probability-law", _suite_probability),
)


def cmd_verify(args) -> int:
    config = _load(args)
    checks = []
    for name, suite in SUITES:
        try:
            ok, detail = suite(config, args.inject)
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append((name, ok, detail))
    failed = _print_table(checks)
    print(f"{len(checks) - failed}/{len(checks)} suites passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_verify(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
