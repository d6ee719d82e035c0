#!/usr/bin/env python3
"""
peerbed command line: run scenarios in SIM or LIVE mode, compare runs,
generate datasets, stream news counts, render reports and soak-test.

Exit codes: 0 ok, 2 configuration error, 3 runtime abort.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from config_manager import config_manager
from peerbed_errors import ConfigError, PeerbedError, ServiceError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else logging.INFO
    env_level = os.getenv('PEERBED_LOG_LEVEL')
    if env_level:
        level = getattr(logging, env_level.upper(), level)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def _overrides(args) -> dict:
    return {
        "scenario.mode": getattr(args, "mode", None),
        "scenario.seed": getattr(args, "seed", None),
        "scenario.output_dir": getattr(args, "out", None),
        "network.base_port": getattr(args, "base_port", None),
    }


def load_config(args):
    if args.config:
        return config_manager.load(args.config, _overrides(args))
    config = config_manager.defaults()
    config_manager.apply_env(config)
    config_manager.apply_overrides(config, _overrides(args))
    config_manager.validate(config)
    return config


def cmd_run(args) -> int:
    from scenario_runner import run_scenario

    if args.print_defaults:
        print(config_manager.print_defaults())
        return EXIT_OK
    config = load_config(args)
    result = run_scenario(config)
    print(f"Run finished in {result.elapsed_ms} ms; artifacts in {result.output_dir}")
    if result.final_cost is not None:
        print(f"Final global cost: {result.final_cost:.6g}")
    if result.aborted:
        print(f"❌ Run aborted: {result.abort_reason}")
        return EXIT_ABORT
    print("✅ Run completed")
    return EXIT_OK


def cmd_compare(args) -> int:
    from scenario_runner import compare_runs, render_comparison

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comparison = compare_runs(args.sim, args.live, out / "comparison.csv")
    print(render_comparison(comparison), end="")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    from data_generators import PlanDatasetSpec, generate_plans

    spec = PlanDatasetSpec(args.agents, args.plans, args.horizon, args.seed, args.dimension)
    paths = generate_plans(spec, args.out)
    print(f"Wrote {len(paths)} plan files to {args.out}")
    return EXIT_OK


def cmd_stream(args) -> int:
    from data_generators import NewsStreamSpec, stream_news

    spec = NewsStreamSpec(num_sources=args.sources, seed=args.seed, endpoint=args.endpoint)
    if args.serve is not None:
        from news_feed_server import serve
        serve(spec, host=args.host, port=args.serve)
        return EXIT_OK
    for index, counts in enumerate(stream_news(spec, args.ticks)):
        print(f"{index}," + ",".join(str(c) for c in counts))
    return EXIT_OK


def cmd_report(args) -> int:
    from scenario_runner import report_from_dir

    print(report_from_dir(args.run_dir), end="")
    return EXIT_OK


def cmd_soak(args) -> int:
    from conformance import soak

    config = load_config(args)
    report = soak(config, args.minutes)
    print(report.render(), end="")
    return EXIT_OK if report.passed else EXIT_ABORT


def cmd_oracle(args) -> int:
    from conformance import oracle_gap_report, random_instance

    rng = np.random.default_rng(args.seed)
    instances = [random_instance(rng) for _ in range(args.instances)]
    report = oracle_gap_report(instances, iterations=args.iterations, seed=args.seed)
    print(report.render(), end="")
    return EXIT_OK if not report.violations else EXIT_ABORT


def cmd_host(args) -> int:
    from peer_host import host_peer

    host_peer(args.layout, args.peer, args.incarnation)
    return EXIT_OK


def _scenario_flags(parser):
    parser.add_argument("--config", "-c", help="Scenario JSON file (defaults apply when omitted)")
    parser.add_argument("--mode", choices=["SIM", "LIVE"], help="Execution mode")
    parser.add_argument("--seed", type=int, help="Run seed")
    parser.add_argument("--base-port", type=int, help="First LIVE port (0 = ephemeral)")
    parser.add_argument("--out", help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peerbed",
        description="Decentralized multi-agent testbed: I-EPOS and DIAS in simulation or live deployment",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --config scenarios/profile1.json
  %(prog)s run --config scenarios/profile1.json --mode LIVE --base-port 7000 --out runs/live
  %(prog)s compare --sim runs/sim/metrics_sim.csv --live runs/live/metrics_live.csv --out runs/cmp
  %(prog)s gen-dataset --agents 50 --plans 4 --horizon D1 --out plans/
  %(prog)s stream --ticks 10
  %(prog)s soak --config scenarios/soak.json --minutes 10
        """
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario")
    _scenario_flags(run)
    run.add_argument("--print-defaults", action="store_true", help="Print every configuration default and exit")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="Relative differences between a SIM and a LIVE run")
    compare.add_argument("--sim", required=True, help="metrics_sim.csv")
    compare.add_argument("--live", required=True, help="metrics_live.csv")
    compare.add_argument("--out", default=".", help="Directory for comparison.csv")
    compare.set_defaults(func=cmd_compare)

    gen = sub.add_parser("gen-dataset", help="Generate EV-style plan files")
    gen.add_argument("--agents", type=int, default=50)
    gen.add_argument("--plans", type=int, default=4)
    gen.add_argument("--horizon", choices=["D1", "D3", "D7"], default="D1")
    gen.add_argument("--dimension", type=int, help="Reduced plan dimension")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_dataset)

    stream = sub.add_parser("stream", help="Print or serve news counts")
    source = stream.add_mutually_exclusive_group()
    source.add_argument("--synthetic", action="store_true", help="Seeded synthetic stream (default)")
    source.add_argument("--endpoint", help="Poll an HTTP endpoint answering source,count lines")
    stream.add_argument("--ticks", type=int, default=10)
    stream.add_argument("--sources", type=int, default=28)
    stream.add_argument("--seed", type=int, default=0)
    stream.add_argument("--serve", type=int, metavar="PORT", help="Serve GET /counts on this port instead")
    stream.add_argument("--host", default="127.0.0.1")
    stream.set_defaults(func=cmd_stream)

    report = sub.add_parser("report", help="Render the report of a finished run")
    report.add_argument("--run-dir", required=True)
    report.set_defaults(func=cmd_report)

    soak = sub.add_parser("soak", help="Run the dynamics harness for a fixed duration")
    _scenario_flags(soak)
    soak.add_argument("--minutes", type=float, default=10.0)
    soak.set_defaults(func=cmd_soak)

    oracle = sub.add_parser("oracle", help="I-EPOS final cost against exhaustive optima of tiny instances")
    oracle.add_argument("--instances", type=int, default=50)
    oracle.add_argument("--iterations", type=int, default=20)
    oracle.add_argument("--seed", type=int, default=0)
    oracle.set_defaults(func=cmd_oracle)

    # started by LIVE runs, one process per peer
    host = sub.add_parser("host")
    host.add_argument("--layout", required=True, help="hosts/layout.json of the run")
    host.add_argument("--peer", type=int, required=True)
    host.add_argument("--incarnation", type=int, default=0)
    host.set_defaults(func=cmd_host)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ServiceError as e:
        logger.error(f"invalid input: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PeerbedError as e:
        logger.error(f"run aborted: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ABORT
    except KeyboardInterrupt:
        print("\nInterrupted")
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
