"""Command line entry point: ``bseelab {run,list,describe,validate}``.

Exit codes: 0 all checks pass, 1 a check failed, 2 configuration or validation error.
"""

import argparse
import json
import sys

from . import harness, scenarios

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load(args):
    raw = harness.read_config(args.config, args.overrides)
    if args.scenario:
        raw["scenario"] = args.scenario
    return harness.resolve_config(raw)


def _add_config_args(p):
    p.add_argument("config", nargs="?", help="INI config file (optional when --scenario is given)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    p.add_argument("--scenario", help="scenario name (overrides the config file)")


def build_parser():
    parser = argparse.ArgumentParser(prog="bseelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario's check suite")
    _add_config_args(p_run)
    p_run.add_argument("--output-root", help=f"output root (default ${harness.OUTPUT_ENV} or ./bseelab_runs)")
    p_run.add_argument("--skip-validate", action="store_true", help="do not run the sampled gates first")
    sub.add_parser("list", help="list registered scenarios")
    p_desc = sub.add_parser("describe", help="describe a scenario")
    p_desc.add_argument("name")
    p_val = sub.add_parser("validate", help="run the sampled assumption and derivative gates")
    _add_config_args(p_val)
    return parser


def _split_overrides(args):
    # a lone "key=value" in the config slot is an override, not a file
    if args.config and "=" in args.config:
        args.overrides = [args.config] + list(args.overrides)
        args.config = None


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name, summary in scenarios.list_scenarios():
            print(f"{name:20s} {summary}")
        return EXIT_OK
    if args.command == "describe":
        try:
            print(scenarios.describe(args.name), end="")
        except scenarios.UnknownScenario as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    _split_overrides(args)
    try:
        cfg = _load(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate" or not args.skip_validate:
        diags = harness.validate(cfg)
        failed = [d for d in diags if not d["passed"]]
        if args.command == "validate":
            print(json.dumps(diags, indent=2))
            return EXIT_CONFIG if failed else EXIT_OK
        if failed:
            print(json.dumps(failed, indent=2), file=sys.stderr)
            return EXIT_CONFIG
    report = harness.run(cfg, root=args.output_root)
    for name, res in report["checks"].items():
        status = "PASS" if res["passed"] else "FAIL"
        extra = f"  ({res['error']})" if "error" in res else ""
        print(f"{status} {name}{extra}")
    print(f"results: {report['output_dir']}/results.json")
    return EXIT_OK if report["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
