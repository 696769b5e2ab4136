"""Command-line entry point: ``gnssfg generate|run|compare``."""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, GnssFgError
from .runner import compare, format_table, load_config, run
from .sim import generate, write_scenario

EXIT_OK = 0
EXIT_RUN_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _parser():
    p = argparse.ArgumentParser(prog="gnssfg", description="GNSS factor-graph estimation harness")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "write scenario files from a scenario config"),
                        ("run", "run one estimator configuration"),
                        ("compare", "run several configurations on one shared scenario")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML configuration file")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--output", default=None, help="output directory (overrides the config)")
    return p


def _with_seed(runs, seed):
    if seed is None:
        return runs
    return [dataclasses.replace(r, seed=seed) for r in runs]


def _output(args, configured):
    out = args.output or configured
    if not out:
        raise ConfigError("no output path: pass --output or set 'output' in the config")
    return Path(out)


def cmd_generate(args):
    runs, configured = load_config(args.config)
    run_cfg = _with_seed(runs, args.seed)[0]
    cfg = run_cfg.resolved_scenario_config()
    if cfg is None:
        raise ConfigError(f"{args.config}: generate needs an inline 'scenario' section")
    out = _output(args, configured)
    write_scenario(generate(cfg), out)
    return {"command": "generate", "output": str(out)}


def cmd_run(args):
    runs, configured = load_config(args.config)
    if len(runs) != 1:
        raise ConfigError(f"{args.config}: 'run' takes a single configuration; use 'compare'")
    out = _output(args, configured)
    config = dataclasses.replace(_with_seed(runs, args.seed)[0], output_path=str(out))
    report = run(config)
    return {"command": "run", "output": str(out),
            "horizontal_rmse": report.horizontal_rmse, "iterations_total": report.iterations_total}


def cmd_compare(args):
    runs, configured = load_config(args.config)
    out = _output(args, configured)
    rows = compare(_with_seed(runs, args.seed))
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows)
    (out / "comparison.csv").write_text(table)
    with open(out / "comparison.json", "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    sys.stdout.write(table)
    return {"command": "compare", "output": str(out), "rows": len(rows)}


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "compare": cmd_compare}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except ConfigError as exc:
        _error("ConfigError", str(exc))
        return EXIT_CONFIG_ERROR
    except GnssFgError as exc:
        _error(type(exc).__name__, f"{args.command} failed: {exc}")
        return EXIT_RUN_ERROR
    except OSError as exc:
        _error("OSError", f"{args.command} failed: {exc}")
        return EXIT_RUN_ERROR
    if args.command != "compare":
        sys.stdout.write(json.dumps(summary) + "\n")
    return EXIT_OK


def _error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
