"""Command line entry point: ``econokin <mode> --config FILE --out DIR``."""

import argparse
import json
import sys

import jsonschema

from . import harness
from .exceptions import EconokinError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4


def _parser():
    ap = argparse.ArgumentParser(
        prog="econokin",
        description="Kinetic and Fokker-Planck wealth models.")
    sub = ap.add_subparsers(dest="command", required=True)
    for mode in harness.MODES:
        sp = sub.add_parser(mode, help=f"run the {mode} experiment")
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="base seed (overrides config)")
        sp.add_argument("--replicas", type=int, help="replica count (overrides config)")
        sp.add_argument("--workers", type=int,
                        help="worker processes (default: $ECONOKIN_WORKERS or all cores)")
    rp = sub.add_parser("report", help="summarise a finished run")
    rp.add_argument("manifest", help="path to manifest.json")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return ap


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message,
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "schema":
            print(json.dumps(harness.SCHEMA, indent=2))
            return EXIT_OK
        if args.command == "report":
            text, _ = harness.report(args.manifest)
            sys.stdout.write(text)
            return EXIT_OK
        cfg = harness.ExperimentConfig.from_file(
            args.config, mode=args.command, seed=args.seed,
            replicas=args.replicas)
        manifest = harness.run(cfg, args.out, workers=args.workers)
        print(json.dumps({"manifest": f"{args.out}/manifest.json",
                          "files": len(manifest["files"])}))
        return EXIT_OK
    except EconokinError as exc:
        code = exc.exit_code if exc.exit_code in (EXIT_CONFIG, EXIT_INVARIANT) \
            else EXIT_INVARIANT
        return _fail(code, type(exc).__name__, str(exc))
    except jsonschema.SchemaError as exc:
        return _fail(EXIT_CONFIG, "SchemaError", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
