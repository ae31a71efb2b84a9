"""Command line front-end.

    superapp-privacy generate --config run.json
    superapp-privacy train --config run.json --attribute gender
    superapp-privacy calibrate | infer | eval | report --config run.json [--threshold 0.8]
    superapp-privacy ablate --config run.json

Exit codes: 0 success, 2 validation error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from . import pipeline
from .calibration import NonFiniteLogitsError
from .model import DivergenceError
from .storage import FormatError, MissingArtifactError

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

COMMANDS = ("generate", "train", "calibrate", "infer", "eval", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="superapp-privacy", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config; omitted keys take their defaults")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the run directory")
    p.add_argument("--attribute", action="append", help="restrict to one attribute (repeatable)")
    p.add_argument("--threshold", type=float, help="override the decision threshold t_d")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    return cfg.with_overrides(seed=args.seed, out_dir=args.out, threshold=args.threshold, attributes=args.attribute)


def run(args) -> str:
    cfg = resolve(args)
    cmd = args.command
    if cmd == "generate":
        summary = pipeline.stage_generate(cfg)
        return json.dumps({k: v["users"] for k, v in summary["splits"].items()}, sort_keys=True)
    if cmd == "train":
        return "\n".join(str(p) for p in pipeline.stage_train(cfg))
    if cmd == "calibrate":
        return "\n".join(str(p) for p in pipeline.stage_calibrate(cfg))
    if cmd == "infer":
        return "\n".join(str(p) for p in pipeline.stage_infer(cfg))
    if cmd == "eval":
        report = pipeline.stage_eval(cfg)
        return "\n".join(
            f"{name}: accuracy {a.overall_accuracy:.3f} coverage {a.phc:.3f}" for name, a in sorted(report.attributes.items())
        )
    if cmd == "ablate":
        return pipeline.stage_ablate(cfg).table_csv()
    return pipeline.stage_report(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        out = run(args)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DivergenceError, NonFiniteLogitsError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (config_mod.ConfigError, FormatError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if out:
        print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
