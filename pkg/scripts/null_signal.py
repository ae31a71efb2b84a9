"""Train every attribute on data with no planted signal, over several seeds."""

import argparse
import logging

from superapp_privacy import config
from superapp_privacy.experiments import null_signal


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/null_signal.json")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    base = config.load(args.config)
    for seed in range(args.seeds):
        for r in null_signal(base.with_overrides(seed=seed)):
            chi = "undefined" if r.chi_square is None else f"p {r.chi_square[1]:.3f}"
            print(f"seed {seed} {r.attribute:9s} acc {r.accuracy:.3f} max prior {r.baseline:.3f} {chi}")


if __name__ == "__main__":
    main()
