"""Threshold, input-modality and sequence-length ablations over several seeds."""

import argparse
import json
import logging

from superapp_privacy import config
from superapp_privacy.domain import AttributeKind
from superapp_privacy.experiments import ablation_trends


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/ablation.json")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--attribute", action="append")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    base = config.load(args.config)
    kinds = [AttributeKind.parse(a) for a in args.attribute] if args.attribute else None
    for seed in range(args.seeds):
        p = ablation_trends(base.with_overrides(seed=seed), kinds)
        print(json.dumps({"seed": seed, "subset_accuracy": p.subset_accuracy, "coverage": p.coverage,
                          "input": p.input_accuracy, "length": p.length_accuracy}))


if __name__ == "__main__":
    main()
