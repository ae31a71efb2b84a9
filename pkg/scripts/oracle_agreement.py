"""Calibrated transformer vs Bayes oracle, per confidence bin, on the default population."""

import argparse
import json
import logging
import time

from superapp_privacy import config
from superapp_privacy.domain import AttributeKind
from superapp_privacy.experiments import oracle_agreement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="JSON run config (defaults otherwise)")
    ap.add_argument("--test-users", type=int, default=10_000)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--attribute", action="append")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = config.load(args.config).to_dict() if args.config else {}
    base.setdefault("data", {})["test_users"] = args.test_users
    base.setdefault("training", {})["patience"] = args.patience
    base["seed"] = args.seed
    cfg = config.from_dict(base)
    kinds = [AttributeKind.parse(a) for a in args.attribute] if args.attribute else None
    t0 = time.time()
    res = oracle_agreement(cfg, kinds)
    for name, r in res.items():
        rep = r.report
        print(f"{name}: acc {rep.overall_accuracy:.3f} (bayes {r.bayes_accuracy:.3f}) t={r.temperature} "
              f"coverage@{rep.threshold} {rep.phc:.3f} subset acc {rep.subset.accuracy} r={rep.pearson_r}")
        oracle = {b.lo: b for b in r.bins}
        for row in rep.bins:
            if not row.defined:
                continue
            line = f"  bin {row.lo:.1f} n={row.count:6d} confidence {row.mean_confidence:.3f} accuracy {row.acc_int:.3f}"
            if row.lo in oracle:
                line += f" oracle {oracle[row.lo].oracle_posterior:.3f} gap {oracle[row.lo].gap:.3f}"
            print(line)
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
