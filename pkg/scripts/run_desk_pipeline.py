"""Run every desk-scale experiment end to end and print a short summary.

    python3 scripts/run_desk_pipeline.py --out runs/desk [--config exp.ini] [--seed 0]
"""

import argparse
import json
import logging
import sys

from taskembed.config import ExperimentConfig
from taskembed.pipeline import run_desk_pipeline


def summarize(res) -> dict:
    t1 = {r["strategy"]: r for r in res.reports["table1"]["rows"]}
    zs = {r["source"]: r["mean_accuracy"] for r in res.reports["zeroshot"]["sources"]}
    probe = {r["row"]: r for r in res.reports["probe"]["rows"]}
    within = res.reports["stability_within"]
    return {
        "mean_accuracy": {k: round(v["mean_accuracy"], 4) for k, v in t1.items()},
        "beats_majority": {k: v["beats_majority_frac"] for k, v in t1.items() if k != "majority_class"},
        "stability_ratio": round(within["ratio"], 3),
        "probe_gain": {k: round(probe[k]["gain"], 3) for k in ("task_type", "domain_cluster",
                                                                "task_type_shuffled")},
        "zero_shot": {k: round(v, 4) for k, v in zs.items()},
        "minutes": round(res.wall_seconds / 60, 2),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="fresh output directory")
    ap.add_argument("--config", help="INI config; defaults otherwise")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().with_env()
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_desk_pipeline(cfg, args.out)
    json.dump(summarize(res), sys.stdout, indent=2)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
