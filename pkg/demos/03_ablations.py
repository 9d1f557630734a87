"""Consistency-loss and multi-task ablations on a synthetic train/eval split.

Trains PVSG with and without the temporal consistency loss, plus box-only
(DSGG) and joint box+mask models, for each seed, then prints the comparison
the acceptance suite checks. Expect roughly 10 minutes per run on one CPU.

    python3 demos/03_ablations.py --seeds 0 --steps 500
"""

import argparse
import json

import numpy as np

from slotvsg.experiments import ABLATION_WORLD, ablation_config, make_split, run

ARMS = {"pvsg": ("pvsg", True), "pvsg_nocons": ("pvsg", False), "dsgg": ("dsgg", True), "joint": ("joint", True)}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--steps", type=int, default=3500)
    parser.add_argument("--arms", default=",".join(ARMS))
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    train_v, eval_v = make_split(ABLATION_WORLD, 50, 20)
    rows = {}
    for seed in seeds:
        for arm in args.arms.split(","):
            task, cons = ARMS[arm]
            res = run(ablation_config(task, cons, seed, args.steps), train_v, eval_v)
            rep = res.report
            row = {"PQ": rep.pq, "AP50": rep.ap50, "seconds": round(res.seconds)}
            if "PVSG/vIoU0.5" in rep.tables:
                row["PVSG R@20 vIoU0.5"] = rep.tables["PVSG/vIoU0.5"]["R@20"]
                row["PVSG R@20 vIoU0.1"] = rep.tables["PVSG/vIoU0.1"]["R@20"]
            if "SGDET/with" in rep.tables:
                row["SGDET R@20"] = rep.tables["SGDET/with"]["R@20"]
            rows[arm, seed] = row
            print(arm, seed, json.dumps(row), flush=True)

    def mean(arm, key):
        vals = [rows[arm, s][key] for s in seeds if (arm, s) in rows and rows[arm, s].get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    print(f"consistency: PVSG R@20 vIoU0.5 with {mean('pvsg', 'PVSG R@20 vIoU0.5'):.4f} "
          f"without {mean('pvsg_nocons', 'PVSG R@20 vIoU0.5'):.4f}")
    print(f"multi-task: PQ joint {mean('joint', 'PQ'):.4f} mask-only {mean('pvsg', 'PQ'):.4f}; "
          f"AP50 joint {mean('joint', 'AP50'):.4f} box-only {mean('dsgg', 'AP50'):.4f}")


if __name__ == "__main__":
    main()
