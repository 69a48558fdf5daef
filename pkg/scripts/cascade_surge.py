"""Bottleneck-shifting scenario on A -> {B, C}: replicas and latency per step.

Entry load jumps from 0.5x to 2.5x the preset level; the per-service CPU rule
and the holistic queueing model react to the same trace.

    python scripts/cascade_surge.py --seeds 10 --out runs/cascade
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from stgscale import autoscaler as au
from stgscale import metrics as me
from stgscale.simcluster.presets import get_preset
from stgscale.simcluster.simulator import ClusterSimulator, SimConfig
from stgscale.simcluster.workload import surge_workload

BEFORE, AFTER = 20, 30


def policies(spec):
    bounds = au.Bounds(spec.min_replicas, spec.max_replicas)
    return {
        "aws_rule": lambda: au.AwsRule(spec.n, bounds),
        "mmn_model": lambda: au.MmnModel.from_spec(spec),
        "mmn_holistic": lambda: au.MmnModel.from_spec(spec, holistic=True),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default="runs/cascade")
    args = ap.parse_args()

    spec = get_preset("cascade3")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clearance = {k: [] for k in policies(spec)}
    for seed in range(args.seeds):
        high = spec.base_rps * np.random.default_rng(seed).uniform(2.0, 3.0)
        w = surge_workload(0.5 * spec.base_rps, high, BEFORE, AFTER)
        for name, make in policies(spec).items():
            rec = au.mape_loop(make(), ClusterSimulator(spec, SimConfig(seed=seed)), w)
            clearance[name].append(me.clearance_time(rec, BEFORE))
            with open(out / f"{name}_{seed}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["step", "rps", "e2e_ms"] + [f"replicas_{s}" for s in spec.names])
                for t in range(len(rec)):
                    wr.writerow([t, rec.rps[t], rec.e2e_latency_ms[t]] + rec.replicas[t].tolist())
    for name, c in clearance.items():
        print(f"{name:13s} clearance steps {c}  median {np.median(c):.1f}")


if __name__ == "__main__":
    main()
