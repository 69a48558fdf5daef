"""Track how the learned affinity graph compares with trace-derived graphs.

Per EM iteration: Jaccard of the fused graph against the OD graph, the CC
graph of per-service request-rate series, and the true call graph.

    python scripts/dependency_recovery.py --preset boutique11 --out runs/recovery.csv
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from stgscale import adaptlearn as al
from stgscale import experiments as ex
from stgscale import graphops as go
from stgscale.config import ExperimentConfig
from stgscale.simcluster.simulator import FEATURE_CHANNELS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="boutique11")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=6)
    ap.add_argument("--out", default="runs/recovery.csv")
    args = ap.parse_args()

    cfg = ExperimentConfig(preset=args.preset)
    cfg.dataset.runs, cfg.dataset.seed, cfg.estimator.seed = 2, 100 + 10 * args.seed, args.seed
    cfg.learn = al.LearnConfig(em_iterations=args.iterations, inner_epochs=10, generator_epochs=5, lr=3e-3, seed=args.seed)
    spec = ex.load_spec(cfg)
    ds = ex.generate_dataset(cfg, spec)
    od, truth = ds.od_graph(), spec.adjacency()
    rates = np.concatenate([r.frames[:, :, FEATURE_CHANNELS.index("request_rate")] for r in ds.runs]).T
    cc = go.build_cc(rates)

    trained = ex.train_model(cfg, ds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "val_loss", "set_size", "jaccard_od"])
        for rec in trained.state.manifest:
            w.writerow([rec["iteration"], rec["val_loss"], rec["set_size"], rec["jaccard_reference"]])
    final = trained.graph
    print(f"edges: learned {len(go.edge_set(final))}, OD {len(go.edge_set(od))}, true {len(go.edge_set(truth))}")
    print(f"Jaccard learned vs OD {go.jaccard(final, od):.2f}, vs CC {go.jaccard(final, cc):.2f}, vs true {go.jaccard(final, truth):.2f}")
    print(f"Jaccard OD vs true {go.jaccard(od, truth):.2f}, CC vs true {go.jaccard(cc, truth):.2f}")


if __name__ == "__main__":
    main()
