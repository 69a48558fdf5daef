"""Train DeepScaler on a preset and compare it with the baselines over seeds.

Writes comparison.md / comparison.json plus one cumulative CSV per (policy, seed).

    python scripts/compare_policies.py --preset boutique11 --out runs/compare
"""
import argparse
import json
import time
from pathlib import Path

from stgscale import experiments as ex
from stgscale import metrics as me
from stgscale.config import ExperimentConfig

POLICIES = ["deepscaler", "aws_rule", "slo_rule", "mmn_model", "mmn_holistic"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="boutique11")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pattern", default="composite")
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    cfg = ExperimentConfig(preset=args.preset, seeds=list(range(args.seeds)))
    cfg.workload.pattern = args.pattern
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = ex.load_spec(cfg)

    t0 = time.perf_counter()
    trained = ex.train_model(cfg, ex.generate_dataset(cfg, spec))
    print(f"trained in {time.perf_counter() - t0:.0f}s; val loss {trained.state.manifest[-1]['val_loss']:.4f}")
    model = (trained.model, trained.graph)

    reports = {}
    for kind in POLICIES:
        reps = []
        for seed in cfg.seeds:
            rec = ex.run_policy(cfg, spec, kind, model if kind == "deepscaler" else None, seed=seed)
            me.write_cumulative_csv(out / f"cumulative_{kind}_{seed}.csv", rec)
            reps.append(me.evaluate_record(rec))
        reports[kind] = reps
    rows = me.comparison_rows(reports)
    table = me.comparison_markdown(rows)
    (out / "comparison.md").write_text(table)
    (out / "comparison.json").write_text(json.dumps({"config": cfg.to_dict(), "rows": rows}, indent=2))
    print(table)


if __name__ == "__main__":
    main()
