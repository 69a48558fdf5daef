"""Estimator MAE against the persistence baseline as the topology grows.

    python scripts/forecast_scaling.py --seeds 3 --out runs/forecast.csv
"""
import argparse
import csv
from pathlib import Path

from stgscale import adaptlearn as al
from stgscale import experiments as ex
from stgscale import metrics as me
from stgscale.config import ExperimentConfig

PRESETS = ("bookinfo4", "boutique11", "trainticket41")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/forecast.csv")
    args = ap.parse_args()

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "n", "seed", "mae", "rmse", "persistence_mae"])
        for preset in PRESETS:
            for seed in range(args.seeds):
                cfg = ExperimentConfig(preset=preset)
                cfg.dataset.runs, cfg.dataset.seed, cfg.estimator.seed = 2, 100 + 10 * seed, seed
                cfg.learn = al.LearnConfig(em_iterations=2, inner_epochs=args.epochs, generator_epochs=2, lr=3e-3, seed=seed)
                spec = ex.load_spec(cfg)
                trained = ex.train_model(cfg, ex.generate_dataset(cfg, spec))
                pred, truth, persist = ex.heldout_forecast(cfg, spec, trained, 900 + seed)
                mae, rmse, _ = me.forecast_errors(pred, truth)
                base = me.forecast_errors(persist, truth)[0]
                w.writerow([preset, spec.n, seed, mae, rmse, base])
                print(f"{preset:14s} seed {seed}: MAE {mae:.3f}  RMSE {rmse:.3f}  persistence {base:.3f}", flush=True)


if __name__ == "__main__":
    main()
