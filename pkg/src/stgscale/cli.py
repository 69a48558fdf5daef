"""Command-line runner: generate, train, run, compare.

Exit codes: 0 success, 2 configuration or input error, 3 invariant failure.
The default output root comes from ``STGSCALE_OUT`` (else ``runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from . import metrics as me
from .config import ConfigError, ExperimentConfig
from .simcluster.topology import SpecError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
OUT_ENV = "STGSCALE_OUT"
PRESET_CHOICES = ("bookinfo4", "boutique11", "trainticket41", "cascade3")
POLICY_CHOICES = ("deepscaler", "aws_rule", "slo_rule", "mmn_model", "mmn_holistic")

log = logging.getLogger("stgscale")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.preset:
        cfg.preset, cfg.spec_path = args.preset, None
    if args.seed is not None:
        cfg.workload.seed = args.seed
        cfg.dataset.seed = args.seed
    if getattr(args, "policy", None):
        cfg.policy.kind = args.policy
    return cfg


def _out(args, cfg: ExperimentConfig, sub: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUT_ENV, cfg.out_dir))
    return root / sub


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg, "dataset")
    ds = ex.generate_dataset(cfg, out=out)
    print(f"wrote {len(ds.runs)} runs ({ds.steps} steps) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if not args.dataset:
        raise ConfigError("--dataset", "a dataset directory is required")
    ds = ex.load_dataset(args.dataset)
    out = _out(args, cfg, "model")
    trained = ex.train_model(cfg, ds)
    ex.save_trained(out, trained, ds)
    last = trained.state.manifest[-1]
    print(f"final train loss {last['train_loss']:.6f}; checkpoint in {out}")
    return EXIT_OK


def _trained(args):
    if not args.checkpoint:
        return None
    model, graph, _ = ex.load_trained(args.checkpoint)
    return model, graph


def cmd_run(args) -> int:
    cfg = _config(args)
    spec = ex.load_spec(cfg)
    trained = _trained(args)
    if cfg.policy.kind == "deepscaler" and trained is None:
        raise ConfigError("--checkpoint", "the deepscaler policy needs a trained checkpoint")
    if trained is not None and trained[0].config.n != spec.n:
        raise ConfigError("--checkpoint", f"checkpoint has {trained[0].config.n} services, topology has {spec.n}")
    record = ex.run_policy(cfg, spec, cfg.policy.kind, trained)
    report = me.evaluate_record(record)
    out = _out(args, cfg, f"run-{record.policy}-{cfg.workload.seed}")
    ex.write_run(out, record, report, {"config": cfg.to_dict(), "spec_digest": spec.digest(), "seed": cfg.workload.seed})
    print(me.comparison_markdown(me.comparison_rows({record.policy: [report]})), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    configs = [ExperimentConfig.load(p) for p in args.configs] if args.configs else [_config(args)]
    specs = [ex.load_spec(c) for c in configs]
    if len({s.digest() for s in specs}) > 1:
        raise ConfigError("configs", "all configurations must use the same topology")
    cfg, spec = configs[0], specs[0]
    if args.seed is not None:
        cfg.seeds = [args.seed]
    kinds = args.policies.split(",") if args.policies else [c.policy.kind for c in configs]
    trained = _trained(args)
    if "deepscaler" in kinds and trained is None:
        raise ConfigError("--checkpoint", "the deepscaler policy needs a trained checkpoint")
    reports: dict[str, list] = {}
    for kind in kinds:
        for name, reps in ex.compare(cfg, spec, [kind], trained).items():
            reports[name if name not in reports else f"{name}#{len(reports)}"] = reps
    rows = me.comparison_rows(reports)
    table = me.comparison_markdown(rows)
    out = _out(args, cfg, "compare")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(table)
    (out / "comparison.json").write_text(
        json.dumps({"seeds": cfg.seeds, "rows": rows, "reports": {k: [r.to_dict() for r in v] for k, v in reports.items()}}, indent=2)
    )
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgscale", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment configuration JSON")
        sp.add_argument("--seed", type=int, help="workload / dataset seed")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or the config's out_dir)")
        sp.add_argument("--preset", choices=PRESET_CHOICES, help="bundled topology")

    g = sub.add_parser("generate", help="simulate and write a training dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="adaptive learning on a dataset")
    common(t)
    t.add_argument("--dataset", help="directory written by generate")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run one policy against the simulator")
    common(r)
    r.add_argument("--policy", choices=POLICY_CHOICES)
    r.add_argument("--checkpoint", help="trained model directory or checkpoint file")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare policies over seeds")
    common(c)
    c.add_argument("configs", nargs="*", help="one configuration per policy")
    c.add_argument("--policies", help="comma-separated policy kinds (overrides the configs' kinds)")
    c.add_argument("--checkpoint", help="trained model for the deepscaler policy")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
