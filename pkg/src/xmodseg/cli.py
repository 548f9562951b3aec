"""Command-line interface: dataset generation, training, evaluation,
EAM stripping, the gradient-check suite, and the ablation/temperature
experiments."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import yaml

from .backbone import BackboneConfig
from .losses import LossWeights
from .synthdata import SceneSpec, make_unpaired_dataset

log = logging.getLogger("xmodseg")


def _setup_logging():
    level = logging.DEBUG if os.environ.get("XMODSEG_VERBOSE", "0") not in ("", "0") \
        else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _add_backbone_flags(p):
    p.add_argument("--base-channels", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default="runs/run0", help="output directory")
    p.add_argument("--variant", default="joint-v3-cr")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--alpha", type=float, default=0.3, help="auxiliary loss weight")
    p.add_argument("--beta", type=float, default=1.0, help="modality consistency weight")
    p.add_argument("--gamma", type=float, default=1.0, help="image consistency weight")
    p.add_argument("--tau", type=float, default=4.0, help="correlation softmax temperature")
    p.add_argument("--baseline-modality", default="m1")
    p.add_argument("--few-shot", action="append", default=[],
                   metavar="MOD=N", help="limit a modality's training samples")
    p.add_argument("--config", help="yaml file overriding flag defaults")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_backbone_flags(p)


def _apply_config_file(subparsers: dict, argv):
    """A config file supplies defaults for the invoked subcommand; explicit
    flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else None
    if known.config and command in subparsers:
        with open(known.config) as fh:
            overrides = yaml.safe_load(fh) or {}
        sub = subparsers[command]
        valid = {a.dest for a in sub._actions}
        bad = set(overrides) - valid
        if bad:
            raise SystemExit(f"unknown config keys for {command}: {sorted(bad)}")
        sub.set_defaults(**overrides)


def _parse_few_shot(pairs):
    out = {}
    for item in pairs:
        mod, _, count = item.partition("=")
        if not count:
            raise SystemExit(f"--few-shot expects MOD=N, got {item!r}")
        out[mod] = int(count)
    return out or None


def _train_config_from_args(args):
    from .train import TrainConfig

    return TrainConfig(
        data_dir=args.data,
        out_dir=args.out,
        variant=args.variant,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        lr=args.lr,
        baseline_modality=args.baseline_modality,
        few_shot=_parse_few_shot(args.few_shot),
        weights=LossWeights(aux=args.alpha, mcr=args.beta, icr=args.gamma,
                            temperature=args.tau),
        backbone=BackboneConfig(base_channels=args.base_channels, heads=args.heads,
                                dtype=args.dtype),
    )


def cmd_gen_data(args) -> int:
    spec = SceneSpec(class_count=args.classes, height=args.height, width=args.width)
    counts = {"m1": args.count_m1, "m2": args.count_m2}
    manifest = make_unpaired_dataset(spec, counts, args.seed, args.out)
    print(f"wrote dataset manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    config = _train_config_from_args(args)
    result = train(config, resume_from=args.resume)
    print(f"trained {result.steps_run} steps; checkpoint {result.checkpoint_path}")
    print(f"final losses: " + ", ".join(f"{k}={v:.4f}" for k, v in result.final.items()))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.model, args.data, split=args.split, out_csv=args.csv,
                      out_text=args.table, correlations_dir=args.dump_correlations)
    print(report.to_text())
    return 0


def cmd_strip(args) -> int:
    from .checkpoint import strip_eam

    result = strip_eam(args.checkpoint, args.out)
    print(f"stripped model -> {result.out_path}")
    print(f"parameters {result.full_params} -> {result.stripped_params} "
          f"(removed {result.removed_eam} external-attention + "
          f"{result.removed_calibration} calibration, added {result.added_folded} folded)")
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    entries = run_suite(primitive_trials=args.primitive_trials,
                        composite_trials=args.composite_trials, tol=args.tol)
    for entry in entries:
        print(entry.line())
    failed = [e for e in entries if not e.passed]
    print(f"{len(entries) - len(failed)}/{len(entries)} checks passed")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    from .experiments import ablation_table, run_ablation
    from .train import UnpairedData

    variants = args.variants.split(",")
    seeds = list(range(args.seeds))
    backbone = BackboneConfig(base_channels=args.base_channels, heads=args.heads,
                              dtype=args.dtype)
    scores = run_ablation(args.data, args.out, variants, seeds, steps=args.steps,
                          batch_size=args.batch_size, backbone=backbone)
    table = ablation_table(scores, UnpairedData(args.data).modalities)
    print(table)
    if args.table:
        with open(args.table, "w") as fh:
            fh.write(table + "\n")
    return 0


def cmd_sweep_tau(args) -> int:
    from .experiments import run_tau_sweep

    taus = [float(t) for t in args.taus.split(",")]
    backbone = BackboneConfig(base_channels=args.base_channels, heads=args.heads,
                              dtype=args.dtype)
    rows = run_tau_sweep(args.data, args.out, taus, seed=args.seed, steps=args.steps,
                         batch_size=args.batch_size, backbone=backbone)
    print(f"{'tau':>6} {'overall dice':>14}")
    for tau, overall, _ in rows:
        print(f"{tau:>6.1f} {overall:>14.2f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="xmodseg",
        description="Unpaired bimodal segmentation: synthetic data, training, "
                    "evaluation, and inference export.")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    p = registry["gen-data"] = sub.add_parser("gen-data", help="generate an unpaired bimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count-m1", type=int, default=20)
    p.add_argument("--count-m2", type=int, default=20)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(fn=cmd_gen_data)

    p = registry["train"] = sub.add_parser("train", help="train one variant on a dataset")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = registry["eval"] = sub.add_parser("eval", help="evaluate a checkpoint or stripped model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--csv", help="write metrics CSV here")
    p.add_argument("--table", help="write the text table here")
    p.add_argument("--dump-correlations", metavar="DIR",
                   help="dump per-image correlation matrices (full checkpoints only)")
    p.set_defaults(fn=cmd_eval)

    p = registry["strip"] = sub.add_parser("strip", help="export an EAM-free inference model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_strip)

    p = registry["grad-check"] = sub.add_parser("grad-check", help="run the finite-difference suite")
    p.add_argument("--primitive-trials", type=int, default=100)
    p.add_argument("--composite-trials", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)

    p = registry["ablate"] = sub.add_parser("ablate", help="train the variant grid and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--variants", default="joint-v2,joint-v3,joint-v3-cr")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=260)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--table", help="write the comparison table here")
    p.add_argument("--config")
    _add_backbone_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = registry["sweep-tau"] = sub.add_parser("sweep-tau", help="temperature sweep with image consistency only")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/tau")
    p.add_argument("--taus", default="1,2,4,8,16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=260)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--config")
    _add_backbone_flags(p)
    p.set_defaults(fn=cmd_sweep_tau)

    return parser, registry


def cli_main(argv=None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    _apply_config_file(registry, argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
