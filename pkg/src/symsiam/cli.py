"""Command-line front end.

Subcommands: ``synth``, ``pretrain``, ``eval``, ``probe`` and ``export``.
Every flag mirrors a field of the experiment config; a ``--config`` JSON
file supplies defaults that explicit flags override.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__, experiment
from .errors import ConfigError, DataError, SymSiamError

# (flag, config section, key, type, help)
DATA_FLAGS = [
    ("--n-cases", "n_cases", int, "number of phantom cases"),
    ("--height", "height", int, "image height in pixels"),
    ("--width", "width", int, "image width in pixels"),
    ("--patch-size", "patch_size", int, "grid tile side"),
    ("--lesion-prob", "lesion_prob", float, "probability a case has lesions"),
    ("--lesion-contrast", "lesion_contrast", float, "peak lesion brightness"),
    ("--texture-amplitude", "texture_amplitude", float, "tissue texture strength"),
    ("--mirror-noise", "mirror_noise", float, "independent pixel noise per side"),
    ("--max-shift", "max_shift", int, "registration search half-width"),
    ("--data-seed", "seed", int, "phantom generation seed"),
]
TRAIN_FLAGS = [
    ("--batch-size", "batch_size", int, "effective batch size B"),
    ("--lr", "learning_rate", float, "LARS base learning rate"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--accumulation-microbatch", "accumulation_microbatch", int,
     "microbatch size for gradient accumulation (0 = none)"),
    ("--seed", "seed", int, "training seed"),
    ("--warmup-epochs", "warmup_epochs", int, "epochs trained with P = 0.5"),
    ("--weight-decay", "weight_decay", float, "LARS weight decay"),
    ("--triplet-margin", "triplet_margin", float, "margin of the soft triplet loss"),
]
PROBE_FLAGS = [
    ("--probe-epochs", "epochs", int, "linear probe epochs"),
    ("--probe-batch-size", "batch_size", int, "linear probe batch size"),
    ("--probe-lr", "lr", float, "linear probe Adam learning rate"),
    ("--probe-weight-decay", "weight_decay", float, "linear probe weight decay"),
    ("--probe-seed", "seed", int, "linear probe seed"),
]


def _add_flags(parser, flags, dest_prefix):
    for flag, key, typ, help_text in flags:
        parser.add_argument(flag, dest=f"{dest_prefix}{key}", type=typ, default=None, help=help_text)


def _csv_list(typ):
    def parse(text):
        try:
            return [typ(v) for v in text.split(",") if v]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symsiam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config; flags override it")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-exact)")

    p = sub.add_parser("synth", help="generate a phantom dataset")
    common(p)
    p.add_argument("--out", required=True)
    _add_flags(p, DATA_FLAGS, "data.")
    p.add_argument("--no-leakage-guard", dest="data.leakage_guard", action="store_const", const=False)

    p = sub.add_parser("pretrain", help="dual co-training on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    _add_flags(p, TRAIN_FLAGS, "train.")
    p.add_argument("--channels", dest="encoder.channels_per_stage", type=_csv_list(int),
                   help="encoder channels per stage, e.g. 8,16")
    p.add_argument("--embedding-dim", dest="encoder.embedding_dim", type=int)
    p.add_argument("--init-seed", dest="encoder.seed", type=int, help="encoder initialization seed")
    p.add_argument("--loss", dest="train.loss", choices=["cross-bce", "triplet", "ssl-mix"])
    p.add_argument("--soft-label-source", dest="train.soft_label_source", choices=["distance", "logit"])
    p.add_argument("--score", dest="train.score", choices=["q", "P"],
                   help="validation pair score: 1 - mean q, or mean P")
    p.add_argument("--single-network", dest="train.single_network", action="store_const", const=True,
                   help="train one network on its own labels (needs --experimental)")
    p.add_argument("--experimental", action="store_true",
                   help="allow the unstable alternative training modes")
    p.add_argument("--sweep", action="store_true", help="grid over --batch-sizes x --lrs")
    p.add_argument("--batch-sizes", dest="sweep_batch_sizes", type=_csv_list(int))
    p.add_argument("--lrs", dest="sweep_learning_rates", type=_csv_list(float))
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep runs")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")

    for name, help_text, task_choices in (
        ("eval", "evaluate a checkpoint", experiment.EVAL_TASKS),
        ("probe", "linear probe on frozen encoders", ("probe-binary", "probe-multiclass")),
        ("export", "export pair embeddings to CSV", ("export-embeddings",)),
    ):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--checkpoint", help="checkpoint file (best.ckpt or last.ckpt)")
        p.add_argument("--task", dest="eval.task", choices=task_choices,
                       default=task_choices[0] if len(task_choices) == 1 else None)
        p.add_argument("--split", dest="eval.split", choices=["train", "val", "test"])
        p.add_argument("--untrained", dest="eval.untrained", action="store_const", const=True,
                       help="use freshly initialized encoders (null-model control)")
        if name == "eval":
            p.add_argument("--score", dest="eval.score", choices=["q", "P", "oracle"])
            p.add_argument("--n-cutoffs", dest="eval.n_cutoffs", type=int)
        if name in ("eval", "export"):
            p.add_argument("--net", dest="eval.net", type=int, choices=[1, 2])
        if name in ("eval", "probe"):
            _add_flags(p, PROBE_FLAGS, "probe.")
        p.add_argument("--seed", dest="train.seed", type=int, help="seed of the untrained control")
    return parser


def _overrides(args) -> dict:
    """Collect explicitly given flags into a nested config fragment."""
    out: dict = {}
    for dest, value in vars(args).items():
        if value is None:
            continue
        if dest.startswith(("data.", "train.", "eval.")):
            section, key = dest.split(".", 1)
            out.setdefault(section, {})[key] = value
        elif dest.startswith("encoder."):
            out.setdefault("train", {}).setdefault("encoder", {})[dest.split(".", 1)[1]] = value
        elif dest.startswith("probe."):
            out.setdefault("eval", {}).setdefault("probe", {})[dest.split(".", 1)[1]] = value
        elif dest in ("sweep_batch_sizes", "sweep_learning_rates"):
            out[dest] = value
    return out


def resolve_config(args) -> experiment.ExperimentConfig:
    base = experiment.ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        base = experiment.merge_config(base, experiment.load_config_file(args.config))
    merged = experiment.merge_config(base, _overrides(args))
    return experiment.ExperimentConfig.from_dict(merged)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_synth(args, cfg) -> None:
    counts = experiment.run_synth(cfg, args.out, force=args.force)
    for split, n in counts.items():
        print(f"{split}: {n} pairs")


def cmd_pretrain(args, cfg) -> None:
    if cfg.train.experimental and not args.experimental:
        raise ConfigError("this training mode is experimental; pass --experimental to run it")
    if args.sweep:
        experiment.prepare_out_dir(args.out, args.force)
        summary = experiment.pretrain_sweep(cfg, args.data, args.out, jobs=args.jobs)
        print(f"{'B':>5} {'lr':>10} {'val avg AUC':>12} {'test avg AUC':>13}")
        for row in summary["runs"]:
            print(f"{row['batch_size']:>5} {row['learning_rate']:>10g} "
                  f"{_fmt(row['best_val_avg_auc']):>12} {_fmt(row['test_avg_auc']):>13}")
        best = summary["best"]
        print(f"best: B={best['batch_size']} lr={best['learning_rate']:g}")
        return
    if not args.resume:
        experiment.prepare_out_dir(args.out, args.force)
    result = experiment.pretrain_run(cfg, args.data, args.out, resume=args.resume, log=print)
    _print(result)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args, cfg) -> None:
    if cfg.eval.task is None:
        raise ConfigError("--task is required")
    metrics = experiment.run_eval(cfg, args.data, args.out, checkpoint_path=args.checkpoint,
                                  force=args.force)
    _print({k: v for k, v in metrics.items() if k != "curve"})


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "eval": cmd_eval,
            "probe": cmd_eval, "export": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(max(1, args.threads))
        if args.command in ("probe",) and getattr(args, "eval.task") is None:
            raise ConfigError("--task is required")
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except SymSiamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
