"""Run-level orchestration: experiment configs, pretraining (single runs,
sweeps, resume) and evaluation tasks with provenance-stamped outputs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, cotrain, evaluate, synthdata
from .errors import ConfigError, DataError
from .nn import checkpoint

ARTIFACT_FORMAT = 1
EVAL_TASKS = ("pair-auc", "probe-binary", "probe-multiclass", "export-embeddings")


@dataclass
class EvalConfig:
    task: str = "pair-auc"
    split: str = "test"
    score: str = "q"  # q, P or oracle
    n_cutoffs: int = evaluate.N_CUTOFFS
    probe: evaluate.ProbeConfig = field(default_factory=evaluate.ProbeConfig)
    untrained: bool = False
    net: int = 1

    def __post_init__(self):
        if isinstance(self.probe, dict):
            self.probe = evaluate.ProbeConfig(**self.probe)
        if self.task not in EVAL_TASKS:
            raise ConfigError(f"task must be one of {EVAL_TASKS}")
        if self.split not in synthdata.SPLITS:
            raise ConfigError(f"split must be one of {synthdata.SPLITS}")
        if self.score not in ("q", "P", "oracle"):
            raise ConfigError("score must be q, P or oracle")
        if self.n_cutoffs < 1:
            raise ConfigError("n_cutoffs must be >= 1")
        if self.net not in (1, 2):
            raise ConfigError("net must be 1 or 2")


@dataclass
class ExperimentConfig:
    data: synthdata.SynthConfig = field(default_factory=synthdata.SynthConfig)
    train: cotrain.TrainConfig = field(default_factory=cotrain.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep_batch_sizes: list[int] = field(default_factory=list)
    sweep_learning_rates: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "eval": {**asdict(self.eval), "probe": asdict(self.eval.probe)},
            "sweep_batch_sizes": list(self.sweep_batch_sizes),
            "sweep_learning_rates": list(self.sweep_learning_rates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"data", "train", "eval", "sweep_batch_sizes", "sweep_learning_rates"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            return cls(
                data=synthdata.SynthConfig(**d.get("data", {})),
                train=cotrain.TrainConfig.from_dict(d.get("train", {})),
                eval=EvalConfig(**d.get("eval", {})),
                sweep_batch_sizes=[int(b) for b in d.get("sweep_batch_sizes", [])],
                sweep_learning_rates=[float(x) for x in d.get("sweep_learning_rates", [])],
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def merge_config(base: dict, overrides: dict) -> dict:
    """Recursively overlay ``overrides`` onto ``base``."""
    out = json.loads(json.dumps(base))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def provenance(config: ExperimentConfig, **extra) -> dict:
    return {"format_version": ARTIFACT_FORMAT, "package_version": __version__,
            "config": config.to_dict(), **extra}


# ---------------------------------------------------------------------------
# output helpers


def prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def csv_text(columns: list[str], rows: list[dict], prov: dict) -> str:
    """CSV with a leading ``#`` line carrying the provenance JSON."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(prov, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def read_csv_artifact(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    prov = json.loads(lines[0][2:]) if lines and lines[0].startswith("# ") else {}
    body = lines[1:] if prov else lines
    return prov, list(csv.DictReader(body))


def manifest_digest(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def load_dataset(root) -> synthdata.Dataset:
    if not Path(root).is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return synthdata.Dataset.load(root)


# ---------------------------------------------------------------------------
# synth


def run_synth(config: ExperimentConfig, out_dir, force: bool = False) -> dict:
    out = prepare_out_dir(out_dir, force)
    manifest = synthdata.write_dataset(out, config.data)
    counts = {s: sum(1 for p in manifest["pairs"] if p["split"] == s) for s in synthdata.SPLITS}
    write_json(out / "synth_report.json", {**provenance(config), "pair_counts": counts,
                                           "n_labeled": len(manifest["labeled_patches"])})
    return counts


# ---------------------------------------------------------------------------
# pretraining


def pretrain_run(config: ExperimentConfig, data_dir, out_dir, resume: bool = False,
                 log=None) -> dict:
    """Train one configuration; writes checkpoints, metrics and a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    digest = manifest_digest(data_dir)
    train_pairs, val_pairs = ds.pairs("train"), ds.pairs("val")
    prov = provenance(config, dataset_digest=digest)
    last = out / "last.ckpt"
    if resume and last.exists():
        meta, arrays = checkpoint.load_checkpoint(last)
        saved = meta.get("provenance", {})
        if saved.get("dataset_digest") != digest:
            raise DataError("checkpoint was trained on a different dataset")
        # only the epoch budget may change between sessions
        before = {k: v for k, v in saved.get("config", {}).get("train", {}).items() if k != "epochs"}
        now = {k: v for k, v in config.train.to_dict().items() if k != "epochs"}
        if before != now:
            raise ConfigError("resume config differs from the checkpoint's config")
        state = cotrain.CoTrainState.from_checkpoint(meta, arrays)
        if config.train.epochs < state.epoch:
            raise ConfigError(f"checkpoint already has {state.epoch} epochs, more than --epochs")
        state.config = config.train
    else:
        state = cotrain.CoTrainState.create(config.train)

    cotrain.train(state, train_pairs, val_pairs, out_dir=out, provenance=prov, log=log)

    best = cotrain.CoTrainState.load(out / "best.ckpt") if (out / "best.ckpt").exists() else state
    test_auc = _safe_avg_auc(best, ds.pairs("test"), config.train.score)
    result = {**cotrain.summary(state), "test_avg_auc_at_best": test_auc}
    write_json(out / "summary.json", {**prov, "result": result})
    return result


def _safe_avg_auc(state, pairs, score) -> float | None:
    try:
        return evaluate.average_auc_over_cutoffs(cotrain.pair_scores(state, pairs, score), pairs.A).average_auc
    except evaluate.UndefinedMetricError:
        return None


def _sweep_job(args):
    cfg_dict, data_dir, run_dir = args
    _single_thread()
    return pretrain_run(ExperimentConfig.from_dict(cfg_dict), data_dir, run_dir)


def _single_thread():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def pretrain_sweep(config: ExperimentConfig, data_dir, out_dir, jobs: int = 1) -> dict:
    """Grid over batch sizes x learning rates; the best run is chosen by
    validation average AUC and reported with its test score."""
    sizes = config.sweep_batch_sizes or [config.train.batch_size]
    rates = config.sweep_learning_rates or [config.train.learning_rate]
    out = Path(out_dir)
    jobs_args, combos = [], []
    for b in sizes:
        for lr in rates:
            d = config.to_dict()
            d["train"]["batch_size"] = b
            d["train"]["learning_rate"] = lr
            if d["train"]["accumulation_microbatch"] and b % d["train"]["accumulation_microbatch"]:
                d["train"]["accumulation_microbatch"] = 0
            run_dir = out / f"run_B{b}_lr{lr:g}"
            jobs_args.append((d, str(data_dir), str(run_dir)))
            combos.append((b, lr, run_dir.name))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, jobs_args))
    else:
        results = [pretrain_run(ExperimentConfig.from_dict(a[0]), a[1], a[2]) for a in jobs_args]
    rows = []
    for (b, lr, name), res in zip(combos, results):
        rows.append({"batch_size": b, "learning_rate": lr, "run": name,
                     "best_val_avg_auc": res["best_val_avg_auc"],
                     "test_avg_auc": res["test_avg_auc_at_best"],
                     "best_epoch": res["best_epoch"]})
    best = max(rows, key=lambda r: -math.inf if r["best_val_avg_auc"] is None else r["best_val_avg_auc"])
    prov = provenance(config)
    cols = ["batch_size", "learning_rate", "run", "best_val_avg_auc", "test_avg_auc", "best_epoch"]
    (out / "sweep_summary.csv").write_text(csv_text(cols, rows, prov))
    summary = {"runs": rows, "best": best}
    write_json(out / "sweep_summary.json", {**prov, "result": summary})
    return summary


# ---------------------------------------------------------------------------
# evaluation


def load_state(path) -> tuple[cotrain.CoTrainState, dict]:
    meta, arrays = checkpoint.load_checkpoint(path)
    return cotrain.CoTrainState.from_checkpoint(meta, arrays), meta


def _state_for_eval(config: ExperimentConfig, checkpoint_path) -> tuple[cotrain.CoTrainState, dict]:
    if config.eval.untrained:
        return cotrain.CoTrainState.create(config.train), {}
    if checkpoint_path is None:
        raise ConfigError("a checkpoint is required unless the untrained control is requested")
    return load_state(checkpoint_path)


def run_eval(config: ExperimentConfig, data_dir, out_dir, checkpoint_path=None,
             force: bool = False) -> dict:
    """Run one evaluation task and write ``report.json`` plus a CSV."""
    ev = config.eval
    ds = load_dataset(data_dir)
    digest = manifest_digest(data_dir)
    state, meta = _state_for_eval(config, checkpoint_path)
    trained_on = meta.get("provenance", {}).get("dataset_digest")
    out = prepare_out_dir(out_dir, force)
    prov = provenance(config, dataset_digest=digest, checkpoint=str(checkpoint_path) if checkpoint_path else None,
                      checkpoint_dataset_digest=trained_on)

    if ev.task == "pair-auc":
        pairs = ds.pairs(ev.split)
        if ev.score == "oracle":
            scores = pairs.A
        else:
            scores = cotrain.pair_scores(state, pairs, ev.score)
        sweep = evaluate.average_auc_over_cutoffs(scores, pairs.A, evaluate.default_cutoffs(ev.n_cutoffs))
        metrics = sweep.to_dict()
        rows = [{"cutoff": c, "auc": "" if a is None else a} for c, a in zip(sweep.cutoffs, sweep.aucs)]
        (out / "auc_curve.csv").write_text(csv_text(["cutoff", "auc"], rows, prov))
    elif ev.task in ("probe-binary", "probe-multiclass"):
        if not ds.manifest.get("labeled_patches"):
            raise DataError("dataset has no labeled patches for probe tasks")
        binary = ev.task == "probe-binary"
        train = ds.labeled("train", binary=binary)
        test = ds.labeled(ev.split, binary=binary)
        n_classes = 2 if binary else 3
        encoders = [net.encoder for net in state.nets]
        report = evaluate.probe_train_eval(encoders, train, test, n_classes, ev.probe)
        metrics = report.metrics
        if binary:
            rows = [{"class": "abnormal", "auc": metrics["auc"]}]
        else:
            rows = [{"class": synthdata.GRADE_NAMES[c], "auc": a} for c, a in enumerate(metrics["per_class_auc"])]
            rows.append({"class": "average", "auc": metrics["average_auc"]})
        (out / "probe_auc.csv").write_text(csv_text(["class", "auc"], rows, prov))
    else:
        pairs = ds.pairs(ev.split)
        net = state.nets[min(ev.net, len(state.nets)) - 1]
        path = out / "embeddings.csv"
        evaluate.export_embeddings(net.encoder, pairs, path)
        body = path.read_text()
        path.write_text("# " + json.dumps(prov, sort_keys=True) + "\n" + body)
        metrics = {"n_rows": len(pairs), "dim": 2 * net.encoder.config.embedding_dim}
    report = {**prov, "task": ev.task, "metrics": metrics}
    write_json(out / "report.json", report)
    return metrics


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))
