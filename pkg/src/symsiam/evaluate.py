"""Evaluation protocols: ROC AUC, AUC averaged over abnormal-area cutoffs,
frozen-encoder linear probes with two-encoder ensembling, and embedding
export."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import ConfigError, UndefinedMetricError
from .nn import tensor as T

N_CUTOFFS = 100


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def default_cutoffs(n: int = N_CUTOFFS) -> np.ndarray:
    """n uniform cutoffs strictly inside (0, 1): i / (n + 1)."""
    return np.arange(1, n + 1) / (n + 1)


@dataclass
class CutoffSweep:
    average_auc: float
    cutoffs: list[float]
    aucs: list[float | None]
    n_skipped: int

    def to_dict(self) -> dict:
        return {
            "average_auc": self.average_auc,
            "n_evaluated": len(self.cutoffs) - self.n_skipped,
            "n_skipped": self.n_skipped,
            "curve": [{"cutoff": c, "auc": a} for c, a in zip(self.cutoffs, self.aucs)],
        }


def average_auc_over_cutoffs(scores, areas, cutoffs=None) -> CutoffSweep:
    """Mean AUC over cutoffs c, labeling a pair abnormal iff A >= c.

    Cutoffs that leave a single class are skipped and counted.
    """
    s = np.asarray(scores, dtype=np.float64)
    a = np.asarray(areas, dtype=np.float64)
    cutoffs = default_cutoffs() if cutoffs is None else np.asarray(cutoffs, dtype=np.float64)
    aucs: list[float | None] = []
    for c in cutoffs:
        y = a >= c
        if y.all() or not y.any():
            aucs.append(None)
        else:
            aucs.append(auc(s, y))
    evaluated = [v for v in aucs if v is not None]
    if not evaluated:
        raise UndefinedMetricError("every cutoff leaves a single class")
    return CutoffSweep(float(np.mean(evaluated)), [float(c) for c in cutoffs], aucs,
                       len(aucs) - len(evaluated))


def ovr_auc(probs: np.ndarray, labels: np.ndarray) -> tuple[list[float], float]:
    """One-vs-rest AUC per class and their mean."""
    k = probs.shape[1]
    per_class = [auc(probs[:, c], labels == c) for c in range(k)]
    return per_class, float(np.mean(per_class))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    weight_decay: float = 1e-5
    seed: int = 0


@dataclass
class EvalReport:
    task: str
    metrics: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "config": self.config}


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def embed(encoder: nn.Encoder, patches: np.ndarray, batch: int = 512) -> np.ndarray:
    """Embeddings of ``patches`` with no graph recording."""
    out = []
    with nn.no_grad():
        for i in range(0, len(patches), batch):
            out.append(encoder(patches[i : i + batch]).data)
    if not out:
        return np.zeros((0, encoder.config.embedding_dim), dtype=encoder.dtype)
    return np.concatenate(out, axis=0)


def train_linear_head(features: np.ndarray, labels: np.ndarray, n_classes: int,
                      cfg: ProbeConfig, seed_offset: int = 0) -> nn.Linear:
    """Softmax linear classifier trained with Adam on fixed features."""
    rng = np.random.default_rng([cfg.seed, seed_offset])
    head = nn.Linear(features.shape[1], n_classes, rng, name="probe", dtype=np.float32)
    # start from zero so the probe's only randomness is the minibatch order
    head.weight.data[:] = 0.0
    opt = nn.adam_state(cfg.lr, weight_decay=cfg.weight_decay)
    groups = [nn.ParamGroup("probe", head.parameters())]
    x = features.astype(np.float32)
    n = len(x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = T.cross_entropy(head(nn.Tensor(x[idx])), labels[idx])
            loss.backward()
            nn.adam_step(opt, groups)
    return head


def head_probs(head: nn.Linear, features: np.ndarray) -> np.ndarray:
    with nn.no_grad():
        z = head(nn.Tensor(features.astype(np.float32))).data
    return T.softmax(z.astype(np.float64))


def probe_train_eval(encoders, train: tuple[np.ndarray, np.ndarray],
                     test: tuple[np.ndarray, np.ndarray], n_classes: int,
                     cfg: ProbeConfig | None = None) -> EvalReport:
    """Train one linear head per frozen encoder; score the mean of their
    class probabilities on ``test``.

    Reports a binary AUC for two classes, otherwise per-class one-vs-rest
    AUCs and their average.
    """
    cfg = cfg or ProbeConfig()
    x_train, y_train = train
    x_test, y_test = test
    missing = sorted(set(range(n_classes)) - set(np.unique(y_train).tolist()))
    if missing:
        raise ConfigError(f"classes {missing} absent from the probe training split")
    sums_before = [param_checksum(e) for e in encoders]
    probs = []
    for i, enc in enumerate(encoders):
        head = train_linear_head(embed(enc, x_train), y_train, n_classes, cfg, seed_offset=i)
        probs.append(head_probs(head, embed(enc, x_test)))
    ensemble = np.mean(probs, axis=0)
    if [param_checksum(e) for e in encoders] != sums_before:
        raise RuntimeError("encoder parameters changed during probe training")
    metrics: dict = {"n_train": int(len(y_train)), "n_test": int(len(y_test))}
    if n_classes == 2:
        metrics["auc"] = auc(ensemble[:, 1], y_test == 1)
        metrics["per_encoder_auc"] = [auc(p[:, 1], y_test == 1) for p in probs]
        task = "probe-binary"
    else:
        per_class, avg = ovr_auc(ensemble, y_test)
        metrics["per_class_auc"] = per_class
        metrics["average_auc"] = avg
        task = "probe-multiclass"
    metrics["encoder_checksums"] = sums_before
    return EvalReport(task, metrics, {"probe": cfg.__dict__.copy(), "n_classes": n_classes})


def ensemble_probs(heads_and_features) -> np.ndarray:
    return np.mean([head_probs(h, f) for h, f in heads_and_features], axis=0)


# ---------------------------------------------------------------------------
# export


def area_band(a: float) -> str:
    if a == 0:
        return "normal"
    return "modest" if a <= 0.5 else "high"


def export_embeddings(encoder: nn.Encoder, pairs, path) -> Path:
    """CSV rows: pair_id, A, band, then the concatenated embedding E."""
    e1 = embed(encoder, pairs.p1)
    e2 = embed(encoder, pairs.p2)
    dim = e1.shape[1] if e1.ndim == 2 else encoder.config.embedding_dim
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "A", "band"] + [f"e1_{i}" for i in range(dim)] + [f"e2_{i}" for i in range(dim)])
        for pid, a, x1, x2 in zip(pairs.pair_ids, pairs.A, e1, e2):
            w.writerow([int(pid), repr(float(a)), area_band(float(a))]
                       + [repr(float(v)) for v in x1] + [repr(float(v)) for v in x2])
    return path
