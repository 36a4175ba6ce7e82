"""Dual Siamese co-training with mixture-model soft labels.

Two Siamese networks embed the same bilateral patch pairs. Each network's
embedding distances are fitted with a two-component mixture whose
high-mean posterior P serves as a soft "abnormal" label, and each network
is trained on the *other* network's labels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import altloss, nn
from .errors import ConfigError, DataError, NumericError
from .evaluate import average_auc_over_cutoffs
from .gmm import GmmParams, fit_gmm, posterior_abnormal
from .nn import Tensor
from .nn import tensor as T
from .synthdata import PairArrays

Q_CLAMP = 1e-7
LOSSES = ("cross-bce", "triplet", "ssl-mix")
LABEL_SOURCES = ("distance", "logit")
SCORES = ("q", "P")
METRIC_COLUMNS = [
    "epoch", "loss1", "loss2", "loss", "val_avg_auc",
    "gmm1_mean_low", "gmm1_mean_high", "gmm2_mean_low", "gmm2_mean_high",
]
STATE_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    epochs: int = 50
    accumulation_microbatch: int = 0  # 0: one pass per batch
    seed: int = 0
    warmup_epochs: int = 0
    weight_decay: float = 1e-6
    momentum: float = 0.9
    gmm_refit: str = "per-epoch"
    loss: str = "cross-bce"
    soft_label_source: str = "distance"
    triplet_margin: float = 1.0
    single_network: bool = False
    score: str = "q"
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = nn.EncoderConfig(**self.encoder)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        mb = self.microbatch
        if mb < 1 or self.batch_size % mb:
            raise ConfigError(
                f"accumulation_microbatch {self.accumulation_microbatch} must divide batch_size {self.batch_size}"
            )
        if self.gmm_refit != "per-epoch":
            raise ConfigError("only per-epoch GMM refits are supported")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.soft_label_source not in LABEL_SOURCES:
            raise ConfigError(f"soft_label_source must be one of {LABEL_SOURCES}")
        if self.score not in SCORES:
            raise ConfigError(f"score must be one of {SCORES}")
        if self.loss != "cross-bce" and self.score == "q":
            raise ConfigError(f"loss {self.loss!r} does not train the head; use score 'P'")
        altloss.TripletConfig(self.triplet_margin)

    @property
    def microbatch(self) -> int:
        return self.accumulation_microbatch or self.batch_size

    @property
    def experimental(self) -> bool:
        return (self.single_network or self.loss != "cross-bce"
                or self.soft_label_source != "distance")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


class SiameseNet(nn.Module):
    """Shared encoder g applied to both patches, plus a dense head on E."""

    def __init__(self, config: nn.EncoderConfig, seed_offset: int = 0, dtype=np.float32):
        enc_cfg = replace(config, seed=int(config.seed) + seed_offset)
        self.encoder = nn.Encoder(enc_cfg, dtype=dtype)
        rng = np.random.default_rng([enc_cfg.seed, 1])
        self.head = nn.Linear(2 * enc_cfg.embedding_dim, 1, rng, name="head", dtype=dtype)

    def named_parameters(self):
        return self.encoder.named_parameters() + self.head.named_parameters()

    def forward(self, p1, p2):
        """Return (e1, e2, z, q) tensors for a batch of pairs."""
        n = len(p1)
        e = self.encoder(np.concatenate([np.asarray(p1), np.asarray(p2)], axis=0))
        e1, e2 = e[:n], e[n:]
        z = T.reshape(self.head(T.concat([e1, e2], axis=1)), (n,))
        return e1, e2, z, T.sigmoid(z)


def distance_tensor(e1: Tensor, e2: Tensor, eps: float = 1e-12) -> Tensor:
    """Differentiable ||e1 - e2|| per row (eps keeps the sqrt smooth at 0)."""
    d = e1 - e2
    return T.sqrt(T.tsum(d * d, axis=1) + eps)


@dataclass
class PairOutputs:
    e1: np.ndarray
    e2: np.ndarray
    D: np.ndarray
    z: np.ndarray
    q: np.ndarray


def pair_forward(net: SiameseNet, p1, p2, batch: int = 512) -> PairOutputs:
    """Inference pass: embeddings, exact Euclidean distance, logit and q."""
    outs = []
    with nn.no_grad():
        for i in range(0, len(p1), batch):
            e1, e2, z, q = net.forward(p1[i : i + batch], p2[i : i + batch])
            outs.append((e1.data, e2.data, z.data, q.data))
    if not outs:
        empty = np.zeros(0)
        return PairOutputs(empty.reshape(0, 0), empty.reshape(0, 0), empty, empty, empty)
    e1, e2, z, q = (np.concatenate(parts) for parts in zip(*outs))
    D = np.sqrt(((e1.astype(np.float64) - e2) ** 2).sum(axis=1))
    return PairOutputs(e1, e2, D, z, q)


# ---------------------------------------------------------------------------
# losses


def soft_bce_loss(P, q):
    """-[(1 - P) log q + P log(1 - q)] with q clamped to [1e-7, 1 - 1e-7].

    Works elementwise on floats or arrays.
    """
    qc = np.clip(np.asarray(q, dtype=np.float64), Q_CLAMP, 1.0 - Q_CLAMP)
    P = np.asarray(P, dtype=np.float64)
    out = -((1.0 - P) * np.log(qc) + P * np.log(1.0 - qc))
    return float(out) if out.ndim == 0 else out


def soft_bce_tensor(P: np.ndarray, q: Tensor) -> Tensor:
    """Batch mean of the soft BCE; ``P`` is a constant (no gradient)."""
    p = np.asarray(P).astype(q.dtype)
    qc = T.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)
    per = T.log(qc) * (1.0 - p) + T.log(1.0 - qc) * p
    return -T.tmean(per)


def cross_losses(P1, P2, q1, q2):
    """Each network is scored against the other's labels.

    Returns (L1, L2, L) with L1 = bce(P2, q1), L2 = bce(P1, q2), L = mean.
    """
    L1 = soft_bce_loss(P2, q1)
    L2 = soft_bce_loss(P1, q2)
    return L1, L2, (L1 + L2) / 2.0


# ---------------------------------------------------------------------------
# state


def _net_seed(config: TrainConfig, k: int) -> int:
    """Initialization offset for network k, distinct per run seed."""
    return int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0])


@dataclass
class CoTrainState:
    config: TrainConfig
    nets: list[SiameseNet]
    opts: list[nn.OptState]
    gmms: list[GmmParams | None]
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)
    best_val: float = -math.inf
    best_epoch: int = 0
    soft_labels: list[np.ndarray | None] = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig, dtype=np.float32) -> "CoTrainState":
        n = 1 if config.single_network else 2
        nets = [SiameseNet(config.encoder, seed_offset=_net_seed(config, k), dtype=dtype) for k in range(n)]
        opts = [nn.lars_state(config.learning_rate, config.weight_decay, config.momentum) for _ in nets]
        return cls(config, nets, opts, [None] * n, soft_labels=[None] * n)

    @property
    def net1(self) -> SiameseNet:
        return self.nets[0]

    @property
    def net2(self) -> SiameseNet:
        return self.nets[-1]

    def groups(self, k: int):
        return self.nets[k].param_groups(prefix=f"net{k + 1}.")

    # -- persistence --------------------------------------------------------

    def to_checkpoint(self) -> tuple[dict, list[tuple[str, np.ndarray]]]:
        arrays = []
        for k, net in enumerate(self.nets):
            arrays.extend((f"net{k + 1}/{name}", p.data) for name, p in net.named_parameters())
        for k, opt in enumerate(self.opts):
            for buf_name in sorted(opt.buffers):
                arrays.extend((f"opt{k + 1}/{buf_name}/{i}", b) for i, b in enumerate(opt.buffers[buf_name]))
        meta = {
            "kind": "cotrain",
            "state_version": STATE_VERSION,
            "train_config": self.config.to_dict(),
            "epoch": self.epoch,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_epoch": self.best_epoch,
            "gmms": [g.to_dict() if g is not None else None for g in self.gmms],
            "optimizers": [o.meta() for o in self.opts],
            "history": self.history,
        }
        return meta, arrays

    @classmethod
    def from_checkpoint(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "CoTrainState":
        if meta.get("kind") != "cotrain" or meta.get("state_version") != STATE_VERSION:
            raise DataError("checkpoint does not hold a co-training state of a supported version")
        config = TrainConfig.from_dict(meta["train_config"])
        state = cls.create(config)
        for k, net in enumerate(state.nets):
            net.load_arrays([arrays[f"net{k + 1}/{name}"] for name, _ in net.named_parameters()])
        for k, (opt, om) in enumerate(zip(state.opts, meta["optimizers"])):
            opt.step_count = om["step_count"]
            for buf_name in om["buffer_names"]:
                n_params = len(state.nets[k].parameters())
                opt.buffers[buf_name] = [arrays[f"opt{k + 1}/{buf_name}/{i}"].copy() for i in range(n_params)]
        state.gmms = [GmmParams.from_dict(g) if g is not None else None for g in meta["gmms"]]
        state.epoch = meta["epoch"]
        state.history = meta["history"]
        state.best_val = meta["best_val"] if meta["best_val"] is not None else -math.inf
        state.best_epoch = meta["best_epoch"]
        return state

    def save(self, path, extra: dict | None = None) -> None:
        meta, arrays = self.to_checkpoint()
        if extra:
            meta.update(extra)
        nn.save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "CoTrainState":
        meta, arrays = nn.load_checkpoint(path)
        return cls.from_checkpoint(meta, arrays)


# ---------------------------------------------------------------------------
# soft labels and scoring


def refit_soft_labels(state: CoTrainState, train: PairArrays) -> None:
    """Refit each network's mixture on its frozen-encoder training outputs
    and cache the resulting per-pair soft labels."""
    cfg = state.config
    for k, net in enumerate(state.nets):
        out = pair_forward(net, train.p1, train.p2)
        if cfg.soft_label_source == "distance":
            gmm = fit_gmm(out.D)
            P = posterior_abnormal(gmm, out.D)
        else:
            gmm = fit_gmm(out.z.astype(np.float64))
            P = altloss.logit_soft_label(gmm, out.z.astype(np.float64))
        state.gmms[k] = gmm
        state.soft_labels[k] = np.asarray(P, dtype=np.float64)


def pair_scores(state: CoTrainState, pairs: PairArrays, score: str | None = None) -> np.ndarray:
    """Abnormality score per pair: 1 - mean q, or mean P under the current
    mixtures."""
    score = score or state.config.score
    outs = [pair_forward(net, pairs.p1, pairs.p2) for net in state.nets]
    if score == "q":
        return 1.0 - np.mean([o.q.astype(np.float64) for o in outs], axis=0)
    if any(g is None for g in state.gmms):
        raise ConfigError("P-based scores need fitted mixtures")
    Ps = []
    for g, o in zip(state.gmms, outs):
        if state.config.soft_label_source == "distance":
            Ps.append(posterior_abnormal(g, o.D))
        else:
            Ps.append(altloss.logit_soft_label(g, o.z.astype(np.float64)))
    return np.mean(Ps, axis=0)


def validation_auc(state: CoTrainState, val: PairArrays) -> float:
    return average_auc_over_cutoffs(pair_scores(state, val), val.A).average_auc


# ---------------------------------------------------------------------------
# training


def _net_loss(state: CoTrainState, k: int, P: np.ndarray, p1, p2, rng) -> Tensor:
    cfg = state.config
    net = state.nets[k]
    if cfg.loss == "cross-bce":
        _, _, _, q = net.forward(p1, p2)
        return soft_bce_tensor(P, q)
    if cfg.loss == "triplet":
        e1, e2, _, _ = net.forward(p1, p2)
        return altloss.soft_triplet_loss_tensor(P, distance_tensor(e1, e2), cfg.triplet_margin)
    views = [altloss.augment(np.asarray(p), rng) for p in (p1, p1, p2, p2)]
    n = len(p1)
    e = net.encoder(np.concatenate(views, axis=0))
    return altloss.ssl_mix_loss_tensor(P, e[:n], e[n:2 * n], e[2 * n:3 * n], e[3 * n:])


def train_epoch(state: CoTrainState, train: PairArrays) -> tuple[float, float]:
    """One epoch of minibatch updates; returns mean loss per network."""
    cfg = state.config
    epoch = state.epoch + 1
    n_nets = len(state.nets)
    refit_soft_labels(state, train)
    if epoch <= cfg.warmup_epochs:
        # random-encoder distances carry no signal yet
        labels = [np.full(len(train), 0.5)] * n_nets
    else:
        # cross-use: net k learns from the other network's labels
        labels = state.soft_labels[::-1] if n_nets == 2 else state.soft_labels
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(train))
    B, mb = cfg.batch_size, cfg.microbatch
    n_batches = len(train) // B
    if n_batches == 0:
        raise DataError(f"{len(train)} training pairs cannot fill one batch of {B}")
    totals = [0.0] * n_nets
    for b in range(n_batches):
        idx = order[b * B : (b + 1) * B]
        chunks = [idx[i : i + mb] for i in range(0, B, mb)]
        for k in range(n_nets):
            P = labels[k]
            aug_rng = np.random.default_rng([cfg.seed, epoch, b, k])

            def loss_fn(chunk, k=k, P=P, aug_rng=aug_rng):
                return _net_loss(state, k, P[chunk], train.p1[chunk], train.p2[chunk], aug_rng)

            try:
                loss = nn.accumulate_gradients(loss_fn, chunks, B)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}, net {k + 1}: {exc}") from exc
            nn.step(state.opts[k], state.groups(k))
            totals[k] += loss
    means = [t / n_batches for t in totals]
    if n_nets == 1:
        means = means * 2
    return means[0], means[1]


def metrics_row(state: CoTrainState, loss1: float, loss2: float, val_auc: float) -> dict:
    def gm(k, attr):
        g = state.gmms[min(k, len(state.gmms) - 1)]
        return getattr(g, attr) if g is not None else float("nan")

    return {
        "epoch": state.epoch,
        "loss1": loss1,
        "loss2": loss2,
        "loss": (loss1 + loss2) / 2.0,
        "val_avg_auc": val_auc,
        "gmm1_mean_low": gm(0, "mean_low"),
        "gmm1_mean_high": gm(0, "mean_high"),
        "gmm2_mean_low": gm(1, "mean_low"),
        "gmm2_mean_high": gm(1, "mean_high"),
    }


def metrics_csv(history: list[dict], provenance: dict | None = None) -> str:
    """Metrics table; a provenance JSON, when given, leads as a ``#`` line."""
    buf = io.StringIO()
    if provenance:
        buf.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_COLUMNS})
    return buf.getvalue()


def train(state: CoTrainState, train_pairs: PairArrays, val_pairs: PairArrays,
          out_dir=None, provenance: dict | None = None, log=None) -> CoTrainState:
    """Run the remaining epochs of ``state``.

    After every epoch the validation average AUC is logged; the best epoch
    and the latest state are checkpointed under ``out_dir`` when given,
    together with ``metrics.csv``.
    """
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    extra = {"provenance": provenance or {}}
    while state.epoch < cfg.epochs:
        loss1, loss2 = train_epoch(state, train_pairs)
        if not (math.isfinite(loss1) and math.isfinite(loss2)):
            raise NumericError(f"non-finite epoch loss at epoch {state.epoch + 1}")
        state.epoch += 1
        val_auc = validation_auc(state, val_pairs)
        state.history.append(metrics_row(state, loss1, loss2, val_auc))
        improved = math.isfinite(val_auc) and val_auc > state.best_val
        if improved:
            state.best_val, state.best_epoch = val_auc, state.epoch
        if log is not None:
            log(f"epoch {state.epoch:3d}  loss {(loss1 + loss2) / 2:.4f}  val_avg_auc {val_auc:.4f}"
                + ("  *" if improved else ""))
        if out is not None:
            if improved:
                state.save(out / "best.ckpt", extra)
            state.save(out / "last.ckpt", extra)
            (out / "metrics.csv").write_text(metrics_csv(state.history, provenance))
    return state


def summary(state: CoTrainState) -> dict:
    return {
        "best_epoch": state.best_epoch,
        "best_val_avg_auc": state.best_val if math.isfinite(state.best_val) else None,
        "final_val_avg_auc": state.history[-1]["val_avg_auc"] if state.history else None,
        "epochs": state.epoch,
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True)
