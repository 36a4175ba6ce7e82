"""LARS momentum SGD and Adam over :class:`ParamGroup` lists, plus
gradient accumulation across equally sized microbatches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NumericError
from .layers import ParamGroup
from .tensor import Tensor

LARS_EPS = 1e-9


@dataclass
class OptState:
    kind: str  # "lars" or "adam"
    base_lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "buffer_names": sorted(self.buffers),
        }


def lars_state(base_lr: float, weight_decay: float = 1e-6, momentum: float = 0.9) -> OptState:
    return OptState("lars", base_lr, weight_decay=weight_decay, momentum=momentum)


def adam_state(base_lr: float, weight_decay: float = 1e-5, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    return OptState("adam", base_lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)


def _flat(groups: Sequence[ParamGroup]) -> list[tuple[Tensor, bool]]:
    return [(t, g.lars_excluded) for g in groups for t in g.tensors]


def _buffers(opt: OptState, name: str, params: list[tuple[Tensor, bool]]) -> list[np.ndarray]:
    bufs = opt.buffers.get(name)
    if bufs is None:
        bufs = opt.buffers[name] = [np.zeros_like(t.data) for t, _ in params]
    elif len(bufs) != len(params) or any(b.shape != t.shape for b, (t, _) in zip(bufs, params)):
        raise ConfigError(f"optimizer buffer {name!r} does not match parameter shapes")
    return bufs


def trust_ratio(w: np.ndarray, g: np.ndarray, weight_decay: float) -> float:
    """||w|| / (||g|| + wd*||w|| + eps), or 1 when ||w|| = 0."""
    w_norm = float(np.linalg.norm(w))
    if w_norm == 0.0:
        return 1.0
    g_norm = float(np.linalg.norm(g))
    return w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)


def lars_step(opt: OptState, groups: Sequence[ParamGroup]) -> None:
    """One momentum-SGD step with a per-tensor trust ratio.

    Tensors in ``lars_excluded`` groups use ratio 1 and receive no weight
    decay. Gradients are cleared afterwards.
    """
    params = _flat(groups)
    velocity = _buffers(opt, "momentum", params)
    for (w, excluded), v in zip(params, velocity):
        g = w.grad if w.grad is not None else np.zeros_like(w.data)
        if excluded:
            ratio, d = 1.0, g
        else:
            ratio = trust_ratio(w.data, g, opt.weight_decay)
            d = g + opt.weight_decay * w.data if opt.weight_decay else g
        dtype = w.data.dtype
        v *= dtype.type(opt.momentum)
        v += dtype.type(opt.base_lr * ratio) * d
        w.data = w.data - v
        w.grad = None
    opt.step_count += 1
    _check_params(params)


def adam_step(opt: OptState, groups: Sequence[ParamGroup]) -> None:
    """Bias-corrected Adam; weight decay enters as ``grad += wd * w``."""
    params = _flat(groups)
    m_bufs = _buffers(opt, "m", params)
    v_bufs = _buffers(opt, "v", params)
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for (w, _), m, v in zip(params, m_bufs, v_bufs):
        g = w.grad if w.grad is not None else np.zeros_like(w.data)
        if opt.weight_decay:
            g = g + opt.weight_decay * w.data
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        step = opt.base_lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        w.data = (w.data - step).astype(w.data.dtype, copy=False)
        w.grad = None
    _check_params(params)


def step(opt: OptState, groups: Sequence[ParamGroup]) -> None:
    if opt.kind == "lars":
        lars_step(opt, groups)
    elif opt.kind == "adam":
        adam_step(opt, groups)
    else:
        raise ConfigError(f"unknown optimizer kind {opt.kind!r}")


def _check_params(params) -> None:
    for w, _ in params:
        if not np.all(np.isfinite(w.data)):
            raise NumericError(f"non-finite parameter {w.name!r} after optimizer step")


def _batch_len(batch) -> int:
    if isinstance(batch, dict):
        batch = next(iter(batch.values()))
    elif isinstance(batch, tuple):
        batch = batch[0]
    return len(batch)


def accumulate_gradients(
    loss_fn: Callable[[object], Tensor],
    microbatches: Sequence,
    effective_batch: int,
) -> float:
    """Backpropagate ``loss_fn(mb) / k`` for each of the k microbatches.

    With a mean-reduced ``loss_fn`` the accumulated gradients equal those of
    one pass over the concatenated batch. Returns the summed (scaled) loss.
    """
    k = len(microbatches)
    if k < 1:
        raise ConfigError("need at least one microbatch")
    sizes = {_batch_len(mb) for mb in microbatches}
    if len(sizes) != 1:
        raise ConfigError(f"inconsistent microbatch sizes {sorted(sizes)}")
    size = sizes.pop()
    if size * k != effective_batch:
        raise ConfigError(
            f"effective batch {effective_batch} != {k} microbatches x {size}"
        )
    total = 0.0
    for mb in microbatches:
        loss = loss_fn(mb) * (1.0 / k)
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss during gradient accumulation")
        loss.backward()
        total += float(loss.data)
    return total
