"""AdamW with a one-cycle schedule, and the early-stopped training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Protocol

import numpy as np

from .errors import NumericalError, ValidationError
from .params import ParamStore
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 10
    weight_decay: float = 1e-4
    seed: int = 0
    loss: str = "MSE"
    warmup_frac: float = 0.3
    peak_factor: float = 10.0
    final_div: float = 25.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValidationError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValidationError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.loss != "MSE":
            raise ValidationError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def one_cycle_lr(step: int, total: int, base: float, peak_factor: float = 10.0, warmup_frac: float = 0.3,
                 final_div: float = 25.0) -> float:
    """Linear warmup from ``base`` to ``peak_factor * base``, then cosine decay to ``base / final_div``.

    The peak is hit at exactly one step, ``round(warmup_frac * (total - 1))``.
    """
    if total <= 1:
        return base
    peak = base * peak_factor
    final = base / final_div
    top = max(1, int(round(warmup_frac * (total - 1))))
    if step <= top:
        return base + (peak - base) * step / top
    frac = (step - top) / max(1, total - 1 - top)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class AdamW:
    """Adam with bias correction and decoupled weight decay over trainable tensors."""

    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Trainable(Protocol):
    store: ParamStore

    def loss(self, batch) -> Tensor: ...


def train_cluster(
    model: Trainable,
    make_batches: Callable[[np.random.Generator], Iterable],
    steps_per_epoch: int,
    validate: Callable[[], float],
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ParamStore, list[dict]]:
    """Train ``model`` in place; on return it holds the best-validation weights.

    ``make_batches`` yields one epoch of batches from a seeded generator and
    ``validate`` returns the validation MAE. Training stops after
    ``early_stop_patience`` epochs without a strictly better MAE.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.store.trainable()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    total = cfg.max_epochs * max(1, steps_per_epoch)
    step = 0
    history: list[dict] = []
    best_mae, best_snap, stale = math.inf, model.store.snapshot(), 0
    for epoch in range(cfg.max_epochs):
        losses = []
        lr = cfg.lr
        for b, batch in enumerate(make_batches(rng)):
            lr = one_cycle_lr(step, total, cfg.lr, cfg.peak_factor, cfg.warmup_frac, cfg.final_div)
            opt.zero_grad()
            try:
                loss = model.loss(batch)
            except NumericalError as exc:
                raise NumericalError("training forward failed", epoch=epoch, batch=b, **exc.context) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError("non-finite training loss", epoch=epoch, batch=b, layer="loss")
            backward(loss)
            opt.step(lr)
            losses.append(value)
            step += 1
        val_mae = float(validate())
        if not math.isfinite(val_mae):
            raise NumericalError("non-finite validation MAE", epoch=epoch, batch=-1, layer="output")
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_mae": val_mae, "lr": lr}
        history.append(rec)
        log.info("epoch %d train_loss %.6f val_mae %.6f lr %.2e", epoch, rec["train_loss"], val_mae, lr)
        if on_epoch:
            on_epoch(rec)
        if val_mae < best_mae:
            best_mae, best_snap, stale = val_mae, model.store.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.store.restore(best_snap)
    return model.store, history


def write_history(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
