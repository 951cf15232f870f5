"""Training objective, AdamW, warm-up/plateau learning-rate schedule and the epoch loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import TextIO

import numpy as np

from . import tensor as T
from .data import Encoded, Preprocessor, evaluate
from .errors import ConfigError, ContractError, TrainingAbort
from .model import StabModel, forward, predict_bayesian
from .stochastic import GumbelSampler
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr_base: float = 1e-3
    weight_decay: float = 1e-5
    warmup_steps: int | None = None  # None: min(1000, 5% of planned steps)
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    min_delta: float | None = None  # None: 1e-4 absolute (accuracy) / 1e-3 relative (mse)
    max_epochs: int = 100
    batch_size: int = 128
    kl_scale: float | None = None  # None: 1 / |train set|
    early_stop_patience: int = 40
    seed: int = 0
    val_samples: int = 8
    shuffle: bool = True
    grad_clip: float | None = None

    def validate(self) -> "TrainConfig":
        problems = []
        if not 0.0 < self.plateau_factor < 1.0:
            problems.append(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.min_lr <= 0:
            problems.append(f"min_lr must be positive, got {self.min_lr}")
        if self.lr_base <= 0:
            problems.append(f"lr_base must be positive, got {self.lr_base}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            problems.append(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.kl_scale is not None and self.kl_scale < 0:
            problems.append(f"kl_scale must be >= 0, got {self.kl_scale}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.val_samples < 1:
            problems.append("max_epochs must be >= 0, batch_size and val_samples >= 1")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def train_config_from_dict(raw: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown train config key(s): {', '.join('train.' + k for k in unknown)}")
    return TrainConfig(**raw)


def loss(outputs: Tensor, targets, kl_total: Tensor, task: str, beta: float) -> Tensor:
    """Mean cross-entropy (from logits) or mean squared error, plus ``beta * kl_total``."""
    targets = np.asarray(targets)
    if task == "classification":
        if outputs.ndim != 2 or targets.shape != (outputs.shape[0],):
            raise ContractError(f"loss: logits {outputs.shape} vs targets {targets.shape}")
        n_classes = outputs.shape[1]
        if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
            raise ContractError(f"loss: class index out of range [0, {n_classes})")
        onehot = np.zeros(outputs.shape)
        onehot[np.arange(targets.shape[0]), targets.astype(np.int64)] = 1.0
        task_loss = -T.mean(T.sum_(T.log_softmax_lastdim(outputs) * Tensor(onehot), axis=-1))
    elif task == "regression":
        if outputs.shape != targets.shape:
            raise ContractError(f"loss: predictions {outputs.shape} vs targets {targets.shape}")
        diff = outputs - Tensor(targets.astype(np.float64))
        task_loss = T.mean(diff * diff)
    else:
        raise ContractError(f"loss: unknown task {task!r}")
    if beta == 0.0:
        return task_loss
    return task_loss + T.scalar_mul(kl_total, beta)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, named_params) -> "OptimizerState":
        named = list(named_params)
        return cls({n: np.zeros(p.shape) for n, p in named}, {n: np.zeros(p.shape) for n, p in named})


def adamw_step(named_params, grads, state: OptimizerState, lr: float, weight_decay: float) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update; parameters are updated in place.

    ``grads`` maps parameter name (or the parameter tensor itself) to its gradient.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    named = list(named_params)
    lookup = {}
    for name, p in named:
        g = grads.get(name)
        if g is None:
            g = grads.get(p)
        if g is None:
            raise ContractError(f"no gradient supplied for parameter {name}")
        lookup[name] = g
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient for parameter {name} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in named:
        g = lookup[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        theta = p.data * (1.0 - lr * weight_decay)
        p.data = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LrSchedule:
    """Linear warm-up from lr_base/100, then halving on validation plateaus."""

    lr_base: float
    warmup_steps: int
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-5
    mode: str = "max"
    min_delta: float = 1e-4
    relative: bool = False
    lr: float = field(init=False)
    best: float | None = field(default=None, init=False)
    bad_epochs: int = field(default=0, init=False)

    def __post_init__(self):
        if self.mode not in ("max", "min"):
            raise ContractError(f"schedule mode must be 'max' or 'min', got {self.mode!r}")
        self.lr = self.lr_base

    def at_step(self, global_step: int) -> float:
        if global_step < self.warmup_steps:
            start = self.lr_base / 100.0
            return start + (self.lr_base - start) * global_step / self.warmup_steps
        return self.lr

    def improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        delta = self.min_delta * abs(self.best) if self.relative else self.min_delta
        if self.mode == "max":
            return metric > self.best + delta
        return metric < self.best - delta

    def observe(self, metric: float, global_step: int) -> float:
        if global_step < self.warmup_steps:
            return self.at_step(global_step)
        if self.improved(metric):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def lr_schedule_step(schedule: LrSchedule, global_step: int, epoch_val_metric: float | None = None) -> float:
    if epoch_val_metric is None:
        return schedule.at_step(global_step)
    return schedule.observe(epoch_val_metric, global_step)


@dataclass
class TrainHistory:
    metric: str
    mode: str
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_metric(self) -> float | None:
        return None if self.best_epoch is None else self.records[self.best_epoch]["val_metric"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def to_dict(self) -> dict:
        return asdict(self)


def validation_metric(model: StabModel, data: Encoded, N: int, seed: int, prep: Preprocessor | None = None) -> float:
    avg = predict_bayesian(model, data.x_num, data.x_cat, N, seed)
    task = model.config.task
    preds = avg.argmax(axis=-1) if task == "classification" else avg
    return evaluate(preds, data.y, task, prep if task == "regression" else None).value


def _clip(grads: dict, max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale


def train(
    model: StabModel,
    train_data: Encoded,
    val_data: Encoded | None,
    cfg: TrainConfig,
    progress: TextIO | None = None,
    prep: Preprocessor | None = None,
) -> tuple[StabModel, TrainHistory]:
    """Mini-batch training with validation-driven plateau halving and early stopping.

    The best-validation parameters are restored before returning. Without
    validation data the mean training loss plays the validation metric.
    """
    cfg.validate()
    task = model.config.task
    use_val = val_data is not None and len(val_data) > 0
    if use_val:
        metric, mode = ("accuracy", "max") if task == "classification" else ("mse", "min")
    else:
        metric, mode = "train_loss", "min"
    history = TrainHistory(metric, mode)
    n = len(train_data)
    if cfg.max_epochs == 0:
        return model, history
    if n == 0:
        raise ContractError("training split is empty")

    bs = cfg.batch_size
    planned = math.ceil(n / bs) * cfg.max_epochs
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else min(1000, int(0.05 * planned))
    if cfg.min_delta is not None:
        min_delta, relative = cfg.min_delta, mode == "min"
    else:
        min_delta, relative = (1e-4, False) if mode == "max" else (1e-3, True)
    sched = LrSchedule(cfg.lr_base, warmup, cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr, mode, min_delta, relative)
    beta = cfg.kl_scale if cfg.kl_scale is not None else 1.0 / n

    named = list(model.named_parameters())
    params = [p for _, p in named]
    opt = OptimizerState.fresh(named)
    shuffler = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    sampler = GumbelSampler(cfg.seed, 0)
    best_state: dict[str, np.ndarray] | None = None
    best_value: float | None = None
    stale = 0
    step = 0
    better = (lambda a, b: a > b) if mode == "max" else (lambda a, b: a < b)

    for epoch in range(cfg.max_epochs):
        order = shuffler.permutation(n) if cfg.shuffle else np.arange(n)
        losses, kls = [], []
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            lr = sched.at_step(step)
            out, kl = forward(model, train_data.x_num[idx], train_data.x_cat[idx], "train", sampler)
            total = loss(out, train_data.y[idx], kl, task, beta)
            value, kl_value = total.item(), kl.item()
            if not math.isfinite(value) or not math.isfinite(beta * kl_value):
                raise TrainingAbort(f"non-finite loss {value!r} at epoch {epoch}, batch {b}")
            grads = T.backward(total, params)
            by_name = {name: grads[p] for name, p in named}
            if cfg.grad_clip:
                _clip(by_name, cfg.grad_clip)
            adamw_step(named, by_name, opt, lr, cfg.weight_decay)
            step += 1
            losses.append(value)
            kls.append(kl_value)
        train_loss = float(np.mean(losses))
        if use_val:
            val = validation_metric(model, val_data, cfg.val_samples, cfg.seed, prep)
        else:
            val = train_loss
        lr_now = sched.observe(val, step)
        history.records.append(
            {"epoch": epoch, "train_loss": train_loss, "val_metric": val, "lr": lr_now, "kl": float(np.mean(kls))}
        )
        if progress is not None:
            progress.write(json.dumps(history.records[-1], sort_keys=True) + "\n")
            progress.flush()
        if best_value is None or better(val, best_value):
            best_value = val
            history.best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in named}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history
