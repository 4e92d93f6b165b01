"""Mini-batch SGD with momentum, weight decay and a step learning-rate schedule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .model import Batch, ModelConfig, ModelParams, combined_loss, is_decay_exempt


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.01
    lr_drop_start: int = 7000
    lr_drop_period: int = 10000
    lr_drop_factor: float = 10.0
    max_iters: int = 30000
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.lr_drop_period < 1 or self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_period and lr_drop_factor must be positive")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({name: np.zeros_like(t) for name, t in params.tensors().items()})


@dataclass
class StepRecord:
    iteration: int
    lr: float
    loss: float
    fused_loss: float
    visual_loss: float
    text_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[StepRecord] = field(default_factory=list)


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < config.lr_drop_start:
        return config.base_lr
    drops = 1 + (iteration - config.lr_drop_start) // config.lr_drop_period
    return config.base_lr / config.lr_drop_factor ** drops


def sgd_step(params: ModelParams, grads, state: OptimizerState, lr: float, config: TrainConfig) -> ModelParams:
    """v <- momentum*v - lr*(g + decay*p); p <- p + v. Updates ``params`` in place."""
    for name, p in params.tensors().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = state.velocity[name]
        decay = 0.0 if is_decay_exempt(name) else config.weight_decay
        if decay:
            g = g + decay * p
        v *= config.momentum
        v -= lr * g
        p += v
    state.iteration += 1
    return params


def index_stream(n: int, seed: int) -> Iterator[int]:
    """Endless sample indices: a fresh seeded permutation per epoch."""
    if n < 1:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    while True:
        yield from rng.permutation(n).tolist()


def train(model_config: ModelConfig, train_config: TrainConfig, data: Batch,
          params: ModelParams | None = None) -> TrainResult:
    """Run ``max_iters`` SGD steps over ``data`` (the encoded training split)."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = params if params is not None else ModelParams.init(model_config)
    state = OptimizerState.zeros_like(params)
    stream = index_stream(len(data), train_config.seed)
    history = []
    for it in range(train_config.max_iters):
        idx = [next(stream) for _ in range(train_config.batch_size)]
        res = combined_loss(params, data.take(idx))
        if not math.isfinite(res.total):
            raise FloatingPointError(f"loss became non-finite at iteration {it}")
        lr = lr_at(it, train_config)
        history.append(StepRecord(it, lr, res.total, *res.head_losses))
        sgd_step(params, res.grads, state, lr, train_config)
    return TrainResult(params, history)


def history_csv(history: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "lr", "L", "L1", "L2", "L3"])
    for r in history:
        w.writerow([r.iteration, repr(r.lr), repr(r.loss), repr(r.fused_loss), repr(r.visual_loss), repr(r.text_loss)])
    return buf.getvalue()
