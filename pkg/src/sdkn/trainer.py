"""Mean-squared-error training with Adam and step-wise learning-rate halving."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .exceptions import ConfigurationError, NumericalError
from .model import ModelGraph, sdkn_forward


def mse_loss(pred: Tensor, target, lam: float = 0.0, reg: Tensor | None = None) -> Tensor:
    """``(1/B) sum_i ||y_i - f(x_i)||^2 + lam * reg``."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    if lam < 0:
        raise ConfigurationError("regularization weight must be non-negative")
    loss = ad.scale(ad.sum_(ad.square(ad.sub(pred, target))), 1.0 / pred.shape[0])
    if lam > 0:
        if reg is None:
            raise ConfigurationError("lam > 0 requires a regularization term")
        loss = ad.add(loss, ad.scale(reg, lam))
    return loss


def l2_penalty(params: ParamStore) -> Tensor:
    """Squared Euclidean norm of every parameter, taped."""
    total = None
    for name in params.names():
        term = ad.sum_(ad.square(params.var(name)))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, learning_rate: float = 1e-3) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={n: np.zeros_like(v) for n, v in params.items()},
            v={n: np.zeros_like(v) for n, v in params.items()},
        )


def adam_step(params: ParamStore, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    lr = state.learning_rate if lr is None else lr
    for name in params.names():
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in params.names():
        g = params.grad(name)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value = params[name]
        value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()


def lr_at_epoch(base: float, epoch: int, period: int) -> float:
    """Learning rate halved after every ``period`` epochs."""
    if period < 1:
        raise ConfigurationError("halving period must be >= 1")
    return base * 0.5 ** (epoch // period)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 25
    learning_rate: float = 1e-3
    halving_period: int = 5
    regularization: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.halving_period < 1:
            raise ConfigurationError("halving_period must be >= 1")
        if self.epochs < 0 or not self.learning_rate > 0 or self.regularization < 0:
            raise ConfigurationError("epochs, learning_rate and regularization must be valid")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float | None
    wall_seconds: float


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit."""

    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ParamStore, config: TrainConfig) -> "TrainState":
        return cls(AdamState.for_params(params, config.learning_rate),
                   np.random.default_rng(config.seed))


def batch_loss(graph, params, X, Y, lam=0.0) -> Tensor:
    pred = sdkn_forward(graph, params, X)
    reg = l2_penalty(params) if lam > 0 else None
    return mse_loss(pred, Y, lam, reg)


def predict(graph: ModelGraph, params: ParamStore, X, batch_size: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    outs = [sdkn_forward(graph, params, X[i : i + batch_size]).data
            for i in range(0, len(X), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, graph.d_out))


def mean_squared_error(graph, params, X, Y) -> float:
    diff = predict(graph, params, X) - np.asarray(Y, dtype=np.float64)
    return float(np.sum(diff * diff) / len(diff))


def train(graph: ModelGraph, params: ParamStore, X, Y, config: TrainConfig, *,
          val: tuple | None = None, state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train ``params`` in place until ``config.epochs`` epochs are done.

    Each epoch reshuffles with the state's generator, visits mini-batches
    (the short last batch included), and records the sample-weighted mean
    training loss.  Passing a ``state`` from an earlier call resumes it.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ConfigurationError("training set is empty")
    if len(Y) != n:
        raise ConfigurationError(f"{n} inputs but {len(Y)} targets")
    if state is None:
        state = TrainState.fresh(params, config)
    while state.epoch < config.epochs:
        epoch = state.epoch
        lr = lr_at_epoch(config.learning_rate, epoch, config.halving_period)
        start = time.perf_counter()
        order = state.rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            with Tape():
                loss = batch_loss(graph, params, X[idx], Y[idx], config.regularization)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"loss became non-finite at epoch {epoch}, batch {b}")
            ad.backward(loss, params)
            adam_step(params, state.adam, lr)
            total += value * len(idx)
        val_mse = mean_squared_error(graph, params, *val) if val is not None else None
        state.trace.append(EpochRecord(epoch, lr, total / n, val_mse, time.perf_counter() - start))
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state
