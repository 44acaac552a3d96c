"""MAP training: summed cross-entropy + L2 under Adam with a halving schedule."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError, TrainingDivergenceError
from .model import ArchDescriptor, ModelParams, forward, init_params, predictive_entropy, value_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_halving_period_epochs: int = 10
    l2_coeff: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if self.l2_coeff < 0:
            raise ConfigurationError("l2_coeff must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_halving_period_epochs < 1:
            raise ConfigurationError("epochs, batch_size and halving period must be >= 1")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period_epochs)


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.m = np.zeros(n, dtype)
        self.v = np.zeros(n, dtype)
        self.t = 0
        self.b1, self.b2, self.eps = beta1, beta2, eps

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return (theta - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype)


def evaluate_accuracy(params: ModelParams, X, y, batch_size=512):
    correct = 0
    ent = 0.0
    for i in range(0, len(X), batch_size):
        p = forward(params, X[i : i + batch_size])
        correct += int((np.argmax(p, -1) == y[i : i + batch_size]).sum())
        ent += float(predictive_entropy(p).sum())
    n = max(len(X), 1)
    return correct / n, ent / n


def train(arch: ArchDescriptor, train_data, val_data, cfg: TrainConfig, init: ModelParams | None = None):
    """Returns ``(params, log)`` where params has the best validation accuracy.

    ``train_data`` and ``val_data`` are ``(X, y)`` pairs. Batch order comes
    from ``cfg.seed`` only, so reruns are bit-identical.
    """
    dtype = np.dtype(cfg.dtype)
    X, y = train_data
    Xv, yv = val_data
    if len(X) == 0:
        raise ConfigurationError("empty training split")
    X = np.asarray(X, dtype)
    Xv = np.asarray(Xv, dtype)
    params = init if init is not None else init_params(arch, cfg.seed, dtype)
    theta = params.theta.astype(dtype)
    buffers = params.buffers.astype(dtype).copy()
    opt = Adam(len(theta), cfg.beta1, cfg.beta2, cfg.adam_eps, dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    best_score, params, best_epoch = -1.0, None, -1
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(X), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            cur = ModelParams(theta, arch, buffers)
            try:
                loss, grad = value_and_grad(cur, X[idx], y[idx], cfg.l2_coeff, train=True, buffers=buffers)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"epoch {epoch} batch {i // cfg.batch_size}: {exc}") from None
            total += loss
            theta = opt.step(theta, grad, lr)
        snap = ModelParams(theta.copy(), arch, buffers.copy())
        train_acc, _ = evaluate_accuracy(snap, X, y)
        val_acc, val_ent = evaluate_accuracy(snap, Xv, yv) if len(Xv) else (float("nan"), float("nan"))
        rec = {
            "epoch": epoch, "lr": lr, "loss": total / len(X), "train_acc": train_acc,
            "val_acc": val_acc, "val_entropy": val_ent,
        }
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.4f train %.4f val %.4f (%.1fs)", epoch, lr, rec["loss"], train_acc,
                 val_acc, time.perf_counter() - t0)
        score = val_acc if len(Xv) else train_acc
        if score > best_score:
            best_score, params, best_epoch = score, snap, epoch
    # wall-clock stays out of the log so checkpoints are reproducible
    return params, {"config": asdict(cfg), "best_epoch": best_epoch, "epochs": history}
