"""SGD with momentum, plateau learning-rate decay, and the epoch loop."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackConfig
from .errors import ConfigError, NumericError
from .nn import Parameter
from .tensor import add, no_grad


class SGD:
    """p <- p - lr * v, with v <- momentum * v + grad (v = grad when momentum is 0).

    Entries under a parameter's ``frozen_mask`` are never touched.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name or tuple(p.shape)}")
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if p.frozen_mask is not None:
                g = np.where(p.frozen_mask, 0.0, g)
            if self.momentum:
                buf = self.buffers[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[i] = buf
                g = buf
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    relative improvement above ``threshold``; never below ``min_lr``."""

    optimizer: SGD
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = field(default=np.inf, init=False)
    bad_epochs: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def step(self, metric: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.optimizer.lr


# -- loops ---------------------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train_step(model, batch, optimizer: SGD, weight_decay: float = 0.0) -> dict:
    """One clean step on the multitask loss (plus the norm penalty when ``weight_decay`` > 0)."""
    from .network import tmtl_loss
    from .robust import regularizer
    xs, ys = batch
    model.train()
    model.resample("I")
    model.zero_grad()
    fused, per_mod = model.forward_all(xs)
    loss = tmtl_loss(per_mod, ys, model.config.lam_matrix)
    reg = regularizer(model, weight_decay)
    total = loss if reg is None else add(loss, reg)
    total.backward()
    optimizer.step()
    correct = np.ones(len(ys[0]), dtype=bool)
    for z, y in zip(fused, ys):
        correct &= z.data.argmax(axis=1) == np.asarray(y)
    return {"loss": float(loss.data), "acc": float(correct.mean()), "n": len(correct)}


def _inference(model):
    return model.inference() if hasattr(model, "inference") else contextlib.nullcontext()


def evaluate(model, xs, ys, batch_size: int = 100) -> dict:
    """Loss, all-task accuracy and fused logits in eval mode."""
    from .network import tmtl_loss
    model.eval()
    n = len(np.asarray(ys[0]))
    total, logits = 0.0, []
    with no_grad(), _inference(model):
        for s in range(0, n, batch_size):
            xb = [np.asarray(x)[s:s + batch_size] for x in xs]
            yb = [np.asarray(y)[s:s + batch_size] for y in ys]
            fused, per_mod = model.forward_all(xb)
            total += float(tmtl_loss(per_mod, yb, model.config.lam_matrix).data) * len(yb[0])
            logits.append([z.data for z in fused])
    fused = [np.concatenate([c[t] for c in logits]) for t in range(len(logits[0]))]
    ok = np.ones(n, dtype=bool)
    for z, y in zip(fused, ys):
        ok &= z.argmax(axis=1) == np.asarray(y)
    return {"loss": total / n, "acc": float(ok.mean()), "logits": fused}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    weight_decay: float = 0.0
    attack: AttackConfig | None = None


def format_log(rec: dict) -> str:
    return (f"epoch={rec['epoch']} train_loss={rec['train_loss']:.6f} val_loss={rec['val_loss']:.6f} "
            f"val_acc={rec['val_acc']:.6f} lr={rec['lr']:.6g}")


def fit(model, train, val, cfg: TrainConfig, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; adversarial when ``cfg.attack`` is set.

    ``train`` and ``val`` are ``(xs, ys)`` pairs of per-modality arrays and
    per-task labels.  Batch order and attack starts come from ``cfg.seed``.
    Returns one record per epoch.
    """
    from .robust import adversarial_train_step
    xs, ys = train
    n = len(np.asarray(ys[0]))
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    sched = PlateauScheduler(opt, cfg.factor, cfg.patience, cfg.threshold, cfg.min_lr)
    shuffle_seed, attack_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(shuffle_seed)
    attack_rng = np.random.default_rng(attack_seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        tot, cnt = 0.0, 0
        for idx in _batches(n, cfg.batch_size, order_rng):
            batch = ([np.asarray(x)[idx] for x in xs], [np.asarray(y)[idx] for y in ys])
            if cfg.attack is not None:
                stats = adversarial_train_step(model, batch, getattr(model, "robust_config", None), cfg.attack,
                                               opt, attack_rng, weight_decay=cfg.weight_decay)
            else:
                stats = train_step(model, batch, opt, cfg.weight_decay)
            tot += stats["loss"] * stats["n"]
            cnt += stats["n"]
        ev = evaluate(model, *val)
        lr = sched.step(ev["loss"])
        rec = {"epoch": epoch, "train_loss": tot / cnt, "val_loss": ev["loss"], "val_acc": ev["acc"], "lr": lr}
        history.append(rec)
        if log is not None:
            log(format_log(rec))
    return history
