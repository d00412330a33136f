"""White-box L-infinity attacks: FGSM, BIM, PGD and momentum (MIM)."""

from __future__ import annotations

import contextlib
import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, NumericError
from .tensor import Tensor, no_grad, stack_sum

FAMILIES = ("fgsm", "bim", "pgd", "mim")
SWEEP_COLUMNS = ("attack", "epsilon", "iters", "clean_acc", "robust_acc", "seed")


@dataclass(frozen=True)
class AttackConfig:
    """``step`` and ``iters`` are ignored by fgsm (one step of size epsilon).

    ``random_init`` defaults to True for pgd only.  With ``keep_fooled`` a
    sample keeps the first iterate that was misclassified and drops out of
    later iterations, so a longer run can never recover a sample that a
    shorter run with the same seed broke.  Only use it with models whose
    per-sample outputs do not depend on the rest of the batch (eval mode).
    """

    family: str = "pgd"
    epsilon: float = 4 / 255
    step: float = 10 / 255
    iters: int = 10
    random_init: bool | None = None
    momentum: float = 1.0
    clamp: tuple[float, float] = (0.0, 1.0)
    keep_fooled: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"attack family must be one of {FAMILIES}, got {self.family!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters < 1:
            raise ConfigError(f"iters must be >= 1, got {self.iters}")
        if self.step <= 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if self.clamp[0] > self.clamp[1]:
            raise ConfigError(f"clamp range {self.clamp} is empty")

    @property
    def uses_random_init(self) -> bool:
        return self.family == "pgd" if self.random_init is None else bool(self.random_init)

    @property
    def schedule(self) -> tuple[int, float]:
        """(iterations, step size) actually taken."""
        if self.family == "fgsm":
            return 1, self.epsilon
        return self.iters, self.step


def _objective(model, xs: list[Tensor], ys) -> tuple[Tensor, list[np.ndarray]]:
    """Loss to ascend and the fused per-task logits used to detect success."""
    if hasattr(model, "forward_all"):
        from .network import tmtl_loss
        fused, per_mod = model.forward_all(xs)
        return tmtl_loss(per_mod, ys, model.config.lam_matrix), [z.data for z in fused]
    logits = model(xs)
    loss = stack_sum([F.cross_entropy(z, y) for z, y in zip(logits, ys)])
    return loss, [z.data for z in logits]


def _project(x: np.ndarray, x0: np.ndarray, eps: float, lo: float, hi: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - eps, x0 + eps), lo, hi)


def attack(model, xs: Sequence, ys: Sequence, cfg: AttackConfig,
           rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Return adversarial inputs inside the epsilon ball around ``xs`` and the clamp range.

    ``model`` is either a network with ``forward_all`` (the multitask loss is
    ascended) or a callable mapping a list of input tensors to a list of
    per-task logits.  ``ys`` holds one label array per task.  Parameters get no
    gradient and batch-norm buffers are left untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = cfg.clamp
    eps = float(cfg.epsilon)
    x0 = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in xs]
    if eps == 0.0:
        return [x.copy() for x in x0]
    iters, step = cfg.schedule
    if cfg.uses_random_init:
        cur = [_project(x + rng.uniform(-eps, eps, size=x.shape), x, eps, lo, hi) for x in x0]
    else:
        cur = [np.clip(x, lo, hi) for x in x0]
    mom = [np.zeros_like(x) for x in x0]
    batch = x0[0].shape[0]
    done = np.zeros(batch, dtype=bool)

    frozen = model.frozen() if hasattr(model, "frozen") else _null()
    stats = model.stats_frozen() if hasattr(model, "stats_frozen") else _null()
    with frozen, stats:
        for it in range(iters):
            active = np.flatnonzero(~done)
            if active.size == 0:
                break
            sub = active if cfg.keep_fooled and active.size < batch else slice(None)
            xt = [Tensor(x[sub], requires_grad=True) for x in cur]
            yt = [np.asarray(y)[sub] for y in ys]
            loss, logits = _objective(model, xt, yt)
            if cfg.keep_fooled:
                wrong = np.zeros(len(yt[0]), dtype=bool)
                for z, y in zip(logits, yt):
                    wrong |= z.argmax(axis=1) != y
                fooled = active[wrong]
                done[fooled] = True
                if wrong.all():
                    break
            loss.backward()
            for i, t in enumerate(xt):
                g = t.grad if t.grad is not None else np.zeros(t.shape)
                bad = ~np.isfinite(g)
                if bad.any():
                    raise NumericError(
                        f"{cfg.family} iteration {it + 1}: input gradient of modality {i + 1} has "
                        f"{int(bad.sum())} non-finite entries (loss={float(loss.data)!r})")
                if cfg.family == "mim":
                    norm = np.abs(g).reshape(g.shape[0], -1).mean(axis=1)
                    norm = np.where(norm > 0, norm, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
                    mom[i][sub] = cfg.momentum * mom[i][sub] + g / norm
                    direction = mom[i][sub]
                else:
                    direction = g
                step_to = _project(cur[i][sub] + step * np.sign(direction), x0[i][sub], eps, lo, hi)
                if cfg.keep_fooled:
                    keep = np.isin(active, fooled) if not isinstance(sub, slice) else done
                    step_to[keep] = cur[i][sub][keep]
                cur[i][sub] = step_to
    return cur


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def predict(model, xs, batch_size: int = 100) -> list[np.ndarray]:
    """Fused per-task logits, evaluated without building a tape."""
    n = np.asarray(xs[0]).shape[0]
    chunks: list[list[np.ndarray]] = []
    with no_grad():
        for s in range(0, n, batch_size):
            out = model([np.asarray(x)[s:s + batch_size] for x in xs])
            chunks.append([z.data for z in out])
    return [np.concatenate([c[t] for c in chunks]) for t in range(len(chunks[0]))]


def accuracy(model, xs, ys, batch_size: int = 100) -> float:
    """Fraction of samples whose every task is predicted correctly."""
    logits = predict(model, xs, batch_size)
    ok = np.ones(len(np.asarray(ys[0])), dtype=bool)
    for z, y in zip(logits, ys):
        ok &= z.argmax(axis=1) == np.asarray(y)
    return float(ok.mean())


def robust_accuracy(model, xs, ys, cfg: AttackConfig, seed: int, batch_size: int = 100) -> float:
    """All-task accuracy on adversarial inputs, attacking batch by batch with a seeded generator.

    Modules are put in eval mode; plain callables are used as they are.  Models with stochastic inference draw
    attack-phase filters before each batch's attack and inference-phase
    filters before scoring it; with it off the installed filters stay and
    noise is bypassed.
    """
    rng = np.random.default_rng(seed)
    robust = getattr(model, "is_robust", False) and model.robust_config.stochastic_inference
    if hasattr(model, "eval"):
        model.eval()
    n = np.asarray(xs[0]).shape[0]
    correct = 0
    ctx = model.inference() if hasattr(model, "inference") else contextlib.nullcontext()
    with ctx:
        for s in range(0, n, batch_size):
            xb = [np.asarray(x)[s:s + batch_size] for x in xs]
            yb = [np.asarray(y)[s:s + batch_size] for y in ys]
            if robust:
                model.resample("A")
            adv = attack(model, xb, yb, cfg, rng)
            if robust:
                model.resample("I")
            logits = predict(model, adv, batch_size)
            ok = np.ones(len(yb[0]), dtype=bool)
            for z, y in zip(logits, yb):
                ok &= z.argmax(axis=1) == y
            correct += int(ok.sum())
    return correct / n


def sweep_csv(rows: Sequence[dict]) -> str:
    """Render attack sweep rows with the fixed column order."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k in ("epsilon", "clean_acc", "robust_acc") else r[k])
                    for k in SWEEP_COLUMNS})
    return buf.getvalue()
