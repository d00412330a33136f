"""Robust variant: configuration, the stochastic attention layer, the filter and
noise regulariser, and one step of adversarial training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, attack
from .blocks import EMCAM, BlockConfig, ChannelAttention
from .errors import ConfigError
from .nn import Conv2d, Module
from .noise import ManSite, RandomProjection, RobustHooks, StochasticState, modulate, resample_tree
from .tensor import Tensor, add, mul, sqrt, stack_sum, tsum

MODES = ("sample", "degenerate", "off")


@dataclass(frozen=True)
class RobustConfig:
    """Switches for random projection filters and modulated attention noise.

    ``rpf_fraction`` of each multi-scale conv's filters are frozen Gaussian
    draws with std ``sigma`` (default 1/sqrt(fan-in)); ``projection_fraction``
    of the channels entering it pass a random projection first.
    ``weight_decay`` scales the norm penalty on trainable filters and noise
    weights.  ``stochastic_inference`` keeps noise and projections active
    when evaluating; with it off they are bypassed and the installed random
    filters of mixed convs stay fixed, so evaluation is deterministic.
    """

    rpf_fraction: float = 0.5
    projection_fraction: float = 0.5
    projection_kernel: int = 3
    sigma: float | None = None
    weight_decay: float = 5e-4
    man: bool = True
    rpf: bool = True
    man_std: float = 0.1
    mode: str = "sample"
    seed: int = 0
    stochastic_inference: bool = True

    def __post_init__(self):
        for name in ("rpf_fraction", "projection_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"RobustConfig.{name} must lie in [0, 1], got {v}")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError(f"RobustConfig.sigma must be positive, got {self.sigma}")
        if self.weight_decay < 0:
            raise ConfigError(f"RobustConfig.weight_decay must be >= 0, got {self.weight_decay}")
        if self.man_std < 0:
            raise ConfigError(f"RobustConfig.man_std must be >= 0, got {self.man_std}")
        if self.mode not in MODES:
            raise ConfigError(f"RobustConfig.mode must be one of {MODES}, got {self.mode!r}")
        if self.projection_kernel < 1 or self.projection_kernel % 2 == 0:
            raise ConfigError(f"RobustConfig.projection_kernel must be odd, got {self.projection_kernel}")

    @classmethod
    def degenerate(cls, **changes) -> "RobustConfig":
        """Every stochastic element at its identity: no random filters, unit noise."""
        return cls(**{"rpf_fraction": 0.0, "mode": "degenerate", **changes})

    def hooks(self, state: StochasticState) -> RobustHooks:
        return RobustHooks(state, rpf_fraction=self.rpf_fraction, projection_fraction=self.projection_fraction,
                           projection_kernel=self.projection_kernel, sigma=self.sigma,
                           man=self.man, rpf=self.rpf)

    def with_(self, **changes) -> "RobustConfig":
        return replace(self, **changes)


def rpf_summary(model: Module) -> dict:
    """Filter counts of the mixed layers and the number of stochastic blocks."""
    from .blocks import ERLA
    convs = [m for _, m in model.named_modules() if isinstance(m, Conv2d) and m.rpf_filters > 0]
    per_module = {m.path: m.rpf_filters for m in convs}
    cfg = getattr(model, "config", None)
    e = sum(1 for _, m in model.named_modules() if isinstance(m, (ERLA, EMCAM)))
    return {
        "n_total": int(sum(m.c_out for m in convs)),
        "n_random": int(sum(per_module.values())),
        "n_random_per_module": per_module,
        "rpan_layers": e,
        "branches": cfg.m if cfg is not None else 1,
    }


# -- stochastic attention layer ---------------------------------------------------------------

class RPANLayer(Module):
    """Stochastic recalibration of m modality tensors.

    Each input passes a random projection, a noise draw, channel attention and
    the projection again; the fused frequency/spatial attention map is computed
    from those features (with noise at every modulation site) and applied to
    the original inputs.
    """

    def __init__(self, m: int, channels: int, hooks: RobustHooks, cfg: BlockConfig = BlockConfig(),
                 use_dct: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m, self.channels = m, channels
        self.state = hooks.state
        n = int(round(hooks.projection_fraction * channels))
        self.projection = RandomProjection(channels, n, hooks.state, kernel=hooks.projection_kernel,
                                           sigma=hooks.sigma)
        self.site = ManSite(channels, hooks.state)
        self.ca = ChannelAttention(channels, cfg.reduction, rng=rng)
        self.emcam = EMCAM(m, channels, cfg, use_dct=use_dct, rng=rng, robust=hooks)

    def resample(self, rng: np.random.Generator | None = None) -> None:
        resample_tree(self, rng if rng is not None else self.state.rng_rpf)

    def inner(self, x) -> Tensor:
        z = modulate(self.projection(x), self.site)
        return self.projection(self.ca(z))

    def forward(self, xs: Sequence) -> list[Tensor]:
        return self.emcam(xs, source=[self.inner(x) for x in xs])


def rpan_layer(layer: RPANLayer, xs: Sequence) -> list[Tensor]:
    return layer(xs)


# -- regulariser and training step --------------------------------------------------------------

def regularizer(model: Module, weight_decay: float) -> Tensor | None:
    """``weight_decay * (||trainable filters|| + ||noise weights||)`` with L2 norms.

    Frozen random filters are masked out.  Returns ``None`` when the weight is
    zero so the loss graph is unchanged.
    """
    if weight_decay == 0:
        return None
    filt, noise = [], []
    for _, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            w = mod.weight
            if mod.rpf_filters:
                keep = np.ones(w.shape)
                keep[: mod.rpf_filters] = 0.0
                w = mul(w, keep)
            filt.append(tsum(mul(w, w)))
        elif isinstance(mod, ManSite):
            noise.append(tsum(mul(mod.delta, mod.delta)))
    terms = []
    if filt:
        terms.append(sqrt(stack_sum(filt)))
    if noise:
        terms.append(sqrt(stack_sum(noise)))
    if not terms:
        return None
    return mul(stack_sum(terms), float(weight_decay))


def adversarial_train_step(model, batch, robust: RobustConfig | None, attack_cfg: AttackConfig,
                           optimizer, rng: np.random.Generator, weight_decay: float | None = None) -> dict:
    """One min-max step.

    Draws attack-phase filters and noise, builds adversarial inputs against
    that model, redraws inference-phase filters, then takes a gradient step on
    the multitask loss at the adversarial inputs plus the norm penalty.
    ``weight_decay`` overrides the penalty weight of ``robust``.
    """
    from .network import tmtl_loss
    xs, ys = batch
    model.train()
    model.resample("A")
    adv = attack(model, xs, ys, attack_cfg, rng)
    model.resample("I")
    model.zero_grad()
    fused, per_mod = model.forward_all(adv)
    loss = tmtl_loss(per_mod, ys, model.config.lam_matrix)
    if weight_decay is not None:
        decay = weight_decay
    else:
        decay = robust.weight_decay if robust is not None else 0.0
    reg = regularizer(model, decay)
    total = loss if reg is None else add(loss, reg)
    total.backward()
    optimizer.step()
    correct = np.ones(len(ys[0]), dtype=bool)
    for z, y in zip(fused, ys):
        correct &= z.data.argmax(axis=1) == np.asarray(y)
    return {"loss": float(loss.data), "reg": 0.0 if reg is None else float(reg.data),
            "acc": float(correct.mean()), "n": len(correct)}
