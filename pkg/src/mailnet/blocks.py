"""Attention blocks: multi-scale grouped/depthwise conv, channel attention, the
residual attention block, and the frequency/spatial multimodal fusion.

All blocks take an optional :class:`~mailnet.noise.RobustHooks`.  Without it
they are the clean blocks; with it they gain random projection filters and
modulated attention noise sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .noise import RobustHooks, modulate
from .tensor import Tensor, add, index_select, mul, relu, sigmoid, stack_sum, sub


@dataclass(frozen=True)
class BlockConfig:
    """Hyperparameters shared by the attention blocks.

    ``expansion`` widens the multi-scale conv inside the residual attention
    module; the grouped pointwise conv after the channel shuffle restores the
    width.
    """

    expansion: int = 2
    msgdc_groups: int = 2
    gpc_groups: int = 1
    shuffle_groups: int = 2
    reduction: int = 4
    use_ca: bool = True

    def __post_init__(self):
        for name in ("expansion", "msgdc_groups", "gpc_groups", "shuffle_groups", "reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


def _pick(t: Tensor, i: int) -> Tensor:
    return index_select(t, np.array([i]), axis=0)


# -- multi-scale conv ------------------------------------------------------------------------

class MSGDC(Module):
    """Pointwise grouped conv plus 3x3 and 5x5 depthwise convs, summed."""

    def __init__(self, channels: int, expansion: int = 1, groups: int = 1,
                 rng: np.random.Generator | None = None, robust: RobustHooks | None = None):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"msgdc groups={groups} must divide channels={channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        out = channels * expansion
        self.channels, self.out_channels = channels, out
        self.gpc = Conv2d(channels, out, 1, groups=groups, rng=rng)
        self.dw3 = Conv2d(channels, out, 3, groups=channels, rng=rng)
        self.dw5 = Conv2d(channels, out, 5, groups=channels, rng=rng)
        self.projection = robust.projection(channels) if robust is not None else None
        if robust is not None:
            for conv in (self.gpc, self.dw3, self.dw5):
                robust.mix(conv)

    def convs(self) -> tuple[Conv2d, Conv2d, Conv2d]:
        return self.gpc, self.dw3, self.dw5

    def forward(self, x):
        if self.projection is not None:
            x = self.projection(x)
        # both depthwise branches are linear in the kernel, so run them as one 5x5 pass
        kernel = add(self.dw5.effective_weight(), F.pad2d(self.dw3.effective_weight(), 1))
        dw = F.conv2d(x, kernel, padding="same", groups=self.channels)
        self.dw3.record(dw.shape[2:])
        self.dw5.record(dw.shape[2:])
        return add(self.gpc(x), dw)


# -- channel attention ----------------------------------------------------------------------------

def pooled_descriptor(x) -> Tensor:
    """(GMP + GAP + GMN) + (GMP - GAP - GMN), flattened to (B, C)."""
    gmp = F.global_pool(x, "max")
    gap = F.global_pool(x, "avg")
    gmn = F.global_pool(x, "min")
    d = add(stack_sum([gmp, gap, gmn]), sub(sub(gmp, gap), gmn))
    return d.reshape(d.shape[0], d.shape[1])


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int = 4, rng: np.random.Generator | None = None,
                 robust: RobustHooks | None = None):
        super().__init__()
        if reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)
        self.theta_x = Parameter(np.ones(channels))
        self.site = robust.site(channels) if robust is not None else None
        self.last_map: np.ndarray | None = None

    def attention(self, x) -> Tensor:
        z = self.fc2(relu(self.fc1(pooled_descriptor(x))))
        a = sigmoid(modulate(mul(z, self.theta_x), self.site))
        self.last_map = a.data
        return a

    def forward(self, x):
        a = self.attention(x)
        return mul(x, a.reshape(a.shape[0], a.shape[1], 1, 1))


# -- residual attention ------------------------------------------------------------------------------

class EMILA(Module):
    """x + GPC(CA(shuffle(MSGDC(x))))."""

    def __init__(self, channels: int, cfg: BlockConfig = BlockConfig(), rng: np.random.Generator | None = None,
                 robust: RobustHooks | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        wide = channels * cfg.expansion
        if wide % cfg.shuffle_groups:
            raise ConfigError(f"shuffle groups={cfg.shuffle_groups} must divide {wide} channels")
        self.channels = channels
        self.shuffle_groups = cfg.shuffle_groups
        self.msgdc = MSGDC(channels, cfg.expansion, cfg.msgdc_groups, rng=rng, robust=robust)
        self.ca = ChannelAttention(wide, cfg.reduction, rng=rng, robust=robust) if cfg.use_ca else None
        self.gpc = Conv2d(wide, channels, 1, groups=cfg.gpc_groups, rng=rng)

    def inner(self, x) -> Tensor:
        y = F.channel_shuffle(self.msgdc(x), self.shuffle_groups)
        if self.ca is not None:
            y = self.ca(y)
        return self.gpc(y)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"EMILA built for {self.channels} channels, got {x.shape[1]}")
        return add(x, self.inner(x))


class ERLA(Module):
    """ReLU(skip(x) + BN(GPC(EMILA(ReLU(BN(EMILA(x))))))).

    The outer GPC carries the stage stride and channel change; ``skip`` is the
    identity when shapes match, else a strided 1x1 conv with batch norm.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, cfg: BlockConfig = BlockConfig(),
                 rng: np.random.Generator | None = None, robust: RobustHooks | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if c_in % cfg.gpc_groups or c_out % cfg.gpc_groups:
            raise ConfigError(f"gpc groups={cfg.gpc_groups} must divide {c_in} and {c_out}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.emila1 = EMILA(c_in, cfg, rng=rng, robust=robust)
        self.bn1 = BatchNorm2d(c_in)
        self.emila2 = EMILA(c_in, cfg, rng=rng, robust=robust)
        self.gpc = Conv2d(c_in, c_out, 1, stride=stride, groups=cfg.gpc_groups, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if c_in != c_out or stride != 1:
            self.skip_conv = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.skip_bn = BatchNorm2d(c_out)
        else:
            self.skip_conv = self.skip_bn = None

    def skip(self, x):
        if self.skip_conv is None:
            return x
        return self.skip_bn(self.skip_conv(x))

    def forward(self, x):
        y = relu(self.bn1(self.emila1(x)))
        y = self.bn2(self.gpc(self.emila2(y)))
        return relu(add(self.skip(x), y))


class PlainBlock(Module):
    """ResNet basic block at the same widths; the block swapped in when ERLA is ablated."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if c_in != c_out or stride != 1:
            self.skip_conv = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.skip_bn = BatchNorm2d(c_out)
        else:
            self.skip_conv = self.skip_bn = None

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        s = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return relu(add(s, y))


# -- frequency-domain attention ------------------------------------------------------------------------

@dataclass
class FreqComponents:
    lw1: Tensor
    lw2: Tensor
    lw: Tensor
    h1: Tensor
    h2: Tensor
    h3: Tensor
    h: Tensor
    a: Tensor


def mfifa_decompose(x, use_dct: bool = True) -> FreqComponents:
    """Split a feature map into low/high/mean frequency components.

    Global min and average pools give the two low components, their residuals
    and the global max give the high ones.  Pool outputs keep shape
    (B, C, 1, 1) and broadcast.
    """
    if use_dct:
        x = F.dct2d(x)
    lw1 = F.global_pool(x, "min")
    lw2 = F.global_pool(x, "avg")
    lw = add(lw1, lw2)
    h1 = sub(x, lw1)
    h2 = sub(x, lw2)
    h3 = F.global_pool(x, "max")
    h = stack_sum([h1, h2, h3])
    a = sub(h, lw)
    return FreqComponents(lw1, lw2, lw, h1, h2, h3, h, a)


def _check_modalities(xs: Sequence, m: int | None = None) -> None:
    if not xs:
        raise DimensionError("need at least one modality tensor")
    if m is not None and len(xs) != m:
        raise DimensionError(f"expected {m} modality tensors, got {len(xs)}")
    shape = xs[0].shape
    for i, x in enumerate(xs[1:], start=2):
        if x.shape != shape:
            raise DimensionError(f"modality {i} has shape {x.shape}, modality 1 has {shape}")


class MFIFA(Module):
    """Frequency-domain attention map from weighted low/high/mean components of every modality."""

    def __init__(self, m: int, use_dct: bool = True, robust: RobustHooks | None = None, channels: int = 1):
        super().__init__()
        self.m, self.use_dct, self.channels = m, use_dct, channels
        self.alpha = Parameter(np.ones(m))
        self.wp = Parameter(np.ones(m))
        self.gamma = Parameter(np.ones(m))
        self.site = robust.site(channels) if robust is not None else None

    def logits(self, xs: Sequence) -> Tensor:
        _check_modalities(xs, self.m)
        terms = []
        for i, x in enumerate(xs):
            comp = mfifa_decompose(x, self.use_dct)
            terms.append(modulate(mul(_pick(self.alpha, i), comp.lw), self.site))
            terms.append(modulate(mul(_pick(self.wp, i), comp.h), self.site))
            terms.append(modulate(mul(_pick(self.gamma, i), comp.a), self.site))
        return stack_sum(terms)

    def forward(self, xs: Sequence) -> Tensor:
        return sigmoid(self.logits(xs))


# -- spatial-domain attention --------------------------------------------------------------------------

class EMSCA(Module):
    """Cross-modal spatial map from pooled multi-scale features of paired modalities.

    Modality ``i`` pairs with ``m - 1 - i`` (0-based).  Every term is
    nearest-upsampled back to the input resolution before summation; the map
    is returned before the sigmoid.
    """

    def __init__(self, m: int, channels: int, cfg: BlockConfig = BlockConfig(),
                 rng: np.random.Generator | None = None, robust: RobustHooks | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m, self.channels = m, channels
        groups = cfg.msgdc_groups if channels % cfg.msgdc_groups == 0 else 1
        self.msgdc = [MSGDC(channels, 1, groups, rng=rng, robust=robust) for _ in range(m)]
        self.theta = Parameter(np.ones(m))
        self.site = robust.site(channels) if robust is not None else None

    def s(self, x, i: int) -> Tensor:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise DimensionError(f"spatial extent {x.shape[2]}x{x.shape[3]} is below the 2x2 pool window")
        y = self.msgdc[i](x)
        return add(F.local_pool(y, "avg"), F.local_pool(y, "max"))

    def forward(self, xs: Sequence) -> Tensor:
        _check_modalities(xs, self.m)
        size = xs[0].shape[2:]
        s1 = [self.s(x, i) for i, x in enumerate(xs)]
        s2 = [self.s(s, i) for i, s in enumerate(s1)]
        up1 = [F.upsample_nearest(s, size) for s in s1]
        terms = []
        for i in range(self.m):
            j = self.m - 1 - i
            pair = stack_sum([up1[i], up1[j], F.upsample_nearest(s2[i], size)])
            terms.append(modulate(mul(_pick(self.theta, i), pair), self.site))
        return stack_sum(terms)


# -- fusion ------------------------------------------------------------------------------------------------

class EMCAM(Module):
    """Fuse frequency and spatial attention into one map and recalibrate every modality.

    ``fusion="parallel"`` forms sigmoid(theta_f * MFIFA logits + theta_s * EMSCA)
    from the same inputs; ``"cascaded"`` applies the frequency map first and
    computes the spatial map on the recalibrated features.  Both use the same
    parameters.
    """

    def __init__(self, m: int, channels: int, cfg: BlockConfig = BlockConfig(), use_dct: bool = True,
                 use_mfifa: bool = True, use_emsca: bool = True, fusion: str = "parallel",
                 rng: np.random.Generator | None = None, robust: RobustHooks | None = None):
        super().__init__()
        if fusion not in ("parallel", "cascaded"):
            raise ConfigError(f"fusion must be 'parallel' or 'cascaded', got {fusion!r}")
        if not (use_mfifa or use_emsca):
            raise ConfigError("EMCAM needs at least one of MFIFA and EMSCA")
        self.m, self.channels, self.fusion = m, channels, fusion
        self.mfifa = MFIFA(m, use_dct, robust=robust, channels=channels) if use_mfifa else None
        self.emsca = EMSCA(m, channels, cfg, rng=rng, robust=robust) if use_emsca else None
        self.theta_f = Parameter(np.ones(1))
        self.theta_s = Parameter(np.ones(1))
        self.theta_m = Parameter(np.ones((m, channels)))
        self.site = robust.site(channels) if robust is not None else None
        self.last_map: np.ndarray | None = None

    def attention_logits(self, xs: Sequence) -> Tensor:
        terms = []
        if self.mfifa is not None:
            terms.append(mul(self.theta_f, self.mfifa.logits(xs)))
        if self.emsca is not None:
            terms.append(mul(self.theta_s, self.emsca(xs)))
        return modulate(stack_sum(terms), self.site)

    def attention(self, xs: Sequence) -> Tensor:
        a = sigmoid(self.attention_logits(xs))
        self.last_map = a.data
        return a

    def _recalibrate(self, xs, a) -> list[Tensor]:
        out = []
        for i, x in enumerate(xs):
            scale = _pick(self.theta_m, i).reshape(1, self.channels, 1, 1)
            out.append(mul(mul(x, a), scale))
        return out

    def forward(self, xs: Sequence, source: Sequence | None = None) -> list[Tensor]:
        """Recalibrate ``xs``; the attention map is computed from ``source`` (default ``xs``)."""
        _check_modalities(xs, self.m)
        src = xs if source is None else source
        if self.fusion == "parallel" or self.mfifa is None or self.emsca is None:
            return self._recalibrate(xs, self.attention(src))
        a_f = sigmoid(modulate(mul(self.theta_f, self.mfifa.logits(src)), self.site))
        mid = [mul(x, a_f) for x in xs]
        a_s = sigmoid(modulate(mul(self.theta_s, self.emsca(mid)), self.site))
        self.last_map = a_s.data
        return self._recalibrate(mid, a_s)
