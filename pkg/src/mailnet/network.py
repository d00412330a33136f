"""The multi-branch attention network: per-modality stems and residual attention
stages, cross-modal fusion after every stage, and one classifier head per task.
"""

from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import functional as F
from .blocks import EMCAM, ERLA, BlockConfig, PlainBlock
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm2d, Conv2d, Linear, Module, assign_paths
from .noise import RandomProjection, RobustHooks, StochasticState, resample_tree
from .tensor import Tensor, as_tensor, mul, relu, stack_sum

if TYPE_CHECKING:  # pragma: no cover
    from .robust import RobustConfig

BLOCKS = ("erla", "plain")
FUSIONS = ("parallel", "cascaded", "none")


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of the network.

    ``input_size`` is (H, W, C).  ``lam`` is a (tasks, m) matrix of loss
    weights; ``None`` means all ones.  ``stage_strides`` gives each stage's
    entry stride.
    """

    m: int = 2
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    input_size: tuple[int, int, int] = (128, 128, 3)
    tasks: tuple[tuple[str, int], ...] = (("diagnosis", 4),)
    lam: tuple[tuple[float, ...], ...] | None = None
    use_dct: bool = True
    backbone: str = "resnet18-small"
    block: str = "erla"
    use_ca: bool = True
    use_mfifa: bool = True
    use_emsca: bool = True
    fusion: str = "parallel"
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: int = 2
    expansion: int = 2
    msgdc_groups: int = 2
    gpc_groups: int = 1
    shuffle_groups: int = 2
    reduction: int = 4
    init_seed: int = 0
    symmetric_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(self, "tasks", tuple((str(n), int(k)) for n, k in self.tasks))
        if self.lam is not None:
            object.__setattr__(self, "lam", tuple(tuple(float(v) for v in row) for row in self.lam))
        self.validate()

    def _fail(self, name: str, msg: str):
        raise ConfigError(f"NetworkConfig.{name}: {msg}")

    def validate(self) -> None:
        if self.m < 1:
            self._fail("m", f"need at least one modality, got {self.m}")
        n = len(self.stage_channels)
        if n == 0 or any(c < 1 for c in self.stage_channels):
            self._fail("stage_channels", f"need positive widths, got {self.stage_channels}")
        if len(self.depths) != n or any(d < 1 for d in self.depths):
            self._fail("depths", f"need {n} positive depths, got {self.depths}")
        if len(self.stage_strides) != n or any(s < 1 for s in self.stage_strides):
            self._fail("stage_strides", f"need {n} positive strides, got {self.stage_strides}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            self._fail("input_size", f"expected positive (H, W, C), got {self.input_size}")
        if not self.tasks:
            self._fail("tasks", "need at least one task")
        for name, k in self.tasks:
            if k < 2:
                self._fail("tasks", f"task {name!r} has {k} classes, need >= 2")
        if self.lam is not None:
            if len(self.lam) != len(self.tasks) or any(len(r) != self.m for r in self.lam):
                self._fail("lam", f"expected a {len(self.tasks)}x{self.m} matrix")
            if any(v < 0 for r in self.lam for v in r):
                self._fail("lam", "loss weights must be >= 0")
        if self.backbone != "resnet18-small":
            self._fail("backbone", f"only 'resnet18-small' is provided, got {self.backbone!r}")
        if self.block not in BLOCKS:
            self._fail("block", f"expected one of {BLOCKS}, got {self.block!r}")
        if self.fusion not in FUSIONS:
            self._fail("fusion", f"expected one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion != "none" and not (self.use_mfifa or self.use_emsca):
            self._fail("fusion", "fusion needs use_mfifa or use_emsca")
        for name in ("stem_kernel", "stem_stride", "expansion", "msgdc_groups", "gpc_groups",
                     "shuffle_groups", "reduction"):
            if getattr(self, name) < 1:
                self._fail(name, f"must be >= 1, got {getattr(self, name)}")
        if self.stem_pool < 0:
            self._fail("stem_pool", f"must be >= 0, got {self.stem_pool}")
        sizes = self.stage_sizes()
        if self.fusion != "none" and self.use_emsca:
            for i, (h, w) in enumerate(sizes):
                if h < 4 or w < 4:
                    self._fail("input_size", f"stage {i + 1} is {h}x{w}; spatial fusion needs >= 4x4 "
                                             "(two 2x2 pooling levels)")

    def stage_sizes(self) -> list[tuple[int, int]]:
        h, w, _ = self.input_size
        pad = (self.stem_kernel - 1) // 2
        h = F.conv_output_size(h, self.stem_kernel, self.stem_stride, pad)
        w = F.conv_output_size(w, self.stem_kernel, self.stem_stride, pad)
        if self.stem_pool > 1:
            h, w = h // self.stem_pool, w // self.stem_pool
        out = []
        for s in self.stage_strides:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
            if h < 1 or w < 1:
                self._fail("input_size", "input too small for the stage strides")
            out.append((h, w))
        return out

    @property
    def block_config(self) -> BlockConfig:
        return BlockConfig(expansion=self.expansion, msgdc_groups=self.msgdc_groups,
                           gpc_groups=self.gpc_groups, shuffle_groups=self.shuffle_groups,
                           reduction=self.reduction, use_ca=self.use_ca)

    @property
    def lam_matrix(self) -> np.ndarray:
        if self.lam is None:
            return np.ones((len(self.tasks), self.m))
        return np.array(self.lam, dtype=np.float64)

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


def full_preset(**changes) -> NetworkConfig:
    """Full-size cost preset: widths 64..512, two blocks per stage, 128x128x3 input."""
    return NetworkConfig(**changes)


def desk_preset(**changes) -> NetworkConfig:
    """Small preset that trains in minutes on one core.

    One block per stage, 64x64 single-channel input.  A 4x4 stem pool brings
    the first stage to 8x8 and only the third stage downsamples, so every stage
    keeps the 4x4 the spatial fusion needs for two pooling levels.
    """
    base = dict(stage_channels=(8, 16, 24, 32), depths=(1, 1, 1, 1), stage_strides=(1, 1, 2, 1),
                stem_pool=4, input_size=(64, 64, 1), tasks=(("label", 4),))
    base.update(changes)
    return NetworkConfig(**base)


# -- modules ---------------------------------------------------------------------------------

class Stem(Module):
    cost_unit = True

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, pool: int, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride=stride, rng=rng)
        self.bn = BatchNorm2d(c_out)
        self.pool = pool

    def forward(self, x):
        y = relu(self.bn(self.conv(x)))
        return F.local_pool(y, "max", self.pool, self.pool) if self.pool > 1 else y


class Head(Module):
    cost_unit = True

    def __init__(self, channels: int, classes: int, rng):
        super().__init__()
        self.fc = Linear(channels, classes, rng=rng)

    def forward(self, feat):
        return self.fc(feat)


ERLA.cost_unit = True
PlainBlock.cost_unit = True
EMCAM.cost_unit = True


class Branch(Module):
    """One modality's stem and stages (fusion lives in the parent)."""

    def __init__(self, cfg: NetworkConfig, rng, robust: RobustHooks | None):
        super().__init__()
        c0 = cfg.stage_channels[0]
        self.stem = Stem(cfg.input_size[2], c0, cfg.stem_kernel, cfg.stem_stride, cfg.stem_pool, rng)
        self.stages: list[list[Module]] = []
        c_prev = c0
        for c, d, s in zip(cfg.stage_channels, cfg.depths, cfg.stage_strides):
            blocks = []
            for k in range(d):
                stride = s if k == 0 else 1
                if cfg.block == "erla":
                    blocks.append(ERLA(c_prev, c, stride, cfg.block_config, rng=rng, robust=robust))
                else:
                    blocks.append(PlainBlock(c_prev, c, stride, rng=rng))
                c_prev = c
            self.stages.append(blocks)

    def children(self):
        yield "stem", self.stem
        for i, blocks in enumerate(self.stages):
            for j, b in enumerate(blocks):
                yield f"stages.{i}.{j}", b

    def run_stage(self, i: int, x):
        for b in self.stages[i]:
            x = b(x)
        return x


class MAIL(Module):
    """Multimodal attention network.

    ``forward`` returns fused logits per task; ``forward_all`` also returns
    each modality's own logits, which the multitask loss uses.
    """

    def __init__(self, cfg: NetworkConfig, robust: "RobustConfig | None" = None):
        super().__init__()
        self.config = cfg
        self.robust_config = robust
        self.state = StochasticState(robust.seed, robust.man_std, robust.mode) if robust is not None else None
        hooks = robust.hooks(self.state) if robust is not None else None
        root = np.random.SeedSequence(cfg.init_seed)
        seeds = root.spawn(cfg.m + 2)
        if cfg.symmetric_init:
            seeds[1:cfg.m] = [seeds[0]] * (cfg.m - 1)
        branch_rngs = [np.random.default_rng(copy.deepcopy(s)) for s in seeds[:cfg.m]]
        fusion_rng = np.random.default_rng(seeds[cfg.m])
        head_rng = np.random.default_rng(seeds[cfg.m + 1])
        self.branches = [Branch(cfg, r, hooks) for r in branch_rngs]
        self.fusions: list[EMCAM] = []
        if cfg.fusion != "none":
            for c in cfg.stage_channels:
                self.fusions.append(EMCAM(cfg.m, c, cfg.block_config, use_dct=cfg.use_dct,
                                          use_mfifa=cfg.use_mfifa, use_emsca=cfg.use_emsca,
                                          fusion=cfg.fusion, rng=fusion_rng, robust=hooks))
        self.heads = [Head(cfg.stage_channels[-1], k, head_rng) for _, k in cfg.tasks]
        assign_paths(self)
        if self.state is not None:
            self.resample("I")

    # -- stochastic elements --------------------------------------------------------------

    @property
    def is_robust(self) -> bool:
        return self.state is not None

    def mixed_convs(self) -> list[Conv2d]:
        return [m for _, m in self.named_modules() if isinstance(m, Conv2d) and m.rpf_filters > 0]

    def projections(self) -> list[RandomProjection]:
        return [m for _, m in self.named_modules() if isinstance(m, RandomProjection)]

    def resample(self, phase: str = "I") -> None:
        """Draw fresh random filter banks for ``phase`` ('A' attack, 'I' inference)."""
        if phase not in ("A", "I"):
            raise ConfigError(f"phase must be 'A' or 'I', got {phase!r}")
        if self.state is None:
            return
        self.state.phase = phase
        resample_tree(self, self.state.rng_rpf)

    @contextlib.contextmanager
    def stochastic_mode(self, mode: str):
        """Temporarily switch noise mode ('sample', 'degenerate' or 'off')."""
        if self.state is None:
            yield self
            return
        prev = self.state.mode
        self.state.mode = mode
        try:
            yield self
        finally:
            self.state.mode = prev

    def inference(self):
        """Context for evaluation: noise is bypassed when the robust config turns stochastic inference off."""
        if self.state is None or self.robust_config.stochastic_inference:
            return contextlib.nullcontext(self)
        return self.stochastic_mode("off")

    @contextlib.contextmanager
    def rng_preserved(self):
        """Run a block without advancing any random stream of the model."""
        if self.state is None:
            yield self
            return
        saved = (copy.deepcopy(self.state.rng_man), copy.deepcopy(self.state.rng_rpf))
        try:
            yield self
        finally:
            self.state.rng_man, self.state.rng_rpf = saved

    # -- forward ------------------------------------------------------------------------------

    def _check_inputs(self, xs) -> list[Tensor]:
        if not isinstance(xs, (list, tuple)):
            raise ContractError("model expects a list with one tensor per modality")
        if len(xs) != self.config.m:
            raise ContractError(f"model has {self.config.m} modality branches, got {len(xs)} inputs")
        h, w, c = self.config.input_size
        out = []
        for i, x in enumerate(xs):
            x = as_tensor(x)
            if x.ndim != 4 or x.shape[1:] != (c, h, w):
                raise DimensionError(f"modality {i + 1} input has shape {x.shape}, expected (B, {c}, {h}, {w})")
            out.append(x)
        return out

    def features(self, xs, return_stages: bool = False):
        """Per-modality representations after the last stage (and, optionally, every stage)."""
        xs = self._check_inputs(xs)
        feats = [b.stem(x) for b, x in zip(self.branches, xs)]
        stages = []
        for i in range(len(self.config.stage_channels)):
            feats = [b.run_stage(i, f) for b, f in zip(self.branches, feats)]
            if self.fusions:
                feats = self.fusions[i](feats)
            stages.append(feats)
        return (feats, stages) if return_stages else feats

    def _pooled(self, xs) -> tuple[Tensor, list[Tensor]]:
        pooled = [F.global_pool(f, "avg") for f in self.features(xs)]
        pooled = [p.reshape(p.shape[0], p.shape[1]) for p in pooled]
        return (stack_sum(pooled) if len(pooled) > 1 else pooled[0]), pooled

    def forward_all(self, xs) -> tuple[list[Tensor], list[list[Tensor]]]:
        fused, pooled = self._pooled(xs)
        per_task = [h(fused) for h in self.heads]
        per_modality = [[h(p) for p in pooled] for h in self.heads]
        return per_task, per_modality

    def forward(self, xs) -> list[Tensor]:
        fused, _ = self._pooled(xs)
        return [h(fused) for h in self.heads]


def build_mail(config: NetworkConfig, robust: "RobustConfig | None" = None) -> MAIL:
    return MAIL(config, robust)


def tmtl_loss(logits: Sequence[Sequence[Tensor]], labels, lam) -> Tensor:
    """Weighted sum over tasks and modalities of mean cross-entropy.

    ``logits[t][m]`` is modality ``m``'s logits for task ``t``; ``labels[t]``
    holds task ``t``'s class indices; ``lam`` is the (tasks, modalities) weight
    matrix.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim != 2 or lam.shape[0] != len(logits):
        raise DimensionError(f"loss weights shape {lam.shape} does not match {len(logits)} tasks")
    if len(labels) != len(logits):
        raise DimensionError(f"got labels for {len(labels)} tasks, logits for {len(logits)}")
    if np.any(lam < 0):
        raise ConfigError("loss weights must be >= 0")
    terms = []
    for t, per_mod in enumerate(logits):
        if len(per_mod) != lam.shape[1]:
            raise DimensionError(f"task {t}: {len(per_mod)} modality logits, weights expect {lam.shape[1]}")
        for m, z in enumerate(per_mod):
            ce = F.cross_entropy(z, labels[t])
            terms.append(mul(ce, float(lam[t, m])))
    return stack_sum(terms)
