"""Module containers and the basic trainable layers."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .tensor import Tensor, mul, add


class Parameter(Tensor):
    """A leaf tensor that the optimiser updates.

    ``frozen_mask`` marks entries that are held fixed (random projection
    filters); they are excluded from the learnable count and never receive
    gradient.
    """

    __slots__ = ("frozen_mask",)

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.frozen_mask: np.ndarray | None = None

    @property
    def n_learnable(self) -> int:
        if self.frozen_mask is None:
            return int(self.data.size)
        return int(self.data.size - np.count_nonzero(self.frozen_mask))


class Module:
    """Minimal module tree: attribute-registered children, parameters and buffers."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            value = getattr(self, key)
            if value is not None:
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}.{key}" if prefix else key)

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop parameters from requiring gradients (input-gradient passes)."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    @contextlib.contextmanager
    def stats_frozen(self):
        """Batch-norm layers keep using batch statistics but stop updating their buffers."""
        bns = [m for _, m in self.named_modules() if isinstance(m, BatchNorm2d)]
        flags = [bn.update_stats for bn in bns]
        for bn in bns:
            bn.update_stats = False
        try:
            yield self
        finally:
            for bn, f in zip(bns, flags):
                bn.update_stats = f


# -- cost recording ------------------------------------------------------------------------

class _CostRecorder:
    def __init__(self):
        self.entries: list[tuple[object, int]] = []


_RECORDER: _CostRecorder | None = None


@contextlib.contextmanager
def record_macs():
    global _RECORDER
    prev = _RECORDER
    _RECORDER = _CostRecorder()
    try:
        yield _RECORDER
    finally:
        _RECORDER = prev


def _record(module: Module, macs: int) -> None:
    if _RECORDER is not None:
        _RECORDER.entries.append((module, int(macs)))


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- layers ---------------------------------------------------------------------------------

class Conv2d(Module):
    """Bias-free convolution; optionally a fraction of its filters are frozen random projections.

    When ``rpf_filters > 0`` the first ``rpf_filters`` output filters are
    replaced by the fixed bank installed with :meth:`set_rpf_bank`; the
    remaining filters stay trainable.
    """

    _buffers = ("rpf_bank",)

    def __init__(self, c_in: int, c_out: int, kernel: int | tuple[int, int] = 1, stride: int = 1,
                 groups: int = 1, padding="same", rng: np.random.Generator | None = None):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if groups < 1 or c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide channels_in={c_in} and channels_out={c_out}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, (kh, kw)
        self.stride, self.groups, self.padding = stride, groups, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (c_in // groups) * kh * kw
        self.weight = Parameter(fan_in_uniform(rng, (c_out, c_in // groups, kh, kw), fan_in))
        self.rpf_filters = 0
        self.rpf_bank: np.ndarray | None = None
        self.rpf_sigma: float | None = None
        self.path = ""

    @property
    def fan_in(self) -> int:
        return (self.c_in // self.groups) * self.kernel[0] * self.kernel[1]

    def enable_rpf(self, n_random: int) -> None:
        if not 0 <= n_random <= self.c_out:
            raise ConfigError(f"n_random={n_random} must lie in [0, {self.c_out}] for this layer")
        self.rpf_filters = n_random
        mask = np.zeros(self.weight.shape, dtype=bool)
        mask[:n_random] = True
        self.weight.frozen_mask = mask if n_random else None
        self.rpf_bank = None

    def set_rpf_bank(self, bank: np.ndarray) -> None:
        expected = (self.rpf_filters,) + self.weight.shape[1:]
        if bank.shape != expected:
            raise DimensionError(f"rpf bank shape {bank.shape} != expected {expected}")
        self.rpf_bank = bank

    def effective_weight(self) -> Tensor:
        if self.rpf_filters == 0:
            return self.weight
        if self.rpf_bank is None:
            from .errors import StateError
            raise StateError("random projection filters were never sampled for this layer")
        keep = np.ones(self.weight.shape)
        keep[: self.rpf_filters] = 0.0
        fixed = np.zeros(self.weight.shape)
        fixed[: self.rpf_filters] = self.rpf_bank
        return add(mul(self.weight, keep), fixed)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = F.resolve_padding(self.padding, *self.kernel)
        return (F.conv_output_size(h, self.kernel[0], self.stride, ph),
                F.conv_output_size(w, self.kernel[1], self.stride, pw))

    def record(self, out_hw: tuple[int, int]) -> None:
        _record(self, out_hw[0] * out_hw[1] * self.kernel[0] * self.kernel[1]
                * (self.c_in // self.groups) * self.c_out)

    def forward(self, x):
        out = F.conv2d(x, self.effective_weight(), stride=self.stride, padding=self.padding, groups=self.groups)
        self.record(out.shape[2:])
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None
        self.path = ""

    def forward(self, x):
        _record(self, self.n_in * self.n_out)
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.momentum, self.eps = momentum, eps
        self.update_stats = True

    def forward(self, x):
        if self.training and self.update_stats and self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
            self.running_var = np.ones(self.channels)
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps,
                            update_stats=self.update_stats)


def assign_paths(root: Module) -> None:
    """Store each module's dotted path on it so cost records can name their block."""
    for name, mod in root.named_modules():
        mod.path = name
