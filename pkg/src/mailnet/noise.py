"""Random projection filters and modulated attention noise.

Both are switched on per model through a shared :class:`StochasticState`;
blocks built without one behave deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, StateError
from .nn import Module, Parameter, _record
from .tensor import Tensor, as_tensor, concat, index_select, mul, add


def sample_rpf(layer_shape: tuple[int, ...], n_random: int, sigma: float,
               rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_random`` frozen filters i.i.d. Normal(0, sigma^2) for a layer of ``layer_shape``.

    ``layer_shape`` is the full weight shape (n_total, c_in_per_group, k_h, k_w).
    """
    n_total = layer_shape[0]
    if not 0 <= n_random <= n_total:
        raise ConfigError(f"n_random={n_random} must lie in [0, n_total={n_total}]")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return rng.normal(0.0, sigma, size=(n_random,) + tuple(layer_shape[1:]))


def man_noise(eta_l, delta) -> Tensor:
    """Compose the learnable feature-layer noise ``eta_l * (delta + eta_l * delta)``.

    ``eta_l`` is a fixed draw with the site's full shape (channel axis 1);
    ``delta`` is the per-channel learnable weight vector and broadcasts along
    axis 1.
    """
    eta_l = np.asarray(eta_l, dtype=np.float64)
    delta = as_tensor(delta)
    shape = [1] * eta_l.ndim
    shape[1] = delta.shape[0]
    d = delta.reshape(tuple(shape))
    return mul(eta_l, add(d, mul(eta_l, d)))


@dataclass
class StochasticState:
    """Shared switches and generators for every random element of a robust model.

    ``mode`` is ``"sample"`` (fresh draws), ``"degenerate"`` (noise draws are
    all ones, projections are identities) or ``"off"`` (noise sites and
    projections bypassed entirely).
    """

    seed: int = 0
    man_std: float = 0.1
    mode: str = "sample"
    phase: str = "I"
    rng_man: np.random.Generator = field(init=False)
    rng_rpf: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.reseed(self.seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        man, rpf = np.random.SeedSequence(seed).spawn(2)
        self.rng_man = np.random.default_rng(man)
        self.rng_rpf = np.random.default_rng(rpf)

    def reseed_noise(self, seed: int) -> None:
        """Reset only the attention-noise stream (used to freeze noise for gradient checks)."""
        self.rng_man = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])

    def draw(self, shape: tuple[int, ...]) -> np.ndarray:
        if self.mode == "degenerate":
            return np.ones(shape)
        return 1.0 + self.man_std * self.rng_man.standard_normal(shape)


class ManSite(Module):
    """One injection site for modulated attention noise, owning its channel weights."""

    def __init__(self, channels: int, state: StochasticState):
        super().__init__()
        self.channels = channels
        # eta_l == 1 then gives eta_I == 2 * 0.5 == 1, the clean block
        self.delta = Parameter(np.full(channels, 0.5))
        self.state = state
        self.fixed: np.ndarray | None = None
        self.attached = False

    def forward(self, shape: tuple[int, ...]) -> Tensor | None:
        if self.fixed is not None:
            return Tensor(np.broadcast_to(self.fixed, shape))
        if self.state.mode == "off":
            return None
        return man_noise(self.state.draw(shape), self.delta)


def inject_noise(block: Module, eta: np.ndarray | float | None) -> Module:
    """Pin the composed noise at ``block``'s modulation site to ``eta`` (``None`` unpins).

    Works for channel attention, both attention maps and the fusion block;
    a block built without noise gets a site attached, which unpinning removes again.
    """
    if not hasattr(block, "site"):
        raise ContractError(f"{type(block).__name__} has no attention modulation site")
    if block.site is None:
        if eta is None:
            return block
        block.site = ManSite(getattr(block, "channels", 1), StochasticState())
        block.site.attached = True
    if eta is None and getattr(block.site, "attached", False):
        block.site = None
        return block
    block.site.fixed = None if eta is None else np.asarray(eta, dtype=np.float64)
    return block


def modulate(value: Tensor, site: ManSite | None) -> Tensor:
    """Multiply ``value`` by a fresh noise draw from ``site`` (no-op without a site)."""
    if site is None:
        return value
    eta = site(value.shape)
    return value if eta is None else mul(value, eta)


class RandomProjection(Module):
    """Channel-preserving projection whose first ``n_random`` filters are frozen Gaussian kernels.

    The remaining channels pass through unchanged (identity filters).  Banks
    are drawn by :meth:`resample`; ``"degenerate"`` and ``"off"`` modes make
    the layer an exact identity.
    """

    def __init__(self, channels: int, n_random: int, state: StochasticState, kernel: int = 3,
                 sigma: float | None = None):
        super().__init__()
        if not 0 <= n_random <= channels:
            raise ConfigError(f"n_random={n_random} must lie in [0, {channels}]")
        self.channels, self.n_random, self.kernel = channels, n_random, kernel
        self.sigma = sigma if sigma is not None else 1.0 / np.sqrt(channels * kernel * kernel)
        self.state = state
        self.bank: np.ndarray | None = None
        self.path = ""

    _buffers = ("bank",)

    def resample(self, rng: np.random.Generator) -> None:
        shape = (self.channels, self.channels, self.kernel, self.kernel)
        self.bank = sample_rpf(shape, self.n_random, self.sigma, rng)

    def set_identity(self) -> None:
        """Install exact identity filters for the random slots."""
        bank = np.zeros((self.n_random, self.channels, self.kernel, self.kernel))
        c = self.kernel // 2
        for i in range(self.n_random):
            bank[i, i, c, c] = 1.0
        self.bank = bank

    def forward(self, x):
        if self.n_random == 0 or self.state.mode in ("degenerate", "off"):
            return as_tensor(x)
        if self.bank is None:
            raise StateError("random projection bank was never sampled; call resample() first")
        x = as_tensor(x)
        proj = F.conv2d(x, Tensor(self.bank), stride=1, padding="same")
        _record(self, proj.shape[2] * proj.shape[3] * self.kernel * self.kernel * self.channels * self.n_random)
        if self.n_random == self.channels:
            return proj
        rest = index_select(x, np.arange(self.n_random, self.channels), axis=1)
        return concat([proj, rest], axis=1)


def resample_tree(root: Module, rng: np.random.Generator) -> None:
    """Draw fresh banks for every mixed conv and random projection under ``root``, in tree order."""
    from .nn import Conv2d
    for _, mod in root.named_modules():
        if isinstance(mod, Conv2d) and mod.rpf_filters > 0:
            sigma = mod.rpf_sigma or 1.0 / np.sqrt(mod.fan_in)
            mod.set_rpf_bank(sample_rpf(mod.weight.shape, mod.rpf_filters, sigma, rng))
        elif isinstance(mod, RandomProjection):
            mod.resample(rng)


@dataclass
class RobustHooks:
    """What a block needs to build its robust variant.

    ``rpf_fraction`` of the filters in every multi-scale conv become frozen
    random filters; ``projection_fraction`` of the channels entering each
    multi-scale conv go through a random projection first.
    """

    state: StochasticState
    rpf_fraction: float = 0.5
    projection_fraction: float = 0.5
    projection_kernel: int = 3
    sigma: float | None = None
    man: bool = True
    rpf: bool = True

    def __post_init__(self):
        for name in ("rpf_fraction", "projection_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    def site(self, channels: int) -> ManSite | None:
        return ManSite(channels, self.state) if self.man else None

    def projection(self, channels: int) -> RandomProjection | None:
        if not self.rpf:
            return None
        n = int(round(self.projection_fraction * channels))
        return RandomProjection(channels, n, self.state, kernel=self.projection_kernel, sigma=self.sigma)

    def mix(self, conv) -> None:
        if self.rpf:
            conv.enable_rpf(int(round(self.rpf_fraction * conv.c_out)))
            conv.rpf_sigma = self.sigma
