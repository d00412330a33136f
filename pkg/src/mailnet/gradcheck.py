"""Central finite-difference verification of every block's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor, concat, mul, reshape, tsum

DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    n_checks: int

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"block={self.name} max_rel_error={self.max_rel_error:.3e} checks={self.n_checks} status={status}"


def _flatten(out) -> Tensor:
    if isinstance(out, Tensor):
        return reshape(out, (-1,))
    return concat([reshape(o, (-1,)) for o in out], axis=0)


def check_gradients(fn: Callable[[list[Tensor]], object], inputs: Sequence[np.ndarray],
                    params: Sequence[Parameter], rng: np.random.Generator, eps: float = 1e-7,
                    n_entries: int = 24, n_directions: int = 3, corrupt: bool = False) -> tuple[float, int]:
    """Compare analytic and central-difference derivatives of a random projection of ``fn``.

    ``fn`` maps input tensors to a tensor (or list of tensors); the checked
    scalar is its dot product with a fixed Gaussian vector, so every output
    entry contributes.  Sampled input entries are compared one by one and
    parameters along random directions (frozen entries held still).  Returns
    the norm-wise relative error over all comparisons and their number.
    ``corrupt`` perturbs the analytic side, for testing the checker itself.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = list(params)
    probe = None

    def scalar(xs: list[np.ndarray], track: bool) -> Tensor:
        nonlocal probe
        ts = [Tensor(x, requires_grad=track) for x in xs]
        out = _flatten(fn(ts))
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return tsum(mul(out, probe)), ts

    for p in params:
        p.grad = None
    value, ts = scalar(inputs, True)
    value.backward()
    analytic, numeric = [], []

    def f(xs) -> float:
        return float(scalar(xs, False)[0].data)

    total = sum(x.size for x in inputs)
    picks = rng.choice(total, size=min(n_entries, total), replace=False) if total else []
    offsets = np.cumsum([0] + [x.size for x in inputs])
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[i])
        g = ts[i].grad
        analytic.append(0.0 if g is None else float(g.reshape(-1)[j]))
        hi = [x.copy() for x in inputs]
        lo = [x.copy() for x in inputs]
        hi[i].reshape(-1)[j] += eps
        lo[i].reshape(-1)[j] -= eps
        numeric.append((f(hi) - f(lo)) / (2 * eps))

    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for _ in range(n_directions if params else 0):
        dirs = []
        for p in params:
            v = rng.standard_normal(p.shape)
            if p.frozen_mask is not None:
                v[p.frozen_mask] = 0.0
            dirs.append(v)
        analytic.append(float(sum(np.sum(g * v) for g, v in zip(grads, dirs))))
        saved = [p.data.copy() for p in params]
        for p, v in zip(params, dirs):
            p.data = saved[params.index(p)] + eps * v
        up = f(inputs)
        for p, v, s in zip(params, dirs, saved):
            p.data = s - eps * v
        down = f(inputs)
        for p, s in zip(params, saved):
            p.data = s
        numeric.append((up - down) / (2 * eps))

    a, n = np.array(analytic), np.array(numeric)
    if corrupt and a.size:
        a[0] += 1e-2 * (np.abs(a).max() + 1.0)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale), int(a.size)


# -- the block suite ---------------------------------------------------------------------------------

def _cases(seed: int) -> dict[str, tuple]:
    """name -> (module or None, fn, inputs) for small random instances of every block."""
    from .blocks import EMCAM, EMILA, ERLA, MFIFA, MSGDC, EMSCA, BlockConfig, ChannelAttention
    from .network import tmtl_loss
    from .noise import StochasticState
    from .robust import RobustConfig, RPANLayer

    rng = np.random.default_rng(seed)
    cfg = BlockConfig()
    c, hw, b = 4, 8, 2

    def img(ch=c, size=hw):
        return rng.standard_normal((b, ch, size, size))

    cases: dict[str, tuple] = {}
    m = MSGDC(c, cfg.expansion, cfg.msgdc_groups, rng=rng)
    cases["msgdc"] = (m, lambda ts, m=m: m(ts[0]), [img()])
    m = ChannelAttention(c, 2, rng=rng)
    cases["ca"] = (m, lambda ts, m=m: m(ts[0]), [img()])
    m = EMILA(c, cfg, rng=rng)
    cases["emila"] = (m, lambda ts, m=m: m(ts[0]), [img()])
    m = ERLA(c, 2 * c, stride=2, cfg=cfg, rng=rng)
    cases["erla"] = (m, lambda ts, m=m: m(ts[0]), [img()])
    m = MFIFA(2, use_dct=True, channels=c)
    m.alpha.data, m.wp.data, m.gamma.data = (rng.uniform(0.5, 1.5, 2) for _ in range(3))
    cases["mfifa"] = (m, lambda ts, m=m: m(ts), [img(), img()])
    m = EMSCA(2, c, cfg, rng=rng)
    cases["emsca"] = (m, lambda ts, m=m: m(ts), [img(), img()])
    m = EMCAM(2, c, cfg, use_dct=True, rng=rng)
    m.theta_f.data = rng.uniform(0.5, 1.5, m.theta_f.shape)
    m.theta_s.data = rng.uniform(0.5, 1.5, m.theta_s.shape)
    cases["emcam"] = (m, lambda ts, m=m: m(ts), [img(), img()])

    labels = [rng.integers(0, 3, b), rng.integers(0, 2, b)]
    lam = rng.uniform(0.5, 1.5, (2, 2))
    cases["tmtl_loss"] = (None, lambda ts: tmtl_loss([[ts[0], ts[1]], [ts[2], ts[3]]], labels, lam),
                          [rng.standard_normal((b, 3)), rng.standard_normal((b, 3)),
                           rng.standard_normal((b, 2)), rng.standard_normal((b, 2))])

    state = StochasticState(seed, man_std=0.1)
    layer = RPANLayer(2, c, RobustConfig(seed=seed).hooks(state), cfg, use_dct=True, rng=rng)
    layer.resample()

    def rpan(ts, layer=layer):
        # the same noise draws on every evaluation
        state.reseed_noise(seed)
        return layer(ts)
    cases["rpan"] = (layer, rpan, [img(), img()])
    return cases


BLOCKS = ("msgdc", "ca", "emila", "erla", "mfifa", "emsca", "emcam", "tmtl_loss", "rpan")


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, corrupt: str | None = None,
              blocks: Sequence[str] = BLOCKS) -> list[CheckResult]:
    """Check every block; ``corrupt`` names one block whose analytic gradient is tampered with."""
    unknown = set(blocks) - set(BLOCKS) | ({corrupt} - set(BLOCKS) if corrupt else set())
    if unknown:
        from .errors import ConfigError
        raise ConfigError(f"unknown gradcheck block(s) {sorted(unknown)}; known: {', '.join(BLOCKS)}")
    cases = _cases(seed)
    rng = np.random.default_rng(seed + 1)
    results = []
    for name in blocks:
        module, fn, inputs = cases[name]
        params = module.parameters() if isinstance(module, Module) else []
        err, n = check_gradients(fn, inputs, params, rng, corrupt=(name == corrupt))
        results.append(CheckResult(name, err, err < tolerance, n))
    return results
