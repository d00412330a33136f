"""Exact parameter and multiply-accumulate accounting."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .nn import Module, record_macs
from .tensor import Tensor, no_grad


@dataclass
class BlockCost:
    params: int = 0
    macs: int | None = None


@dataclass
class CostReport:
    """Totals plus a per-block breakdown whose entries sum to the totals.

    ``macs`` is ``None`` for a parameter-only report.  MACs are for one
    sample; convolutions count ``Ho*Wo*kh*kw*(Cin/groups)*Cout``, linear layers
    ``in*out``, and pooling, activations and elementwise ops count zero.
    """

    params: int
    macs: int | None = None
    per_block: dict[str, BlockCost] = field(default_factory=dict)

    def table(self) -> str:
        width = max([len(k) for k in self.per_block] + [5])
        lines = [f"{'block':<{width}}  {'params':>12}  {'macs':>14}"]
        for name, b in self.per_block.items():
            macs = "-" if b.macs is None else f"{b.macs:d}"
            lines.append(f"{name:<{width}}  {b.params:>12d}  {macs:>14}")
        total = "-" if self.macs is None else f"{self.macs:d}"
        lines.append(f"{'total':<{width}}  {self.params:>12d}  {total:>14}")
        return "\n".join(lines)


def _unit_resolver(model: Module):
    """Map a module path to the innermost enclosing cost unit (a block)."""
    units = sorted((p for p, m in model.named_modules() if p and getattr(m, "cost_unit", False)),
                   key=len, reverse=True)
    root_name = type(model).__name__

    def resolve(path: str) -> str:
        for u in units:
            if path == u or path.startswith(u + "."):
                return u
        if not path:
            return root_name
        return path.split(".")[0]
    return resolve


def count_params(model: Module) -> CostReport:
    """Learnable scalars, each parameter counted once; frozen random filters excluded."""
    resolve = _unit_resolver(model)
    seen: set[int] = set()
    blocks: dict[str, BlockCost] = {}
    for name, p in model.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        owner = name.rsplit(".", 1)[0] if "." in name else ""
        blocks.setdefault(resolve(owner), BlockCost()).params += p.n_learnable
    return CostReport(sum(b.params for b in blocks.values()), None, blocks)


@contextlib.contextmanager
def _measuring(model: Module):
    flags = [(m, m.training) for _, m in model.named_modules()]
    preserve = model.rng_preserved() if hasattr(model, "rng_preserved") else contextlib.nullcontext()
    model.train()
    try:
        with no_grad(), model.stats_frozen(), preserve:
            yield
    finally:
        for m, f in flags:
            m.training = f


def count_flops(model: Module, input_size: tuple[int, int, int] | None = None) -> CostReport:
    """Run one zero sample of ``input_size`` = (H, W, C) through ``model`` and tally MACs.

    Models with a ``config`` take one such input per modality and default to
    the configured size.  Batch-norm buffers and random streams are left as
    they were.
    """
    cfg = getattr(model, "config", None)
    if input_size is None:
        if cfg is None:
            raise TypeError("input_size is required for models without a config")
        input_size = cfg.input_size
    h, w, c = input_size
    x = np.zeros((1, c, h, w))
    report = count_params(model)
    resolve = _unit_resolver(model)
    paths = {id(m): p for p, m in model.named_modules()}
    with _measuring(model), record_macs() as rec:
        model([Tensor(x) for _ in range(cfg.m)] if cfg is not None else Tensor(x))
    for b in report.per_block.values():
        b.macs = 0
    for mod, macs in rec.entries:
        key = resolve(paths.get(id(mod), ""))
        report.per_block.setdefault(key, BlockCost(0, 0)).macs += macs
    report.macs = sum(b.macs for b in report.per_block.values())
    return report
