"""Command line: ``mailnet {train,eval,attack,cost,gradcheck} [--config F] [--set k=v ...] [--out DIR]``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment);
``--set`` overrides single keys.  Every key is checked against ``SCHEMA``.
Each command writes ``<command>.config`` with every key resolved into the
output directory; passing that file back as ``--config`` reproduces the run.

Exit codes: 0 success, 1 assertion or numeric failure, 2 configuration
error, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError, FormatError, MailError

COMMANDS = ("train", "eval", "attack", "cost", "gradcheck")


# -- value types -------------------------------------------------------------------------------------

def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.split(",") if p.strip())


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(p) for p in v.split(",") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return "auto" if value is None else str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    help: str
    preset: bool = False          # "preset" means: take the value from model.preset


_EPS = repr(4 / 255)
_STEP = repr(10 / 255)

SCHEMA: dict[str, Key] = {
    "seed": Key(int, "0", "root seed; data, init, training, noise and attack seeds derive from it"),
    "checkpoint": Key(str, "", "checkpoint to read (eval, attack); empty means <out>/checkpoint.bin"),

    "data.source": Key(_choice("file", "synthetic"), "file", "read data.path or generate the synthetic task"),
    "data.path": Key(str, "", "MIC1 dataset container"),
    "data.n": Key(int, "2750", "synthetic sample count"),
    "data.splits": Key(_ints, "2000,250,500", "synthetic train,val,test counts"),
    "data.classes": Key(int, "4", "synthetic class count"),
    "data.size": Key(int, "64", "synthetic image side"),
    "data.m": Key(int, "2", "synthetic modality count"),
    "data.amplitude": Key(float, "0.05", "synthetic pattern amplitude"),
    "data.noise": Key(float, "0.08", "synthetic pixel noise std"),
    "data.augment": Key(_bool, "false", "train on the 4x augmented training split"),
    "augment.rotation_deg": Key(float, "20.0", "maximum rotation"),
    "augment.translation_px": Key(int, "5", "maximum shift per axis"),
    "augment.blur_sigma": Key(float, "0.8", "3x3 Gaussian blur sigma"),

    "model.preset": Key(_choice("desk", "full"), "desk", "base network configuration"),
    "model.stage_channels": Key(_ints, "preset", "stage widths", True),
    "model.depths": Key(_ints, "preset", "blocks per stage", True),
    "model.stage_strides": Key(_ints, "preset", "entry stride per stage", True),
    "model.stem_kernel": Key(int, "preset", "input conv kernel", True),
    "model.stem_stride": Key(int, "preset", "input conv stride", True),
    "model.stem_pool": Key(int, "preset", "max-pool after the input conv (0 or 1 disables)", True),
    "model.block": Key(_choice("erla", "plain"), "preset", "residual block type", True),
    "model.use_ca": Key(_bool, "preset", "channel attention inside blocks", True),
    "model.use_mfifa": Key(_bool, "preset", "frequency attention in fusion", True),
    "model.use_emsca": Key(_bool, "preset", "spatial attention in fusion", True),
    "model.fusion": Key(_choice("parallel", "cascaded", "none"), "preset", "fusion layout", True),
    "model.use_dct": Key(_bool, "preset", "frequency components from the DCT", True),
    "model.expansion": Key(int, "preset", "block expansion", True),
    "model.msgdc_groups": Key(int, "preset", "multi-scale conv groups", True),
    "model.gpc_groups": Key(int, "preset", "pointwise conv groups", True),
    "model.shuffle_groups": Key(int, "preset", "channel shuffle groups", True),
    "model.reduction": Key(int, "preset", "channel attention reduction", True),
    "model.lam": Key(float, "1.0", "loss weight of every task/modality term"),

    "robust.enabled": Key(_bool, "false", "random filters and attention noise"),
    "robust.rpf_fraction": Key(float, "0.5", "share of frozen random filters per multi-scale conv"),
    "robust.projection_fraction": Key(float, "0.5", "share of channels through a random projection"),
    "robust.sigma": Key(lambda v: None if v == "auto" else float(v), "auto", "random filter std (auto: 1/sqrt(fan-in))"),
    "robust.weight_decay": Key(float, "0.0005", "norm penalty weight"),
    "robust.man_std": Key(float, "0.1", "attention noise std"),
    "robust.mode": Key(_choice("sample", "degenerate", "off"), "sample", "noise mode"),
    "robust.stochastic_inference": Key(_bool, "true", "keep noise active when evaluating"),

    "train.epochs": Key(int, "30", "epoch budget"),
    "train.batch_size": Key(int, "32", "batch size"),
    "train.lr": Key(float, "0.05", "initial learning rate"),
    "train.momentum": Key(float, "0.9", "SGD momentum"),
    "train.factor": Key(float, "0.1", "plateau decay factor"),
    "train.patience": Key(int, "10", "plateau patience"),
    "train.threshold": Key(float, "0.0001", "plateau relative threshold"),
    "train.min_lr": Key(float, "1e-06", "learning-rate floor"),
    "train.weight_decay": Key(float, "0.0", "norm penalty for non-robust models"),
    "train.adversarial": Key(_bool, "false", "train on adversarial inputs"),
    "train.attack_family": Key(_choice("fgsm", "bim", "pgd", "mim"), "pgd", "training attack"),
    "train.attack_epsilon": Key(float, _EPS, "training attack radius"),
    "train.attack_step": Key(float, _STEP, "training attack step"),
    "train.attack_iters": Key(int, "2", "training attack iterations"),

    "eval.split": Key(_choice("train", "val", "test"), "test", "split to evaluate"),
    "eval.runs": Key(lambda v: 0 if v == "auto" else int(v), "auto",
                     "evaluation passes (auto: 2 for stochastic models, else 1)"),

    "attack.family": Key(_choice("fgsm", "bim", "pgd", "mim"), "pgd", "attack"),
    "attack.epsilon": Key(_floats, _EPS, "radii to sweep"),
    "attack.step": Key(float, _STEP, "step size"),
    "attack.iters": Key(_ints, "10", "iteration counts to sweep"),
    "attack.random_init": Key(_choice("auto", "true", "false"), "auto", "uniform start in the ball (auto: pgd only)"),
    "attack.momentum": Key(float, "1.0", "mim decay"),
    "attack.keep_fooled": Key(_bool, "true", "freeze samples at their first successful iterate"),
    "attack.split": Key(_choice("train", "val", "test"), "test", "split to attack"),
    "attack.limit": Key(int, "0", "attack only the first N samples of the split (0: all)"),

    "cost.model": Key(_choice("mail", "conv"), "mail", "network, or a single conv layer"),
    "cost.conv": Key(_ints, "1,1,3", "single conv: in,out,kernel"),
    "cost.input_size": Key(_ints, "preset", "H,W,C", True),
    "cost.m": Key(int, "2", "modalities"),
    "cost.classes": Key(int, "4", "classes of the single task"),
    "cost.reference_params": Key(float, "11700000.0", "parameter count to compare against"),
    "cost.reference_macs": Key(float, "1840000000.0", "MAC count to compare against"),

    "gradcheck.tolerance": Key(float, "0.0001", "maximum relative error"),
    "gradcheck.blocks": Key(lambda v: tuple(p.strip() for p in v.split(",") if p.strip()),
                            "msgdc,ca,emila,erla,mfifa,emsca,emcam,tmtl_loss,rpan", "blocks to check"),
    "gradcheck.corrupt": Key(str, "", "test hook: tamper with this block's analytic gradient"),
}


# -- config handling -----------------------------------------------------------------------------------

def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{no}: key {key!r} given twice")
        out[key] = value
    return out


def resolve(raw: dict[str, str]) -> dict[str, Any]:
    """Apply defaults and parse every value; unknown keys and bad values name the key."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    cfg: dict[str, Any] = {}
    for key, spec in SCHEMA.items():
        text = raw.get(key, spec.default)
        if spec.preset and text == "preset":
            cfg[key] = None
            continue
        try:
            cfg[key] = spec.parse(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
    return cfg


def _fill_presets(cfg: dict[str, Any]) -> None:
    from .network import desk_preset, full_preset
    base = (full_preset if cfg["model.preset"] == "full" else desk_preset)()
    for key, spec in SCHEMA.items():
        if spec.preset and cfg[key] is None:
            field = key.split(".", 1)[1]
            cfg[key] = getattr(base, "input_size" if key == "cost.input_size" else field)


def render(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.items())


def seeds(root: int) -> dict[str, int]:
    """Independent integer seeds for each consumer of randomness."""
    names = ("data", "init", "train", "robust", "attack")
    kids = np.random.SeedSequence(root).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


# -- building blocks -----------------------------------------------------------------------------------

def _network_config(cfg: dict, m: int, input_size: tuple[int, int, int], classes: tuple[int, ...]):
    from .network import desk_preset, full_preset
    preset = full_preset if cfg["model.preset"] == "full" else desk_preset
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items()
              if k.startswith("model.") and SCHEMA[k].preset}
    tasks = (("label", classes[0]),) if len(classes) == 1 else tuple((f"task{t}", k) for t, k in enumerate(classes))
    lam = tuple((cfg["model.lam"],) * m for _ in tasks)
    return preset(m=m, input_size=input_size, tasks=tasks, lam=lam, init_seed=seeds(cfg["seed"])["init"], **fields)


def _robust_config(cfg: dict):
    if not cfg["robust.enabled"]:
        return None
    from .robust import RobustConfig
    return RobustConfig(rpf_fraction=cfg["robust.rpf_fraction"], projection_fraction=cfg["robust.projection_fraction"],
                        sigma=cfg["robust.sigma"], weight_decay=cfg["robust.weight_decay"],
                        man_std=cfg["robust.man_std"], mode=cfg["robust.mode"], seed=seeds(cfg["seed"])["robust"],
                        stochastic_inference=cfg["robust.stochastic_inference"])


def _dataset(cfg: dict, out: Path | None = None):
    from . import data
    if cfg["data.source"] == "synthetic":
        spec = data.SynthSpec(amplitude=cfg["data.amplitude"], noise=cfg["data.noise"])
        ds = data.synth_generate(seeds(cfg["seed"])["data"], cfg["data.n"], cfg["data.classes"], cfg["data.size"],
                                 cfg["data.m"], splits=cfg["data.splits"], spec=spec)
        if out is not None:
            data.save(ds, out / "dataset.mic")
        return ds
    return data.load(cfg["data.path"])


def _check_dataset_key(cfg: dict) -> None:
    if cfg["data.source"] != "file":
        return
    if not cfg["data.path"]:
        raise ConfigError("config key 'data.path': missing dataset path")
    if not os.path.isfile(cfg["data.path"]):
        raise ConfigError(f"config key 'data.path': no such file {cfg['data.path']!r}")


def _build(cfg: dict, ds):
    from .network import build_mail
    shapes = {im.shape[1:] for im in ds.images}
    if len(shapes) != 1:
        raise ConfigError(f"modalities have different shapes {sorted(shapes)}; the network needs one shape")
    c, h, w = shapes.pop()
    return build_mail(_network_config(cfg, ds.m, (h, w, c), tuple(ds.classes)), _robust_config(cfg))


def _split(ds, split: str, limit: int = 0):
    xs, ys = ds.arrays(split)
    if len(ys[0]) == 0:
        raise ConfigError(f"dataset has no {split!r} samples")
    if limit:
        xs, ys = [x[:limit] for x in xs], [y[:limit] for y in ys]
    return xs, ys


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "checkpoint.bin"


def _load_model(cfg: dict, ds, out: Path):
    from .checkpoint import load_checkpoint
    model = _build(cfg, ds)
    load_checkpoint(model, _checkpoint_path(cfg, out))
    return model


def _emit(out: Path, name: str, text: str, echo: bool = True) -> None:
    (out / name).write_text(text)
    if echo:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    from .attacks import AttackConfig
    from .checkpoint import save_checkpoint
    from .data import AugmentSpec, augment_set
    from .train import TrainConfig, evaluate, fit
    _check_dataset_key(cfg)
    ds = _dataset(cfg, out)
    model = _build(cfg, ds)
    train, val = _split(ds, "train"), _split(ds, "val")
    s = seeds(cfg["seed"])
    fit_train = train
    if cfg["data.augment"]:
        spec = AugmentSpec(cfg["augment.rotation_deg"], cfg["augment.translation_px"], cfg["augment.blur_sigma"])
        fit_train = augment_set(*train, spec=spec, rng=np.random.default_rng(s["data"] + 1))
    attack = None
    if cfg["train.adversarial"]:
        attack = AttackConfig(cfg["train.attack_family"], cfg["train.attack_epsilon"], cfg["train.attack_step"],
                              cfg["train.attack_iters"])
    robust = model.robust_config
    tc = TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                     momentum=cfg["train.momentum"], factor=cfg["train.factor"], patience=cfg["train.patience"],
                     threshold=cfg["train.threshold"], min_lr=cfg["train.min_lr"], seed=s["train"],
                     weight_decay=robust.weight_decay if robust is not None else cfg["train.weight_decay"],
                     attack=attack)
    log_path = out / "train.log"
    with open(log_path, "w") as log:
        def emit(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            print(line, flush=True)
        fit(model, fit_train, val, tc, log=emit)
    tr, va = evaluate(model, *train), evaluate(model, *val)
    _emit(out, "train.metrics", f"final_train_loss = {tr['loss']!r}\nfinal_train_acc = {tr['acc']!r}\n"
                                f"final_val_loss = {va['loss']!r}\nfinal_val_acc = {va['acc']!r}\n")
    save_checkpoint(model, out / "checkpoint.bin")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    from .metrics import UndefinedMetricError, compute_metrics
    from .train import evaluate
    _check_dataset_key(cfg)
    ds = _dataset(cfg)
    model = _load_model(cfg, ds, out)
    xs, ys = _split(ds, cfg["eval.split"])
    stochastic = model.is_robust and model.robust_config.stochastic_inference
    runs = cfg["eval.runs"] or (2 if stochastic else 1)
    lines, preds = [f"split = {cfg['eval.split']}", f"runs = {runs}"], []
    for r in range(1, runs + 1):
        if stochastic:
            model.resample("I")
        ev = evaluate(model, xs, ys)
        lines.append(f"run.{r}.acc = {ev['acc']!r}")
        lines.append(f"run.{r}.loss = {ev['loss']!r}")
        preds.append(np.stack([z.argmax(axis=1) for z in ev["logits"]]))
        for (name, _), z, y in zip(model.config.tasks, ev["logits"], ys):
            try:
                lines.append(compute_metrics(z, y).to_text(prefix=f"run.{r}.{name}.").rstrip("\n"))
            except UndefinedMetricError as exc:
                lines.append(f"run.{r}.{name}.undefined = {exc}")
    if runs > 1:
        same = np.mean([np.all(p == preds[0], axis=0).mean() for p in preds[1:]])
        lines.append(f"agreement = {float(same)!r}")
    _emit(out, "eval.metrics", "\n".join(lines) + "\n")
    return 0


def cmd_attack(cfg: dict, out: Path) -> int:
    from .attacks import AttackConfig, robust_accuracy, sweep_csv
    from .train import evaluate
    _check_dataset_key(cfg)
    ds = _dataset(cfg)
    model = _load_model(cfg, ds, out)
    xs, ys = _split(ds, cfg["attack.split"], cfg["attack.limit"])
    seed = seeds(cfg["seed"])["attack"]
    clean = evaluate(model, xs, ys)["acc"]
    init = {"auto": None, "true": True, "false": False}[cfg["attack.random_init"]]
    rows = []
    for eps in cfg["attack.epsilon"]:
        for iters in cfg["attack.iters"]:
            ac = AttackConfig(cfg["attack.family"], eps, cfg["attack.step"], iters, random_init=init,
                              momentum=cfg["attack.momentum"], keep_fooled=cfg["attack.keep_fooled"])
            rows.append({"attack": ac.family, "epsilon": eps, "iters": iters, "clean_acc": clean,
                         "robust_acc": robust_accuracy(model, xs, ys, ac, seed=seed), "seed": cfg["seed"]})
    _emit(out, "attack.csv", sweep_csv(rows))
    return 0


def cmd_cost(cfg: dict, out: Path) -> int:
    from .cost import count_flops
    from .network import build_mail
    if cfg["cost.model"] == "conv":
        from .nn import Conv2d
        if len(cfg["cost.conv"]) != 3:
            raise ConfigError("config key 'cost.conv': expected in,out,kernel")
        c_in, c_out, k = cfg["cost.conv"]
        report = count_flops(Conv2d(c_in, c_out, k), (1, 1, c_in))
        text = report.table() + f"\nparams = {report.params}\nmacs = {report.macs}\n"
    else:
        size = tuple(cfg["cost.input_size"])
        if len(size) != 3:
            raise ConfigError("config key 'cost.input_size': expected H,W,C")
        model = build_mail(_network_config(cfg, cfg["cost.m"], size, (cfg["cost.classes"],)), _robust_config(cfg))
        report = count_flops(model)
        ref_p, ref_m = cfg["cost.reference_params"], cfg["cost.reference_macs"]
        text = (report.table() + f"\nparams = {report.params}\nmacs = {report.macs}\n"
                f"reference_params = {ref_p:.0f} deviation = {100 * (report.params - ref_p) / ref_p:+.2f}%\n"
                f"reference_macs = {ref_m:.0f} deviation = {100 * (report.macs - ref_m) / ref_m:+.2f}%\n")
    _emit(out, "cost.txt", text)
    return 0


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    from .gradcheck import run_suite
    results = run_suite(cfg["seed"], cfg["gradcheck.tolerance"], cfg["gradcheck.corrupt"] or None,
                        cfg["gradcheck.blocks"])
    failed = [r.name for r in results if not r.passed]
    text = "\n".join(r.line() for r in results) + "\n"
    text += f"result = {'FAIL ' + ','.join(failed) if failed else 'pass'}\n"
    _emit(out, "gradcheck.txt", text)
    return 1 if failed else 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "cost": cmd_cost,
            "gradcheck": cmd_gradcheck}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mailnet", description="Multimodal attention network experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--adversarial", action="store_true", help="shorthand for --set train.adversarial=true")
    p.add_argument("--list-keys", action="store_true", help="print every config key with its default and exit")
    return p


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.list_keys:
        for k, spec in SCHEMA.items():
            print(f"{k} = {spec.default}    # {spec.help}")
        return 0
    try:
        raw = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if args.adversarial:
            raw["train.adversarial"] = "true"
        cfg = resolve(raw)
        _fill_presets(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.config").write_text(render(cfg))
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (MailError, AssertionError, FloatingPointError) as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
