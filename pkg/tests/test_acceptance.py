"""Acceptance run: one test per criterion, each printing a PASS/FAIL line.

The learning criteria share trained models through a module cache, so the
whole file takes most of an hour on one core.  Budgets are fixed here and
not tuned per seed.
"""

import csv
import io
import time

import numpy as np
import pytest

from mailnet import functional as F
from mailnet.attacks import AttackConfig, robust_accuracy
from mailnet.blocks import EMCAM, MFIFA, ChannelAttention, mfifa_decompose
from mailnet.cli import run
from mailnet.cost import count_flops, count_params
from mailnet.data import synth_generate
from mailnet.gradcheck import BLOCKS, run_suite
from mailnet.network import build_mail, desk_preset, full_preset
from mailnet.nn import Conv2d, Linear, record_macs
from mailnet.robust import RobustConfig
from mailnet.train import TrainConfig, evaluate, fit

import oracles

SEEDS = (0, 1, 2)
EPOCHS = 10             # clean models; the learning criterion allows up to 30
ROBUST_EPOCHS = 10
PGD10 = AttackConfig(family="pgd", epsilon=4 / 255, step=10 / 255, iters=10, keep_fooled=True)
VARIANTS = {"full": {}, "no_erla": {"block": "plain"}, "no_mfifa": {"use_mfifa": False},
            "no_emsca": {"use_emsca": False}}

pytestmark = pytest.mark.slow


# -- shared synthetic task and trained models ----------------------------------------------------

_cache: dict = {}


def task():
    if "task" not in _cache:
        ds = synth_generate(0, 2750, classes=4, size=64, m=2, splits=(2000, 250, 500))
        _cache["task"] = {s: ds.arrays(s) for s in ("train", "val", "test")}
    return _cache["task"]


def trained(variant: str, seed: int):
    key = ("clean", variant, seed)
    if key not in _cache:
        data = task()
        model = build_mail(desk_preset(init_seed=seed, **VARIANTS[variant]))
        t0 = time.perf_counter()
        fit(model, data["train"], data["val"], TrainConfig(epochs=EPOCHS, seed=seed))
        seconds = time.perf_counter() - t0
        _cache[key] = (model, evaluate(model, *data["test"])["acc"], seconds)
    return _cache[key]


def trained_robust(seed: int):
    key = ("robust", seed)
    if key not in _cache:
        data = task()
        model = build_mail(desk_preset(init_seed=seed), RobustConfig(seed=seed))
        attack = AttackConfig(family="pgd", epsilon=4 / 255, step=10 / 255, iters=2)
        fit(model, data["train"], data["val"],
            TrainConfig(epochs=ROBUST_EPOCHS, seed=seed, weight_decay=model.robust_config.weight_decay,
                        attack=attack))
        _cache[key] = model
    return _cache[key]


def pgd10(model, seed: int) -> float:
    key = ("pgd10", id(model), seed)
    if key not in _cache:
        _cache[key] = robust_accuracy(model, *task()["test"], PGD10, seed=seed)
    return _cache[key]


# -- 1: primitives against brute-force oracles ----------------------------------------------------

def test_c01_primitives_match_oracles(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, count = 0.0, 0

    def check(got, ref):
        nonlocal worst, count
        assert got.shape == ref.shape
        worst = max(worst, float(np.max(np.abs(got - ref))))
        count += 1

    for _ in range(40):
        groups = int(rng.choice([1, 2, 3]))
        depthwise = rng.random() < 0.4
        c_in = groups * int(rng.integers(1, 4))
        if depthwise:
            groups = c_in
        c_out = groups * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        h, w = int(rng.integers(k, 19)), int(rng.integers(k, 12))
        x = rng.standard_normal((int(rng.integers(1, 3)), c_in, h, w))
        wt = rng.standard_normal((c_out, c_in // groups, k, k))
        check(F.conv2d(x, wt, stride=stride, groups=groups).data,
              oracles.conv2d_loops(x, wt, stride=stride, pad=k // 2, groups=groups))
    for _ in range(20):
        x = rng.standard_normal((2, 3, int(rng.integers(1, 8)), int(rng.integers(1, 8)))) * 5
        for kind in ("avg", "max", "min"):
            check(F.global_pool(x, kind).data, oracles.global_pool_scan(x, kind))
    for _ in range(20):
        x = rng.standard_normal((2, 2, int(rng.integers(2, 11)), int(rng.integers(2, 11))))
        for kind in ("avg", "max"):
            check(F.local_pool(x, kind).data, oracles.local_pool_scan(x, kind))
    for _ in range(20):
        groups, per = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.standard_normal((1, groups * per, 2, 2))
        check(F.channel_shuffle(x, groups).data, x[:, oracles.shuffle_order(groups * per, groups)])
    for _ in range(20):
        x = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        check(F.dct2d(x).data, oracles.dct2_direct(x))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and count >= 100 and seconds < 60
    criterion(1, ok, f"{count} instances, max abs error {worst:.2e}, {seconds:.1f}s")
    assert ok


# -- 2: finite-difference gradient suite -------------------------------------------------------

def test_c02_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = run_suite(seed=0, tolerance=1e-4)
    seconds = time.perf_counter() - t0
    names = {r.name for r in results}
    worst = max(r.max_rel_error for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and names == set(BLOCKS) and worst < 1e-4 and seconds < 300
    criterion(2, ok, f"{len(results)} blocks, worst relative error {worst:.2e}, {seconds:.1f}s"
                     + (f", failed {failed}" if failed else ""))
    assert ok


# -- 3: frequency component identities -------------------------------------------------------

def test_c03_frequency_identities(criterion):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(200):
        x = rng.standard_normal((2, 3, int(rng.integers(1, 9)), int(rng.integers(1, 9)))) * 10
        c = mfifa_decompose(x, use_dct=False)
        worst = max(worst, float(np.max(np.abs(c.h1.data + c.lw1.data - x))),
                    float(np.max(np.abs(c.h2.data + c.lw2.data - x))),
                    float(np.max(np.abs(c.a.data - (c.h.data - c.lw.data)))))
    exact = True
    # constants whose pooled sums are exact in binary floating point
    for value in (0.0, 1.5, -2.25, 0.375, 7.0, -1024.0):
        c = mfifa_decompose(np.full((1, 2, 4, 5), value), use_dct=False)
        exact &= bool(np.all(c.lw.data == 2 * value) and np.all(c.h.data == value)
                      and np.all(c.a.data == -value))
    ok = worst <= 1e-12 and exact
    criterion(3, ok, f"200 random inputs, max identity error {worst:.2e}; constant closed forms exact: {exact}")
    assert ok


# -- 4: attention maps stay inside (0, 1) ----------------------------------------------------------

def test_c04_attention_map_range(criterion):
    rng = np.random.default_rng(404)
    lo, hi = 1.0, 0.0
    for i in range(1000):
        scale = float(10 ** rng.uniform(-2, 2))
        c = int(rng.integers(2, 6))
        xs = [rng.standard_normal((1, c, 4, 4)) * scale for _ in range(2)]
        ca = ChannelAttention(c, reduction=2, rng=rng)
        ca(xs[0])
        a_f = MFIFA(2, use_dct=bool(i % 2))(xs).data
        emcam = EMCAM(2, c, use_dct=bool(i % 2), rng=rng)
        emcam(xs)
        for a in (ca.last_map, a_f, emcam.last_map):
            lo, hi = min(lo, float(a.min())), max(hi, float(a.max()))
    inside = 0.0 < lo and hi < 1.0

    ca = ChannelAttention(3, reduction=1)
    ca.fc1.weight.data[...] = np.eye(3)
    ca.fc2.weight.data[...] = np.eye(3)
    ca(np.zeros((1, 3, 4, 4)))
    mf = MFIFA(2)
    for p in (mf.alpha, mf.wp, mf.gamma):
        p.data[...] = 0.0
    a_f = mf([rng.standard_normal((1, 2, 4, 4))] * 2).data
    em = EMCAM(2, 2, rng=rng)
    for p in (em.theta_f, em.theta_s, em.mfifa.alpha, em.mfifa.wp, em.mfifa.gamma, em.emsca.theta):
        p.data[...] = 0.0
    em([rng.standard_normal((1, 2, 4, 4)) for _ in range(2)])
    half = bool(np.all(ca.last_map == 0.5) and np.all(a_f == 0.5) and np.all(em.last_map == 0.5))
    ok = inside and half
    criterion(4, ok, f"1000 forwards, maps in [{lo:.3e}, {1 - hi:.3e} below 1]; zero configs give 0.5: {half}")
    assert ok


# -- 5: parameter and MAC accounting ------------------------------------------------------------

def test_c05_cost_accounting(criterion):
    toy = count_params(Conv2d(1, 1, 3)).params == 9 and count_flops(Conv2d(1, 1, 1), (1, 1, 1)).macs == 1
    with record_macs() as rec:
        Linear(5, 3)(np.zeros((1, 5)))
    toy &= count_params(Linear(5, 3)).params == 18 and sum(m for _, m in rec.entries) == 15
    erla = count_params(build_mail(full_preset())).params
    plain = count_params(build_mail(full_preset(block="plain"))).params
    ratio = plain / erla
    par = count_params(build_mail(full_preset(fusion="parallel"))).params
    cas = count_params(build_mail(full_preset(fusion="cascaded"))).params
    full = count_flops(build_mail(full_preset()))
    dp, dm = 100 * (full.params - 11.7e6) / 11.7e6, 100 * (full.macs - 1.84e9) / 1.84e9
    ok = toy and abs(ratio - 2.0) <= 0.3 and par == cas
    criterion(5, ok, f"toy counts exact: {toy}; plain/ERLA params {ratio:.3f}; parallel {par} == cascaded {cas}; "
                     f"full preset {full.params} params ({dp:+.1f}% vs 11.7M), {full.macs} MACs "
                     f"({dm:+.1f}% vs 1.84G, informational)")
    assert ok


# -- 6: desk-scale learning ---------------------------------------------------------------------------

def test_c06_desk_scale_learning(criterion):
    _, acc, seconds = trained("full", 0)
    ok = acc >= 0.95 and seconds < 1200
    criterion(6, ok, f"test accuracy {acc:.3f} after {EPOCHS} epochs in {seconds:.0f}s")
    assert ok


# -- 7: ablation ordering -------------------------------------------------------------------------------

def test_c07_ablation_direction(criterion):
    means = {v: float(np.mean([trained(v, s)[1] for s in SEEDS])) for v in VARIANTS}
    ok = all(means["full"] >= means[v] for v in VARIANTS if v != "full")
    criterion(7, ok, "mean test accuracy over 3 seeds: " + ", ".join(f"{v} {a:.4f}" for v, a in means.items()))
    assert ok


# -- 8: attack effectiveness --------------------------------------------------------------------------

def test_c08_attack_effectiveness(criterion):
    model, clean, _ = trained("full", 0)
    xs, ys = task()["test"]
    drop = clean - pgd10(model, 0)
    sub_x, sub_y = [x[:100] for x in xs], [y[:100] for y in ys]
    sweeps = {}
    for eps in (4 / 255, 1 / 255):
        sweeps[eps] = [robust_accuracy(model, sub_x, sub_y, AttackConfig(family="pgd", epsilon=eps, step=10 / 255,
                                                                         iters=k, keep_fooled=True), seed=0)
                       for k in (10, 20, 50, 100)]
    monotone = all(all(b <= a for a, b in zip(s, s[1:])) for s in sweeps.values())
    zero = robust_accuracy(model, xs, ys, AttackConfig(family="pgd", epsilon=0.0), seed=0) == clean
    ok = drop >= 0.30 and monotone and zero
    sweep_text = "; ".join(f"eps={e * 255:.0f}/255 " + ",".join(f"{a:.2f}" for a in s) for e, s in sweeps.items())
    criterion(8, ok, f"PGD-10 drop {100 * drop:.1f} points; iters 10/20/50/100 {sweep_text}; "
                     f"eps=0 equals clean: {zero}")
    assert ok


# -- 9: defence direction --------------------------------------------------------------------------

def test_c09_defense_direction(criterion, rng):
    rows = []
    for s in SEEDS:
        undefended = pgd10(trained("full", s)[0], s)
        defended = pgd10(trained_robust(s), s)
        rows.append((s, undefended, defended))
    gaps = [d - u for _, u, d in rows]
    cfg = desk_preset(tasks=(("a", 4), ("b", 2)))
    clean, robust = build_mail(cfg), build_mail(cfg, RobustConfig.degenerate())
    xs = [rng.uniform(0, 1, (3, 1, 64, 64)) for _ in range(2)]
    with clean.stats_frozen(), robust.stats_frozen():
        err = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(clean(xs), robust(xs)))
    ok = min(gaps) >= 0.10 and err <= 1e-12
    criterion(9, ok, "PGD-10 undefended/robust per seed: "
                     + ", ".join(f"{s}: {u:.3f}/{d:.3f}" for s, u, d in rows)
                     + f"; degenerate forward max difference {err:.1e}")
    assert ok


def test_robust_inference_agreement():
    model = trained_robust(0)
    xs, ys = task()["test"]
    preds = []
    for _ in range(2):
        model.resample("I")
        preds.append(evaluate(model, xs, ys)["logits"][0].argmax(axis=1))
    agreement = float(np.mean(preds[0] == preds[1]))
    print(f"robust inference label agreement {agreement:.3f}")
    assert agreement >= 0.90


# -- 10: reproducibility ---------------------------------------------------------------------------

REPRO = """\
seed = 11
data.source = synthetic
data.n = 48
data.splits = 32,8,8
data.size = 24
model.stage_channels = 4,8
model.depths = 1,1
model.stage_strides = 1,1
model.stem_pool = 2
robust.enabled = true
train.adversarial = true
train.epochs = 2
train.batch_size = 8
attack.iters = 2,5
attack.epsilon = 0.02,0.05
"""


def test_c10_reproducibility(criterion, tmp_path):
    (tmp_path / "run.cfg").write_text(REPRO)
    outputs = ("checkpoint.bin", "train.log", "train.metrics", "eval.metrics", "attack.csv")
    blobs = []
    for name in ("one", "two"):
        out = str(tmp_path / name)
        for command in ("train", "eval", "attack"):
            assert run([command, "--config", str(tmp_path / "run.cfg"), "--out", out]) == 0
        blobs.append({f: (tmp_path / name / f).read_bytes() for f in outputs})
    same = [f for f in outputs if blobs[0][f] == blobs[1][f]]
    rows = list(csv.DictReader(io.StringIO(blobs[0]["attack.csv"].decode())))
    run(["train", "--config", str(tmp_path / "run.cfg"), "--out", str(tmp_path / "other"), "--set", "seed=12"])
    differs = (tmp_path / "other" / "checkpoint.bin").read_bytes() != blobs[0]["checkpoint.bin"]
    ok = len(same) == len(outputs) and len(rows) == 4 and differs
    criterion(10, ok, f"identical across two runs: {', '.join(same)}; another seed changes the checkpoint: {differs}")
    assert ok
