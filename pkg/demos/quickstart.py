"""Train a small two-modality network on the synthetic task, then attack it.

Runs in a few minutes on one core.  Pass a number to change the epoch count.
"""

import sys
import time

from mailnet import (AttackConfig, TrainConfig, build_mail, compute_metrics, count_flops, desk_preset, evaluate,
                     fit, robust_accuracy, synth_generate)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8

# 4 classes, two phase-shifted renderings of every image
ds = synth_generate(seed=0, n=900, classes=4, size=64, m=2, splits=(600, 100, 200))
train, val, test = ds.arrays("train"), ds.arrays("val"), ds.arrays("test")

model = build_mail(desk_preset(init_seed=0))
cost = count_flops(model)
print(f"model: {cost.params} parameters, {cost.macs / 1e6:.1f}M MACs per sample")

t0 = time.perf_counter()
fit(model, train, val, TrainConfig(epochs=epochs, seed=0), log=print)
print(f"trained in {time.perf_counter() - t0:.0f}s")

ev = evaluate(model, *test)
report = compute_metrics(ev["logits"][0], test[1][0])
print(f"test accuracy {report.acc:.3f}  macro F1 {report.macro_f1:.3f}  macro AUC {report.macro_auc:.3f}")

for iters in (1, 10):
    acc = robust_accuracy(model, *test, AttackConfig(family="pgd", iters=iters), seed=0)
    print(f"PGD-{iters} accuracy at eps=4/255: {acc:.3f}")
