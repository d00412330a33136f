"""Parameter and MAC counts of the full-size preset and its ablations."""

from mailnet import build_mail, count_flops, full_preset

variants = {
    "full": {},
    "plain residual blocks": {"block": "plain"},
    "no frequency attention": {"use_mfifa": False},
    "no spatial attention": {"use_emsca": False},
    "cascaded fusion": {"fusion": "cascaded"},
    "no fusion": {"fusion": "none"},
}
for name, change in variants.items():
    r = count_flops(build_mail(full_preset(**change)))
    print(f"{name:<24} {r.params / 1e6:7.2f}M params {r.macs / 1e9:7.3f}G MACs")

print()
print(count_flops(build_mail(full_preset())).table())
