import numpy as np
import pytest

from mailnet.attacks import AttackConfig
from mailnet.blocks import EMCAM, EMSCA, MFIFA, ChannelAttention
from mailnet.errors import ConfigError, ContractError, StateError
from mailnet.network import build_mail, desk_preset, NetworkConfig
from mailnet.noise import RobustHooks, StochasticState, inject_noise, man_noise, sample_rpf
from mailnet.nn import Conv2d
from mailnet.robust import RobustConfig, RPANLayer, adversarial_train_step, regularizer, rpf_summary
from mailnet.tensor import Tensor, tsum
from mailnet.train import SGD, train_step

import oracles
from test_blocks import ca_ref, emsca_ref, mfifa_logits_ref


def tiny(**changes):
    base = dict(m=2, stage_channels=(4, 8), depths=(1, 1), stage_strides=(1, 1), stem_pool=2,
                input_size=(16, 16, 1), tasks=(("t", 3),))
    base.update(changes)
    return NetworkConfig(**base)


# -- random projection filters -----------------------------------------------------------------

def test_rpf_bank_deterministic():
    a = sample_rpf((8, 3, 3, 3), 4, 0.2, np.random.default_rng(7))
    b = sample_rpf((8, 3, 3, 3), 4, 0.2, np.random.default_rng(7))
    assert a.shape == (4, 3, 3, 3) and np.array_equal(a, b)


def test_rpf_too_many_filters():
    with pytest.raises(ConfigError):
        sample_rpf((4, 1, 3, 3), 5, 0.1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        Conv2d(2, 4, 3).enable_rpf(5)


def test_rpf_moments():
    sigma = 0.3
    bank = sample_rpf((100, 10, 10, 10), 100, sigma, np.random.default_rng(0))
    n = bank.size
    assert n == 10**5
    assert abs(bank.mean()) <= 3 * sigma / np.sqrt(n)
    assert abs(bank.var() - sigma**2) <= 0.05 * sigma**2


def test_zero_random_filters_is_baseline_conv(rng):
    conv = Conv2d(3, 4, 3, rng=np.random.default_rng(1))
    base = Conv2d(3, 4, 3, rng=np.random.default_rng(1))
    conv.enable_rpf(0)
    x = rng.standard_normal((2, 3, 5, 5))
    assert np.array_equal(conv(x).data, base(x).data)


def test_mixed_conv_uses_bank_then_trainable(rng):
    conv = Conv2d(2, 4, 3, rng=rng)
    conv.enable_rpf(2)
    with pytest.raises(StateError):
        conv(np.zeros((1, 2, 4, 4)))
    bank = sample_rpf(conv.weight.shape, 2, 0.5, rng)
    conv.set_rpf_bank(bank)
    w = conv.weight.data.copy()
    w[:2] = bank
    x = rng.standard_normal((1, 2, 4, 4))
    assert np.max(np.abs(conv(x).data - oracles.conv2d_loops(x, w, pad=1))) <= 1e-12
    assert conv.weight.n_learnable == 2 * 2 * 9


# -- modulated attention noise -----------------------------------------------------------------

def test_man_zero_weights(rng):
    assert not man_noise(rng.standard_normal((2, 3, 4, 4)), np.zeros(3)).data.any()


def test_man_unit_draw(rng):
    delta = rng.standard_normal(3)
    out = man_noise(np.ones((2, 3, 2, 2)), delta).data
    assert np.array_equal(out, np.broadcast_to(2 * delta.reshape(1, 3, 1, 1), out.shape))


def test_man_scalar_oracle(rng):
    eta = rng.standard_normal((2, 3, 2, 2))
    delta = rng.standard_normal(3)
    out = man_noise(eta, delta).data
    for idx in np.ndindex(eta.shape):
        e, d = eta[idx], delta[idx[1]]
        assert abs(out[idx] - e * (d + e * d)) <= 1e-15


def test_man_differentiable_in_weights(rng):
    from mailnet.nn import Parameter
    eta = rng.standard_normal((2, 3, 2, 2))
    delta = Parameter(rng.standard_normal(3))
    tsum(man_noise(eta, delta)).backward()
    expected = (eta + eta * eta).sum(axis=(0, 2, 3))
    assert np.allclose(delta.grad, expected, atol=1e-12)


def test_noise_fresh_per_forward():
    state = StochasticState(seed=3)
    a, b = state.draw((4,)), state.draw((4,))
    assert not np.array_equal(a, b)
    state.mode = "degenerate"
    assert np.array_equal(state.draw((4,)), np.ones(4))


# -- injection -------------------------------------------------------------------------------

def _blocks(rng):
    return {
        "ca": (ChannelAttention(4, reduction=2, rng=rng), lambda b, xs: b(xs[0])),
        "mfifa": (MFIFA(2, use_dct=False, channels=4), lambda b, xs: b(xs)),
        "emsca": (EMSCA(2, 4, rng=rng), lambda b, xs: b(xs)),
        "emcam": (EMCAM(2, 4, rng=rng), lambda b, xs: b(xs)[0]),
    }


@pytest.mark.parametrize("kind", ["ca", "mfifa", "emsca", "emcam"])
def test_unit_noise_gives_clean_block(kind, rng):
    block, run = _blocks(rng)[kind]
    xs = [rng.standard_normal((2, 4, 4, 4)) for _ in range(2)]
    clean = run(block, xs).data
    inject_noise(block, 1.0)
    assert np.array_equal(run(block, xs).data, clean)
    inject_noise(block, None)
    assert np.array_equal(run(block, xs).data, clean)


def test_zero_noise_at_fusion_gives_half_map(rng):
    block = EMCAM(2, 3, rng=rng)
    inject_noise(block, 0.0)
    block([rng.standard_normal((1, 3, 4, 4)) for _ in range(2)])
    assert np.all(block.last_map == 0.5)


def test_random_noise_on_ca_matches_scalar_oracle(rng):
    ca = ChannelAttention(4, reduction=2, rng=rng)
    eta = rng.uniform(0.5, 1.5, 4)
    x = rng.standard_normal((2, 4, 3, 3))
    inject_noise(ca, eta)
    got = ca(x).data
    ca.theta_x.data[...] = ca.theta_x.data * eta  # the noise scales the theta product entrywise
    assert np.max(np.abs(got - ca_ref(x, ca))) <= 1e-12


def test_random_noise_on_maps_matches_oracle(rng):
    eta = rng.uniform(0.5, 1.5, (4, 1, 1))
    xs = [rng.standard_normal((1, 4, 4, 4)) for _ in range(2)]
    mf = MFIFA(2, use_dct=False, channels=4)
    inject_noise(mf, eta)
    assert np.max(np.abs(mf.logits(xs).data - eta * mfifa_logits_ref(xs, mf))) <= 1e-12
    sp = EMSCA(2, 4, rng=rng)
    inject_noise(sp, eta)
    assert np.max(np.abs(sp(xs).data - eta * emsca_ref(xs, sp))) <= 1e-12


def test_inject_into_unsupported_block():
    with pytest.raises(ContractError):
        inject_noise(Conv2d(1, 1, 1), 1.0)


# -- stochastic attention layer ----------------------------------------------------------------

def _hooks(state, **kw):
    return RobustHooks(state, **{"rpf_fraction": 0.5, "projection_fraction": 0.5, **kw})


def _copy_matching(src, dst):
    params = dict(dst.named_parameters())
    for name, p in src.named_parameters():
        if name in params:
            params[name].data[...] = p.data


def _clean_path(layer, xs):
    ca = ChannelAttention(layer.channels, rng=np.random.default_rng(0))
    _copy_matching(layer.ca, ca)
    emcam = EMCAM(layer.m, layer.channels, rng=np.random.default_rng(0))
    _copy_matching(layer.emcam, emcam)
    return emcam(xs, source=[ca(x) for x in xs])


@pytest.mark.parametrize("how", ["degenerate", "identity"])
def test_rpan_with_identity_elements_is_clean_recalibration(how, rng):
    state = StochasticState(seed=1, man_std=0.0 if how == "identity" else 0.1)
    layer = RPANLayer(2, 4, _hooks(state, rpf_fraction=0.0), rng=rng)
    if how == "degenerate":
        state.mode = "degenerate"
    else:
        for _, mod in layer.named_modules():
            if hasattr(mod, "set_identity"):
                mod.set_identity()
    xs = [rng.standard_normal((2, 4, 4, 4)) for _ in range(2)]
    got = layer(xs)
    ref = _clean_path(layer, xs)
    for g, r in zip(got, ref):
        assert np.max(np.abs(g.data - r.data)) <= 1e-12


def test_rpan_missing_bank():
    layer = RPANLayer(2, 4, _hooks(StochasticState()))
    with pytest.raises(StateError):
        layer([np.ones((1, 4, 4, 4))] * 2)


def test_rpan_resampling_changes_output(rng):
    layer = RPANLayer(2, 4, _hooks(StochasticState(seed=2)), rng=rng)
    xs = [rng.standard_normal((1, 4, 4, 4)) for _ in range(2)]
    layer.resample()
    a = layer(xs)[0].data
    layer.resample()
    b = layer(xs)[0].data
    assert np.linalg.norm(a - b) > 0


def _proj_ref(x, proj):
    out = x.copy()
    out[:, :proj.n_random] = oracles.conv2d_loops(x, proj.bank, pad=proj.kernel // 2)
    return out


def _msgdc_robust_ref(x, block):
    x = _proj_ref(x, block.projection)
    out = 0.0
    for conv, pad in ((block.gpc, 0), (block.dw3, 1), (block.dw5, 2)):
        w = conv.weight.data.copy()
        w[:conv.rpf_filters] = conv.rpf_bank
        out = out + oracles.conv2d_loops(x, w, pad=pad, groups=conv.groups)
    return out


def test_rpan_matches_composed_oracle(rng):
    state = StochasticState(seed=5)
    layer = RPANLayer(2, 2, _hooks(state), use_dct=False, rng=rng)
    layer.resample()
    etas = {}
    for name, mod in layer.named_modules():
        if type(mod).__name__ == "ManSite":
            etas[name] = rng.uniform(0.5, 1.5, (mod.channels, 1, 1))
            mod.fixed = etas[name]
    xs = [rng.standard_normal((1, 2, 4, 4)) for _ in range(2)]
    got = layer(xs)

    def inner(x):
        z = _proj_ref(x, layer.projection) * etas["site"]
        return _proj_ref(ca_ref(z, layer.ca), layer.projection)

    src = [inner(x) for x in xs]
    em = layer.emcam
    f = etas["emcam.mfifa.site"] * mfifa_logits_ref(src, em.mfifa)
    H, W = 4, 4
    s1 = [oracles.local_pool_scan(_msgdc_robust_ref(x, em.emsca.msgdc[i]), "avg")
          + oracles.local_pool_scan(_msgdc_robust_ref(x, em.emsca.msgdc[i]), "max") for i, x in enumerate(src)]
    s2 = [oracles.local_pool_scan(_msgdc_robust_ref(s, em.emsca.msgdc[i]), "avg")
          + oracles.local_pool_scan(_msgdc_robust_ref(s, em.emsca.msgdc[i]), "max") for i, s in enumerate(s1)]
    s = 0.0
    for i in range(2):
        j = 1 - i
        s = s + em.emsca.theta.data[i] * (oracles.upsample_loops(s1[i], H, W) + oracles.upsample_loops(s1[j], H, W)
                                          + oracles.upsample_loops(s2[i], H, W))
    s = etas["emcam.emsca.site"] * s
    a = oracles.sigmoid(etas["emcam.site"] * (em.theta_f.data * f + em.theta_s.data * s))
    for i, (g, x) in enumerate(zip(got, xs)):
        ref = x * a * em.theta_m.data[i].reshape(1, -1, 1, 1)
        assert np.max(np.abs(g.data - ref)) <= 1e-12


# -- network level ---------------------------------------------------------------------------

def test_degenerate_robust_network_equals_clean(rng):
    cfg = desk_preset(tasks=(("a", 4), ("b", 2)))
    clean = build_mail(cfg)
    robust = build_mail(cfg, RobustConfig.degenerate())
    xs = [rng.uniform(0, 1, (3, 1, 64, 64)) for _ in range(2)]
    with clean.stats_frozen(), robust.stats_frozen():
        for a, b in zip(clean(xs), robust(xs)):
            assert np.max(np.abs(a.data - b.data)) <= 1e-12


def test_rpf_summary_counts():
    model = build_mail(tiny(), RobustConfig())
    s = rpf_summary(model)
    assert 0 < s["n_random"] <= s["n_total"]
    assert s["n_random"] == sum(s["n_random_per_module"].values())
    assert s["rpan_layers"] == 2 * 2 + 2 and s["branches"] == 2


def test_regularizer_value(rng):
    model = build_mail(tiny(), RobustConfig())
    filt, noise = 0.0, 0.0
    for _, mod in model.named_modules():
        if isinstance(mod, Conv2d):
            filt += float(np.sum(mod.weight.data[mod.rpf_filters:] ** 2))
        elif type(mod).__name__ == "ManSite":
            noise += float(np.sum(mod.delta.data ** 2))
    expected = 0.01 * (np.sqrt(filt) + np.sqrt(noise))
    assert abs(regularizer(model, 0.01).item() - expected) <= 1e-12 * expected
    assert regularizer(model, 0.0) is None


def _batch(rng, n=4):
    return [rng.uniform(0, 1, (n, 1, 16, 16)) for _ in range(2)], [rng.integers(0, 3, n)]


def test_adversarial_step_degenerate_equals_clean_step(rng):
    batch = _batch(rng)
    a = build_mail(tiny(), RobustConfig(weight_decay=0.0))
    b = build_mail(tiny(), RobustConfig(weight_decay=0.0))
    opt_a, opt_b = SGD(a.parameters(), lr=0.1), SGD(b.parameters(), lr=0.1)
    adversarial_train_step(a, batch, a.robust_config, AttackConfig(epsilon=0.0), opt_a, np.random.default_rng(0))
    b.resample("A")  # the attack-phase draw happens even when the attack is empty
    train_step(b, batch, opt_b)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data), n1


def test_adversarial_step_clean_model_equals_clean_step(rng):
    batch = _batch(rng)
    a, b = build_mail(tiny()), build_mail(tiny())
    adversarial_train_step(a, batch, None, AttackConfig(epsilon=0.0), SGD(a.parameters(), lr=0.1),
                           np.random.default_rng(0))
    train_step(b, batch, SGD(b.parameters(), lr=0.1))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_random_filters_get_zero_gradient_and_stay_fixed(rng):
    model = build_mail(tiny(), RobustConfig())
    opt = SGD(model.parameters(), lr=0.5)
    before = {c.path: c.weight.data[:c.rpf_filters].copy() for c in model.mixed_convs()}
    adversarial_train_step(model, _batch(rng), model.robust_config, AttackConfig(iters=2), opt,
                           np.random.default_rng(0))
    convs = model.mixed_convs()
    assert convs
    for c in convs:
        assert not c.weight.grad[:c.rpf_filters].any()
        assert np.array_equal(c.weight.data[:c.rpf_filters], before[c.path])
        assert c.weight.grad[c.rpf_filters:].any()


def test_phases_draw_independent_banks():
    model = build_mail(tiny(), RobustConfig())
    model.resample("A")
    a = [c.rpf_bank.copy() for c in model.mixed_convs()]
    model.resample("I")
    b = [c.rpf_bank for c in model.mixed_convs()]
    assert all(not np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ConfigError):
        model.resample("B")


def test_stochastic_inference_off_is_deterministic(rng):
    model = build_mail(tiny(), RobustConfig(stochastic_inference=False))
    xs = _batch(rng)[0]
    model(xs)
    model.eval()
    with model.inference():
        a = model(xs)[0].data
        b = model(xs)[0].data
    assert np.array_equal(a, b)


def test_robust_config_validation():
    for bad in (dict(rpf_fraction=1.5), dict(sigma=0.0), dict(weight_decay=-1.0), dict(mode="loud")):
        with pytest.raises(ConfigError):
            RobustConfig(**bad)
