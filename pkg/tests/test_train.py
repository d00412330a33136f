import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import confusion_matrix as sk_confusion
from sklearn.metrics import f1_score, roc_auc_score

from mailnet.errors import ConfigError, DataError, NumericError
from mailnet.metrics import UndefinedMetricError, compute_metrics
from mailnet.network import NetworkConfig, build_mail
from mailnet.nn import Parameter
from mailnet.train import SGD, PlateauScheduler, TrainConfig, evaluate, fit, format_log


# -- optimiser -----------------------------------------------------------------------------------

def test_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    SGD([p], lr=0.1).step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_single_scalar_step():
    p = Parameter(np.array(1.0))
    p.grad = np.array(2.0)
    SGD([p], lr=0.1, momentum=0.0).step()
    assert abs(p.data - 0.8) < 1e-15


def test_quadratic_bowl_converges():
    p = Parameter(np.array(3.0))
    opt = SGD([p], lr=0.1, momentum=0.0)
    for _ in range(100):
        p.grad = 2 * p.data
        opt.step()
    assert abs(p.data) < 1e-8


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-4, 1.0))
def test_plain_sgd_matches_closed_form(x, g, lr):
    p = Parameter(np.array([x]))
    p.grad = np.array([g])
    SGD([p], lr=lr, momentum=0.0).step()
    assert p.data[0] == x - lr * g


def test_momentum_buffer():
    p = Parameter(np.array(0.0))
    opt = SGD([p], lr=1.0, momentum=0.5)
    for g in (1.0, 1.0):
        p.grad = np.array(g)
        opt.step()
    # v1 = 1, v2 = 0.5 + 1 = 1.5
    assert p.data == -2.5


def test_frozen_entries_untouched():
    p = Parameter(np.array([1.0, 2.0, 3.0]))
    p.frozen_mask = np.array([True, False, True])
    p.grad = np.ones(3)
    SGD([p], lr=0.5, weight_decay=0.1).step()
    assert p.data[0] == 1.0 and p.data[2] == 3.0 and p.data[1] != 2.0


def test_nan_gradient_raises():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        SGD([p]).step()
    assert p.data[0] == 1.0


def test_sgd_config_errors():
    with pytest.raises(ConfigError):
        SGD([], lr=0.0)
    with pytest.raises(ConfigError):
        SGD([], momentum=1.0)


# -- plateau schedule ----------------------------------------------------------------------------

def _sched(lr=0.001, **kw):
    return PlateauScheduler(SGD([Parameter(np.zeros(1))], lr=lr), **kw)


def test_improving_metric_keeps_lr():
    s = _sched()
    for m in np.linspace(1.0, 0.1, 30):
        assert s.step(m) == 0.001


def test_flat_metric_decays_once_after_patience():
    s = _sched(patience=10)
    lrs = [s.step(1.0) for _ in range(12)]
    # first epoch sets the best; ten flat epochs are tolerated, the eleventh decays
    assert lrs[:11] == [0.001] * 11
    assert abs(lrs[11] - 0.0001) < 1e-18


def test_long_flat_sequence_floors_at_min_lr():
    s = _sched(lr=0.05)
    lrs = [s.step(1.0) for _ in range(200)]
    assert lrs[-1] == 1e-6
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(1e-6 <= v <= 0.05 for v in lrs)


def test_threshold_is_relative():
    s = _sched(patience=0, threshold=0.1)
    s.step(1.0)
    assert s.step(0.95) == 0.0001  # a 5% gain is below the 10% threshold


def test_scheduler_config_errors():
    with pytest.raises(ConfigError):
        _sched(factor=1.0)


# -- metrics -----------------------------------------------------------------------------------

def _logits_for(pred, k):
    z = np.zeros((len(pred), k))
    z[np.arange(len(pred)), pred] = 1.0
    return z


def test_perfect_predictions():
    y = np.array([0, 1, 2, 1, 0])
    r = compute_metrics(_logits_for(y, 3) * 5, y)
    assert r.acc == r.macro_f1 == r.macro_auc == 1.0


def test_binary_hand_example():
    r = compute_metrics(_logits_for(np.array([1, 1, 0, 0]), 2), np.array([1, 0, 0, 0]))
    assert r.acc == 0.75
    c0, c1 = r.per_class
    assert (c1.precision, c1.recall) == (0.5, 1.0) and abs(c1.f1 - 2 / 3) < 1e-15
    assert (c0.precision, c0.recall) == (1.0, 2 / 3) and abs(c0.f1 - 0.8) < 1e-15
    assert abs(r.macro_f1 - 0.7333) < 1e-4
    assert abs(r.macro_f1 - (2 / 3 + 0.8) / 2) < 1e-15


def test_equal_scores_auc_half():
    r = compute_metrics(np.zeros((6, 3)), np.array([0, 1, 2, 0, 1, 2]))
    assert r.macro_auc == 0.5
    assert all(c.auc == 0.5 for c in r.per_class)


def test_single_class_auc_undefined():
    with pytest.raises(UndefinedMetricError):
        compute_metrics(np.zeros((3, 2)), np.array([1, 1, 1]))


def test_label_out_of_range():
    with pytest.raises(DataError):
        compute_metrics(np.zeros((2, 2)), np.array([0, 2]))


def test_empty_class_scores_zero_f1():
    r = compute_metrics(_logits_for(np.array([0, 1, 0]), 3), np.array([0, 1, 1]))
    assert r.per_class[2].f1 == 0.0 and r.per_class[2].support == 0
    assert r.per_class[2].auc is None


@settings(max_examples=30)
@given(st.integers(0, 2**16), st.integers(2, 5), st.integers(10, 60))
def test_metrics_match_sklearn(seed, k, n):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    z = rng.standard_normal((n, k)) + 1.5 * np.eye(k)[y] * rng.integers(0, 2, n)[:, None]
    z = np.round(z, 1)  # produce ties
    r = compute_metrics(z, y)
    pred = z.argmax(axis=1)
    assert abs(r.acc - np.mean(pred == y)) < 1e-15
    assert abs(r.macro_f1 - f1_score(y, pred, average="macro", labels=list(range(k)), zero_division=0)) < 1e-12
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    for c in range(k):
        assert abs(r.per_class[c].auc - roc_auc_score(y == c, p[:, c])) < 1e-12
    assert np.array_equal(r.confusion, sk_confusion(y, pred, labels=list(range(k))))


@settings(max_examples=30)
@given(st.integers(0, 2**16))
def test_metrics_invariants(seed):
    rng = np.random.default_rng(seed)
    y = np.concatenate([[0, 1, 2], rng.integers(0, 3, 17)])
    z = rng.standard_normal((20, 3))
    r = compute_metrics(z, y)
    perm = rng.permutation(20)
    q = compute_metrics(z[perm], y[perm])
    assert (q.acc, q.macro_f1, q.macro_auc) == pytest.approx((r.acc, r.macro_f1, r.macro_auc), abs=1e-15)
    assert r.acc == np.trace(r.confusion) / r.confusion.sum()
    assert np.array_equal(r.confusion.sum(axis=1), np.bincount(y, minlength=3))
    for v in (r.acc, r.macro_f1, r.macro_auc):
        assert 0.0 <= v <= 1.0


def test_report_text_lines():
    text = compute_metrics(_logits_for(np.array([1, 0]), 2), np.array([1, 0])).to_text("test.")
    assert text.splitlines()[0] == "test.acc = 1.0"


# -- loop --------------------------------------------------------------------------------------

def _tiny_task(rng, n=24):
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.2, (n, 1, 16, 16))
    x[y == 1, :, :8] += 0.7
    return [x, x[:, :, ::-1].copy()], [y]


def test_fit_logs_and_learns(rng):
    cfg = NetworkConfig(m=2, stage_channels=(4, 8), depths=(1, 1), stage_strides=(1, 1), stem_pool=2,
                        input_size=(16, 16, 1), tasks=(("t", 2),))
    model = build_mail(cfg)
    data = _tiny_task(rng)
    lines = []
    hist = fit(model, data, data, TrainConfig(epochs=4, batch_size=8, lr=0.05), log=lines.append)
    assert len(hist) == 4 and len(lines) == 4
    assert lines[0].startswith("epoch=1 train_loss=") and "val_acc=" in lines[0] and "lr=" in lines[0]
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert evaluate(model, *data)["acc"] == hist[-1]["val_acc"]


def test_fit_is_reproducible(rng):
    cfg = NetworkConfig(m=2, stage_channels=(4, 8), depths=(1, 1), stage_strides=(1, 1), stem_pool=2,
                        input_size=(16, 16, 1), tasks=(("t", 2),))
    data = _tiny_task(rng, 16)
    runs = []
    for _ in range(2):
        model = build_mail(cfg)
        fit(model, data, data, TrainConfig(epochs=2, batch_size=8, seed=3))
        runs.append([p.data.copy() for p in model.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*runs))


def test_format_log():
    rec = {"epoch": 2, "train_loss": 0.5, "val_loss": 0.25, "val_acc": 1.0, "lr": 0.05}
    assert format_log(rec) == "epoch=2 train_loss=0.500000 val_loss=0.250000 val_acc=1.000000 lr=0.05"
