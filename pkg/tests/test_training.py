import json
import math

import numpy as np
import pytest

from pixeldamage import layers as L
from pixeldamage.architectures import Network
from pixeldamage.data import derive_binary_mask, generate_synthetic
from pixeldamage.tensor import NumericError, RngState
from pixeldamage.training import (SGD, LossConfig, Schedule, TrainConfig, batches, class_balance_weights,
                                  loss, pixel_counts, train)


def test_median_balancing_examples():
    np.testing.assert_allclose(class_balance_weights([50, 25, 25]), [0.5, 1.0, 1.0])
    np.testing.assert_allclose(class_balance_weights([10, 10, 10, 10]), 1.0)


def test_median_balancing_hand_counted():
    masks = [np.array([[0, 0], [1, 2]]), np.array([[0, 0], [0, 1]]), np.array([[2, 2], [0, 0]])]
    counts = pixel_counts(masks, 3)
    assert counts.tolist() == [7, 2, 3]
    # f = 7/12, 2/12, 3/12; median 3/12
    np.testing.assert_allclose(class_balance_weights(counts), [3 / 7, 3 / 2, 1.0])


def test_absent_class_gets_zero_weight(caplog):
    w = class_balance_weights([5, 0, 5])
    assert w.tolist() == [1.0, 0.0, 1.0]
    assert "no pixels" in caplog.text


def onehot_probs(labels, c, eps=0.0):
    p = np.full((labels.shape[0], c) + labels.shape[1:], eps / (c - 1))
    np.put_along_axis(p, labels[:, None], 1 - eps, axis=1)
    return p


def test_perfect_prediction_zero_loss():
    y = np.random.default_rng(0).integers(0, 7, size=(2, 3, 3))
    value, _, _ = loss(onehot_probs(y, 7), y, LossConfig(0.0, np.ones(7), 7))
    assert value == 0.0


def test_uniform_prediction_is_ln7():
    y = np.random.default_rng(1).integers(0, 7, size=(2, 4, 4))
    value, _, _ = loss(np.full((2, 7, 4, 4), 1 / 7), y, LossConfig(0.0, np.ones(7), 7))
    assert abs(value - math.log(7)) < 1e-12
    assert abs(value - 1.94591) < 1e-5


def test_unit_weights_match_scalar_cross_entropy():
    g = np.random.default_rng(2)
    z = g.normal(size=(2, 3, 2, 2))
    y = g.integers(0, 3, size=(2, 2, 2))
    value, _, _ = loss(L.softmax_per_pixel(z), y, LossConfig(0.0, np.ones(3), 3))
    total = 0.0
    for n in range(2):
        for i in range(2):
            for j in range(2):
                zs = [z[n, c, i, j] for c in range(3)]
                total += -(zs[y[n, i, j]] - math.log(sum(math.exp(v) for v in zs)))
    assert abs(value - total / 8) < 1e-12


def test_class_weight_scaling_is_linear():
    g = np.random.default_rng(3)
    p = L.softmax_per_pixel(g.normal(size=(2, 7, 3, 3)))
    y = g.integers(0, 7, size=(2, 3, 3))
    w = g.uniform(0.5, 2, size=7)
    a, da, _ = loss(p, y, LossConfig(0.0, w, 7))
    b, db, _ = loss(p, y, LossConfig(0.0, 2.5 * w, 7))
    assert abs(b - 2.5 * a) < 1e-12
    np.testing.assert_allclose(db, 2.5 * da)


def test_decay_applies_to_weights_only():
    w = {"conv0.weight": np.ones((2, 2)), "conv0.bias": np.ones(2), "conv0.bn.gamma": np.ones(2)}
    p = np.full((1, 2, 1, 1), 0.5)
    value, _, dw = loss(p, np.zeros((1, 1, 1), int), LossConfig(0.1, np.ones(2), 2), w)
    assert abs(value - (math.log(2) + 0.1 * 4)) < 1e-12
    assert list(dw) == ["conv0.weight"]
    np.testing.assert_allclose(dw["conv0.weight"], 0.2)


def test_decay_step_shrinks_norm():
    w = {"a.weight": np.random.default_rng(4).normal(size=(3, 3))}
    before = np.sum(w["a.weight"] ** 2)
    _, _, dw = loss(np.full((1, 2, 1, 1), 0.5), np.zeros((1, 1, 1), int), LossConfig(0.01, np.ones(2), 2), w)
    SGD().step(w, dw, 0.1)
    assert np.sum(w["a.weight"] ** 2) < before


def test_out_of_range_label_names_pixel():
    y = np.zeros((1, 2, 2), int)
    y[0, 1, 0] = 7
    with pytest.raises(ValueError, match=r"\(0, 1, 0\)"):
        loss(np.full((1, 7, 2, 2), 1 / 7), y, LossConfig(0.0, np.ones(7), 7))


def test_sgd_closed_form():
    params = {"w": np.array([3.0])}
    SGD().step(params, {"w": np.array([2.0])}, 0.25)
    assert params["w"][0] == 3.0 - 0.25 * 2.0


def test_sgd_momentum():
    params = {"w": np.array([0.0])}
    opt = SGD(0.9)
    opt.step(params, {"w": np.array([1.0])}, 1.0)
    opt.step(params, {"w": np.array([1.0])}, 1.0)
    assert params["w"][0] == -(1.0 + 1.9)


def test_schedule_defaults():
    s = Schedule()
    assert s.total_epochs == 160 and s.batch_size == 5
    assert [s.learning_rate(e) for e in (0, 69, 70, 119, 120, 144, 145, 159)] == [
        1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6]
    with pytest.raises(ValueError):
        Schedule(((0, 1e-3),))


def test_batches_cover_and_merge_singletons():
    b = batches(11, 5, RngState(0))
    assert [len(x) for x in b] == [5, 6]
    assert sorted(np.concatenate(b).tolist()) == list(range(11))


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(4, RngState(1), size=32)


def _run(samples, seed=3, epochs=2, role="classifier", **kw):
    net = Network.build("resnet23", role, RngState(0))
    cfg = TrainConfig(Schedule(((epochs, 0.01),), batch_size=2), momentum=0.9, **kw)
    label_fn = derive_binary_mask if role == "segmenter" else None
    return train(net, samples, samples[:1], cfg, RngState(seed), label_fn=label_fn)


def test_training_is_bitwise_deterministic(tiny):
    a, b = _run(tiny), _run(tiny)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    for k in a.net.params:
        assert np.array_equal(a.net.params[k], b.net.params[k])
    c = _run(tiny, seed=4)
    assert [r["loss"] for r in a.history] != [r["loss"] for r in c.history]


def test_metrics_log_and_checkpoints(tiny, tmp_path):
    net = Network.build("resnet23", "segmenter", RngState(0))
    cfg = TrainConfig(Schedule(((3, 0.01),), batch_size=2), checkpoint_every=2, augment=False)
    state = train(net, tiny, tiny[:2], cfg, RngState(0), out_dir=tmp_path, metrics_path=tmp_path / "m.jsonl",
                  label_fn=derive_binary_mask)
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert {"loss", "lr", "train_accuracy", "test_accuracy"} <= set(lines[-1])
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_0002.ckpt", "final.ckpt"]
    assert state.class_weights.shape == (2,)


def test_role_label_mismatch(tiny):
    net = Network.build("resnet23", "segmenter", RngState(0))
    with pytest.raises(ValueError, match="2 classes"):
        train(net, tiny, [], TrainConfig(Schedule(((1, 0.01),))), RngState(0))


def test_nan_loss_aborts_with_location(tiny):
    net = Network.build("resnet23", "classifier", RngState(0))
    net.params["fc1.bias"][:] = np.nan
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(net, tiny, [], TrainConfig(Schedule(((1, 0.01),), batch_size=2), augment=False), RngState(0))
