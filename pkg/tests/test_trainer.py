import csv
import io

import numpy as np
import pytest

from meansparse import ops
from meansparse.attacks import AttackSpec, evaluate_robust, predict
from meansparse.data import synth_splits
from meansparse.errors import ConfigError, DivergenceError
from meansparse.model import LinearModel, MiniResNet, NetSpec
from meansparse.tensor import Tensor, no_grad
from meansparse.trainer import SGD, TrainConfig, batch_loss, history_to_csv, train, trades_adversary


def _blobs(n_train=200, n_test=100, k=2, spread=0.05, seed=0):
    return synth_splits(n_train, n_test, k, d_spatial=4, seed=seed, spread=spread)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="adam")
    with pytest.raises(ConfigError):
        TrainConfig(mode="trades", trades_beta=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="pgd_at", at_attack=None)
    with pytest.raises(ConfigError):
        TrainConfig(selection="median")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(at_attack={"steps": 3}, decay_epochs=[2, 4])
    assert cfg.at_attack.steps == 3 and cfg.decay_epochs == (2, 4)
    assert cfg.to_json()["decay_epochs"] == [2, 4]


def test_lr_schedule():
    cfg = TrainConfig(lr=0.1, decay_epochs=(15, 25), decay_factor=0.1)
    assert cfg.lr_at(0) == 0.1 and cfg.lr_at(14) == 0.1
    assert cfg.lr_at(15) == pytest.approx(0.01) and cfg.lr_at(25) == pytest.approx(0.001)


def test_sgd_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], momentum=0.9, weight_decay=0.1)
    p.grad = np.array([0.5, 0.5])
    opt.step(0.1)
    v1 = np.array([0.5, 0.5]) + 0.1 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * v1)
    prev = p.data.copy()
    p.grad = np.array([0.0, 1.0])
    opt.step(0.1)
    v2 = 0.9 * v1 + np.array([0.0, 1.0]) + 0.1 * prev
    np.testing.assert_allclose(p.data, prev - 0.1 * v2)


def test_standard_separable_blobs_reaches_99():
    s = _blobs()
    # The blobs are linearly separable: a least-squares probe already fits them.
    xf = s.train.images.reshape(len(s.train), -1)
    probe = np.linalg.lstsq(np.c_[xf, np.ones(len(xf))], 2.0 * s.train.labels - 1, rcond=None)[0]
    assert np.all((np.c_[xf, np.ones(len(xf))] @ probe > 0) == (s.train.labels == 1))
    model = LinearModel(s.train.input_shape, 2, seed=0)
    cfg = TrainConfig(epochs=50, batch_size=32, lr=0.05, decay_epochs=(), weight_decay=0.0,
                      val_attack=AttackSpec(steps=1, step_size=1 / 255), selection="last")
    best, history = train(model, s, cfg)
    acc = (predict(best, s.train.images) == s.train.labels).mean()
    assert acc >= 0.99
    assert len(history) == 50


def _paired_runs():
    s = synth_splits(300, 200, 4, d_spatial=4, seed=3, spread=0.15)
    mean, std = s.train.channel_stats()
    spec = AttackSpec(epsilon=8 / 255, steps=5, step_size=2.5 / 255)
    out = {}
    for mode in ("standard", "pgd_at"):
        net = NetSpec(input_shape=(3, 4, 4), num_classes=4, blocks=1, input_mean=mean, input_std=std)
        model = MiniResNet(net, seed=0)
        cfg = TrainConfig(epochs=6, batch_size=50, lr=0.05, decay_epochs=(4,), mode=mode, at_attack=spec,
                          selection="last", val_size=50, seed=0)
        out[mode], _ = train(model, s, cfg)
    return s, out


def test_pgd_at_more_robust_than_standard():
    s, models = _paired_runs()
    spec = AttackSpec(epsilon=8 / 255, steps=10, step_size=2 / 255)
    rob = {m: evaluate_robust(models[m], s.test.images, s.test.labels, spec, attack="pgd").robust_acc
           for m in models}
    assert rob["pgd_at"] > rob["standard"]


def test_trades_small_beta_equals_ce(rng):
    s = _blobs(n_train=40, k=4, spread=0.1)
    model = MiniResNet(NetSpec(input_shape=(3, 4, 4), num_classes=4, blocks=1), seed=1)
    x, y = s.train.images[:20], s.train.labels[:20]
    spec = AttackSpec(steps=2, step_size=2 / 255)
    tiny = batch_loss(model, x, y, TrainConfig(mode="trades", trades_beta=1e-12, at_attack=spec), seed=3)
    plain = batch_loss(model, x, y, TrainConfig(mode="standard"), seed=3)
    assert abs(float(tiny.data) - float(plain.data)) <= 1e-9


def test_trades_kl_nonnegative(rng):
    s = _blobs(n_train=60, k=4, spread=0.1)
    model = MiniResNet(NetSpec(input_shape=(3, 4, 4), num_classes=4, blocks=1), seed=2)
    spec = AttackSpec(steps=3, step_size=2 / 255)
    for seed in range(5):
        x = s.train.images[seed * 12:(seed + 1) * 12]
        x_adv = trades_adversary(model, x, spec, seed)
        assert np.abs(x_adv - x).max() <= spec.epsilon
        model.train()
        with no_grad():
            kl = ops.kl_div(model(Tensor(x)), model(Tensor(x_adv)), reduction="none").data
        assert np.all(kl >= 0)


def test_trades_trains():
    s = _blobs(n_train=120, k=4, spread=0.1)
    model = MiniResNet(NetSpec(input_shape=(3, 4, 4), num_classes=4, blocks=1), seed=0)
    cfg = TrainConfig(epochs=3, batch_size=40, lr=0.05, decay_epochs=(), mode="trades",
                      at_attack=AttackSpec(steps=2, step_size=4 / 255), val_size=30)
    _, history = train(model, s, cfg)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_moving_average_loss_non_increasing_in_first_stage():
    s = _blobs(n_train=200, k=4, spread=0.15, seed=5)
    model = LinearModel(s.train.input_shape, 4, seed=0)
    cfg = TrainConfig(epochs=24, batch_size=50, lr=0.02, decay_epochs=(30,), weight_decay=0.0,
                      val_attack=AttackSpec(steps=1, step_size=1 / 255), val_size=20, selection="last")
    _, history = train(model, s, cfg)
    loss = np.array([h["train_loss"] for h in history])
    ma = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0)


def test_fp64_bit_reproducible():
    s = _blobs(n_train=80, k=4, spread=0.15, seed=2)
    cfg = TrainConfig(epochs=2, batch_size=20, lr=0.05, decay_epochs=(1,), mode="pgd_at",
                      at_attack=AttackSpec(steps=2, step_size=4 / 255, restarts=1, random_start=True),
                      val_size=20, augment=False, seed=4)
    weights = []
    for _ in range(2):
        model = MiniResNet(NetSpec(input_shape=(3, 4, 4), num_classes=4, blocks=1), seed=0)
        best, hist = train(model, s, cfg)
        weights.append((best.state_dict(), hist))
    (a, ha), (b, hb) = weights
    assert ha == hb
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_divergence_raises_with_history():
    s = _blobs(n_train=60, k=4, spread=0.2)
    model = LinearModel(s.train.input_shape, 4, seed=0)
    # Coupled weight decay with an absurd step multiplies the weights by ~1e99 per update.
    cfg = TrainConfig(epochs=5, batch_size=20, lr=1e100, decay_epochs=(), weight_decay=0.1, val_size=10,
                      val_attack=AttackSpec(steps=1, step_size=1 / 255))
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
        train(model, s, cfg)
    assert "epoch" in str(info.value)


def test_selection_rules():
    s = _blobs(n_train=60, k=2, spread=0.1)
    cfg = dict(epochs=3, batch_size=20, lr=0.05, decay_epochs=(), val_size=30,
               val_attack=AttackSpec(steps=2, step_size=2 / 255))
    for rule in ("best_pgd", "best_clean", "last"):
        model = LinearModel(s.train.input_shape, 2, seed=0)
        best, history = train(model, s, TrainConfig(selection=rule, **cfg))
        assert not best.training
        if rule == "last":
            for k, v in model.state_dict().items():
                np.testing.assert_array_equal(best.state_dict()[k], v)


def test_augmented_training_runs():
    s = _blobs(n_train=40, k=2, spread=0.1)
    model = MiniResNet(NetSpec(input_shape=(3, 4, 4), num_classes=2, blocks=1), seed=0)
    cfg = TrainConfig(epochs=1, batch_size=20, augment=True, val_size=10,
                      val_attack=AttackSpec(steps=1, step_size=1 / 255))
    _, history = train(model, s, cfg)
    assert np.isfinite(history[0]["train_loss"])


def test_history_csv():
    rows = [{"epoch": 0, "lr": 0.1, "train_loss": 1.5, "clean_val_acc": 0.5, "pgd_val_acc": 0.25}]
    text = history_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert text.splitlines()[0] == "epoch,lr,train_loss,clean_val_acc,pgd_val_acc"
    assert float(parsed[0]["train_loss"]) == 1.5 and parsed[0]["epoch"] == "0"
