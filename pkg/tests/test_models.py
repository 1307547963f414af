import numpy as np
import pytest

from malign import tensor as T
from malign.data import Dataset, synth_split
from malign.errors import ConfigError
from malign.models import FAMILIES, SIZE_TAGS, TrainConfig, accuracy, build_model, train


def test_same_seed_bit_identical():
    a, b = build_model("cnn-M", 7), build_model("cnn-M", 7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


@pytest.mark.parametrize("family", FAMILIES)
def test_different_seeds_differ_almost_everywhere(family):
    a, b = build_model(f"{family}-M", 1), build_model(f"{family}-M", 2)
    same = sum(int(np.sum(a.params[k] == b.params[k])) for k in a.params)
    total = sum(v.size for v in a.params.values())
    assert same / total <= 0.01


@pytest.mark.parametrize("family", FAMILIES)
def test_capacity_ordering(family):
    counts = [build_model(f"{family}-{t}", 0).num_params for t in SIZE_TAGS]
    assert counts[0] < counts[1] < counts[2]


def test_unknown_tag_rejected():
    with pytest.raises(ConfigError):
        build_model("mlp-XL", 0)
    with pytest.raises(ConfigError):
        build_model("resnet-S", 0)


def test_he_scaling_on_relu_layers():
    m = build_model("mlp-L", 0, input_shape=(1, 30, 30))
    w = m.params["2.weight"]  # dense feeding a relu, fan-in 900
    assert abs(w.std() - np.sqrt(2 / 900)) < 0.05 * np.sqrt(2 / 900)
    out = m.params[f"{m.depth - 1}.weight"]  # last dense, uniform
    assert np.abs(out).max() <= 1 / np.sqrt(out.shape[1])


def test_zero_epochs_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_one_step_least_squares():
    # one weight, loss (w x - t)^2 on the logit; constant schedule so the step uses base_lr
    w0, x, t, lr = 0.3, 0.8, 1.0, 0.1
    m = T.Model((T.dense(1, 1), T.softmax()), {"1.weight": np.array([[w0]]), "1.bias": np.zeros(1)}, (1,))
    loss = lambda z: (float((z[0, 0] - t) ** 2), 2 * (z - t))  # noqa: E731
    g = T.backward(m, np.array([[x]]), loss, upto_layer=1).param_grads
    state = T.OptimizerState.create(m.params, T.LRSchedule(lr), momentum=0.0)
    new, _ = T.sgd_step(m.params, {"1.weight": g["1.weight"], "1.bias": np.zeros(1)}, state)
    assert abs(new["1.weight"][0, 0] - (w0 - lr * 2 * (w0 * x - t) * x)) < 1e-15


def test_final_training_step_has_zero_rate():
    # cosine decay reaches zero at the last step, so one-step training leaves parameters unchanged
    m = build_model("mlp-S", 0, num_classes=2, input_shape=(3,))
    ds = Dataset(np.full((1, 3), 0.5), np.array([1]), 2)
    out, _ = train(m, ds, TrainConfig(epochs=1, batch_size=1, warmup_fraction=0.0))
    for k in m.params:
        np.testing.assert_array_equal(out.params[k], m.params[k])


def test_training_is_bit_reproducible(blobs):
    tr, _ = blobs
    cfg = TrainConfig(epochs=2, seed=5)
    a, ha = train(build_model("mlp-S", 3), tr, cfg)
    b, hb = train(build_model("mlp-S", 3), tr, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert ha.epochs == hb.epochs


def test_history_fields(blobs):
    _, h = train(build_model("mlp-S", 0), blobs[0], TrainConfig(epochs=2))
    assert [e["epoch"] for e in h.epochs] == [1, 2]
    assert set(h.epochs[0]) == {"epoch", "loss", "accuracy", "lr"}


def test_empty_data_rejected():
    with pytest.raises(ConfigError):
        train(build_model("mlp-S", 0), Dataset(np.zeros((0, 1, 12, 12)), np.zeros(0), 10), TrainConfig())


def test_cnn_s_four_class_floor():
    tr, te = synth_split("gauss-blobs", 400, 400, num_classes=4, noise=0.05, seed=0)
    m, _ = train(build_model("cnn-S", 0, num_classes=4), tr, TrainConfig(epochs=5))
    assert accuracy(m, te) >= 0.95


@pytest.mark.slow
@pytest.mark.parametrize("kind,sep", [("gauss-blobs", 0.2), ("ring-classes", 0.7)])
def test_zoo_beats_twice_chance(kind, sep):
    tr, _ = synth_split(kind, 1000, 0, separation=sep)
    for fam in FAMILIES:
        for tag in SIZE_TAGS:
            m, _ = train(build_model(f"{fam}-{tag}", 0), tr, TrainConfig(epochs=10))
            assert accuracy(m, tr) >= 2 * 0.1, f"{fam}-{tag}"
