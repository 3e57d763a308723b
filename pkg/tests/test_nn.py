import math

import numpy as np
import pytest

from smoothsvd import nn, regularizers
from smoothsvd.errors import DimensionError, NumericError, TrainingDiverged

from helpers import fd_max_rel_error, naive_conv, single_conv, single_dense, small_cnn, small_mlp


# --- layer specs and models -------------------------------------------------


def test_layer_spec_rejects_bad_fields():
    with pytest.raises(ValueError):
        nn.LayerSpec("pool", "p")
    with pytest.raises(ValueError):
        nn.dense("d", 0, 3)
    with pytest.raises(ValueError):
        nn.conv2d("c", 1, 2, 3, stride=0)
    with pytest.raises(ValueError):
        nn.activation("a", "tanh")


def test_layer_spec_dict_round_trip():
    spec = nn.conv2d("c", 3, 5, (3, 2), stride=2, pad=1, has_bias=False)
    again = nn.LayerSpec.from_dict(spec.to_dict())
    assert again == spec
    with pytest.raises(ValueError):
        nn.LayerSpec.from_dict({**spec.to_dict(), "dilation": 2})


def test_weight_shapes_follow_convention():
    m = small_cnn()
    assert m.params["c0.weight"].shape == (4, 2, 3, 3)
    assert m.params["d0.weight"].shape == (6, 20)
    assert m.params["d0.bias"].shape == (6,)
    assert m.layer_count == 4


def test_model_rejects_incompatible_shapes():
    layers = [nn.dense("a", 3, 4), nn.dense("b", 5, 2)]
    with pytest.raises(DimensionError):
        nn.build(layers, (3,))


def test_model_rejects_stray_params():
    m = single_dense(np.eye(2))
    with pytest.raises(DimensionError):
        nn.Model(m.layers, {**m.params, "ghost": np.zeros(1)}, m.input_shape)


def test_param_count_counts_shared_key_once():
    a = nn.LayerSpec("dense", "p0", in_features=3, out_features=3, weight_key="w")
    b = nn.LayerSpec("dense", "p1", in_features=3, out_features=3, weight_key="w")
    params = {"w": np.ones((3, 3)), "p0.bias": np.zeros(3), "p1.bias": np.zeros(3)}
    m = nn.Model([a, nn.activation("act", "identity"), b], params, (3,))
    assert m.param_count() == 9 + 3 + 3
    assert m.weight_keys() == ["w"]
    assert m.param_keys() == ["w", "p0.bias", "p1.bias"]


def test_init_is_seeded_and_bounded():
    a, b = small_mlp(seed=4), small_mlp(seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    m = nn.cnn_classifier((1, 8, 8), (4, 6), classes=3, seed=1)
    w = m.params["conv1.weight"]
    assert np.max(np.abs(w)) <= math.sqrt(1.0 / (4 * 9))


def test_sine_init_uses_first_layer_rule():
    m = nn.inr_mlp(hidden=16, hidden_layers=1, omega0=30.0, seed=0)
    assert np.max(np.abs(m.params["fc0.weight"])) <= 1.0 / 2
    assert np.max(np.abs(m.params["fc1.weight"])) <= math.sqrt(6.0 / 16) / 30.0


# --- forward ----------------------------------------------------------------


def test_forward_identity_layer():
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.array_equal(nn.forward(single_dense(np.eye(3), np.zeros(3)), x), x)


def test_forward_hand_case():
    m = single_dense([[1.0, 1.0]], [0.5])
    assert nn.forward(m, np.array([[1.0, 2.0]]))[0, 0] == 3.5


@pytest.mark.parametrize("stride, pad", [(1, 0), (2, 1), (1, 2)])
def test_forward_conv_matches_direct(stride, pad):
    rng = np.random.default_rng(stride + 3 * pad)
    w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    m = single_conv(w, b, stride, pad, hw=(6, 7))
    x = rng.standard_normal((4, 2, 6, 7))
    assert np.max(np.abs(nn.forward(m, x) - naive_conv(x, w, b, stride, pad))) < 1e-12


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(DimensionError):
        nn.forward(single_dense(np.eye(3)), np.ones((2, 4)))


def test_forward_names_layer_on_non_finite():
    m = single_dense([[1e308, 1e308]])
    with pytest.raises(NumericError, match="fc"):
        nn.forward(m, np.array([[1e308, 1e308]]))


def test_activations():
    x = np.array([[-1.0, 0.0, 2.0]])
    relu = nn.Model([nn.activation("r", "relu")], {}, (3,))
    sine = nn.Model([nn.activation("s", "sine", omega0=2.0)], {}, (3,))
    ident = nn.Model([nn.activation("i", "identity")], {}, (3,))
    assert np.array_equal(nn.forward(relu, x), [[0.0, 0.0, 2.0]])
    assert np.allclose(nn.forward(sine, x), np.sin(2.0 * x))
    assert np.array_equal(nn.forward(ident, x), x)


# --- losses and gradients ---------------------------------------------------


def test_perfect_prediction_has_zero_loss_and_grads():
    m = single_dense([[2.0, -1.0]], [0.1])
    x = np.array([[1.0, 1.0], [0.0, 3.0]])
    y = nn.forward(m, x)
    loss, grads = nn.loss_and_grads(m, x, y, nn.TrainConfig(loss="mse"))
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_mse_is_mean_over_batch_and_outputs():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    value, grad = nn.mse_loss(pred, np.zeros((2, 2)))
    assert value == pytest.approx(30.0 / 4)
    assert np.allclose(grad, pred / 2)


@pytest.mark.parametrize("classes", [2, 3, 10])
def test_uniform_cross_entropy_is_log_c(classes):
    value, _ = nn.cross_entropy_loss(np.zeros((4, classes)), np.arange(4) % classes)
    assert abs(value - math.log(classes)) < 1e-12


def test_cross_entropy_label_mismatch():
    with pytest.raises(DimensionError):
        nn.cross_entropy_loss(np.zeros((3, 2)), [0, 1])


@pytest.mark.parametrize("act", ["relu", "sine", "identity"])
@pytest.mark.parametrize("reg", ["none", "r1", "r2", "nuc"])
def test_cnn_gradients_match_finite_differences(act, reg):
    m = small_cnn(act, seed=2, omega0=3.0)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((3, 2, 6, 6)), rng.integers(0, 3, 3)
    cfg = nn.TrainConfig(loss="cross_entropy", regularizer=reg, lam=0.1)
    limit = 1e-3 if reg == "nuc" else 1e-4
    assert fd_max_rel_error(m, x, y, cfg) < limit


@pytest.mark.parametrize("reg", ["none", "r1", "r2", "nuc"])
def test_sine_mlp_gradients_match_finite_differences(reg):
    m = small_mlp("sine", seed=1, omega0=30.0)
    rng = np.random.default_rng(2)
    x, y = rng.uniform(-1, 1, (5, 3)), rng.uniform(0, 1, (5, 2))
    cfg = nn.TrainConfig(loss="mse", regularizer=reg, lam=0.1)
    limit = 1e-3 if reg == "nuc" else 1e-4
    assert fd_max_rel_error(m, x, y, cfg) < limit


def test_loss_is_additive_in_regularizer():
    m = small_mlp("relu", seed=3)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    base, _ = nn.loss_and_grads(m, x, y, nn.TrainConfig(loss="mse", regularizer="r1", lam=0.0))
    reg, _ = nn.loss_and_grads(m, x, y, nn.TrainConfig(loss="mse", regularizer="r1", lam=0.7))
    assert reg == pytest.approx(base + 0.7 * regularizers.r1_penalty(m)[0], abs=1e-14)


def test_shared_weight_gradients_accumulate():
    rng = np.random.default_rng(5)
    a = nn.LayerSpec("dense", "p0", in_features=3, out_features=3, has_bias=False, weight_key="w")
    b = nn.LayerSpec("dense", "p1", in_features=3, out_features=3, has_bias=False, weight_key="w")
    m = nn.Model([a, nn.activation("s", "sine", 1.0), b], {"w": rng.standard_normal((3, 3))}, (3,))
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert fd_max_rel_error(m, x, y, nn.TrainConfig(loss="mse")) < 1e-6


# --- config, schedules, optimizers ------------------------------------------


@pytest.mark.parametrize("field, value", [("lam", -0.1), ("lr", 0.0), ("epochs", 0),
                                          ("loss", "hinge"), ("optimizer", "rmsprop"),
                                          ("schedule", "step"), ("regularizer", "l2")])
def test_train_config_validation(field, value):
    with pytest.raises(ValueError):
        nn.TrainConfig(**{field: value})


def test_cosine_schedule_endpoint():
    cfg = nn.TrainConfig(lr=0.1, schedule="cosine")
    assert nn.learning_rate(cfg, 0, 100) == pytest.approx(0.1)
    assert nn.learning_rate(cfg, 99, 100) < 1e-3 * 0.1


def test_cosine_schedule_floor():
    cfg = nn.TrainConfig(lr=0.1, schedule="cosine", min_lr_factor=0.1)
    assert nn.learning_rate(cfg, 99, 100) == pytest.approx(0.01)


def test_warmup_then_cosine():
    cfg = nn.TrainConfig(lr=0.1, schedule="warmup_cosine")
    lrs = [nn.learning_rate(cfg, s, 20, warmup_steps=5) for s in range(20)]
    assert lrs[:5] == pytest.approx([0.02, 0.04, 0.06, 0.08, 0.1])
    assert lrs[5] == pytest.approx(0.1)
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert lrs[-1] < 1e-4


def test_sgd_weight_decay_is_decoupled():
    p = {"w": np.array([1.0])}
    nn.SGD(weight_decay=0.5).step(p, {"w": np.array([0.0])}, lr=0.1)
    assert p["w"][0] == pytest.approx(0.95)


def test_nesterov_step():
    p = {"w": np.array([0.0])}
    opt = nn.SGD(momentum=0.9, nesterov=True)
    opt.step(p, {"w": np.array([1.0])}, lr=1.0)
    # buffer = 1, update = g + 0.9 * buffer
    assert p["w"][0] == pytest.approx(-1.9)


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([0.0, 0.0])}
    nn.Adam().step(p, {"w": np.array([3.0, -0.2])}, lr=0.01)
    assert np.allclose(p["w"], [-0.01, 0.01], atol=1e-8)


# --- training ---------------------------------------------------------------


def test_train_recovers_slope():
    layer = nn.dense("w", 1, 1, has_bias=False)
    m = nn.Model([layer], {"w.weight": np.zeros((1, 1))}, (1,))
    x = np.linspace(-1, 1, 21)[:, None]
    cfg = nn.TrainConfig(loss="mse", optimizer="sgd", lr=0.5, epochs=200)
    nn.train(m, (x, 2.0 * x), cfg)
    assert abs(m.params["w.weight"][0, 0] - 2.0) < 1e-3


def test_training_loss_non_increasing_on_convex_problem():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 4))
    y = x @ rng.standard_normal((4, 2)) + 0.1 * rng.standard_normal((32, 2))
    m = nn.build([nn.dense("fc", 4, 2)], (4,), seed=0)
    log = nn.train(m, (x, y), nn.TrainConfig(loss="mse", optimizer="sgd", lr=0.05, epochs=40)).log
    losses = [row["data_loss"] for row in log]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_train_log_columns():
    m = small_mlp("relu")
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((10, 3)), rng.uniform(0, 1, (10, 2))
    cfg = nn.TrainConfig(loss="mse", regularizer="r2", lam=0.01, epochs=3, batch_size=4)
    log = nn.train(m, (x, y), cfg).log
    assert [row["epoch"] for row in log] == [0, 1, 2]
    assert set(log[0]) == {"epoch", "lr", "data_loss", "reg_value", "total_loss", "metric"}
    assert log[0]["total_loss"] == pytest.approx(log[0]["data_loss"] + 0.01 * log[0]["reg_value"])


def test_train_is_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((12, 2, 6, 6)), rng.integers(0, 3, 12)
    cfg = nn.TrainConfig(loss="cross_entropy", optimizer="sgd", lr=0.05, momentum=0.9,
                         epochs=2, batch_size=5, regularizer="r1", lam=0.05, seed=3)
    a, b = small_cnn(seed=7), small_cnn(seed=7)
    nn.train(a, (x, y), cfg)
    nn.train(b, (x, y), cfg)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_train_reports_divergence():
    m = single_dense([[1.0]], [0.0])
    x = np.array([[1.0], [2.0]])
    cfg = nn.TrainConfig(loss="mse", optimizer="sgd", lr=1e6, epochs=50)
    with pytest.raises(TrainingDiverged) as info:
        nn.train(m, (x, 3.0 * x), cfg)
    assert info.value.last_good_epoch == info.value.epoch - 1


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        nn.train(small_mlp(), (np.zeros((0, 3)), np.zeros((0, 2))), nn.TrainConfig())


def test_augment_hook_is_called_with_seeded_rng():
    seen = []

    def augment(rng, xb):
        seen.append(rng.integers(1000))
        return xb

    m = small_mlp("relu")
    x, y = np.ones((4, 3)), np.ones((4, 2))
    nn.train(m, (x, y), nn.TrainConfig(epochs=2, seed=5), augment=augment)
    again = []
    nn.train(small_mlp("relu"), (x, y), nn.TrainConfig(epochs=2, seed=5),
             augment=lambda rng, xb: again.append(rng.integers(1000)) or xb)
    assert seen == again and len(seen) == 2
