import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdsml.nn import (
    AdamaxState,
    Mlp,
    TrainConfig,
    TrainingDiverged,
    adamax_step,
    backward,
    classifier_widths,
    default_epochs,
    loss_cross_entropy,
    loss_mse,
    regressor_widths,
    train,
)


def numeric_grads(mlp, x, y, eps=1e-5):
    out = []
    for p in mlp.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = backward(mlp, x, y)[0]
            p[i] = old - eps
            down = backward(mlp, x, y)[0]
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(a, b):
    return max(np.max(np.abs(x - y) / np.maximum(np.abs(x) + np.abs(y), 1e-7)) for x, y in zip(a, b))


def min_preactivation(mlp, x):
    a, smallest = x, np.inf
    for W, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        z = a @ W + b
        smallest = min(smallest, np.abs(z).min())
        a = np.maximum(z, 0)
    return smallest


def random_case(seed):
    """Random small network and batch, redrawn while a ReLU input sits near its kink."""
    rng = np.random.default_rng(seed)
    while True:
        case = _draw_case(rng)
        if min_preactivation(case[0], case[1]) > 1e-3:
            return case


def _draw_case(rng):
    n_layers = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 9, n_layers + 1)]
    head = "softmax" if rng.random() < 0.5 else "identity"
    if head == "softmax":
        widths[-1] = max(widths[-1], 2)
    mlp = Mlp.build(widths, head, rng)
    for b in mlp.biases:
        b += rng.normal(0, 0.1, b.shape)
    x = rng.normal(size=(5, widths[0]))
    if head == "softmax":
        y = np.eye(widths[-1])[rng.integers(0, widths[-1], 5)]
    else:
        y = rng.normal(size=(5, widths[-1]))
    return mlp, x, y


def test_zero_network_outputs_zero():
    mlp = Mlp([np.zeros((4, 3)), np.zeros((3, 2))], [np.zeros(3), np.zeros(2)])
    assert np.all(mlp.forward(np.ones(4)) == 0.0)


def test_softmax_rows_normalised():
    mlp = Mlp.build([6, 5, 3], "softmax", np.random.default_rng(0))
    p = mlp.forward(np.random.default_rng(1).normal(size=(50, 6)) * 30)
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(1) - 1)) < 1e-12


def test_hand_built_network():
    W1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.5, -0.25])
    W2 = np.array([[1.0, 2.0], [-3.0, 1.0]])
    b2 = np.array([0.0, 1.0])
    mlp = Mlp([W1, W2], [b1, b2])
    x = np.array([1.0, 2.0])
    hidden = np.maximum(np.array([1 + 4 + 0.5, -1 + 1 - 0.25]), 0)  # [5.5, 0]
    assert np.allclose(mlp.forward(x), hidden @ W2 + b2)
    assert np.allclose(mlp.forward(x), [5.5, 12.0])


def test_shape_errors():
    with pytest.raises(ValueError):
        Mlp([np.zeros((4, 3)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])
    with pytest.raises(ValueError):
        Mlp.build([4, 2]).forward(np.zeros(5))


def test_loss_examples():
    assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_cross_entropy([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert loss_cross_entropy([0.5, 0.5], [0.0, 1.0]) == pytest.approx(np.log(2))
    assert np.isfinite(loss_cross_entropy([0.0, 1.0], [1.0, 0.0]))


@pytest.mark.parametrize("seed", range(100))
def test_gradients_match_finite_differences(seed):
    mlp, x, y = random_case(seed)
    _, grads = backward(mlp, x, y)
    assert max_rel_error(grads, numeric_grads(mlp, x, y)) < 1e-4


def test_mse_gradient_zero_at_target():
    mlp = Mlp.build([3, 4, 2], "identity", np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(4, 3))
    _, grads = backward(mlp, x, mlp.forward(x))
    assert all(np.all(g == 0) for g in grads)


def test_softmax_output_layer_gradient_closed_form():
    rng = np.random.default_rng(5)
    mlp = Mlp.build([3, 4], "softmax", rng)
    x = rng.normal(size=(6, 3))
    y = np.eye(4)[rng.integers(0, 4, 6)]
    _, grads = backward(mlp, x, y)
    assert np.allclose(grads[1], ((mlp.forward(x) - y) / 6).sum(0))
    assert max_rel_error(grads, numeric_grads(mlp, x, y)) < 1e-4


def test_adamax_zero_gradient_no_change():
    p = [np.array([1.0, -2.0])]
    st_ = AdamaxState.for_params(p, weight_decay=0.0)
    adamax_step(p, [np.zeros(2)], st_)
    assert p[0].tolist() == [1.0, -2.0]


def test_adamax_single_update():
    p = [np.array([1.0])]
    st_ = AdamaxState.for_params(p, weight_decay=0.0)
    adamax_step(p, [np.array([0.1])], st_)
    assert p[0][0] == pytest.approx(0.999, abs=1e-8)


def test_adamax_weight_decay_is_decoupled():
    p = [np.array([2.0])]
    st_ = AdamaxState.for_params(p, lr=1e-3, weight_decay=1e-3)
    adamax_step(p, [np.zeros(1)], st_)
    assert p[0][0] == pytest.approx(2.0 * (1 - 1e-6))


def test_adamax_minimises_quadratic():
    w = [np.array([1.0])]
    st_ = AdamaxState.for_params(w, weight_decay=0.0)
    for _ in range(5000):
        adamax_step(w, [2 * w[0]], st_)
    assert abs(w[0][0]) < 1e-3


@settings(max_examples=30)
@given(st.floats(1e-3, 10.0), st.integers(1, 50))
def test_infinity_norm_non_decreasing_under_constant_gradient(g, n):
    p = [np.array([0.0])]
    st_ = AdamaxState.for_params(p)
    prev = 0.0
    for _ in range(n):
        adamax_step(p, [np.array([g])], st_)
        assert st_.u[0][0] >= prev
        prev = st_.u[0][0]


def test_architecture_rules():
    assert regressor_widths(64, 4) == [64, 256, 256, 128, 64, 32, 4]
    assert classifier_widths(64, 4) == [64, 256, 128, 64, 32, 4]
    assert default_epochs(3, "softmax") == 300
    assert default_epochs(4, "identity") == 800


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, validation_fraction=1.0)


def test_separable_classification():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    y = np.eye(2)[(x[:, 0] + x[:, 1] > 0).astype(int)]
    mlp = Mlp.build([2, 16, 2], "softmax", rng)
    trained, hist = train(mlp, x, y, TrainConfig(epochs=200, seed=1, weight_decay=0.0, lr=1e-2))
    assert hist.loss[-1] < 0.05
    assert len(hist.val_loss) == 200


def test_identity_regression():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, size=(500, 1))
    mlp = Mlp.build([1, 16, 16, 1], "identity", rng)
    trained, hist = train(mlp, x, x, TrainConfig(epochs=300, seed=2))
    assert hist.val_loss[-1] < 1e-4


def test_training_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 4))
    y = rng.normal(size=(100, 2))
    cfg = TrainConfig(epochs=5, seed=7, noise_sigma=0.05)
    a, _ = train(Mlp.build([4, 8, 2], rng=np.random.default_rng(1)), x, y, cfg)
    b, _ = train(Mlp.build([4, 8, 2], rng=np.random.default_rng(1)), x, y, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_training_does_not_mutate_input_model():
    mlp = Mlp.build([2, 3, 1], rng=np.random.default_rng(0))
    before = [p.copy() for p in mlp.params]
    train(mlp, np.ones((10, 2)), np.ones((10, 1)), TrainConfig(epochs=2))
    assert all(np.array_equal(p, q) for p, q in zip(before, mlp.params))


def test_nan_loss_aborts():
    mlp = Mlp.build([2, 1], rng=np.random.default_rng(0))
    x = np.ones((10, 2))
    y = np.full((10, 1), np.nan)
    with pytest.raises(TrainingDiverged):
        train(mlp, x, y, TrainConfig(epochs=1))


def test_mlp_serialises_bit_exact():
    mlp = Mlp.build([5, 4, 3], "softmax", np.random.default_rng(8))
    back = Mlp.from_dict(json.loads(json.dumps(mlp.to_dict())))
    assert back.head == "softmax"
    assert all(np.array_equal(p, q) for p, q in zip(back.params, mlp.params))
