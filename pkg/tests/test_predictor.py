import numpy as np
import pytest

from topk_attack.datakit import generate_synthetic
from topk_attack.errors import ParameterError, ShapeError
from topk_attack.evaluation import consistency_rate
from topk_attack.predictor import (
    MlpModel,
    Predictor,
    TrainConfig,
    bce_loss,
    finite_difference_jacobian,
    init_mlp,
    linear_model,
    load_model,
    save_model,
    sigmoid,
    sigmoid_calibrate,
    train_victim,
    zero_model,
)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_sigmoid_calibrate():
    assert sigmoid_calibrate(0.0) == 0.5
    assert sigmoid_calibrate(30.0) > 1 - 1e-12
    assert sigmoid_calibrate(-30.0) < 1e-12
    raw = np.linspace(-20, 20, 4001)
    assert np.all(np.diff(sigmoid(raw)) > 0)


def test_sigmoid_keeps_ranking():
    raw = np.random.default_rng(0).normal(scale=5, size=50)
    np.testing.assert_array_equal(np.argsort(raw, kind="stable"), np.argsort(sigmoid(raw), kind="stable"))


def test_zero_model_predicts_half():
    model = zero_model(6, 4, hidden=(5,))
    np.testing.assert_array_equal(model.predict(np.ones(6)), np.full(4, 0.5))
    np.testing.assert_array_equal(model.input_jacobian(np.ones(6)), np.zeros((4, 6)))


def test_linear_model_hand_values():
    w = np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 0.0]])
    b = np.array([0.0, 1.0, -1.0])
    x = np.array([0.5, 0.25])
    logits = [0.5 - 0.5 + 0.0, 0.25 + 1.0, -1.0]
    expected = [1.0 / (1.0 + np.exp(-a)) for a in logits]
    np.testing.assert_allclose(linear_model(w, b).predict(x), expected, rtol=1e-15)


def test_linear_model_jacobian_closed_form():
    rng = np.random.default_rng(1)
    w, b, x = rng.normal(size=(5, 7)), rng.normal(size=5), rng.uniform(-1, 1, 7)
    a = w @ x + b
    s = 1.0 / (1.0 + np.exp(-a))
    np.testing.assert_allclose(linear_model(w, b).input_jacobian(x), (s * (1 - s))[:, None] * w, rtol=1e-13)


def test_permuting_hidden_units_is_a_symmetry():
    model = init_mlp(4, 3, (6,), rng=2)
    perm = np.array([3, 1, 0, 5, 2, 4])
    w1, w2 = model.weights
    b1, b2 = model.biases
    swapped = MlpModel((w1[perm], w2[:, perm]), (b1[perm], b2))
    x = np.random.default_rng(3).uniform(-1, 1, 4)
    np.testing.assert_allclose(model.predict(x), swapped.predict(x), rtol=1e-14)


@pytest.mark.parametrize("hidden", [(), (8,), (8, 5)])
@pytest.mark.parametrize("seed", range(5))
def test_analytic_jacobian_matches_finite_differences(hidden, seed):
    rng = np.random.default_rng(seed)
    model = init_mlp(9, 6, hidden, rng=rng)
    x = rng.uniform(-1, 1, 9)
    assert rel_err(model.input_jacobian(x), finite_difference_jacobian(model, x)) < 1e-4


def test_finite_difference_is_second_order():
    model = init_mlp(5, 4, (7,), rng=4)
    x = np.random.default_rng(5).uniform(-1, 1, 5)
    exact = model.input_jacobian(x)
    e1 = np.abs(finite_difference_jacobian(model, x, 1e-2) - exact).max()
    e2 = np.abs(finite_difference_jacobian(model, x, 5e-3) - exact).max()
    assert 3.0 < e1 / e2 < 5.0


def test_finite_difference_on_zero_model():
    np.testing.assert_array_equal(finite_difference_jacobian(zero_model(3, 4), np.zeros(3)), np.zeros((4, 3)))


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ParameterError):
        finite_difference_jacobian(zero_model(3, 4), np.zeros(3), h=0.0)


def test_shape_errors():
    model = init_mlp(4, 3, (5,), rng=0)
    with pytest.raises(ShapeError):
        model.predict(np.zeros(5))
    with pytest.raises(ShapeError):
        MlpModel((np.zeros((5, 4)), np.zeros((3, 6))), (np.zeros(5), np.zeros(3)))
    with pytest.raises(ParameterError):
        MlpModel((np.zeros((3, 4)),), (np.zeros(3),), activation="gelu")


def test_model_protocol():
    assert isinstance(init_mlp(3, 4, rng=0), Predictor)


def test_scores_strictly_inside_unit_interval():
    model = init_mlp(8, 6, (16,), rng=9)
    f = model.predict(np.random.default_rng(0).uniform(-1, 1, (500, 8)))
    assert np.all((f > 0) & (f < 1))


def test_save_load_round_trip(tmp_path):
    model = init_mlp(6, 5, (7, 4), activation="relu", rng=3)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    x = np.random.default_rng(1).uniform(-1, 1, (20, 6))
    assert back.activation == "relu"
    assert back.hidden_sizes == (7, 4)
    np.testing.assert_allclose(back.predict(x), model.predict(x), rtol=0, atol=1e-12)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(m=6, d=8, n=300, avg_labels=1.3, seed=1, max_labels=2, noise=0.3)


def test_training_reduces_loss_and_fits(small_data):
    init = train_victim(small_data, TrainConfig(epochs=0, seed=4))
    trained = train_victim(small_data, TrainConfig(epochs=150, lr=0.2, seed=4))
    y = small_data.label_matrix()
    assert bce_loss(trained, small_data.x, y) < bce_loss(init, small_data.x, y)
    assert consistency_rate(trained, small_data, 2) >= 0.9


def test_zero_epochs_returns_initialisation(small_data):
    model = train_victim(small_data, TrainConfig(epochs=0, seed=4, hidden=(64,)))
    ref = init_mlp(small_data.d, small_data.m, (64,), rng=np.random.default_rng(4))
    for a, b in zip(model.weights, ref.weights):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(small_data):
    cfg = TrainConfig(epochs=5, lr=0.1, seed=8)
    a, b = train_victim(small_data, cfg), train_victim(small_data, cfg)
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert wa.tobytes() == wb.tobytes()


def test_training_rejects_empty_dataset(small_data):
    with pytest.raises(ParameterError):
        train_victim(small_data.subset([]), TrainConfig(epochs=1))


@pytest.mark.parametrize("field, value", [("epochs", -1), ("lr", 0.0), ("batch_size", 0), ("hidden", (4, 4, 4))])
def test_train_config_validation(field, value):
    with pytest.raises(ParameterError):
        TrainConfig(**{field: value})
