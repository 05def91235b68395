# tests/test_training.py
from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest

import tensor_engine as te
from data_pipeline import DatasetSplit, WindowSample
from informer_model import InformerForecaster
from training import (
    AdamState, EarlyStopping, SearchSpace, TrainConfig, adam_step, evaluate_loss, random_search, train,
    weighted_mse,
)
from utils import ConfigError, ShapeError, TrainingError

T_Y = 3


class BiasModel:
    """Prévision constante égale à un biais appris ; compte les fenêtres vues à l'entraînement"""

    kind = "bias"

    def __init__(self):
        self.params = {"bias": te.Tensor(np.zeros(1), requires_grad=True)}
        self.seen = []

    def parameters(self):
        return dict(self.params)

    def load_parameters(self, arrays):
        value = arrays["bias"]
        self.params = {"bias": value if isinstance(value, te.Tensor) else te.Tensor(value, requires_grad=True)}

    def predict(self, encoder_input, decoder_known, training=False, trace=None):
        if training:
            self.seen.append(encoder_input.shape[0])
        return te.add(te.Tensor(np.zeros(encoder_input.shape[:-2] + (T_Y,))), self.params["bias"])


def _constant_samples(value, count, start=date(2020, 1, 1)):
    return [
        WindowSample(
            contract_id=f"c{i}", encoder_raw=np.zeros((4, 6)), decoder_known_raw=np.zeros(2),
            target_raw=np.full(T_Y, value), anchor_price=1.0, encoder_start_date=start,
            window_end_date=start + timedelta(days=i), target_dates=(start,) * T_Y,
            encoder_input=np.zeros((4, 6)), decoder_known=np.zeros(2), target=np.full(T_Y, value),
        )
        for i in range(count)
    ]


# ==================== PERTE ====================
def test_weighted_mse_examples():
    target = np.array([[0.5, 0.25, 1.0]])
    assert weighted_mse(te.Tensor(target), target, np.ones(3)).item() == 0.0
    assert weighted_mse(te.Tensor(target + 1.0), target, np.ones(3)).item() == pytest.approx(1.0)
    assert weighted_mse(te.Tensor([[5.0, 100.0]]), np.zeros((1, 2)), [1.0, 0.0]).item() == pytest.approx(25.0)


def test_weighted_mse_is_order_independent(rng):
    pred, target = rng.normal(size=(16, 5)), rng.normal(size=(16, 5))
    order = rng.permutation(16)
    weights = rng.uniform(0.1, 1.0, size=5)
    direct = weighted_mse(te.Tensor(pred), target, weights).item()
    shuffled = weighted_mse(te.Tensor(pred[order]), target[order], weights).item()
    assert shuffled == pytest.approx(direct, rel=1e-12)


def test_weighted_mse_shape_errors():
    with pytest.raises(ShapeError):
        weighted_mse(te.Tensor(np.zeros((2, 3))), np.zeros((2, 4)), np.ones(3))
    with pytest.raises(ShapeError):
        weighted_mse(te.Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.ones(2))


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss_weights=(0.0, 0.0))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_weights=(1.0, 2.0)).resolve_weights(3)
    np.testing.assert_array_equal(TrainConfig().resolve_weights(4), np.ones(4))


# ==================== ADAM ====================
def test_adam_first_step_magnitude():
    params = {"x": te.Tensor([1.0, -2.0], requires_grad=True)}
    new_params, state = adam_step(params, {"x": np.array([0.3, -7.0])}, AdamState.zeros(params), lr=0.01)
    np.testing.assert_allclose(new_params["x"].data, [0.99, -1.99], atol=1e-8)
    assert state.t == 1


def test_adam_zero_gradient_keeps_parameters():
    params = {"x": te.Tensor([1.5], requires_grad=True)}
    state = AdamState(m={"x": np.array([0.2])}, v={"x": np.array([0.0])}, t=0)
    new_params, new_state = adam_step(params, {"x": np.zeros(1)}, AdamState.zeros(params), lr=0.1)
    assert new_params["x"].data[0] == 1.5
    _, decayed = adam_step(params, {"x": np.zeros(1)}, state, lr=0.1)
    assert decayed.m["x"][0] == pytest.approx(0.18)
    assert new_state.t == 1


def test_adam_descends_on_a_parabola():
    params = {"x": te.Tensor([1.0], requires_grad=True)}
    state = AdamState.zeros(params)
    for _ in range(100):
        params, state = adam_step(params, {"x": 2.0 * params["x"].data}, state, lr=0.1)
    assert abs(params["x"].data[0]) < 0.5


# ==================== ARRÊT ANTICIPÉ ====================
def test_early_stopping_patience():
    stopper = EarlyStopping(patience=2, min_delta=1e-8)
    assert stopper.update(1.0, 1)
    assert not stopper.update(1.0 - 1e-9, 2)
    assert not stopper.should_stop
    assert not stopper.update(2.0, 3)
    assert stopper.should_stop and stopper.best_epoch == 1


def test_train_stops_when_validation_rises():
    split = DatasetSplit(_constant_samples(1.0, 10), _constant_samples(-1.0, 4), [])
    config = TrainConfig(batch_size=4, max_epochs=20, lr=0.05, patience=1)
    model = BiasModel()
    result = train(lambda: model, split, config)
    assert result.history.stop_reason == "patience"
    assert len(result.history.val_loss) == 2
    assert result.history.best_epoch == 1
    assert result.history.val_loss[1] > result.history.val_loss[0]
    restored = evaluate_loss(result.model, split.validation, np.ones(T_Y))
    assert restored == pytest.approx(result.history.val_loss[0], abs=1e-10)


def test_each_epoch_sees_every_sample_once():
    split = DatasetSplit(_constant_samples(1.0, 10), _constant_samples(1.0, 3), [])
    model = BiasModel()
    train(lambda: model, split, TrainConfig(batch_size=4, max_epochs=3, lr=0.01, patience=5))
    assert model.seen == [4, 4, 2] * 3


def test_train_requires_validation():
    with pytest.raises(TrainingError):
        train(BiasModel, DatasetSplit(_constant_samples(1.0, 3), [], []), TrainConfig())


def test_training_is_deterministic(tiny_model_config, tiny_dataset):
    config = TrainConfig(batch_size=32, max_epochs=3, lr=1e-3, patience=10, seed=4)
    model_config = replace(tiny_model_config, dropout=0.06)
    first = train(lambda: InformerForecaster(model_config, seed=2), tiny_dataset.split, config)
    second = train(lambda: InformerForecaster(model_config, seed=2), tiny_dataset.split, config)
    assert first.history == second.history


def test_training_reduces_loss(tiny_model_config, tiny_dataset):
    config = TrainConfig(batch_size=16, max_epochs=8, lr=3e-3, patience=20, seed=1)
    result = train(lambda: InformerForecaster(tiny_model_config, seed=1), tiny_dataset.split, config)
    history = result.history
    assert history.stop_reason == "max_epochs"
    assert history.train_loss[-1] < history.train_loss[0]
    weights = config.resolve_weights(tiny_model_config.t_y)
    reevaluated = evaluate_loss(result.model, tiny_dataset.split.validation, weights, config.batch_size)
    assert reevaluated == pytest.approx(history.best_val_loss, abs=1e-10)
    frame = history.to_frame()
    assert list(frame.columns) == ["epoch", "train_loss", "val_loss"]
    assert len(frame) == 8


# ==================== RECHERCHE ALÉATOIRE ====================
SMALL_SPACE = SearchSpace(n_encoder_layers=(1,), n_decoder_layers=(1, 2), n_heads=(1, 2), d_model=(8,),
                          lr=(1e-3, 1e-2), dropout=(0.0, 0.1))


def test_search_single_trial(tiny_model_config, tiny_dataset):
    result = random_search(SMALL_SPACE, 1, 3, 1, tiny_dataset.split, tiny_model_config, TrainConfig(batch_size=64))
    assert len(result.trials) == 1
    assert result.best is result.trials[0]
    assert result.best.train_config.max_epochs == 1
    assert 1e-3 <= result.best.train_config.lr <= 1e-2


def test_search_is_deterministic(tiny_model_config, tiny_dataset):
    runs = [
        random_search(SMALL_SPACE, 2, 11, 1, tiny_dataset.split, tiny_model_config, TrainConfig(batch_size=64))
        for _ in range(2)
    ]
    first, second = ([(t.model_config, t.train_config, t.best_val_loss) for t in run.trials] for run in runs)
    assert first == second
    assert runs[0].best.best_val_loss == min(t.best_val_loss for t in runs[0].trials)


def test_search_rejects_empty_space(tiny_model_config, tiny_dataset):
    with pytest.raises(ConfigError):
        random_search(replace(SMALL_SPACE, n_heads=()), 1, 0, 1, tiny_dataset.split, tiny_model_config, TrainConfig())
