# training.py
"""Perte MSE pondérée, Adam, arrêt anticipé et recherche aléatoire d'hyperparamètres."""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

import tensor_engine as te
from data_pipeline import stack_samples
from informer_model import InformerForecaster, count_parameters
from utils import ConfigError, NonFiniteError, ShapeError, TrainingError, make_rng, sub_seed

logger = logging.getLogger(__name__)


# ==================== CONFIGURATION ====================
@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 300
    lr: float = 1e-4
    patience: int = 30
    seed: int = 0
    loss_weights: tuple = ()
    min_delta: float = 1e-8
    lr_halving: bool = False
    lr_halving_patience: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs et patience doivent être >= 1")
        if not self.lr > 0:
            raise ConfigError(f"taux d'apprentissage strictement positif requis (reçu {self.lr})")
        if self.loss_weights and (min(self.loss_weights) < 0 or sum(self.loss_weights) <= 0):
            raise ConfigError("poids de perte positifs ou nuls, de somme strictement positive")

    def resolve_weights(self, t_y):
        if not self.loss_weights:
            return np.ones(t_y)
        if len(self.loss_weights) != t_y:
            raise ConfigError(f"{len(self.loss_weights)} poids de perte pour un horizon de {t_y}")
        return np.asarray(self.loss_weights, dtype=np.float64)


# ==================== PERTE ====================
def weighted_mse(pred, target, weights):
    """Σ_h w_h (ŷ_h - y_h)² / Σ_h w_h, moyennée sur les séquences du lot"""
    target = target if isinstance(target, te.Tensor) else te.Tensor(target)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prévision {pred.shape} et cible {target.shape} de formes différentes")
    if weights.shape != (pred.shape[-1],):
        raise ShapeError(f"{weights.shape} poids pour un horizon de {pred.shape[-1]}")
    if weights.sum() <= 0:
        raise ConfigError("la somme des poids de perte doit être strictement positive")
    n_sequences = pred.data.size // pred.shape[-1]
    error = te.sub(pred, target)
    weighted = te.mul(te.square(error), te.Tensor(weights / weights.sum()))
    return te.scale(te.sum_all(weighted), 1.0 / n_sequences)


# ==================== ADAM ====================
@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        return cls(m={name: np.zeros(p.shape) for name, p in params.items()},
                   v={name: np.zeros(p.shape) for name, p in params.items()})


def adam_step(params, grads, state, lr):
    """Mise à jour corrigée du biais ; renvoie de nouveaux paramètres et un nouvel état"""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient de {name} : {grad.shape} au lieu de {param.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params[name] = te.Tensor(param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps), requires_grad=True)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


# ==================== ARRÊT ANTICIPÉ ====================
class EarlyStopping:
    """Arrêt quand la perte de validation ne baisse plus d'au moins ``min_delta`` pendant ``patience`` époques"""

    def __init__(self, patience=30, min_delta=1e-8):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = 0
        self.counter = 0
        self.should_stop = False

    def update(self, val_loss, epoch):
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= self.patience:
            self.should_stop = True
        return False


# ==================== BOUCLE D'ENTRAÎNEMENT ====================
@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf

    def to_frame(self):
        return pd.DataFrame({
            "epoch": range(1, len(self.train_loss) + 1),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
        })

    def save_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path


@dataclass
class TrainResult:
    model: object
    history: TrainHistory

    @property
    def parameters(self):
        return self.model.parameters()


def evaluate_loss(model, samples, weights, batch_size=64):
    """Perte pondérée moyenne (mode évaluation, sans graphe)"""
    if not samples:
        raise TrainingError("évaluation de la perte sur un ensemble vide")
    total = 0.0
    with te.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = stack_samples(samples[start:start + batch_size])
            pred = model.predict(batch.encoder_input, batch.decoder_known, training=False)
            total += weighted_mse(pred, batch.target, weights).item() * len(batch)
    return total / len(samples)


def _snapshot(model):
    return {name: np.array(tensor.data) for name, tensor in model.parameters().items()}


def train(model_builder, split, config):
    """Entraîne un modèle et renvoie celui de la meilleure époque de validation.

    ``model_builder`` est un appelable sans argument qui renvoie un modèle
    neuf (InformerForecaster ou LstmForecaster).
    """
    if not split.train or not split.validation:
        raise TrainingError("ensembles d'entraînement et de validation non vides requis")
    model = model_builder()
    weights = config.resolve_weights(len(split.train[0].target))
    params = model.parameters()
    state = AdamState.zeros(params)
    shuffle_rng = make_rng(sub_seed(config.seed, "shuffle"))
    stopper = EarlyStopping(config.patience, config.min_delta)
    history = TrainHistory()
    best = _snapshot(model)
    lr = config.lr
    plateau = 0
    n_train = len(split.train)

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        running = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = stack_samples([split.train[i] for i in order[start:start + config.batch_size]])
            for tensor in params.values():
                tensor.grad = None
            try:
                pred = model.predict(batch.encoder_input, batch.decoder_known, training=True)
                loss = weighted_mse(pred, batch.target, weights)
            except NonFiniteError as exc:
                raise TrainingError(f"perte non finie à l'époque {epoch} : {exc}") from exc
            te.backward(loss)
            grads = {name: tensor.grad for name, tensor in params.items()}
            params, state = adam_step(params, grads, state, lr)
            model.load_parameters(params)
            running += loss.item() * len(batch)

        train_loss = running / n_train
        val_loss = evaluate_loss(model, split.validation, weights, config.batch_size)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        logger.info("epoch=%d train_loss=%.6e val_loss=%.6e lr=%.2e", epoch, train_loss, val_loss, lr)

        if stopper.update(val_loss, epoch):
            best = _snapshot(model)
            history.best_epoch = epoch
            plateau = 0
        else:
            plateau += 1
            if config.lr_halving and plateau >= config.lr_halving_patience:
                lr *= 0.5
                plateau = 0
                logger.info("plateau : taux d'apprentissage réduit à %.2e", lr)
        if stopper.should_stop:
            history.stop_reason = "patience"
            break
    else:
        history.stop_reason = "max_epochs"

    model.load_parameters(best)
    logger.info("meilleure époque %d (val_loss=%.6e), arrêt : %s",
                history.best_epoch, history.best_val_loss, history.stop_reason)
    return TrainResult(model=model, history=history)


# ==================== RECHERCHE ALÉATOIRE ====================
@dataclass(frozen=True)
class SearchSpace:
    n_encoder_layers: tuple = (1, 2)
    n_decoder_layers: tuple = (1, 2)
    n_heads: tuple = (1, 2, 3)
    d_model: tuple = (16, 32)
    lr: tuple = (1e-4, 1e-3)        # bornes, tirage log-uniforme
    dropout: tuple = (0.0, 0.1)     # bornes, tirage uniforme

    def validate(self):
        for name in ("n_encoder_layers", "n_decoder_layers", "n_heads", "d_model"):
            if not getattr(self, name):
                raise ConfigError(f"espace de recherche vide pour {name}")
        for name in ("lr", "dropout"):
            bounds = getattr(self, name)
            if len(bounds) != 2 or bounds[0] > bounds[1]:
                raise ConfigError(f"bornes invalides pour {name} : {bounds}")
        if self.lr[0] <= 0:
            raise ConfigError("borne basse du taux d'apprentissage strictement positive requise")


@dataclass(frozen=True)
class TrialResult:
    index: int
    model_config: object
    train_config: TrainConfig
    best_val_loss: float
    n_parameters: int


@dataclass
class SearchResult:
    best: TrialResult
    trials: list


def sample_trial(space, rng, base_model, base_train):
    def choose(values):
        return values[int(rng.integers(len(values)))]

    low, high = space.lr
    lr = low if low == high else float(math.exp(rng.uniform(math.log(low), math.log(high))))
    dropout = space.dropout[0] if space.dropout[0] == space.dropout[1] else float(rng.uniform(*space.dropout))
    model_config = replace(
        base_model,
        n_encoder_layers=choose(space.n_encoder_layers),
        n_decoder_layers=choose(space.n_decoder_layers),
        n_heads=choose(space.n_heads),
        d_model=choose(space.d_model),
        dropout=dropout,
    )
    return model_config, replace(base_train, lr=lr)


def random_search(space, n_trials, seed, budget_epochs, split, base_model, base_train):
    """Tirages seedés, entraînement court, classement par perte de validation puis par taille"""
    space.validate()
    if n_trials < 1:
        raise ConfigError(f"au moins un essai requis (reçu {n_trials})")
    rng = make_rng(sub_seed(seed, "search"))
    trials = []
    for index in range(n_trials):
        model_config, train_config = sample_trial(space, rng, base_model, base_train)
        train_config = replace(train_config, max_epochs=budget_epochs, seed=sub_seed(seed, f"trial{index}"))
        init_seed = sub_seed(seed, f"init{index}")
        result = train(lambda: InformerForecaster(model_config, seed=init_seed), split, train_config)
        trial = TrialResult(index, model_config, train_config, result.history.best_val_loss,
                            count_parameters(model_config))
        logger.info("essai %d : val_loss=%.6e, %d paramètres", index, trial.best_val_loss, trial.n_parameters)
        trials.append(trial)
    best = min(trials, key=lambda t: (t.best_val_loss, t.n_parameters, t.index))
    return SearchResult(best=best, trials=trials)
