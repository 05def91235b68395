# informer_model.py
"""Prévisionniste de type Informer : encodeur à distillation, décodeur génératif.

Toutes les fonctions acceptent des dimensions de lot en tête : un échantillon
est (T, F), un lot (B, T, F).
"""
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

import tensor_engine as te
from data_pipeline import FEATURE_NAMES, TARGET_INDEX, NormalizationParams, inverse_transform
from utils import CheckpointError, ConfigError, ShapeError, make_rng, sub_seed

logger = logging.getLogger(__name__)

# ==================== CONFIGURATION ====================
ATTENTION_KINDS = ("full", "probsparse")
DISTILL_ACTIVATIONS = ("none", "elu")
# colonnes de l'entrée décodeur : valeur (normalisée), indicateur "connue"
DECODER_FEATURES = 2
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    t_x: int = 30
    t_y: int = 30
    t_label: int = 5
    d_model: int = 32
    n_heads: int = 3
    n_encoder_layers: int = 1
    n_decoder_layers: int = 2
    d_ff: int = 8
    dropout: float = 0.06
    attention_kind: str = "full"
    factor: int = 3
    n_features: int = len(FEATURE_NAMES)
    distilling: bool = True
    distill_activation: str = "none"
    # la tête prédit l'écart à la dernière valeur connue (T_label >= 1)
    anchor_residual: bool = True
    sampling_seed: int = 0

    def __post_init__(self):
        positive = ("t_x", "t_y", "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff", "factor", "n_features")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} doit être strictement positif (reçu {getattr(self, name)})")
        if not 0 <= self.t_label <= self.t_x:
            raise ConfigError(f"t_label doit être dans [0, t_x] (reçu {self.t_label})")
        if self.d_model // self.n_heads < 1:
            raise ConfigError(f"d_model={self.d_model} trop petit pour {self.n_heads} têtes")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind inconnu : {self.attention_kind} (attendu {'|'.join(ATTENTION_KINDS)})")
        if self.distill_activation not in DISTILL_ACTIVATIONS:
            raise ConfigError(f"distill_activation inconnue : {self.distill_activation}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout doit être dans [0, 1[ (reçu {self.dropout})")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def decoder_length(self):
        return self.t_label + self.t_y

    @property
    def encoder_length(self):
        length = self.t_x
        if self.distilling:
            for _ in range(self.n_encoder_layers):
                length = math.ceil(length / 2)
        return length


# ==================== PARAMÈTRES ====================
def _attention_shapes(prefix, config):
    shapes = {}
    for head in range(config.n_heads):
        for projection in ("W_Q", "W_K", "W_V"):
            shapes[f"{prefix}.h{head}.{projection}"] = (config.d_model, config.d_head)
    shapes[f"{prefix}.W_O"] = (config.n_heads * config.d_head, config.d_model)
    shapes[f"{prefix}.b_O"] = (config.d_model,)
    shapes[f"{prefix}.ln.gamma"] = (config.d_model,)
    shapes[f"{prefix}.ln.beta"] = (config.d_model,)
    return shapes


def _feed_forward_shapes(prefix, config):
    return {
        f"{prefix}.W_1": (config.d_model, config.d_ff),
        f"{prefix}.b_1": (config.d_ff,),
        f"{prefix}.W_2": (config.d_ff, config.d_model),
        f"{prefix}.b_2": (config.d_model,),
        f"{prefix}.ln.gamma": (config.d_model,),
        f"{prefix}.ln.beta": (config.d_model,),
    }


def parameter_shapes(config):
    """Noms et formes de tous les poids, dans un ordre stable"""
    shapes = {
        "embed.enc.W": (config.n_features, config.d_model),
        "embed.dec.W": (DECODER_FEATURES, config.d_model),
    }
    for layer in range(config.n_encoder_layers):
        shapes.update(_attention_shapes(f"enc{layer}.attn", config))
        shapes.update(_feed_forward_shapes(f"enc{layer}.ff", config))
    for layer in range(config.n_decoder_layers):
        shapes.update(_attention_shapes(f"dec{layer}.self", config))
        shapes.update(_attention_shapes(f"dec{layer}.cross", config))
        shapes.update(_feed_forward_shapes(f"dec{layer}.ff", config))
    shapes["head.W"] = (config.d_model, 1)
    shapes["head.b"] = (1,)
    return shapes


def count_parameters(config):
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


@dataclass(frozen=True)
class AttentionParams:
    heads: tuple          # ((W_Q, W_K, W_V), ...)
    W_O: te.Tensor
    b_O: te.Tensor
    gamma: te.Tensor
    beta: te.Tensor


@dataclass(frozen=True)
class FeedForwardParams:
    W_1: te.Tensor
    b_1: te.Tensor
    W_2: te.Tensor
    b_2: te.Tensor
    gamma: te.Tensor
    beta: te.Tensor


class InformerParameters:
    """Tous les poids apprenables, indexés par nom"""

    def __init__(self, config, tensors):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CheckpointError(f"paramètres incohérents avec la configuration (manquants {missing}, en trop {extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise CheckpointError(f"forme de {name} : {tensors[name].shape} au lieu de {shape}")
        self.config = config
        self._tensors = {name: tensors[name] for name in expected}

    @classmethod
    def initialize(cls, config, seed=0):
        """Poids uniformes(-1/sqrt(fan_in), 1/sqrt(fan_in)), biais et beta nuls, gamma à 1"""
        rng = make_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.split(".")[-1]
            if leaf == "gamma":
                value = np.ones(shape)
            elif leaf == "beta" or leaf.startswith("b"):
                value = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                value = rng.uniform(-bound, bound, size=shape)
            tensors[name] = te.Tensor(value, requires_grad=True)
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config, arrays):
        return cls(config, {
            name: value if isinstance(value, te.Tensor) else te.Tensor(value, requires_grad=True)
            for name, value in arrays.items()
        })

    def __getitem__(self, name):
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def as_dict(self):
        return dict(self._tensors)

    def count(self):
        return sum(tensor.data.size for tensor in self._tensors.values())

    def attention(self, prefix):
        heads = tuple(
            (self[f"{prefix}.h{h}.W_Q"], self[f"{prefix}.h{h}.W_K"], self[f"{prefix}.h{h}.W_V"])
            for h in range(self.config.n_heads)
        )
        return AttentionParams(heads, self[f"{prefix}.W_O"], self[f"{prefix}.b_O"],
                               self[f"{prefix}.ln.gamma"], self[f"{prefix}.ln.beta"])

    def feed_forward(self, prefix):
        return FeedForwardParams(self[f"{prefix}.W_1"], self[f"{prefix}.b_1"], self[f"{prefix}.W_2"],
                                 self[f"{prefix}.b_2"], self[f"{prefix}.ln.gamma"], self[f"{prefix}.ln.beta"])


# ==================== EMBEDDING ====================
def positional_encoding(length, d_model):
    """Encodage sinusoïdal fixe (sin sur les colonnes paires, cos sur les impaires)"""
    positions = np.arange(length, dtype=np.float64)[:, None]
    frequencies = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2, dtype=np.float64) / d_model))
    encoding = np.zeros((length, d_model))
    encoding[:, 0::2] = np.sin(positions * frequencies)
    encoding[:, 1::2] = np.cos(positions * frequencies[: d_model // 2])
    return encoding


def embed(tokens, weight, dropout_rate=0.0, rng=None, training=False):
    tokens = tokens if isinstance(tokens, te.Tensor) else te.Tensor(tokens)
    if tokens.shape[-1] != weight.shape[0]:
        raise ShapeError(f"embed : {tokens.shape[-1]} caractéristiques reçues, {weight.shape[0]} attendues")
    projected = te.matmul(tokens, weight)
    encoded = te.add(projected, te.Tensor(positional_encoding(tokens.shape[-2], weight.shape[1])))
    return te.dropout(encoded, dropout_rate, rng if rng is not None else 0, training)


# ==================== ATTENTION ====================
def causal_mask(length):
    """Vrai au-dessus de la diagonale : la position i ne voit pas j > i"""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def scaled_dot_attention(Q, K, V, mask=None, return_weights=False):
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention : d_k des requêtes {Q.shape[-1]} et des clés {K.shape[-1]} différents")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention : {K.shape[-2]} clés pour {V.shape[-2]} valeurs")
    scores = te.scale(te.matmul(Q, te.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = te.softmax_rows(scores, mask)
    out = te.matmul(weights, V)
    return (out, weights) if return_weights else out


def sparsity_scores(Q, K_sampled):
    """M(q) = max - moyenne des scores q.k/sqrt(d) sur les clés échantillonnées.

    ``K_sampled`` est soit partagé (..., S, d), soit propre à chaque requête
    (..., L_q, S, d).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K_sampled = np.asarray(K_sampled, dtype=np.float64)
    if K_sampled.shape[-2] < 1:
        raise ShapeError("sparsity_scores exige au moins une clé échantillonnée")
    if K_sampled.ndim == Q.ndim + 1:
        scores = np.einsum("...qd,...qsd->...qs", Q, K_sampled)
    else:
        scores = Q @ np.swapaxes(K_sampled, -1, -2)
    scores = scores / math.sqrt(Q.shape[-1])
    return np.maximum(scores.max(axis=-1) - scores.mean(axis=-1), 0.0)


def active_query_count(length, factor):
    return min(length, max(1, factor * math.ceil(math.log(length)))) if length > 1 else 1


def probsparse_attention(Q, K, V, factor, seed=0, mask=None, causal=False, trace=None):
    """Attention exacte pour les U requêtes les plus informatives.

    Les requêtes paresseuses reçoivent la moyenne des lignes de V, ou la
    moyenne cumulée sous masque causal. Si U >= L_q le résultat est
    l'attention complète.
    """
    if factor < 1:
        raise ShapeError(f"facteur ProbSparse invalide : {factor}")
    length_q, length_k = Q.shape[-2], K.shape[-2]
    n_top = active_query_count(length_q, factor)
    if n_top >= length_q:
        out, weights = scaled_dot_attention(Q, K, V, mask, return_weights=True)
        if trace is not None:
            trace.append(weights.data)
        return out

    rng = make_rng(seed)
    n_sample = min(length_k, max(1, factor * math.ceil(math.log(length_k)))) if length_k > 1 else 1
    sample_index = rng.integers(0, length_k, size=(length_q, n_sample))
    measurement = sparsity_scores(Q.data, K.data[..., sample_index, :])
    top = np.argsort(-measurement, axis=-1, kind="stable")[..., :n_top]

    if causal:
        lazy = te.cumulative_mean_rows(V)
    else:
        lazy = te.add(te.Tensor(np.zeros(V.shape[:-2] + (length_q, V.shape[-1]))), te.mean(V, axis=-2, keepdims=True))
    row_mask = None
    if mask is not None:
        full_mask = np.broadcast_to(mask, Q.shape[:-2] + (length_q, length_k))
        row_mask = np.take_along_axis(full_mask, top[..., None], axis=-2)
    active, weights = scaled_dot_attention(te.gather_rows(Q, top), K, V, row_mask, return_weights=True)
    if trace is not None:
        trace.append(weights.data)
    return te.scatter_rows(lazy, top, active)


def multi_head_attention(x_q, x_kv, params, kind="full", mask=None, factor=3, causal=False, sampling_rng=None,
                         dropout_rate=0.0, dropout_rng=None, training=False, trace=None):
    """Projections par tête, attention, concaténation, projection de sortie, puis LN(x + sous-couche)"""
    if x_q.shape[-1] != params.W_O.shape[1] or x_kv.shape[-1] != params.W_O.shape[1]:
        raise ShapeError(f"attention multi-têtes : entrées {x_q.shape} / {x_kv.shape} pour d_model={params.W_O.shape[1]}")
    outputs = []
    for W_Q, W_K, W_V in params.heads:
        Q, K, V = te.matmul(x_q, W_Q), te.matmul(x_kv, W_K), te.matmul(x_kv, W_V)
        if kind == "probsparse":
            seed = sampling_rng if sampling_rng is not None else 0
            outputs.append(probsparse_attention(Q, K, V, factor, seed, mask, causal, trace))
        else:
            out, weights = scaled_dot_attention(Q, K, V, mask, return_weights=True)
            if trace is not None:
                trace.append(weights.data)
            outputs.append(out)
    merged = outputs[0] if len(outputs) == 1 else te.concat(*outputs, axis=-1)
    projected = te.add(te.matmul(merged, params.W_O), params.b_O)
    projected = te.dropout(projected, dropout_rate, dropout_rng if dropout_rng is not None else 0, training)
    return te.layer_norm(te.add(x_q, projected), params.gamma, params.beta)


def feed_forward(x, params, dropout_rate=0.0, dropout_rng=None, training=False):
    """ReLU(x W_1 + b_1) W_2 + b_2, puis LN(x + sous-couche)"""
    hidden = te.relu(te.add(te.matmul(x, params.W_1), params.b_1))
    out = te.add(te.matmul(hidden, params.W_2), params.b_2)
    out = te.dropout(out, dropout_rate, dropout_rng if dropout_rng is not None else 0, training)
    return te.layer_norm(te.add(x, out), params.gamma, params.beta)


def distill(x, activation="none"):
    if activation == "elu":
        x = te.elu(x)
    return te.max_pool_1d(x, 2)


# ==================== ENCODEUR / DÉCODEUR ====================
def encode(encoder_input, params, config, training=False, dropout_rng=None, sampling_rng=None, trace=None):
    """embed -> [attention -> feed_forward -> distill] x n_encoder_layers"""
    sampling_rng = sampling_rng if sampling_rng is not None else make_rng(config.sampling_seed)
    x = embed(encoder_input, params["embed.enc.W"], config.dropout, dropout_rng, training)
    for layer in range(config.n_encoder_layers):
        x = multi_head_attention(x, x, params.attention(f"enc{layer}.attn"), config.attention_kind,
                                 factor=config.factor, sampling_rng=sampling_rng, dropout_rate=config.dropout,
                                 dropout_rng=dropout_rng, training=training, trace=trace)
        x = feed_forward(x, params.feed_forward(f"enc{layer}.ff"), config.dropout, dropout_rng, training)
        if config.distilling:
            x = distill(x, config.distill_activation)
    return x


def build_decoder_input(decoder_known, t_y):
    """Valeurs connues puis T_y zéros ; colonne 2 = indicateur de position connue"""
    known = np.asarray(decoder_known, dtype=np.float64)
    t_label = known.shape[-1]
    values = np.concatenate([known, np.zeros(known.shape[:-1] + (t_y,))], axis=-1)
    known_mask = np.concatenate([np.ones(t_label, dtype=bool), np.zeros(t_y, dtype=bool)])
    flags = np.broadcast_to(known_mask.astype(np.float64), values.shape)
    return np.stack([values, flags], axis=-1), known_mask


def decode(encoder_output, decoder_tokens, params, config, training=False, dropout_rng=None,
           sampling_rng=None, trace=None):
    """Décodage génératif en une passe : renvoie les T_y dernières positions de la tête"""
    sampling_rng = sampling_rng if sampling_rng is not None else make_rng(config.sampling_seed)
    x = embed(decoder_tokens, params["embed.dec.W"], config.dropout, dropout_rng, training)
    mask = causal_mask(x.shape[-2])
    for layer in range(config.n_decoder_layers):
        x = multi_head_attention(x, x, params.attention(f"dec{layer}.self"), config.attention_kind, mask=mask,
                                 factor=config.factor, causal=True, sampling_rng=sampling_rng,
                                 dropout_rate=config.dropout, dropout_rng=dropout_rng, training=training, trace=trace)
        x = multi_head_attention(x, encoder_output, params.attention(f"dec{layer}.cross"), "full",
                                 dropout_rate=config.dropout, dropout_rng=dropout_rng, training=training, trace=trace)
        x = feed_forward(x, params.feed_forward(f"dec{layer}.ff"), config.dropout, dropout_rng, training)
    head = te.add(te.matmul(x, params["head.W"]), params["head.b"])
    start = x.shape[-2] - config.t_y
    tail = te.slice_rows(head, start, start + config.t_y)
    return te.reshape(tail, tail.shape[:-2] + (config.t_y,))


# ==================== MODÈLE ====================
class InformerForecaster:
    kind = "informer"

    def __init__(self, config, seed=0, arrays=None):
        self.config = config
        if arrays is None:
            self.params = InformerParameters.initialize(config, sub_seed(seed, "init"))
        else:
            self.params = InformerParameters.from_arrays(config, arrays)
        self._dropout_rng = make_rng(sub_seed(seed, "dropout"))

    def parameters(self):
        return self.params.as_dict()

    def load_parameters(self, arrays):
        self.params = InformerParameters.from_arrays(self.config, arrays)

    def n_parameters(self):
        return count_parameters(self.config)

    def predict(self, encoder_input, decoder_known, training=False, trace=None):
        """(…, T_x, F) et (…, T_label) normalisés -> (…, T_y) normalisé"""
        encoder_input = np.asarray(encoder_input, dtype=np.float64)
        if encoder_input.shape[-2:] != (self.config.t_x, self.config.n_features):
            raise ShapeError(f"entrée encodeur {encoder_input.shape[-2:]} au lieu de "
                             f"{(self.config.t_x, self.config.n_features)}")
        sampling_rng = make_rng(self.config.sampling_seed)
        dropout_rng = self._dropout_rng if training else None
        encoded = encode(encoder_input, self.params, self.config, training, dropout_rng, sampling_rng, trace)
        tokens, _ = build_decoder_input(decoder_known, self.config.t_y)
        output = decode(encoded, tokens, self.params, self.config, training, dropout_rng, sampling_rng, trace)
        if self.config.anchor_residual and self.config.t_label > 0:
            anchor = np.asarray(decoder_known, dtype=np.float64)[..., -1:]
            output = te.add(output, te.Tensor(anchor))
        return output

    def describe(self):
        return asdict(self.config)


@dataclass(frozen=True)
class Forecast:
    normalized: np.ndarray
    prices: np.ndarray


def forward(sample, model, normalizer, mode="eval"):
    """Prévision d'une fenêtre : sortie normalisée et prix dénormalisés"""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode inconnu : {mode}")
    if not sample.is_normalized:
        raise ShapeError("la fenêtre doit être normalisée avant la prévision")
    if mode == "eval":
        with te.no_grad():
            output = model.predict(sample.encoder_input, sample.decoder_known, training=False)
    else:
        output = model.predict(sample.encoder_input, sample.decoder_known, training=True)
    normalized = np.array(output.data)
    return Forecast(normalized=normalized, prices=inverse_transform(normalized, normalizer, TARGET_INDEX))


def model_forecaster(model, normalizer):
    """Adapte un modèle appris à l'interface prévisionniste (fenêtre -> prix)"""
    return lambda sample: forward(sample, model, normalizer).prices


# ==================== CHECKPOINT ====================
@dataclass
class Checkpoint:
    model_kind: str
    model_config: dict
    normalizer: NormalizationParams
    best_val_loss: float
    arrays: dict


def save_checkpoint(path, model, normalizer, best_val_loss):
    """Conteneur npz : ``__meta__`` (JSON) et un tableau ``param/<nom>`` par poids"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parameters = model.parameters()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model.kind,
        "model_config": model.describe(),
        "normalizer": normalizer.to_dict(),
        "best_val_loss": float(best_val_loss),
        "parameters": {name: list(tensor.shape) for name, tensor in parameters.items()},
    }
    arrays = {f"param/{name}": tensor.data for name, tensor in parameters.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)
    logger.info("checkpoint %s écrit : %s", model.kind, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint manquant : {path} (lancez d'abord la commande train)")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path} n'est pas un checkpoint (métadonnées absentes)")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"version de checkpoint non supportée : {meta.get('format_version')}")
        arrays = {}
        for name, shape in meta["parameters"].items():
            key = f"param/{name}"
            if key not in archive.files or list(archive[key].shape) != shape:
                raise CheckpointError(f"paramètre {name} absent ou de forme inattendue dans {path}")
            arrays[name] = np.array(archive[key])
    return Checkpoint(
        model_kind=meta["model_kind"],
        model_config=meta["model_config"],
        normalizer=NormalizationParams.from_dict(meta["normalizer"]),
        best_val_loss=meta["best_val_loss"],
        arrays=arrays,
    )


def rebuild_model(checkpoint):
    """Reconstruit le modèle d'un checkpoint selon son type"""
    from baselines import LstmConfig, LstmForecaster

    if checkpoint.model_kind == "informer":
        return InformerForecaster(ModelConfig(**checkpoint.model_config), arrays=checkpoint.arrays)
    if checkpoint.model_kind == "lstm":
        return LstmForecaster(LstmConfig(**checkpoint.model_config), arrays=checkpoint.arrays)
    raise CheckpointError(f"type de modèle inconnu dans le checkpoint : {checkpoint.model_kind}")
