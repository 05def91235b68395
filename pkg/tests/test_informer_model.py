# tests/test_informer_model.py
import math

import numpy as np
import pytest

import tensor_engine as te
from data_pipeline import inverse_transform
from informer_model import (
    AttentionParams, FeedForwardParams, InformerForecaster, InformerParameters, ModelConfig, active_query_count,
    build_decoder_input, causal_mask, count_parameters, decode, distill, embed, encode, feed_forward, forward,
    load_checkpoint, multi_head_attention, parameter_shapes, positional_encoding, probsparse_attention,
    rebuild_model, save_checkpoint, scaled_dot_attention, sparsity_scores,
)
from utils import CheckpointError, ConfigError


def _layer_norm(x, eps=1e-5):
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)


def _brute_force_attention(Q, K, V):
    scores = Q @ K.T / math.sqrt(Q.shape[-1])
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights @ V


# ==================== CONFIGURATION ====================
def test_default_parameter_count():
    config = ModelConfig()
    assert config.d_head == 10
    assert parameter_shapes(config)["enc0.attn.W_O"] == (30, 32)
    assert count_parameters(config) == 21817
    assert InformerForecaster(config).n_parameters() == 21817


def test_parameter_count_is_a_function_of_config():
    config = ModelConfig(d_model=16, n_heads=2, n_encoder_layers=2, n_decoder_layers=1)
    assert count_parameters(config) == count_parameters(ModelConfig(d_model=16, n_heads=2, n_encoder_layers=2,
                                                                    n_decoder_layers=1))
    assert InformerParameters.initialize(config, seed=3).count() == count_parameters(config)


@pytest.mark.parametrize("overrides", [
    {"attention_kind": "sparse"}, {"n_heads": 40}, {"t_label": 31}, {"dropout": 1.0}, {"distill_activation": "gelu"},
])
def test_invalid_config(overrides):
    with pytest.raises(ConfigError):
        ModelConfig(**overrides)


def test_initialization_is_seeded_and_bounded():
    first = InformerParameters.initialize(ModelConfig(), seed=5)
    second = InformerParameters.initialize(ModelConfig(), seed=5)
    for name, tensor in first.items():
        np.testing.assert_array_equal(tensor.data, second[name].data)
    weight = first["enc0.ff.W_1"].data
    assert np.abs(weight).max() <= 1.0 / math.sqrt(32)
    np.testing.assert_array_equal(first["enc0.ff.b_1"].data, np.zeros(8))
    np.testing.assert_array_equal(first["enc0.ff.ln.gamma"].data, np.ones(32))


# ==================== EMBEDDING ====================
def test_zero_embedding_is_positional_encoding():
    out = embed(np.zeros((30, 6)), te.Tensor(np.zeros((6, 32))))
    np.testing.assert_array_equal(out.data, positional_encoding(30, 32))


def test_positional_encoding_separates_positions():
    out = embed(np.ones((10, 6)), te.Tensor(np.full((6, 8), 0.3))).data
    assert len({tuple(np.round(row, 12)) for row in out}) == 10


def test_positional_encoding_first_row():
    encoding = positional_encoding(4, 6)
    np.testing.assert_array_equal(encoding[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


# ==================== ATTENTION ====================
def test_attention_single_key():
    Q = te.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = scaled_dot_attention(Q, te.Tensor(np.ones((1, 4))), te.Tensor([[2.0]]))
    np.testing.assert_array_equal(out.data, np.full((3, 1), 2.0))


def test_attention_identical_keys_average_values():
    K = te.Tensor(np.ones((2, 3)))
    V = te.Tensor([[1.0, 4.0], [3.0, 0.0]])
    out = scaled_dot_attention(te.Tensor([[0.2, -1.0, 5.0]]), K, V)
    np.testing.assert_allclose(out.data, [[2.0, 2.0]])


def test_attention_matches_brute_force(rng):
    Q, K, V = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = scaled_dot_attention(te.Tensor(Q), te.Tensor(K), te.Tensor(V))
    np.testing.assert_allclose(out.data, _brute_force_attention(Q, K, V), atol=1e-10)


def test_sparsity_scores_examples():
    assert sparsity_scores(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -2.0]]))[0] == 0.0
    assert sparsity_scores(np.array([[1.0, 1.0]]), np.array([[2.0, 0.0], [0.0, 2.0]]))[0] == pytest.approx(0.0)
    assert sparsity_scores(np.array([[3.0]]), np.array([[1.0], [0.0], [0.0]]))[0] == pytest.approx(2.0)


def test_active_query_count():
    assert active_query_count(1, 3) == 1
    assert active_query_count(4, 3) == 4
    assert active_query_count(64, 1) == 5
    assert active_query_count(35, 3) == 12


@pytest.mark.parametrize("length", range(1, 9))
def test_probsparse_equals_full_attention_when_all_queries_active(length):
    rng = np.random.default_rng(length)
    Q, K, V = (te.Tensor(rng.normal(size=(length, 4))) for _ in range(3))
    full = scaled_dot_attention(Q, K, V).data
    sparse = probsparse_attention(Q, K, V, factor=3, seed=1).data
    np.testing.assert_array_equal(sparse, full)


def test_probsparse_lazy_queries_get_mean_value(rng):
    Q, K, V = (te.Tensor(rng.normal(size=(64, 4))) for _ in range(3))
    trace = []
    out = probsparse_attention(Q, K, V, factor=1, seed=7, trace=trace).data
    full = scaled_dot_attention(Q, K, V).data
    mean_value = V.data.mean(axis=0)
    active = [i for i in range(64) if not np.allclose(out[i], mean_value)]
    assert len(active) == 5
    np.testing.assert_allclose(out[active], full[active], atol=1e-12)
    assert trace[0].shape == (5, 64)


def test_probsparse_causal_lazy_rows_use_cumulative_mean(rng):
    Q, K, V = (te.Tensor(rng.normal(size=(40, 3))) for _ in range(3))
    mask = causal_mask(40)
    out = probsparse_attention(Q, K, V, factor=1, seed=2, mask=mask, causal=True).data
    full = scaled_dot_attention(Q, K, V, mask).data
    cumulative = np.cumsum(V.data, axis=0) / np.arange(1, 41)[:, None]
    for i in range(40):
        assert np.allclose(out[i], full[i], atol=1e-12) or np.allclose(out[i], cumulative[i], atol=1e-12)


def test_probsparse_is_repeatable_for_a_seed(rng):
    Q, K, V = (te.Tensor(rng.normal(size=(50, 4))) for _ in range(3))
    first = probsparse_attention(Q, K, V, factor=1, seed=3).data
    np.testing.assert_array_equal(first, probsparse_attention(Q, K, V, factor=1, seed=3).data)


def _identity_attention(width, heads=1):
    eye = te.Tensor(np.eye(width))
    return AttentionParams(((eye, eye, eye),) * heads, te.Tensor(np.eye(width * heads, width)),
                           te.Tensor(np.zeros(width)), te.Tensor(np.ones(width)), te.Tensor(np.zeros(width)))


def test_multi_head_attention_single_key_reduction(rng):
    x_q = rng.normal(size=(4, 5))
    x_kv = rng.normal(size=(1, 5))
    out = multi_head_attention(te.Tensor(x_q), te.Tensor(x_kv), _identity_attention(5))
    np.testing.assert_allclose(out.data, _layer_norm(x_q + x_kv), atol=1e-12)


def test_causal_self_attention_ignores_future_positions(rng):
    params = InformerParameters.initialize(ModelConfig(d_model=8, n_heads=2), seed=1).attention("dec0.self")
    x = rng.normal(size=(10, 8))
    changed = x.copy()
    changed[6] += 5.0
    mask = causal_mask(10)
    before = multi_head_attention(te.Tensor(x), te.Tensor(x), params, mask=mask, causal=True).data
    after = multi_head_attention(te.Tensor(changed), te.Tensor(changed), params, mask=mask, causal=True).data
    np.testing.assert_allclose(before[:6], after[:6], atol=1e-12)
    assert not np.allclose(before[6], after[6])


@pytest.mark.parametrize("kind", ["full", "probsparse"])
def test_attention_weight_rows_sum_to_one(tiny_model_config, rng, kind):
    config = ModelConfig(**{**tiny_model_config.__dict__, "attention_kind": kind, "factor": 1})
    decoder_length = config.t_label + config.t_y
    # 2 têtes x (auto-attention encodeur, auto-attention masquée, attention croisée)
    expected = config.n_heads * (config.n_encoder_layers + 2 * config.n_decoder_layers)
    for draw in range(100):
        model = InformerForecaster(config, seed=draw % 5)
        trace = []
        model.predict(rng.normal(scale=3.0, size=(8, 6)), rng.normal(size=2), trace=trace)
        assert len(trace) == expected
        for weights in trace:
            assert (weights >= 0.0).all()
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=0.0, atol=1e-12)
            if kind == "full" and weights.shape == (decoder_length, decoder_length):
                assert not np.triu(weights, k=1).any()


@pytest.mark.parametrize("seed", range(10))
def test_multi_head_attention_gradient(seed):
    config = ModelConfig(d_model=32, n_heads=3)
    params = InformerParameters.initialize(config, seed=seed).attention("enc0.attn")
    x = np.random.default_rng(seed).normal(size=(8, 32))

    def loss(inputs):
        return te.sum_all(te.square(multi_head_attention(inputs, inputs, params)))

    assert te.grad_check(loss, x, max_coordinates=80, seed=seed) < 1e-4


# ==================== FEEDFORWARD / DISTILLATION ====================
def test_feed_forward_zero_weights_is_layer_norm(rng):
    zeros = lambda *shape: te.Tensor(np.zeros(shape))
    params = FeedForwardParams(zeros(4, 3), zeros(3), zeros(3, 4), zeros(4), te.Tensor(np.ones(4)), zeros(4))
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(feed_forward(te.Tensor(x), params).data, _layer_norm(x), atol=1e-12)


def test_feed_forward_relu_passthrough(rng):
    eye = te.Tensor(np.eye(4))
    zeros = te.Tensor(np.zeros(4))
    params = FeedForwardParams(eye, zeros, eye, zeros, te.Tensor(np.ones(4)), zeros)
    x = rng.uniform(0.0, 2.0, size=(5, 4))
    np.testing.assert_allclose(feed_forward(te.Tensor(x), params).data, _layer_norm(2.0 * x), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_feed_forward_gradient(seed):
    params = InformerParameters.initialize(ModelConfig(), seed=seed).feed_forward("enc0.ff")
    x = np.random.default_rng(seed).normal(size=(6, 32))
    assert te.grad_check(lambda inputs: te.sum_all(te.square(feed_forward(inputs, params))), x,
                         max_coordinates=60, seed=seed) < 1e-4


def test_distill_lengths():
    assert distill(te.Tensor(np.zeros((30, 4)))).shape == (15, 4)
    assert distill(te.Tensor(np.zeros((7, 4))), "elu").shape == (4, 4)
    np.testing.assert_array_equal(distill(te.Tensor(np.full((6, 2), 3.0))).data, np.full((3, 2), 3.0))


# ==================== ENCODEUR / DÉCODEUR ====================
def test_encoder_shapes(rng):
    config = ModelConfig(dropout=0.0)
    params = InformerParameters.initialize(config, seed=1)
    inputs = rng.uniform(size=(30, 6))
    assert encode(inputs, params, config).shape == (15, 32)
    undistilled = ModelConfig(dropout=0.0, distilling=False)
    assert encode(inputs, params, undistilled).shape == (30, 32)
    np.testing.assert_array_equal(encode(inputs, params, config).data, encode(inputs, params, config).data)


def test_build_decoder_input():
    tokens, known = build_decoder_input([1.0, 2.0, 3.0, 4.0, 5.0], 30)
    assert tokens.shape == (35, 2)
    np.testing.assert_array_equal(tokens[:5, 0], [1, 2, 3, 4, 5])
    np.testing.assert_array_equal(tokens[5:], np.zeros((30, 2)))
    assert known.sum() == 5
    empty, _ = build_decoder_input(np.zeros(0), 30)
    np.testing.assert_array_equal(empty, np.zeros((30, 2)))


def test_decoder_first_output_ignores_later_placeholders(tiny_model_config, rng):
    params = InformerParameters.initialize(tiny_model_config, seed=4)
    encoded = encode(rng.uniform(size=(8, 6)), params, tiny_model_config)
    tokens, _ = build_decoder_input(rng.uniform(size=2), tiny_model_config.t_y)
    changed = tokens.copy()
    changed[3:, 0] = 9.0
    before = decode(encoded, tokens, params, tiny_model_config).data
    after = decode(encoded, changed, params, tiny_model_config).data
    assert before[0] == pytest.approx(after[0], abs=1e-12)
    assert not np.allclose(before[1:], after[1:])


# ==================== MODÈLE ====================
def test_prediction_shapes(rng):
    model = InformerForecaster(ModelConfig(), seed=0)
    assert model.predict(rng.uniform(size=(30, 6)), rng.uniform(size=5)).shape == (30,)
    assert model.predict(rng.uniform(size=(3, 30, 6)), rng.uniform(size=(3, 5))).shape == (3, 30)


def test_forward_eval_is_repeatable(tiny_model_config, tiny_dataset):
    sample = tiny_dataset.split.test[0]
    for kind in ("full", "probsparse"):
        config = ModelConfig(**{**tiny_model_config.__dict__, "attention_kind": kind, "dropout": 0.3})
        model = InformerForecaster(config, seed=1)
        first = forward(sample, model, tiny_dataset.normalizer)
        second = forward(sample, model, tiny_dataset.normalizer)
        np.testing.assert_array_equal(first.normalized, second.normalized)
        np.testing.assert_array_equal(first.prices, inverse_transform(first.normalized, tiny_dataset.normalizer))


def test_forward_train_mode_applies_dropout(tiny_model_config, tiny_dataset):
    config = ModelConfig(**{**tiny_model_config.__dict__, "dropout": 0.5})
    model = InformerForecaster(config, seed=1)
    sample = tiny_dataset.split.train[0]
    evaluated = forward(sample, model, tiny_dataset.normalizer).normalized
    trained = forward(sample, model, tiny_dataset.normalizer, mode="train").normalized
    assert not np.allclose(evaluated, trained)


def test_anchor_residual_adds_last_known_value(rng):
    anchored = ModelConfig(dropout=0.0)
    plain = ModelConfig(dropout=0.0, anchor_residual=False)
    with_anchor = InformerForecaster(anchored, seed=2)
    without = InformerForecaster(plain, arrays={name: p.numpy() for name, p in with_anchor.parameters().items()})
    inputs, known = rng.uniform(size=(3, 30, 6)), rng.uniform(size=(3, 5))
    difference = with_anchor.predict(inputs, known).data - without.predict(inputs, known).data
    np.testing.assert_allclose(difference, np.repeat(known[:, -1:], 30, axis=1), atol=1e-12)
    assert with_anchor.n_parameters() == without.n_parameters()


@pytest.mark.parametrize("seed", range(10))
def test_whole_model_gradient(seed):
    config = ModelConfig(dropout=0.0)
    model = InformerForecaster(config, seed=seed)
    names = sorted(model.parameters())
    rng = np.random.default_rng(seed)
    inputs, known = rng.uniform(size=(30, 6)), rng.uniform(size=5)

    def loss(*tensors):
        candidate = InformerForecaster(config, arrays=dict(zip(names, tensors)))
        return te.sum_all(te.square(candidate.predict(inputs, known)))

    point = [model.parameters()[name].numpy() for name in names]
    assert te.grad_check(loss, point, max_coordinates=80, seed=seed) < 1e-3


def test_gradient_reaches_every_encoder_parameter(rng):
    model = InformerForecaster(ModelConfig(dropout=0.0), seed=7)
    loss = te.sum_all(te.square(model.predict(rng.uniform(size=(30, 6)), rng.uniform(size=5))))
    te.backward(loss)
    encoder = {name: p for name, p in model.parameters().items() if name.startswith(("embed.enc", "enc"))}
    assert "embed.enc.W" in encoder and "enc0.attn.W_O" in encoder
    for name, param in encoder.items():
        assert param.grad is not None, name
        assert np.abs(param.grad).sum() > 0.0, name
        assert np.isfinite(param.grad).all(), name


def test_forward_rejects_unknown_mode(tiny_model_config, tiny_dataset):
    model = InformerForecaster(tiny_model_config, seed=1)
    with pytest.raises(ConfigError, match="mode inconnu"):
        forward(tiny_dataset.split.test[0], model, tiny_dataset.normalizer, mode="inference")


def test_checkpoint_round_trip(tmp_path, tiny_model_config, tiny_dataset):
    model = InformerForecaster(tiny_model_config, seed=6)
    path = save_checkpoint(tmp_path / "informer.npz", model, tiny_dataset.normalizer, 0.125)
    checkpoint = load_checkpoint(path)
    assert checkpoint.model_kind == "informer"
    assert checkpoint.best_val_loss == 0.125
    assert checkpoint.normalizer == tiny_dataset.normalizer
    restored = rebuild_model(checkpoint)
    sample = tiny_dataset.split.test[0]
    np.testing.assert_array_equal(forward(sample, restored, tiny_dataset.normalizer).prices,
                                  forward(sample, model, tiny_dataset.normalizer).prices)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")
