import numpy as np
import pytest

from aat.attention import AttentionConfig, AttentionKind
from aat.decoder import (
    HALTING_BIAS,
    AatDecoder,
    AttentionMode,
    DecodeMode,
    ModelConfig,
    decode_sequence,
)
from aat.errors import ConfigError, DimensionError, EmptyFeatureSetError
from aat.gradcheck import max_relative_error, numerical_gradient
from aat.halting import check_record, decide
from aat.layers import ParameterSet, lstm_step
from aat.tensor import Tape, Tensor

BOS, EOS = 1, 2
VOCAB = 7
D = 4
FEATURE_DIM = 3


def randomized(decoder, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for name in decoder.params:
        decoder.params[name] = rng.uniform(-scale, scale, size=decoder.params[name].shape)
    return decoder


def make_decoder(seed=0, scale=0.5, **overrides):
    config = ModelConfig(vocab_size=VOCAB, d=D, feature_dim=FEATURE_DIM, **overrides)
    return randomized(AatDecoder(config, seed=seed), seed + 100, scale)


def random_input(rng):
    features = rng.normal(size=(int(rng.integers(1, 6)), FEATURE_DIM))
    targets = [int(t) for t in rng.integers(3, VOCAB, size=int(rng.integers(1, 4)))]
    return features, targets


def distributions(decoder, features, targets):
    result = decode_sequence(decoder.bind(), features, BOS, EOS, targets=targets)
    return np.array(result.distributions), result


def test_adaptive_with_fixed_step_count_equals_recurrent():
    rng = np.random.default_rng(11)
    for draw in range(100):
        steps = int(rng.integers(1, 5))
        adaptive = make_decoder(
            draw,
            mode=AttentionMode.ADAPTIVE,
            m_min=steps,
            m_max=steps,
            layer_norm=False,
        )
        shared = ParameterSet(
            {
                name: array
                for name, array in adaptive.params.items()
                if not name.startswith(("confidence", "norm_"))
            }
        )
        config = ModelConfig(
            vocab_size=VOCAB,
            d=D,
            feature_dim=FEATURE_DIM,
            mode=AttentionMode.RECURRENT,
            m_r=steps,
        )
        recurrent = AatDecoder(config, shared)
        features, targets = random_input(rng)

        adaptive_dists, adaptive_result = distributions(adaptive, features, targets)
        recurrent_dists, _ = distributions(recurrent, features, targets)

        assert np.allclose(adaptive_dists, recurrent_dists, rtol=0, atol=1e-10)
        assert all(record.steps == steps for record in adaptive_result.trace)


def test_base_equals_one_recurrent_step_with_a_selecting_query():
    rng = np.random.default_rng(12)
    for draw in range(100):
        base = make_decoder(draw, mode=AttentionMode.BASE)
        params = base.params.copy()
        params["query.weight"] = np.vstack([np.eye(D), np.zeros((D, D))])
        params["query.bias"] = np.zeros(D)
        config = ModelConfig(
            vocab_size=VOCAB,
            d=D,
            feature_dim=FEATURE_DIM,
            mode=AttentionMode.RECURRENT,
            m_r=1,
        )
        recurrent = AatDecoder(config, params)
        features, targets = random_input(rng)

        base_dists, _ = distributions(base, features, targets)
        recurrent_dists, _ = distributions(recurrent, features, targets)

        assert np.allclose(base_dists, recurrent_dists, rtol=0, atol=1e-10)


@pytest.mark.parametrize(
    "overrides",
    [
        {"mode": AttentionMode.ADAPTIVE, "m_max": 2, "ponder_lambda": 0.1, "epsilon": 1e-8},
        {
            "mode": AttentionMode.ADAPTIVE,
            "m_max": 2,
            "ponder_lambda": 0.1,
            "epsilon": 1e-8,
            "attention": AttentionConfig(AttentionKind.DOT_PRODUCT, heads=2),
        },
        {"mode": AttentionMode.RECURRENT, "m_r": 2},
    ],
    ids=["adaptive-additive", "adaptive-dot-product", "recurrent"],
)
def test_full_model_gradients_match_finite_differences(overrides):
    decoder = make_decoder(3, **overrides)
    features = np.random.default_rng(5).normal(size=(3, FEATURE_DIM))
    targets = [4, EOS]

    tape = Tape()
    bound = decoder.bind(tape)
    result = decode_sequence(bound, features, BOS, EOS, targets=targets)
    named = bound.gradients(tape.backward(result.loss))

    def value():
        return decode_sequence(decoder.bind(), features, BOS, EOS, targets=targets).loss.item()

    for name in decoder.params:
        numeric = numerical_gradient(value, decoder.params[name])
        assert max_relative_error(named[name], numeric) < 1e-3, name
    if decoder.config.mode is AttentionMode.ADAPTIVE:
        assert np.any(named["confidence2.bias"] != 0.0)


def test_loss_is_cross_entropy_plus_ponder():
    decoder = make_decoder(4, ponder_lambda=1e-2)
    features = np.random.default_rng(0).normal(size=(2, FEATURE_DIM))
    result = decode_sequence(decoder.bind(), features, BOS, EOS, targets=[EOS])

    expected = -np.log(result.distributions[0][EOS]) + result.trace[0].ponder_term
    assert result.loss.item() == pytest.approx(expected, rel=1e-12)
    assert result.cross_entropy + result.ponder == pytest.approx(result.loss.item(), rel=1e-12)
    assert len(result.trace) == 1


def test_confidence_of_zero_network_is_one_half():
    decoder = make_decoder(0)
    for name in ("confidence1.weight", "confidence1.bias", "confidence2.weight", "confidence2.bias"):
        decoder.params[name] = np.zeros_like(decoder.params[name])

    assert decoder.bind().confidence(Tensor(np.ones(D))).item() == 0.5


def test_confidence_saturates_with_a_large_bias():
    decoder = make_decoder(0)
    decoder.params["confidence2.weight"] = np.zeros((D, 1))
    decoder.params["confidence2.bias"] = np.array([20.0])

    assert decoder.bind().confidence(Tensor(np.ones(D))).item() == pytest.approx(1.0, abs=1e-8)


def test_confident_first_step_skips_attention():
    decoder = make_decoder(0)
    decoder.params["confidence2.weight"] = np.zeros((D, 1))
    decoder.params["confidence2.bias"] = np.array([40.0])
    features = np.random.default_rng(1).normal(size=(3, FEATURE_DIM))
    result = decode_sequence(decoder.bind(), features, BOS, EOS, targets=[3, 4])

    assert [record.steps for record in result.trace] == [0, 0]
    assert all(record.beta_norm == [1.0] for record in result.trace)


@pytest.mark.parametrize("selected", ["h1", "h2"])
def test_query_selects_one_hidden_state(selected):
    decoder = make_decoder(0, mode=AttentionMode.RECURRENT, m_r=2)
    blocks = [np.eye(D), np.zeros((D, D))]
    if selected == "h2":
        blocks.reverse()
    decoder.params["query.weight"] = np.vstack(blocks)
    decoder.params["query.bias"] = np.zeros(D)
    h1, h2 = np.arange(1.0, D + 1), -np.arange(1.0, D + 1)

    query = decoder.bind().make_query(Tensor(h1), Tensor(h2))

    assert query.tolist() == (h1 if selected == "h1" else h2).tolist()


def test_base_query_is_the_input_hidden_state():
    decoder = make_decoder(0, mode=AttentionMode.BASE)
    h1 = Tensor(np.arange(float(D)))

    assert decoder.bind().make_query(h1, Tensor(np.ones(D))) is h1
    assert "query.weight" not in decoder.params


def test_input_step_of_zero_network_is_zero():
    decoder = make_decoder(0)
    for name in decoder.params:
        if name.startswith("lstm1."):
            decoder.params[name] = np.zeros_like(decoder.params[name])
    bound = decoder.bind()
    image = bound.prepare(np.ones((2, FEATURE_DIM)))
    h1, m1 = bound.input_step(bound.initial_state(), BOS, image)

    assert h1.tolist() == [0.0] * D
    assert m1.tolist() == [0.0] * D


def test_image_mean_is_the_mean_projected_region():
    decoder = make_decoder(0)
    features = np.random.default_rng(2).normal(size=(4, FEATURE_DIM))
    image = decoder.bind().prepare(features)
    projected = features @ decoder.params["features.weight"] + decoder.params["features.bias"]

    assert np.allclose(image.mean.data, projected.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize(
    "overrides",
    [
        {"mode": AttentionMode.ADAPTIVE, "m_min": 0, "m_max": 4},
        {"mode": AttentionMode.ADAPTIVE, "m_min": 2, "m_max": 3, "epsilon": 1e-2},
        {"mode": AttentionMode.ADAPTIVE, "m_max": 8, "layer_norm": False},
    ],
)
def test_adaptive_records_follow_the_halting_rule(overrides):
    rng = np.random.default_rng(21)
    for draw in range(20):
        decoder = make_decoder(draw, scale=2.0, **overrides)
        cfg = decoder.config
        features, targets = random_input(rng)
        _, result = distributions(decoder, features, targets)

        for record in result.trace:
            assert check_record(record, cfg.m_min, cfg.m_max) == []
            decision = decide(record.confidences, cfg.epsilon, cfg.m_min, cfg.m_max)
            assert decision.steps == record.steps
            assert decision.beta_raw == record.beta_raw
            assert decision.beta_norm == record.beta_norm


@pytest.mark.parametrize("mode", list(AttentionMode))
def test_every_distribution_sums_to_one(mode):
    decoder = make_decoder(6, mode=mode, m_r=1 if mode is AttentionMode.BASE else 3)
    features = np.random.default_rng(3).normal(size=(5, FEATURE_DIM))
    dists, result = distributions(decoder, features, [3, 4, 5, EOS])

    assert dists.shape == (4, VOCAB)
    assert np.all(dists > 0)
    assert np.all(np.abs(dists.sum(axis=1) - 1.0) <= 1e-12)
    assert result.tokens == [int(np.argmax(d)) for d in dists]


def test_recurrent_decoding_takes_exactly_m_r_steps():
    decoder = make_decoder(0, mode=AttentionMode.RECURRENT, m_r=3)
    features = np.random.default_rng(4).normal(size=(2, FEATURE_DIM))
    result = decode_sequence(
        decoder.bind(), features, BOS, EOS, max_len=5, mode=DecodeMode.GREEDY
    )

    assert result.mean_steps == 3.0
    assert result.loss is None


def test_greedy_decoding_is_deterministic():
    decoder = make_decoder(8)
    features = np.random.default_rng(9).normal(size=(3, FEATURE_DIM))
    runs = [
        decode_sequence(decoder.bind(), features, BOS, EOS, max_len=6, mode=DecodeMode.GREEDY)
        for _ in range(2)
    ]

    assert runs[0].tokens == runs[1].tokens
    assert [r.to_dict() for r in runs[0].trace] == [r.to_dict() for r in runs[1].trace]
    assert len(runs[0].tokens) <= 6


def test_greedy_decoding_stops_at_end_of_sequence():
    decoder = make_decoder(8)
    decoder.params["output.bias"][EOS] = 100.0
    features = np.random.default_rng(9).normal(size=(3, FEATURE_DIM))
    result = decode_sequence(
        decoder.bind(), features, BOS, EOS, max_len=6, mode=DecodeMode.GREEDY
    )

    assert result.tokens == []
    assert len(result.trace) == 1
    assert result.trace[0].token == BOS


def test_greedy_decoding_stops_at_max_len():
    decoder = make_decoder(8)
    decoder.params["output.bias"][5] = 100.0
    features = np.ones((1, FEATURE_DIM))
    result = decode_sequence(
        decoder.bind(), features, BOS, EOS, max_len=4, mode=DecodeMode.GREEDY
    )

    assert result.tokens == [5, 5, 5, 5]


def test_scheduled_sampling_feeds_sampled_tokens():
    decoder = make_decoder(8)
    decoder.params["output.bias"][6] = 100.0
    features = np.ones((2, FEATURE_DIM))
    forced = decode_sequence(decoder.bind(), features, BOS, EOS, targets=[3, 3, 3])
    sampled = decode_sequence(
        decoder.bind(),
        features,
        BOS,
        EOS,
        targets=[3, 3, 3],
        sampling_prob=1.0,
        rng=np.random.default_rng(0),
    )

    assert [r.token for r in forced.trace] == [BOS, 3, 3]
    assert [r.token for r in sampled.trace] == [BOS, 6, 6]


def test_teacher_forcing_needs_targets():
    with pytest.raises(ConfigError):
        decode_sequence(make_decoder().bind(), np.ones((1, FEATURE_DIM)), BOS, EOS)


def test_empty_and_misshaped_feature_sets():
    bound = make_decoder().bind()

    with pytest.raises(EmptyFeatureSetError):
        bound.prepare(np.zeros((0, FEATURE_DIM)))
    with pytest.raises(DimensionError):
        bound.prepare(np.zeros((2, FEATURE_DIM + 1)))


@pytest.mark.parametrize(
    "overrides",
    [
        {"mode": AttentionMode.BASE, "m_r": 2},
        {"mode": AttentionMode.RECURRENT, "m_r": 0},
        {"m_min": 3, "m_max": 2},
        {"m_max": 0},
        {"epsilon": 0.0},
        {"epsilon": 1.0},
        {"ponder_lambda": -1.0},
        {"d": 1},
        {"attention": AttentionConfig(AttentionKind.DOT_PRODUCT, heads=3)},
    ],
)
def test_invalid_model_configurations(overrides):
    settings = {"d": D, **overrides}

    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=VOCAB, **settings).validate()


def test_model_config_round_trip():
    config = ModelConfig(
        vocab_size=VOCAB,
        d=8,
        feature_dim=5,
        attention=AttentionConfig(AttentionKind.DOT_PRODUCT, heads=4),
        mode=AttentionMode.RECURRENT,
        m_r=3,
    )
    restored = ModelConfig.from_dict(config.to_dict())

    assert restored == config
    assert restored.attention.value_dim == 8


def test_parameter_names_depend_on_the_mode():
    names = {
        mode: set(make_decoder(0, mode=mode).params) for mode in AttentionMode
    }

    assert "query.weight" not in names[AttentionMode.BASE]
    assert "query.weight" in names[AttentionMode.RECURRENT]
    assert names[AttentionMode.ADAPTIVE] - names[AttentionMode.RECURRENT] == {
        "confidence1.weight",
        "confidence1.bias",
        "confidence2.weight",
        "confidence2.bias",
        "norm_h.gain",
        "norm_h.bias",
        "norm_m.gain",
        "norm_m.bias",
    }


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


class NumpyDecoder:
    """A plain numpy adaptive decoder with additive attention, written out step by step."""

    def __init__(self, params, config):
        self.p = {name: np.array(array) for name, array in params.items()}
        self.config = config

    def lstm(self, name, x, h, m):
        xh = np.concatenate([x, h])
        pre = {g: xh @ self.p[f"{name}.w_{g}"] + self.p[f"{name}.b_{g}"] for g in "ifog"}
        memory = np_sigmoid(pre["f"]) * m + np_sigmoid(pre["i"]) * np.tanh(pre["g"])
        return np_sigmoid(pre["o"]) * np.tanh(memory), memory

    def norm(self, name, x):
        centered = x - x.mean()
        scaled = centered / np.sqrt((centered**2).mean() + 1e-5)
        return self.p[f"{name}.gain"] * scaled + self.p[f"{name}.bias"]

    def confidence(self, h):
        hidden = np.maximum(h @ self.p["confidence1.weight"] + self.p["confidence1.bias"], 0.0)
        return float(np_sigmoid(hidden @ self.p["confidence2.weight"] + self.p["confidence2.bias"])[0])

    def attend(self, regions, q):
        scores = np.tanh(regions @ self.p["attention.w_a"] + q @ self.p["attention.w_q"]) @ self.p["attention.v"]
        alpha = np_softmax(scores)
        return (alpha @ regions) @ self.p["attention.w_o"], alpha

    def step(self, state, token, regions):
        h1_prev, m1_prev, h2_prev, m2_prev, c_prev = state
        x = np.concatenate([self.p["embed.table"][token], regions.mean(axis=0) + c_prev])
        h1, m1 = self.lstm("lstm1", x, h1_prev, m1_prev)

        confidences, hidden, memory, alphas = [], [h1], [m2_prev], []
        h2, m2 = h2_prev, m2_prev
        remainder = 1.0
        while True:
            p = self.confidence(h1 if not alphas else h2)
            confidences.append(p)
            remainder *= 1.0 - p
            if remainder < self.config.epsilon or len(alphas) >= self.config.m_max:
                break
            q = np.concatenate([h1, h2]) @ self.p["query.weight"] + self.p["query.bias"]
            attended, alpha = self.attend(regions, q)
            h2, m2 = self.lstm("lstm2", np.concatenate([attended, q]), h2, m2)
            h2, m2 = self.norm("norm_h", h2), self.norm("norm_m", m2)
            hidden.append(h2)
            memory.append(m2)
            alphas.append(alpha)

        raw = [confidences[0]] + [
            p * np.prod([1.0 - c for c in confidences[:n]]) for n, p in enumerate(confidences) if n > 0
        ]
        beta = np.array(raw) / np.sum(raw)
        context = sum(b * h for b, h in zip(beta, hidden))
        mixed_memory = sum(b * m for b, m in zip(beta, memory))
        distribution = np_softmax(context @ self.p["output.weight"] + self.p["output.bias"])
        return distribution, (h1, m1, context, mixed_memory, context), len(alphas), alphas

    def run(self, features, targets):
        regions = features @ self.p["features.weight"] + self.p["features.bias"]
        state = tuple(np.zeros(self.config.d) for _ in range(5))
        token, outputs = BOS, []
        for target in targets:
            distribution, state, steps, alphas = self.step(state, token, regions)
            outputs.append((distribution, steps, alphas))
            token = target
        return outputs


def test_adaptive_decoder_matches_a_numpy_reference():
    rng = np.random.default_rng(31)
    halting_steps = set()
    for draw in range(30):
        decoder = make_decoder(draw, scale=1.5)
        features = rng.normal(size=(int(rng.integers(1, 6)), FEATURE_DIM))
        targets = [int(t) for t in rng.integers(3, VOCAB, size=3)]

        dists, result = distributions(decoder, features, targets)
        expected = NumpyDecoder(decoder.params, decoder.config).run(features, targets)

        for t, (distribution, steps, alphas) in enumerate(expected):
            record = result.trace[t]
            assert record.steps == steps
            assert np.allclose(dists[t], distribution, rtol=0, atol=1e-10)
            assert len(record.alpha) == len(alphas)
            for kept, alpha in zip(record.alpha, alphas):
                assert np.allclose(kept[0], alpha, rtol=0, atol=1e-10)
            halting_steps.add(steps)

    assert len(halting_steps) > 1


def test_attention_step_over_one_region_feeds_that_region():
    decoder = make_decoder(5, mode=AttentionMode.RECURRENT, m_r=1)
    bound = decoder.bind()
    features = np.random.default_rng(6).normal(size=(1, FEATURE_DIM))
    image = bound.prepare(features)
    rng = np.random.default_rng(7)
    query, h2, m2 = (Tensor(rng.normal(size=D)) for _ in range(3))

    h2_new, m2_new, alpha = bound.attention_step(image, query, h2, m2)

    region = features @ decoder.params["features.weight"] + decoder.params["features.bias"]
    value = (region @ decoder.params["attention.w_o"])[0]
    direct_h, direct_m = lstm_step(bound.lstm2, Tensor(np.concatenate([value, query.data])), h2, m2)
    assert alpha.tolist() == [[1.0]]
    assert np.allclose(h2_new.data, direct_h.data, rtol=0, atol=1e-12)
    assert np.allclose(m2_new.data, direct_m.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", list(AttentionMode))
def test_records_keep_the_attention_weights_of_every_step(mode):
    decoder = make_decoder(9, mode=mode, m_r=1 if mode is AttentionMode.BASE else 3)
    k = 4
    features = np.random.default_rng(10).normal(size=(k, FEATURE_DIM))
    _, result = distributions(decoder, features, [3, 4, EOS])

    for record in result.trace:
        assert len(record.alpha) == record.steps
        assert all(np.array(step).shape == (1, k) for step in record.alpha)
        assert check_record(record, decoder.config.m_min, decoder.config.m_max) == []


def test_fresh_adaptive_decoder_halts_before_the_step_limit():
    decoder = AatDecoder(ModelConfig(vocab_size=VOCAB, d=D, feature_dim=FEATURE_DIM), seed=0)
    features = np.random.default_rng(11).normal(size=(3, FEATURE_DIM))
    _, result = distributions(decoder, features, [3, 4, 5, EOS])

    assert decoder.params["confidence2.bias"].tolist() == [HALTING_BIAS]
    assert [record.steps for record in result.trace] == [2, 2, 2, 2]


def test_halting_bias_is_configurable_and_round_trips():
    config = ModelConfig(vocab_size=VOCAB, d=D, feature_dim=FEATURE_DIM, halting_bias=-1.5)

    assert AatDecoder(config).params["confidence2.bias"].tolist() == [-1.5]
    assert ModelConfig.from_dict(config.to_dict()).halting_bias == -1.5
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=VOCAB, halting_bias=float("nan")).validate()


def test_model_config_leaves_the_attention_config_alone():
    attention = AttentionConfig(AttentionKind.DOT_PRODUCT, heads=2, query_dim=6, key_dim=6, value_dim=6)
    config = ModelConfig(vocab_size=VOCAB, d=8, feature_dim=FEATURE_DIM, attention=attention)

    assert (attention.query_dim, attention.key_dim, attention.value_dim) == (6, 6, 6)
    assert (config.attention.query_dim, config.attention.key_dim, config.attention.value_dim) == (8, 8, 8)
    assert config.attention.heads == 2
