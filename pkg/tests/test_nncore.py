import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_lstm_sequence, naive_lstm_step
from spendtraj import nncore
from spendtraj.errors import ConfigError, DimensionError, NumericError, SchemaError
from spendtraj.nncore import LayerSpec, LstmState, ModelBundle, dense, lstm


def random_bundle(layers, seed=0, scale=0.5):
    b = nncore.init_bundle(layers, seed)
    b.weights = np.random.default_rng(seed + 100).normal(0, scale, b.weights.size)
    return b


# --- parameter counts ---------------------------------------------------------


def test_param_counts_by_hand():
    assert nncore.param_count([dense(4, 5)]) == 25
    assert nncore.param_count([lstm(2, 3)]) == 72
    assert nncore.param_count([lstm(2, 3), dense(3, 1)]) == 76


@given(st.lists(st.tuples(st.sampled_from(["dense", "lstm"]), st.integers(1, 9)), min_size=1, max_size=4),
       st.integers(1, 9))
def test_param_count_matches_serialized_length(chain, first_in):
    layers, width = [], first_in
    for kind, out in chain:
        layers.append(dense(width, out, "tanh") if kind == "dense" else lstm(width, out, True))
        width = out
    b = nncore.init_bundle(layers, 0)
    doc = json.loads(json.dumps(nncore.bundle_to_dict(b)))
    assert len(doc["weights"]) == nncore.param_count(layers) == b.total_weights


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("conv", 2, 3)
    with pytest.raises(ConfigError):
        dense(0, 3)
    with pytest.raises(ConfigError):
        dense(2, 3, "relu")


def test_bundle_length_checks():
    with pytest.raises(SchemaError):
        ModelBundle((dense(2, 2),), np.zeros(5), np.ones(6, bool))
    with pytest.raises(SchemaError):
        ModelBundle((dense(2, 2),), np.zeros(6), np.ones(5, bool))


def test_init_ranges_and_forget_bias():
    b = nncore.init_bundle([lstm(4, 3), dense(3, 2)], seed=7)
    p = b.params(0)
    lim = np.sqrt(1 / 3)
    assert np.all(np.abs(p["W"]) <= lim) and np.all(np.abs(p["U"]) <= lim)
    assert np.array_equal(p["b"], np.r_[np.zeros(3), np.ones(3), np.zeros(6)])
    d = b.params(1)
    assert np.all(np.abs(d["W"]) <= np.sqrt(6 / 5)) and np.all(d["b"] == 0)


# --- LSTM cell --------------------------------------------------------------


def test_zero_params_give_zero_state():
    layer = lstm(4, 3)
    p = nncore.unpack(layer, np.zeros(layer.n_params))
    s = nncore.lstm_step(np.array([1.0, -2.0, 3.0, 0.5]), LstmState(np.zeros(3), np.zeros(3)), p)
    assert np.all(s.h == 0) and np.all(s.c == 0)


def test_lstm_step_matches_naive_oracle_three_steps(rng):
    layer = lstm(4, 3)
    flat = rng.normal(0, 1.0, layer.n_params)
    p = nncore.unpack(layer, flat)
    xs = rng.normal(size=(3, 4))
    state = LstmState(np.zeros(3), np.zeros(3))
    h, c = [0.0] * 3, [0.0] * 3
    for x in xs:
        state = nncore.lstm_step(x, state, p)
        h, c = naive_lstm_step(list(x), h, c, p["W"].tolist(), p["U"].tolist(), p["b"].tolist())
        np.testing.assert_allclose(state.h, h, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.c, c, rtol=0, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_hidden_state_bounded(seed, scale):
    r = np.random.default_rng(seed)
    layer = lstm(3, 4)
    p = nncore.unpack(layer, r.normal(0, scale, layer.n_params))
    state = LstmState(r.normal(size=4), r.normal(size=4) * scale)
    for _ in range(3):
        state = nncore.lstm_step(r.normal(size=3) * scale, state, p)
        assert np.all(np.abs(state.h) <= 1.0)


def test_lstm_step_dimension_error():
    layer = lstm(4, 3)
    p = nncore.unpack(layer, np.zeros(layer.n_params))
    with pytest.raises(DimensionError):
        nncore.lstm_step(np.zeros(5), LstmState(np.zeros(3), np.zeros(3)), p)


def test_hidden_states_match_oracle_sequence(rng):
    b = random_bundle([lstm(5, 3), dense(3, 2)], seed=3)
    x = rng.normal(size=(2, 6, 5))
    states = nncore.hidden_states(b, x)[0]
    p = b.params(0)
    for k in range(2):
        ref = naive_lstm_sequence(x[k], p["W"].tolist(), p["U"].tolist(), p["b"].tolist(), 3)
        np.testing.assert_allclose(states[k], ref, rtol=0, atol=1e-12)


# --- forward ----------------------------------------------------------------


def test_identity_dense_layer():
    b = nncore.init_bundle([dense(4, 4)], 0)
    b.weights = np.r_[np.eye(4).ravel(), np.zeros(4)]
    x = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(nncore.forward(b, x), x)


def test_zero_weight_tanh_layer_is_constant():
    b = nncore.init_bundle([dense(3, 2, "tanh")], 0)
    b.weights = np.r_[np.zeros(6), [0.3, -1.2]]
    out = nncore.forward(b, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(out, np.tanh([0.3, -1.2])) and np.all(out == out[0])


def test_two_layer_composition(rng):
    l1, l2 = dense(4, 3, "tanh"), dense(3, 2, "sigmoid")
    both = random_bundle([l1, l2], seed=1)
    a = ModelBundle((l1,), both.weights[: l1.n_params], np.ones(l1.n_params, bool))
    c = ModelBundle((l2,), both.weights[l1.n_params :], np.ones(l2.n_params, bool))
    x = rng.normal(size=(7, 4))
    np.testing.assert_allclose(nncore.forward(both, x), nncore.forward(c, nncore.forward(a, x)),
                               rtol=0, atol=1e-15)


def test_forward_single_sample_and_errors(rng):
    b = random_bundle([lstm(3, 2), dense(2, 1)])
    seq = rng.normal(size=(4, 3))
    assert nncore.forward(b, seq).shape == (1,)
    with pytest.raises(DimensionError):
        nncore.forward(b, rng.normal(size=(2, 4, 5)))
    with pytest.raises(DimensionError):
        nncore.forward(b, np.zeros((0, 4, 3)))


# --- backward / gradient check ----------------------------------------------


def test_single_neuron_gradient():
    b = ModelBundle((dense(1, 1),), np.array([1.0, 0.0]), np.array([True, False]))
    loss, grad = nncore.loss_and_gradient(b, np.array([[1.0]]), np.array([[0.0]]))
    assert loss == 1.0
    assert grad[0] == 2.0 and grad[1] == 0.0


def test_all_frozen_gives_zero_gradient(rng):
    b = random_bundle([lstm(3, 2), dense(2, 1)])
    b.trainable_mask[:] = False
    g = nncore.backward(b, rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 1)))
    assert np.all(g == 0)


@pytest.mark.parametrize(
    "layers",
    [
        [dense(4, 3, "tanh"), dense(3, 2, "sigmoid"), dense(2, 2)],
        [lstm(3, 4), dense(4, 2)],
        [lstm(3, 2), lstm(2, 2, True), dense(2, 3)],
        [lstm(3, 2, True), lstm(2, 3)],
    ],
)
def test_gradient_check_layer_kinds(layers, rng):
    b = random_bundle(layers, seed=5)
    x = rng.normal(size=(3, 4, 3)) if layers[0].kind == "lstm" else rng.normal(size=(3, 4))
    y = nncore.forward(b, x) + rng.normal(size=nncore.forward(b, x).shape)
    assert nncore.gradient_check(b, x, y) < 1e-5


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_keeps_weights():
    w = np.array([1.0, -2.0, 3.0])
    s = nncore.AdamState.zeros(3)
    for _ in range(3):
        w2 = nncore.adam_step(w, np.zeros(3), s)
        assert np.array_equal(w2, w)


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -5.0, 1e-3, -2e-2])
    w = np.zeros(4)
    w2 = nncore.adam_step(w, g, nncore.AdamState.zeros(4), lr=0.1)
    np.testing.assert_allclose(w2, -0.1 * np.sign(g), atol=1e-6, rtol=0)


def test_adam_frozen_weights_bit_exact(rng):
    w = rng.normal(size=10)
    mask = np.arange(10) % 3 != 0
    s = nncore.AdamState.zeros(10)
    cur = w.copy()
    for _ in range(100):
        cur = nncore.adam_step(cur, rng.normal(size=10), s, lr=0.05, mask=mask)
    assert np.array_equal(cur[~mask], w[~mask])
    assert not np.array_equal(cur[mask], w[mask])


def test_adam_non_finite_gradient_names_index():
    with pytest.raises(NumericError, match="index 2"):
        nncore.adam_step(np.zeros(4), np.array([0, 1, np.nan, 0.0]), nncore.AdamState.zeros(4))


# --- persistence --------------------------------------------------------------


def test_model_round_trip(tmp_path, rng):
    b = random_bundle([lstm(3, 2), dense(2, 1)], seed=9)
    b.trainable_mask[:5] = False
    b.train_meta = {"arch": "rnn_predictor"}
    path = tmp_path / "m.json"
    nncore.save_model(b, path)
    back = nncore.load_model(path)
    assert np.array_equal(back.weights, b.weights)
    assert np.array_equal(back.trainable_mask, b.trainable_mask)
    assert back.layers == b.layers and back.train_meta == b.train_meta
    x = rng.normal(size=(3, 4, 3))
    assert np.array_equal(nncore.forward(back, x), nncore.forward(b, x))


def test_truncated_weights_rejected(tmp_path):
    b = nncore.init_bundle([dense(3, 2)], 0)
    doc = nncore.bundle_to_dict(b)
    doc["weights"] = doc["weights"][:-1]
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        nncore.load_model(path)


def test_checksum_and_version_mismatch(tmp_path):
    doc = nncore.bundle_to_dict(nncore.init_bundle([dense(3, 2)], 0))
    tampered = dict(doc, weights=[w + 1.0 for w in doc["weights"]])
    with pytest.raises(SchemaError, match="checksum"):
        nncore.bundle_from_dict(tampered)
    with pytest.raises(SchemaError, match="format_version"):
        nncore.bundle_from_dict(dict(doc, format_version=99))
