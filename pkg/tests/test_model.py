import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, random_model
from oracles import finite_difference_gradients, relative_error, straight_line_forward
from dualhash.dataset import MISSING, Sample, SynthConfig, apply_ablation_mask, generate_synthetic
from dualhash.errors import ConfigError, FormatError, LabelError, ShapeError
from dualhash.model import (
    DphModel,
    ModelConfig,
    TrainConfig,
    attr_loss,
    backward,
    batch_loss,
    class_loss,
    compute_attr_weights,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)


def test_zero_model_outputs_are_uniform():
    model = DphModel.zeros(ModelConfig(5, (4,), 6, 4, 3))
    acts = forward(model, np.arange(5.0))
    np.testing.assert_array_equal(acts.class_probs, np.full(4, 0.25))
    np.testing.assert_array_equal(acts.attr_probs, np.full(3, 0.5))
    np.testing.assert_array_equal(acts.binary_like, np.full(6, 0.5))


def test_single_code_unit_is_sigmoid_of_bias():
    model = DphModel.zeros(ModelConfig(3, (), 1, 2, 1))
    model.params["code.bias"][:] = 0.7
    acts = forward(model, [1.0, -2.0, 3.0])
    assert acts.binary_like[0] == pytest.approx(1 / (1 + math.exp(-0.7)), abs=1e-15)


@pytest.mark.parametrize("hidden", [(), (5,), (6, 4)])
def test_forward_matches_straight_line_oracle(rng, hidden):
    model = random_model(rng, d=6, hidden=hidden, k=7, C=4, m=3)
    X = rng.standard_normal((5, 6))
    acts = forward(model, X)
    for i in range(5):
        code, probs, attrs = straight_line_forward(model.params, len(hidden), X[i])
        np.testing.assert_allclose(acts.binary_like[i], code, rtol=0, atol=1e-12)
        np.testing.assert_allclose(acts.class_probs[i], probs, rtol=0, atol=1e-12)
        np.testing.assert_allclose(acts.attr_probs[i], attrs, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_dimension(rng):
    model = random_model(rng, d=6)
    with pytest.raises(ShapeError):
        forward(model, np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.integers(0, 2**32 - 1))
def test_softmax_sums_to_one_and_probs_open_interval(x, seed):
    model = random_model(np.random.default_rng(seed), d=6, scale=3.0)
    acts = forward(model, np.array(x))
    assert abs(acts.class_probs.sum() - 1.0) <= 1e-12
    assert np.all(acts.attr_probs >= 0) and np.all(acts.attr_probs <= 1)


def _head_acts(cls_bias=None, attr_bias=None, C=3, m=1):
    model = DphModel.zeros(ModelConfig(2, (), 2, C, m))
    if cls_bias is not None:
        model.params["cls.bias"][:] = cls_bias
    if attr_bias is not None:
        model.params["attr.bias"][:] = attr_bias
    return forward(model, np.zeros(2))


def test_class_loss_missing_is_zero():
    assert class_loss(_head_acts([5.0, -3.0, 1.0]), None) == 0.0


def test_class_loss_uniform_three_classes():
    assert class_loss(_head_acts(), 2) == pytest.approx(1.0986123, abs=1e-7)


def test_class_loss_two_classes_hand_value():
    # -ln(e^2 / (e^2 + 1)) = ln(1 + e^-2)
    expected = math.log1p(math.exp(-2.0))
    assert expected == pytest.approx(0.1269280, abs=1e-7)
    assert class_loss(_head_acts([2.0, 0.0], C=2), 1) == pytest.approx(expected, rel=1e-14)


def test_class_loss_is_finite_when_probability_underflows():
    acts = _head_acts([0.0, 800.0], C=2)
    assert acts.class_probs[0] == 0.0
    assert class_loss(acts, 1) == pytest.approx(800.0)


@pytest.mark.parametrize("bad", [0, 4, 2.5, -1])
def test_class_loss_rejects_bad_label(bad):
    with pytest.raises(LabelError):
        class_loss(_head_acts(), bad)


def test_attr_loss_missing_component_is_zero():
    acts = _head_acts(attr_bias=[0.3, -2.0], m=2)
    out = attr_loss(acts, [2, 1], [1.0, 1.0])
    assert out[0] == 0.0 and out[1] > 0


def test_attr_loss_w1_halves_plain_cross_entropy():
    acts = _head_acts(attr_bias=[0.0])
    assert attr_loss(acts, [1], [1.0])[0] == pytest.approx(0.5 * math.log(2), abs=1e-15)
    assert 0.5 * math.log(2) == pytest.approx(0.3465736, abs=1e-7)


def test_attr_loss_w3_positive():
    acts = _head_acts(attr_bias=[0.0])
    assert attr_loss(acts, [1], [3.0])[0] == pytest.approx(0.75 * math.log(2), abs=1e-15)
    assert 0.75 * math.log(2) == pytest.approx(0.5198604, abs=1e-7)


def test_attr_loss_negative_uses_inverse_weight():
    acts = _head_acts(attr_bias=[0.0])
    assert attr_loss(acts, [0], [3.0])[0] == pytest.approx(0.25 * math.log(2), abs=1e-15)


def test_attr_loss_rejects_bad_label():
    with pytest.raises(LabelError):
        attr_loss(_head_acts(attr_bias=[0.0]), [3], [1.0])


def _pool(counts):
    """counts: per attribute (negatives, positives, missing)."""
    n = max(sum(c) for c in counts)
    cols = []
    for neg, pos, miss in counts:
        col = [0] * neg + [1] * pos + [2] * miss
        cols.append(col + [2] * (n - len(col)))
    A = np.array(cols).T
    return [Sample(i, [0.0], 1, A[i]) for i in range(n)]


def test_attr_weights_ratio_rules():
    w = compute_attr_weights(_pool([(30, 10, 0), (5, 5, 3), (7, 0, 1), (0, 4, 0), (0, 0, 9)]))
    np.testing.assert_array_equal(w, [3.0, 1.0, 7.0, 0.25, 1.0])


def test_attr_weights_empty_pool():
    with pytest.raises(ConfigError):
        compute_attr_weights([])


def test_batch_loss_all_missing_terms_are_zero(rng):
    model = random_model(rng, d=4, m=2)
    batch = [Sample(i, rng.standard_normal(4), None, [MISSING, 1]) for i in range(5)]
    total, parts = batch_loss(model, batch, [1.0, 2.0], 0.1)
    assert parts.cls_term == 0.0
    assert parts.attr_terms[0] == 0.0
    assert total == 0.1 * parts.attr_terms[1]


def test_batch_loss_alpha_zero_is_class_term(rng):
    model = random_model(rng, d=4, m=2)
    batch = random_batch(rng, 8, 4, 3, 2)
    total, parts = batch_loss(model, batch, [1.0, 2.0], 0.0)
    assert total == parts.cls_term


def test_batch_loss_single_sample(rng):
    model = random_model(rng, d=4, C=3, m=2)
    s = Sample(0, rng.standard_normal(4), 2, [1, 0])
    w = np.array([0.5, 4.0])
    total, _ = batch_loss(model, [s], w, 0.1)
    acts = forward(model, s.features)
    expected = class_loss(acts, 2) + 0.1 * attr_loss(acts, s.attributes, w).sum()
    assert total == pytest.approx(expected, rel=1e-14)


def test_batch_loss_parts_nonnegative(rng):
    for _ in range(20):
        model = random_model(rng, d=4, m=3, scale=2.0)
        batch = random_batch(rng, 10, 4, 3, 3)
        _, parts = batch_loss(model, batch, rng.uniform(0.1, 5, 3), 0.1)
        assert parts.cls_term >= 0 and np.all(parts.attr_terms >= 0)


def test_batch_loss_duplication_invariance(rng):
    model = random_model(rng, d=5, m=3)
    batch = random_batch(rng, 9, 5, 3, 3)
    w = rng.uniform(0.2, 3, 3)
    a, _ = batch_loss(model, batch, w, 0.1)
    b, _ = batch_loss(model, batch + batch, w, 0.1)
    assert a == pytest.approx(b, abs=1e-12)


def test_gradient_zero_for_class_head_when_all_missing(rng):
    model = random_model(rng, d=4, m=2)
    batch = [Sample(i, rng.standard_normal(4), None, [1, 0]) for i in range(6)]
    g = backward(model, batch, [1.0, 1.0], 0.1)
    assert np.all(g["cls.weight"] == 0.0) and np.all(g["cls.bias"] == 0.0)


@pytest.mark.parametrize("hidden", [(), (5,), (4, 3)])
def test_gradient_matches_finite_differences(rng, hidden):
    model = random_model(rng, d=5, hidden=hidden, k=6, C=3, m=3)
    batch = random_batch(rng, 7, 5, 3, 3)
    w = rng.uniform(0.2, 4, 3)
    analytic = backward(model, batch, w, 0.1)
    numeric = finite_difference_gradients(model, batch, w, 0.1)
    for name in model.params:
        assert relative_error(analytic[name], numeric[name]) < 1e-5, name


def test_gradient_duplication_invariance(rng):
    model = random_model(rng, d=5, k=6, C=3, m=3)
    batch = random_batch(rng, 8, 5, 3, 3)
    w = rng.uniform(0.2, 4, 3)
    g1 = backward(model, batch, w, 0.1)
    g2 = backward(model, batch + batch, w, 0.1)
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)


def _flat_model(value=1.0):
    model = DphModel.zeros(ModelConfig(2, (2,), 2, 2, 1))
    for p in model.params.values():
        p[...] = value
    return model


def test_sgd_plain_descent():
    model = _flat_model()
    grads = {k: np.full_like(v, 0.5) for k, v in model.params.items()}
    cfg = TrainConfig(learning_rate=0.1, lr_multiplier_pretrained=1.0, momentum=0.0, weight_decay=0.0)
    sgd_step(model, grads, {}, cfg)
    for p in model.params.values():
        np.testing.assert_allclose(p, 1.0 - 0.1 * 0.5, rtol=0, atol=1e-15)


def test_sgd_zero_gradient_fixed_point():
    model = _flat_model(0.3)
    before = model.copy()
    zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
    cfg = TrainConfig(weight_decay=0.0)
    state = {}
    for _ in range(3):
        sgd_step(model, zeros, state, cfg)
    assert model == before


def test_sgd_momentum_two_steps():
    model = _flat_model(0.0)
    g = {k: np.full_like(v, 2.0) for k, v in model.params.items()}
    cfg = TrainConfig(learning_rate=1.0, lr_multiplier_pretrained=1.0, momentum=0.9, weight_decay=0.0)
    state = {}
    sgd_step(model, g, state, cfg)
    sgd_step(model, g, state, cfg)
    for p in model.params.values():
        np.testing.assert_allclose(p, -(1 + 1.9) * 2.0, rtol=1e-15)


def test_sgd_lower_rate_for_preceding_layers():
    model = _flat_model(0.0)
    g = {k: np.ones_like(v) for k, v in model.params.items()}
    cfg = TrainConfig(learning_rate=1e-2, lr_multiplier_pretrained=0.1, momentum=0.0, weight_decay=0.0)
    sgd_step(model, g, {}, cfg)
    np.testing.assert_allclose(model.params["hidden0.weight"], -1e-3)
    np.testing.assert_allclose(model.params["code.weight"], -1e-2)


def test_sgd_weight_decay():
    model = _flat_model(2.0)
    zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
    cfg = TrainConfig(learning_rate=0.5, lr_multiplier_pretrained=1.0, momentum=0.0, weight_decay=0.1)
    sgd_step(model, zeros, {}, cfg)
    np.testing.assert_allclose(model.params["attr.bias"], 2.0 - 0.5 * 0.1 * 2.0)


@pytest.fixture(scope="module")
def train_pool():
    ds = generate_synthetic(SynthConfig(4, 8, 3, 60, 1.0, 0.0, (0.3, 0.3, 0.2, 0.2), 5))
    return apply_ablation_mask(ds, "B+A+C")


def test_train_zero_epochs_is_noop(train_pool):
    model = DphModel.initialize(ModelConfig(8, (8,), 16, 4, 3), seed=1)
    before = model.copy()
    log = train(model, train_pool, TrainConfig(epochs=0))
    assert model == before and len(log) == 0


def test_train_is_deterministic(train_pool):
    cfg = TrainConfig(learning_rate=0.1, lr_multiplier_pretrained=1.0, epochs=5, batch_size=32, seed=3)
    a = DphModel.initialize(ModelConfig(8, (8,), 16, 4, 3), seed=1)
    b = DphModel.initialize(ModelConfig(8, (8,), 16, 4, 3), seed=1)
    train(a, train_pool, cfg)
    train(b, train_pool, cfg)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_train_reduces_loss(train_pool):
    model = DphModel.initialize(ModelConfig(8, (8,), 16, 4, 3), seed=2)
    w = compute_attr_weights(train_pool)
    initial, _ = batch_loss(model, train_pool, w, 0.1)
    cfg = TrainConfig(learning_rate=0.1, lr_multiplier_pretrained=1.0, epochs=20, batch_size=40)
    log = train(model, train_pool, cfg)
    final, _ = batch_loss(model, train_pool, w, 0.1)
    assert final < initial
    assert log.epochs[-1].total < log.epochs[0].total


def test_train_keeps_short_final_batch(train_pool, monkeypatch):
    import dualhash.model as mod

    sizes = []
    real = mod._loss_and_grads

    def spy(model, X, *args, **kwargs):
        sizes.append(len(X))
        return real(model, X, *args, **kwargs)

    monkeypatch.setattr(mod, "_loss_and_grads", spy)
    model = DphModel.initialize(ModelConfig(8, (), 4, 4, 3))
    train(model, train_pool, TrainConfig(epochs=1, batch_size=50))
    assert sum(sizes) == len(train_pool) and sizes[-1] == len(train_pool) % 50


def test_train_empty_pool():
    with pytest.raises(ConfigError):
        train(DphModel.initialize(ModelConfig(2, (), 2, 2, 1)), [], TrainConfig())


def test_training_log_csv(tmp_path, train_pool):
    model = DphModel.initialize(ModelConfig(8, (8,), 16, 4, 3))
    log = train(model, train_pool, TrainConfig(epochs=3))
    log.write_csv(tmp_path / "log.csv")
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,total,cls_term,attr_term_1,attr_term_2,attr_term_3"
    assert len(rows) == 4


def test_checkpoint_round_trip(tmp_path, rng):
    model = random_model(rng, d=6, hidden=(5, 4), k=70, C=3, m=2)
    save_checkpoint(model, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt") == model


def test_checkpoint_body_is_little_endian_doubles(tmp_path):
    cfg = ModelConfig(2, (), 1, 2, 1)
    model = DphModel.initialize(cfg, seed=4)
    save_checkpoint(model, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(b"dph-model v1\n")
    body = raw.split(b"\n\n", 1)[1]
    n_params = sum(int(np.prod(s)) for _, s in cfg.param_shapes())
    assert len(body) == 8 * n_params
    np.testing.assert_array_equal(np.frombuffer(body[:16], "<f8"), model.params["code.weight"].ravel())


def test_checkpoint_truncated(tmp_path, rng):
    save_checkpoint(random_model(rng), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "m.ckpt")
