import dataclasses

import numpy as np
import pytest

from fleetopt.design_space import (
    DimensionMismatchError,
    encode,
    enumerate_all,
    sample_uniform,
)
from fleetopt.device_world import (
    NOISE_AMPLITUDE,
    MeasurementLedger,
    Oracle,
    accuracy_value,
    latency_value,
)
from fleetopt.nn import DenseNet
from fleetopt.surrogate import (
    InsufficientDataError,
    MlpRegressor,
    TradeoffWeights,
    TrainingSettings,
    device_embedding,
    fit,
    iterative_fit,
    load_model,
    predicted_objective,
    save_model,
    train_accuracy_predictor,
    train_device_aware_predictor,
    train_device_specific_predictor,
    train_stage1,
)

LIGHT = TrainingSettings(epochs=400, batch_size=64)


def linear_regressor(w, b):
    """Zero-hidden-layer model with identity normalizers."""
    w = np.asarray(w, dtype=float)
    net = DenseNet([w.size, 1], np.random.default_rng(0))
    net.weights[0] = w[:, None].copy()
    net.biases[0] = np.array([float(b)])
    return MlpRegressor(
        net=net,
        in_mean=np.zeros(w.size),
        in_scale=np.ones(w.size),
        out_mean=0.0,
        out_scale=1.0,
    )


def test_tradeoff_weights_validation():
    TradeoffWeights(0.0, 0.0)
    with pytest.raises(ValueError):
        TradeoffWeights(-0.1, 0.0)
    np.testing.assert_array_equal(TradeoffWeights(1.0, 2.0).as_array(), [1.0, 2.0])


def test_training_settings_validation():
    with pytest.raises(ValueError):
        TrainingSettings(epochs=0)
    with pytest.raises(ValueError):
        TrainingSettings(batch_size=0)


def test_linear_model_predicts_affine_map():
    m = linear_regressor([2.0, -1.0], 0.5)
    assert m.predict(np.array([3.0, 1.0])) == pytest.approx(5.5, abs=1e-12)
    np.testing.assert_allclose(
        m.predict_batch(np.array([[0.0, 0.0], [1.0, 1.0]])), [0.5, 1.5], rtol=1e-12
    )


def test_predict_is_deterministic(reduced_models, reduced):
    enc = encode(enumerate_all(reduced)[17], reduced)
    m = reduced_models["latency"]
    assert m.predict(enc) == m.predict(enc)


def test_predict_dimension_mismatch(reduced_models):
    with pytest.raises(DimensionMismatchError):
        reduced_models["accuracy"].predict(np.zeros(9))


def test_fit_recovers_linear_function():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(64, 3))
    y = X @ np.array([2.0, -1.0, 0.5]) + 3.0
    m = fit(X, y, (), TrainingSettings(), np.random.default_rng(2))
    assert m.final_loss < 1e-6
    np.testing.assert_allclose(m.predict_batch(X), y, atol=1e-5)


def test_fit_constant_labels_short_circuits():
    X = np.random.default_rng(0).normal(size=(16, 2))
    m = fit(X, np.full(16, 4.25), (8,), TrainingSettings(), np.random.default_rng(1))
    assert m.constant_warning
    assert m.final_loss == 0.0
    np.testing.assert_allclose(m.predict_batch(np.zeros((3, 2))), 4.25, rtol=1e-12)
    np.testing.assert_array_equal(m.gradient_wrt_input(np.zeros(2)), np.zeros(2))


def test_fit_input_validation():
    X = np.zeros((4, 2))
    with pytest.raises(ValueError):
        fit(X, np.zeros(3), (), TrainingSettings(), np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        fit(X[:1], np.zeros(1), (), TrainingSettings(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        fit(X, np.array([0, 1, np.nan, 2.0]), (), TrainingSettings(), np.random.default_rng(0))


def test_fit_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    a = fit(X, y, (16,), LIGHT, np.random.default_rng(7))
    b = fit(X, y, (16,), LIGHT, np.random.default_rng(7))
    np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())


def test_fit_is_equivariant_to_affine_label_transform():
    # identical normalized problem, identical net init: predictions map affinely
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    a = fit(X, y, (8,), LIGHT, np.random.default_rng(9))
    b = fit(X, 1000.0 + 50.0 * y, (8,), LIGHT, np.random.default_rng(9))
    np.testing.assert_allclose(
        b.predict_batch(X), 1000.0 + 50.0 * a.predict_batch(X), rtol=1e-9
    )


def test_normalizers_refit_on_same_samples_is_identity():
    rng = np.random.default_rng(5)
    X = rng.normal(loc=3.0, scale=2.0, size=(30, 2))
    y = rng.normal(size=30)
    m = fit(X, y, (8,), LIGHT, np.random.default_rng(10))
    refit = dataclasses.replace(
        m,
        in_mean=X.mean(axis=0),
        in_scale=X.std(axis=0),
        out_mean=float(y.mean()),
        out_scale=float(y.std()),
    )
    np.testing.assert_array_equal(refit.predict_batch(X), m.predict_batch(X))


def test_gradient_of_linear_model_is_scaled_weight_vector():
    m = linear_regressor([2.0, -1.0, 0.5], 1.0)
    m = dataclasses.replace(m, in_scale=np.array([1.0, 2.0, 4.0]), out_scale=3.0)
    expected = 3.0 * np.array([2.0, -1.0, 0.5]) / np.array([1.0, 2.0, 4.0])
    np.testing.assert_allclose(m.gradient_wrt_input(np.zeros(3)), expected, rtol=1e-12)
    np.testing.assert_allclose(m.gradient_wrt_input(np.ones(3)), expected, rtol=1e-12)


def test_gradient_matches_finite_differences(reduced_models, reduced):
    m = reduced_models["latency"]
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = encode(sample_uniform(reduced, rng), reduced) + rng.normal(0, 0.01, 7)
        g = m.gradient_wrt_input(x)
        for i in range(7):
            up, dn = x.copy(), x.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            fd = (m.predict(up) - m.predict(dn)) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_batch_value_and_input_grad_consistency(reduced_models, reduced):
    m = reduced_models["energy"]
    rng = np.random.default_rng(12)
    X = np.stack([encode(sample_uniform(reduced, rng), reduced) for _ in range(4)])
    coeff = np.array([1.0, -2.0, 0.5, 3.0])
    values, grads = m.batch_value_and_input_grad(X, coeff)
    np.testing.assert_allclose(values, m.predict_batch(X), rtol=1e-12)
    for i in range(4):
        np.testing.assert_allclose(
            grads[i], coeff[i] * m.gradient_wrt_input(X[i]), rtol=1e-10
        )


def test_save_load_roundtrip(tmp_path, reduced_models, reduced):
    m = reduced_models["latency"]
    path = tmp_path / "latency.json"
    save_model(m, path)
    back = load_model(path)
    X = np.stack([encode(x, reduced) for x in enumerate_all(reduced)[:20]])
    np.testing.assert_array_equal(back.predict_batch(X), m.predict_batch(X))
    np.testing.assert_array_equal(back.parameter_vector(), m.parameter_vector())
    assert back.metric == m.metric
    assert back.objective_scale == m.objective_scale
    assert back.takes_device == m.takes_device


def test_accuracy_predictor_input_is_design_only(reduced_models):
    # 2 stages * 3 fields + bits: no device features in the accuracy input
    assert reduced_models["accuracy"].input_dim == 7
    assert not reduced_models["accuracy"].takes_device


def test_accuracy_predictor_rejects_tiny_sample_count(reduced):
    with pytest.raises(InsufficientDataError):
        train_accuracy_predictor(reduced, 0, Oracle(reduced), np.random.default_rng(0))


def test_accuracy_predictor_charges_ledger(reduced):
    oracle = Oracle(reduced)
    train_accuracy_predictor(reduced, 50, oracle, np.random.default_rng(0), hyper=LIGHT)
    assert oracle.ledger.accuracy_count == 50
    assert oracle.ledger.total() == 0


def test_exhaustive_accuracy_fit_error_within_noise_and_fit_margin(reduced):
    designs = enumerate_all(reduced)
    X = np.stack([encode(x, reduced) for x in designs])
    y = np.array([accuracy_value(x, reduced) for x in designs])
    m = fit(X, y, (64, 64), TrainingSettings(), np.random.default_rng(0), metric="accuracy")
    err = np.abs(m.predict_batch(X) - y)
    assert float(err.max()) <= NOISE_AMPLITUDE + 0.008
    assert float(np.median(err)) <= 0.003


def test_accuracy_argmax_matches_oracle_across_seeds(reduced):
    designs = enumerate_all(reduced)
    X = np.stack([encode(x, reduced) for x in designs])
    true_best = int(np.argmax([accuracy_value(x, reduced) for x in designs]))
    hits = 0
    for seed in range(20):
        acc = train_accuracy_predictor(
            reduced, 300, Oracle(reduced), np.random.default_rng(seed),
            hyper=TrainingSettings(epochs=500, batch_size=64),
        )
        hits += int(np.argmax(acc.predict_batch(X)) == true_best)
    assert hits >= 19


def test_device_specific_predictor_validation(reduced, proxy):
    with pytest.raises(ValueError):
        train_device_specific_predictor("power", proxy, 10, Oracle(reduced), np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        train_device_specific_predictor("latency", proxy, 0, Oracle(reduced), np.random.default_rng(0))


def test_proxy_latency_predictor_held_out_error(proxy_latency_default, dspace, proxy):
    rng = np.random.default_rng(999)
    probes = [sample_uniform(dspace, rng) for _ in range(200)]
    pred = proxy_latency_default.predict_batch(np.stack([encode(x, dspace) for x in probes]))
    truth = np.array([latency_value(x, proxy) for x in probes])
    rel = np.abs(pred - truth) / np.abs(truth)
    assert float(np.median(rel)) <= 0.10


def test_proxy_predictor_ranks_monotone_device(proxy_latency_default, dspace, fleet):
    from fleetopt.proxy_reuse import spearman

    rng = np.random.default_rng(21)
    probes = [sample_uniform(dspace, rng) for _ in range(40)]
    pred = proxy_latency_default.predict_batch(np.stack([encode(x, dspace) for x in probes]))
    for d in fleet.holdout_monotone[:2]:
        truth = [latency_value(x, d) for x in probes]
        assert spearman(list(pred), truth) >= 0.9


def test_device_aware_needs_two_devices(reduced, fleet):
    with pytest.raises(InsufficientDataError):
        train_device_aware_predictor(
            "latency", [fleet.proxy], 10, Oracle(reduced), np.random.default_rng(0)
        )


def test_device_aware_prediction_varies_with_device(reduced, fleet):
    devices = list(fleet.training_real[:2])
    m = train_device_aware_predictor(
        "latency", devices, 60, Oracle(reduced), np.random.default_rng(0),
        hyper=LIGHT, layer_sizes=(32, 32),
    )
    assert m.takes_device
    assert m.input_dim == 7 + device_embedding(fleet.proxy).size
    x = encode(enumerate_all(reduced)[100], reduced)
    fast = dataclasses.replace(devices[0], device_id="fast", throughput=devices[0].throughput * 2)
    a = m.predict(np.concatenate([x, device_embedding(devices[0])]))
    b = m.predict(np.concatenate([x, device_embedding(fast)]))
    assert a != b


def test_predicted_objective_zero_weights_is_negative_accuracy(reduced_models, reduced):
    enc = encode(enumerate_all(reduced)[5], reduced)
    f = predicted_objective(
        enc, None, TradeoffWeights(0.0, 0.0),
        reduced_models["accuracy"], reduced_models["energy"], reduced_models["latency"],
    )
    assert f == -reduced_models["accuracy"].predict(enc)


def test_predicted_objective_latency_dominates_at_large_weight(reduced_models, reduced):
    enc = encode(enumerate_all(reduced)[5], reduced)
    args = (reduced_models["accuracy"], reduced_models["energy"], reduced_models["latency"])
    lat_term = reduced_models["latency"].predict(enc) / reduced_models["latency"].objective_scale
    f = predicted_objective(enc, None, TradeoffWeights(0.0, 1e6), *args)
    assert f == pytest.approx(1e6 * lat_term, rel=1e-4)
    assert f > 0


def test_predicted_objective_linear_in_weights(reduced_models, reduced):
    enc = encode(enumerate_all(reduced)[42], reduced)
    args = (reduced_models["accuracy"], reduced_models["energy"], reduced_models["latency"])
    base = predicted_objective(enc, None, TradeoffWeights(0.3, 0.7), *args)
    bumped = predicted_objective(enc, None, TradeoffWeights(0.3 + 0.4, 0.7 + 0.1), *args)
    en = reduced_models["energy"].predict(enc) / reduced_models["energy"].objective_scale
    lat = reduced_models["latency"].predict(enc) / reduced_models["latency"].objective_scale
    assert bumped == pytest.approx(base + 0.4 * en + 0.1 * lat, rel=1e-12)


def test_predicted_objective_argmin_is_unique(reduced_models, reduced):
    designs = enumerate_all(reduced)
    args = (reduced_models["accuracy"], reduced_models["energy"], reduced_models["latency"])
    vals = np.array([
        predicted_objective(encode(x, reduced), None, TradeoffWeights(0.5, 0.5), *args)
        for x in designs
    ])
    assert int(np.sum(vals == vals.min())) == 1


def make_small_bundle(fleet, reduced, seed, rounds, explore_rng_seed):
    oracle = Oracle(reduced, MeasurementLedger())
    bundle = train_stage1(
        reduced, list(fleet.training_real[:3]), 10, oracle,
        np.random.default_rng(seed), hyper=LIGHT, layer_sizes=(32, 32),
    )
    out = iterative_fit(bundle, rounds, 10, oracle, np.random.default_rng(explore_rng_seed))
    return out, oracle


def test_iterative_fit_zero_rounds_is_identity(fleet, reduced):
    oracle = Oracle(reduced, MeasurementLedger())
    bundle = train_stage1(
        reduced, list(fleet.training_real[:3]), 10, oracle,
        np.random.default_rng(0), hyper=LIGHT, layer_sizes=(32, 32),
    )
    before = oracle.ledger.snapshot()
    assert iterative_fit(bundle, 0, 50, oracle, np.random.default_rng(1)) is bundle
    assert oracle.ledger.snapshot() == before
    with pytest.raises(ValueError):
        iterative_fit(bundle, -1, 50, oracle, np.random.default_rng(1))


def test_iterative_fit_ledger_growth_is_exact(fleet, reduced):
    oracle = Oracle(reduced, MeasurementLedger())
    bundle = train_stage1(
        reduced, list(fleet.training_real[:3]), 10, oracle,
        np.random.default_rng(0), hyper=LIGHT, layer_sizes=(32, 32),
    )
    before = oracle.ledger.snapshot()
    updated = iterative_fit(bundle, 2, 5, oracle, np.random.default_rng(2))
    after = oracle.ledger.snapshot()
    assert after["accuracy"] - before["accuracy"] == 10
    for d in bundle.devices:
        for metric in ("latency", "energy"):
            assert after["devices"][d.device_id][metric] - before["devices"][d.device_id][metric] == 10
    assert len(updated.designs) == len(bundle.designs) + 10


def test_more_exploration_rounds_reduce_held_out_error(fleet, reduced):
    probe_rng = np.random.default_rng(123)
    probes = [sample_uniform(reduced, probe_rng) for _ in range(40)]
    devices = list(fleet.training_real[:3])

    def held_err(bundle):
        errs = []
        for d in devices:
            P = np.stack([np.concatenate([encode(x, reduced), device_embedding(d)]) for x in probes])
            truth = np.array([latency_value(x, d) for x in probes])
            errs.extend(np.abs(bundle.latency.predict_batch(P) - truth) / np.abs(truth))
        return float(np.median(errs))

    one, four = [], []
    for seed in range(10):
        b1, _ = make_small_bundle(fleet, reduced, seed, rounds=1, explore_rng_seed=1000 + seed)
        b4, _ = make_small_bundle(fleet, reduced, seed, rounds=4, explore_rng_seed=1000 + seed)
        one.append(held_err(b1))
        four.append(held_err(b4))
    assert float(np.median(four)) <= float(np.median(one))
