import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcats.errors import ConfigError, TrainingDivergedError
from dcats.forecast import (EmptySubDatasetError, ModelConfig, TrainConfig, compute_metrics, evaluate,
                            fine_tune, init_model, load_model, model_to_bytes, predict_windows, save_model,
                            train)
from dcats.tsdata import TimeSeriesStore, fit_scaler, make_windows

from oracles import finite_difference_grad, naive_metrics

KINDS = ("linear", "mlp", "sparsetsf")


def n_params(c):
    if c.kind == "linear":
        return (c.input_len + 1) * c.horizon
    if c.kind == "mlp":
        return (c.input_len + 1) * c.hidden + (c.hidden + 1) * c.horizon
    return (c.input_len // c.period + 1) * (c.horizon // c.period)


def test_parameter_count_examples():
    assert init_model(ModelConfig("linear", 96, 12)).params.size == 1164
    assert init_model(ModelConfig("sparsetsf", 96, 12, period=12)).params.size == 9


@given(st.sampled_from(KINDS), st.integers(1, 8), st.integers(1, 6), st.integers(1, 40), st.integers(1, 4))
def test_parameter_count_formula(kind, a, b, hidden, w):
    c = ModelConfig(kind, input_len=a * w, horizon=b * w, hidden=hidden, period=w)
    assert init_model(c).params.size == n_params(c)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        init_model(ModelConfig("sparsetsf", 96, 12, period=5))
    with pytest.raises(ConfigError):
        init_model(ModelConfig("transformer"))
    with pytest.raises(ConfigError):
        init_model(ModelConfig("mlp", hidden=0))


def test_same_seed_same_params():
    for kind in KINDS:
        c = ModelConfig(kind, seed=5)
        assert init_model(c).params.tobytes() == init_model(c).params.tobytes()


def test_forward_hand_cases():
    m = init_model(ModelConfig("linear", 2, 1))
    m.params = np.zeros_like(m.params)
    assert np.all(m.forward(np.random.rand(4, 2)) == 0.0)
    m.params = np.array([0.5, 0.5, 0.0])
    assert m.forward(np.array([2.0, 4.0]))[0] == pytest.approx(3.0)


def test_sparsetsf_last_period_copy():
    c = ModelConfig("sparsetsf", 96, 12, period=12)
    m = init_model(c)
    W = np.zeros((8, 1))
    W[7, 0] = 1.0  # each strand keeps its final element
    m.params = np.concatenate([W.ravel(), [0.0]])
    x = np.random.default_rng(0).normal(size=(5, 96))
    assert np.array_equal(m.forward(x), x[:, -12:])


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(42)
    for draw in range(3):
        c = ModelConfig(kind, input_len=24, horizon=6, hidden=7, period=3, seed=draw)
        m = init_model(c)
        x, y = rng.normal(size=(9, 24)), rng.normal(size=(9, 6))
        for loss in ("mse", "mae"):
            _, g = m.loss_and_grad(x, y, loss)

            def f(p):
                probe = m.clone()
                probe.params = p
                return probe.loss_and_grad(x, y, loss)[0]
            fd = finite_difference_grad(f, m.params.copy())
            if loss == "mse":
                assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-4


def sinusoid_store(n=960, period=16):
    t = np.arange(n)
    return TimeSeriesStore(np.sin(2 * np.pi * t / period)[None, :] * 10 + 50, (0,))


def test_linear_recovers_realizable_map():
    store = sinusoid_store()
    sc = fit_scaler(store, (0, 640))
    w = make_windows(store, (0, 640), [0], 8, 2)
    model, hist = train(init_model(ModelConfig("linear", 8, 2, seed=1)), w, store, sc,
                        TrainConfig(epochs=200, batch_size=64, learning_rate=1e-2, patience=200))
    assert hist.train_loss[-1] < 1e-4
    assert hist.train_loss[-1] <= hist.train_loss[0]


def test_training_deterministic_and_input_untouched():
    store = sinusoid_store()
    sc = fit_scaler(store, (0, 640))
    w = make_windows(store, (0, 640), [0], 8, 2)
    m0 = init_model(ModelConfig("mlp", 8, 2, hidden=4, seed=3))
    before = m0.params.tobytes()
    tc = TrainConfig(epochs=3, batch_size=32, seed=9)
    a, _ = train(m0, w, store, sc, tc)
    b, _ = train(m0, w, store, sc, tc)
    assert a.params.tobytes() == b.params.tobytes()
    assert m0.params.tobytes() == before


def test_divergence_raises_with_guidance():
    store = sinusoid_store()
    sc = fit_scaler(store, (0, 640))
    w = make_windows(store, (0, 640), [0], 8, 2)
    with pytest.raises(TrainingDivergedError, match="learning rate"):
        train(init_model(ModelConfig("linear", 8, 2)), w, store, sc,
              TrainConfig(epochs=50, learning_rate=1e6, optimizer="sgd"))


def test_early_stopping_restores_best(small_ws, small_foundation):
    ws = small_ws
    w = ws.train_windows([0, 1])
    _, hist = train(small_foundation, w, ws.store, ws.scaler,
                    TrainConfig(epochs=40, learning_rate=5e-2, patience=2), ws.val_windows([0]))
    assert len(hist.val_loss) <= 40
    if hist.stopped_early:
        assert len(hist.val_loss) - 1 - hist.best_epoch == 2


def test_fine_tune_contracts(small_ws, small_foundation):
    ws = small_ws
    before = model_to_bytes(small_foundation)
    same = fine_tune(small_foundation, ws.train_windows([0]), ws.store, ws.scaler, TrainConfig(epochs=0))
    assert same.params.tobytes() == small_foundation.params.tobytes()
    a = fine_tune(small_foundation, ws.train_windows([0, 1]), ws.store, ws.scaler, TrainConfig(epochs=1))
    b = fine_tune(small_foundation, ws.train_windows([2]), ws.store, ws.scaler, TrainConfig(epochs=1))
    assert model_to_bytes(small_foundation) == before
    assert a.params.tobytes() != b.params.tobytes()
    with pytest.raises(EmptySubDatasetError):
        fine_tune(small_foundation, ws.train_windows([0]).select(np.zeros(len(ws.train_windows([0])), bool)),
                  ws.store, ws.scaler, TrainConfig(epochs=1))


def test_cluster_fine_tune_beats_foundation(small_ws, small_foundation):
    ws = small_ws
    wins = 0
    for seed in range(20):
        target = int(ws.store.location_ids[seed % ws.store.n_locations])
        mates = [i for i in ws.store.location_ids if ws.labels[i] == ws.labels[target]]
        tuned = fine_tune(small_foundation, ws.train_windows(mates), ws.store, ws.scaler,
                          TrainConfig(epochs=3, learning_rate=1e-3, seed=seed), ws.val_windows([target]))
        base = evaluate(small_foundation, ws.store, ws.scaler, target, ws.split.val_range).mae
        wins += evaluate(tuned, ws.store, ws.scaler, target, ws.split.val_range).mae < base
    assert wins >= 16


def test_metrics_examples():
    m = compute_metrics([1.0, 2.0, 3.0], [2.0, 2.0, 5.0])
    assert (m.mae, round(m.rmse, 4), m.mape) == (1.0, 1.291, pytest.approx(30.0))
    perfect = compute_metrics([[3.0, 4.0]], [[3.0, 4.0]])
    assert (perfect.mae, perfect.rmse, perfect.mape) == (0.0, 0.0, 0.0)
    zeros = compute_metrics([[1.0, 2.0]], [[0.0, 4.0]])
    assert zeros.mape_excluded == 1 and zeros.mape == pytest.approx(50.0)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 12))
def test_metrics_match_naive_reference(seed, n, h):
    rng = np.random.default_rng(seed)
    pred, actual = rng.normal(10, 5, size=(n, h)), rng.normal(10, 5, size=(n, h))
    m = compute_metrics(pred, actual)
    mae, rmse, mape = naive_metrics(pred, actual)
    assert abs(m.mae - mae) < 1e-9 and abs(m.rmse - rmse) < 1e-9
    assert (np.isnan(mape) and np.isnan(m.mape)) or abs(m.mape - mape) < 1e-9
    assert m.mae <= m.rmse + 1e-12
    assert len(m.per_step_mae) == h


def test_evaluate_invariant_to_window_order(small_ws, small_foundation):
    ws = small_ws
    w = make_windows(ws.store, ws.split.val_range, [3], 24, 12)
    perm = np.random.default_rng(0).permutation(len(w))
    a = compute_metrics(*predict_windows(small_foundation, ws.store, ws.scaler, w))
    b = compute_metrics(*predict_windows(small_foundation, ws.store, ws.scaler, w.select(perm)))
    assert a.mae == pytest.approx(b.mae, rel=1e-12) and a.rmse == pytest.approx(b.rmse, rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    for kind in KINDS:
        m = init_model(ModelConfig(kind, seed=4))
        save_model(m, tmp_path / f"{kind}.ckpt")
        again = load_model(tmp_path / f"{kind}.ckpt")
        assert again.config == m.config
        assert model_to_bytes(again) == model_to_bytes(m)
