from pathlib import Path

import numpy as np
import pytest

from app.errors import DatasetError, DimensionMismatchError, DivergenceError, ModelFormatError, ModelVersionError
from app.schemas import Activation, Hyperparams, Optimizer
from app.services.dataset import Dataset, Example, StandardizationStats, apply_standardizer, fit_standardizer
from app.services.mlp import (
    effective_learning_rate,
    forward,
    init_model,
    load_model,
    loss_and_grad,
    mse_of,
    predict_batch,
    predict_raw,
    save_model,
    train,
)
from app.services.params import load_hyperparams

from helpers import linear_hyperparams

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def planted_dataset(n=40, dim=5, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    w = rng.normal(size=dim)
    y = X @ w + 0.5 + noise * rng.normal(size=n)
    examples = [
        Example(wafer_id=f"R{21 + i % 8}", image_id=f"IMG{i}", x=X[i], y=float(y[i]), target_name="recess")
        for i in range(n)
    ]
    return Dataset(examples=tuple(examples), feature_dim=dim, wafer_groups={f"R{21 + k}": "G1" for k in range(8)})


def straight_line_forward(model, x):
    h = list(x)
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = [sum(W[r][c] * h[c] for c in range(len(h))) + b[r] for r in range(len(b))]
        if k < len(model.weights) - 1:
            z = [np.tanh(v) if model.activation == Activation.TANH else max(v, 0.0) for v in z]
        h = z
    return h[0]


@pytest.mark.parametrize("layers,activation", [([], "tanh"), ([6], "tanh"), ([6], "relu"), ([5, 4, 3], "tanh")])
def test_forward_matches_straight_line_evaluation(layers, activation):
    model = init_model(4, Hyperparams(hidden_layers=layers, activation=activation, seed=3))
    x = np.random.default_rng(0).normal(size=4)
    assert forward(model, x) == pytest.approx(straight_line_forward(model, x), abs=1e-12)


def test_forward_rejects_wrong_dimension():
    model = init_model(4, Hyperparams(hidden_layers=[3]))
    with pytest.raises(DimensionMismatchError):
        forward(model, np.zeros(5))


def test_init_model_is_seeded_and_bounded():
    hp = Hyperparams(hidden_layers=[7], seed=5)
    a, b = init_model(10, hp), init_model(10, hp)
    for Wa, Wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(Wa, Wb)
    assert np.all(np.abs(a.weights[0]) <= np.sqrt(3.0 / 10))
    assert np.all(np.abs(a.weights[1]) <= np.sqrt(3.0 / 7))
    assert all(np.all(bias == 0) for bias in a.biases)
    assert a.layer_dims == (10, 7, 1)


@pytest.mark.parametrize(
    "layers,activation",
    [([], "tanh"), ([8], "tanh"), ([8], "relu"), ([6, 5, 4], "tanh"), ([6, 5, 4], "relu")],
)
def test_gradients_match_central_differences(layers, activation):
    rng = np.random.default_rng(7)
    model = init_model(5, Hyperparams(hidden_layers=layers, activation=activation, seed=1))
    X = rng.normal(size=(9, 5))
    y = rng.normal(size=9)
    l2 = 0.3
    _, grads = loss_and_grad(model, (X, y), l2)
    analytic = grads.flat()
    params = model.params()
    h = 1e-5
    for p_idx, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[p_idx][idx] += h
            minus[p_idx][idx] -= h
            lp, _ = loss_and_grad(model.with_params(plus), (X, y), l2)
            lm, _ = loss_and_grad(model.with_params(minus), (X, y), l2)
            numeric = (lp - lm) / (2 * h)
            a = analytic[p_idx][idx]
            assert abs(a - numeric) <= 1e-4 * max(abs(a), abs(numeric)) + 1e-7


def test_l2_penalty_excludes_biases():
    model = init_model(3, Hyperparams(hidden_layers=[2], seed=0))
    X, y = np.zeros((1, 3)), np.zeros(1)
    loss0, _ = loss_and_grad(model, (X, y), 0.0)
    loss1, grads = loss_and_grad(model, (X, y), 2.0)
    assert loss1 - loss0 == pytest.approx(2.0 * model.sum_squared_weights())
    np.testing.assert_array_equal(grads.biases[-1], 0.0)


def test_effective_learning_rate_decays_per_update():
    assert effective_learning_rate(0.1, 0.0, 1000) == 0.1
    assert effective_learning_rate(0.1, 0.5, 2) == pytest.approx(0.05)


def test_learning_rate_never_increases_over_steps():
    steps = range(0, 100_000, 997)
    for decay in (1e-10, 1e-8, 1e-5, 0.3):
        rates = [effective_learning_rate(1e-3, decay, t) for t in steps]
        assert all(b <= a for a, b in zip(rates, rates[1:]))
    assert {effective_learning_rate(1e-3, 0.0, t) for t in steps} == {1e-3}


def test_larger_l2_never_grows_the_weights():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, 5))
    X -= X.mean(axis=0)
    y = X @ rng.normal(size=5) + 3.0 + 0.1 * rng.normal(size=40)
    ds = Dataset(
        examples=tuple(Example("R21", f"IMG{i}", X[i], float(y[i]), "recess") for i in range(40)),
        feature_dim=5,
        wafer_groups={"R21": "G1"},
    )
    norms = []
    for l2 in (0.0, 0.1, 1.0, 10.0):
        hp = linear_hyperparams(l2=l2, learning_rate=0.02, epochs=200, batch_size=1000)
        start = init_model(5, hp)
        start = start.with_params([np.zeros_like(p) for p in start.params()])
        model, _ = train(start, ds, None, hp)
        norms.append(model.sum_squared_weights())
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < norms[0]


def test_linear_model_fits_planted_linear_data():
    ds = planted_dataset()
    hp = linear_hyperparams(learning_rate=0.05, epochs=2000, batch_size=8)
    model, curve = train(init_model(ds.feature_dim, hp), ds, None, hp)
    assert curve.monitor == "train"
    assert mse_of(model, ds) < 1e-4


def test_adam_reduces_training_loss():
    ds = planted_dataset(noise=0.1)
    hp = Hyperparams(hidden_layers=[8], optimizer=Optimizer.ADAM, learning_rate=0.01, l2=0.0, decay=0.0, batch_size=8, epochs=100, es_patience=200)
    model, curve = train(init_model(ds.feature_dim, hp), ds, None, hp)
    assert curve.train_loss[-1] < curve.train_loss[0]


def test_zero_patience_keeps_going_while_loss_improves():
    ds = planted_dataset()
    hp = linear_hyperparams(epochs=20, es_patience=0)
    _, curve = train(init_model(ds.feature_dim, hp), ds, None, hp)
    assert all(b < a for a, b in zip(curve.train_loss, curve.train_loss[1:]))
    assert curve.stopped_epoch == 20
    assert len(curve.train_loss) == 20


def test_zero_patience_stops_at_first_non_improving_epoch():
    ds = planted_dataset(noise=1.0, n=64)
    train_part, val_part = ds.select(["R21"], keep=False), ds.select(["R21"])
    hp = Hyperparams(hidden_layers=[32], learning_rate=0.05, l2=0.0, decay=0.0, batch_size=4, epochs=300, es_patience=0)
    start = init_model(ds.feature_dim, hp)
    _, curve = train(start, train_part, val_part, hp)
    losses = (mse_of(start, val_part),) + curve.val_loss
    expected = next(
        (k for k in range(1, len(losses)) if losses[k] >= min(losses[:k])),
        hp.epochs,
    )
    assert curve.stopped_epoch == expected
    assert len(curve.val_loss) == expected


def test_zero_patience_with_worsening_validation_stops_after_first_epoch():
    ds = planted_dataset()
    # same inputs, negated targets: every step towards the training fit moves away from these
    val = Dataset(
        examples=tuple(Example("R30", e.image_id, e.x, -e.y, "recess") for e in ds.examples),
        feature_dim=ds.feature_dim,
        wafer_groups={"R30": "G2"},
    )
    hp = linear_hyperparams(epochs=50, es_patience=0)
    start = init_model(ds.feature_dim, hp)
    start = start.with_params([np.zeros_like(p) for p in start.params()])
    model, curve = train(start, ds, val, hp)
    assert curve.val_loss[0] > mse_of(start, val)
    assert curve.stopped_epoch == 1
    assert curve.restored_epoch == 1
    assert len(curve.val_loss) == 1
    assert mse_of(model, val) == curve.val_loss[0]


def test_early_stopping_restores_best_validation_epoch():
    ds = planted_dataset(noise=1.0, n=64)
    train_part, val_part = ds.select(["R21"], keep=False), ds.select(["R21"])
    hp = Hyperparams(hidden_layers=[32], learning_rate=0.05, l2=0.0, decay=0.0, batch_size=4, epochs=300, es_patience=15)
    model, curve = train(init_model(ds.feature_dim, hp), train_part, val_part, hp)
    best = int(np.argmin(curve.val_loss)) + 1
    assert curve.restored_epoch == best
    assert mse_of(model, val_part) == pytest.approx(min(curve.val_loss), rel=1e-12)
    assert curve.stopped_epoch <= hp.epochs


def test_training_ignores_caller_order():
    ds = planted_dataset()
    hp = linear_hyperparams(epochs=20, batch_size=4)
    a, _ = train(init_model(ds.feature_dim, hp), ds, None, hp)
    b, _ = train(init_model(ds.feature_dim, hp), ds.with_examples(reversed(ds.examples)), None, hp)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa, pb)


def test_divergence_is_reported_with_epoch():
    ds = planted_dataset()
    hp = linear_hyperparams(learning_rate=1e6, epochs=50)
    with pytest.raises(DivergenceError) as err:
        train(init_model(ds.feature_dim, hp), ds, None, hp)
    assert err.value.epoch >= 1


def test_train_rejects_synthetic_validation_rows():
    ds = planted_dataset()
    val = ds.with_examples([Example("R21", "x~syn0", np.zeros(5), 0.0, "recess", synthetic=True)])
    hp = linear_hyperparams(epochs=1)
    with pytest.raises(DatasetError):
        train(init_model(ds.feature_dim, hp), ds, val, hp)


def test_train_rejects_empty_training_set():
    ds = planted_dataset()
    hp = linear_hyperparams(epochs=1)
    with pytest.raises(DatasetError):
        train(init_model(ds.feature_dim, hp), ds.with_examples([]), None, hp)


def test_checkpoint_round_trip_is_exact(tmp_path):
    ds = planted_dataset()
    stats = fit_standardizer(ds)
    model = init_model(ds.feature_dim, Hyperparams(hidden_layers=[4, 3], activation="relu", seed=2), stats)
    save_model(model, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    assert back.layer_dims == model.layer_dims
    assert back.activation == Activation.RELU
    assert back.standardization.fitted_on == tuple(ds.wafers())
    for p, q in zip(model.params(), back.params()):
        np.testing.assert_array_equal(p, q)
    X = ds.X()
    np.testing.assert_array_equal(predict_raw(back, X), predict_raw(model, X))
    np.testing.assert_array_equal(predict_raw(model, X), predict_batch(model, stats.transform(X)))


def test_checkpoint_version_and_truncation(tmp_path):
    model = init_model(3, Hyperparams(hidden_layers=[2]))
    path = tmp_path / "m.txt"
    save_model(model, path)
    lines = path.read_text().splitlines()

    path.write_text("\n".join(["ETCHVM-MODEL v9"] + lines[1:]) + "\n")
    with pytest.raises(ModelVersionError):
        load_model(path)

    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ModelFormatError):
        load_model(path)

    bad_dims = [lines[0], lines[1], "dims 3 5 1"] + lines[3:]
    path.write_text("\n".join(bad_dims) + "\n")
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_reference_hyperparameters_file_matches_defaults():
    hp = load_hyperparams(CONFIGS / "reference.hyperparams")
    assert hp == Hyperparams()
    assert hp.hidden_layers == [4032]
    assert hp.activation == Activation.TANH
    assert (hp.l2, hp.learning_rate, hp.decay) == (100.0, 1e-5, 1e-8)
    assert (hp.batch_size, hp.epochs, hp.es_min_delta, hp.es_patience) == (32, 100, 0.0, 10)


def test_reference_configuration_trains_one_fold(reference_dataset):
    train_ds = reference_dataset.select(["R22", "R34"], keep=False)
    held = train_ds.wafers()[0]
    fold_train, fold_val = train_ds.select([held], keep=False), train_ds.select([held])
    stats = fit_standardizer(fold_train)
    hp = Hyperparams()
    model, curve = train(
        init_model(reference_dataset.feature_dim, hp, stats),
        apply_standardizer(stats, fold_train),
        apply_standardizer(stats, fold_val),
        hp,
    )
    assert model.layer_dims == (252, 4032, 1)
    assert all(np.isfinite(curve.train_loss)) and all(np.isfinite(curve.val_loss))
    assert curve.restored_epoch == int(np.argmin(curve.val_loss)) + 1
