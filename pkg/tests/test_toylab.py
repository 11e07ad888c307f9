import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferscale.toylab import (DiagnosticsSnapshot, LabeledSet, ProbeDataError, SyntheticTaskSpec, ToyModel,
                                  ToyModelSpec, TrainOptions, build_model, few_shot_probe, fit_linear_probe,
                                  gradient_check, head_hyperparam_sweep, head_margin, layer_norms, make_task,
                                  normalized_layer_margins, optimal_head_wd, snapshot, sweep_csv, train_upstream)
from transferscale.toylab.model import apply_step
from transferscale.toylab.probe import DEFAULT_PROBE_L2, distance_to_init, margins_from_logits

SMALL_TASK = SyntheticTaskSpec(n_upstream=400, n_upstream_test=200, n_downstream_pool=30, n_downstream_eval=30)


def small_spec(task_spec=SMALL_TASK, seed=0, **kw):
    base = dict(input_dim=task_spec.input_dim, hidden_dims=(16, 16), num_classes=task_spec.num_classes,
                activation="relu", init_scale=1.0, seed=seed)
    base.update(kw)
    return ToyModelSpec(**base)


def same_weights(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.weights + a.biases, b.weights + b.biases))


# --- model -------------------------------------------------------------------------

def test_build_deterministic_and_param_count():
    spec = ToyModelSpec(5, (8, 8), 3, seed=4)
    assert same_weights(build_model(spec), build_model(spec))
    assert build_model(spec).n_params == (5 + 1) * 8 + (8 + 1) * 8 + (8 + 1) * 3
    assert not same_weights(build_model(spec), build_model(replace(spec, seed=5)))


def test_init_scale_zero_gives_zero_weights():
    m = build_model(ToyModelSpec(5, (8, 8), 3, init_scale=0.0))
    assert all(np.all(w == 0) for w in m.weights)


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyModelSpec(5, (8,), 3)
    with pytest.raises(ValueError):
        ToyModelSpec(5, (8, 8), 3, activation="gelu")
    with pytest.raises(ValueError):
        TrainOptions(head_lr=-0.1)
    with pytest.raises(ValueError):
        TrainOptions(body_wd=-1.0)
    with pytest.raises(ValueError):
        TrainOptions(batch_size=0)


def test_zero_lr_zero_wd_leaves_weights_bit_identical():
    task = make_task(SMALL_TASK)
    m = build_model(small_spec())
    opts = TrainOptions(body_lr=0, head_lr=0, body_wd=0, head_wd=0, epochs=2)
    trained, trace = train_upstream(m, task.upstream_train.x, task.upstream_train.y, opts)
    assert same_weights(m, trained) and trace.steps == 2 * math.ceil(400 / 32)


def test_weight_decay_shrinks_by_exact_factor():
    m = build_model(ToyModelSpec(4, (6, 6), 3, seed=1))
    before = [w.copy() for w in m.weights]
    zeros_w = [np.zeros_like(w) for w in m.weights]
    zeros_b = [np.zeros_like(b) for b in m.biases]
    opts = TrainOptions(body_lr=0.1, head_lr=0.2, body_wd=0.5, head_wd=0.3)
    apply_step(m, zeros_w, zeros_b, opts)
    for w0, w in zip(before[:-1], m.weights[:-1]):
        np.testing.assert_array_equal(w, w0 * (1 - 0.1 * 0.5))
    np.testing.assert_array_equal(m.weights[-1], before[-1] * (1 - 0.2 * 0.3))


def test_learns_separable_two_class_task():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(-2, 0.5, (200, 2)), rng.normal(2, 0.5, (200, 2))])
    y = np.repeat([0, 1], 200)
    m = build_model(ToyModelSpec(2, (8, 8), 2, seed=0))
    trained, trace = train_upstream(m, x, y, TrainOptions(epochs=20, seed=0))
    assert trained.accuracy(x, y) >= 0.95
    assert trace.epoch_loss[-1] < trace.epoch_loss[0]


def test_training_deterministic():
    task = make_task(SMALL_TASK)
    m = build_model(small_spec())
    opts = TrainOptions(epochs=3, seed=7)
    a, _ = train_upstream(m, task.upstream_train.x, task.upstream_train.y, opts)
    b, _ = train_upstream(m, task.upstream_train.x, task.upstream_train.y, opts)
    assert same_weights(a, b)


def test_features_at_layer():
    m = build_model(ToyModelSpec(4, (6, 5), 3, seed=2))
    x = np.random.default_rng(0).standard_normal((7, 4))
    np.testing.assert_array_equal(m.features_at_layer(x, 0), x)
    assert m.features_at_layer(x, 1).shape == (7, 6)
    assert np.all(m.features_at_layer(x, 2) >= 0)
    _, hs, _ = m.forward(x)
    np.testing.assert_array_equal(m.features_at_layer(x, 2), hs[2])
    with pytest.raises(IndexError):
        m.features_at_layer(x, 3)
    with pytest.raises(IndexError):
        m.features_at_layer(x, -1)


def test_checkpoint_round_trip(tmp_path):
    task = make_task(SMALL_TASK)
    m, _ = train_upstream(build_model(small_spec(activation="tanh")), task.upstream_train.x,
                          task.upstream_train.y, TrainOptions(epochs=1))
    m.save(tmp_path / "m.bin")
    back = ToyModel.load(tmp_path / "m.bin")
    assert back.spec == m.spec and same_weights(back, m)
    assert all(np.array_equal(a, b) for a, b in zip(back.init_weights, m.init_weights))
    np.testing.assert_array_equal(back.logits(task.upstream_test.x), m.logits(task.upstream_test.x))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_check(activation):
    task = make_task(SMALL_TASK)
    m = build_model(small_spec(activation=activation))
    x, y = task.upstream_train.x[:64], task.upstream_train.y[:64]
    # finite differences are only meaningful away from relu kinks
    assert all(np.all(z != 0) for z in m.forward(x)[0])
    assert gradient_check(m, x, y) < 1e-4


# --- tasks ---------------------------------------------------------------------

def test_task_shapes_and_balance():
    task = make_task(SMALL_TASK)
    assert task.upstream_train.x.shape == (400, SMALL_TASK.input_dim)
    ds = task.downstream
    assert set(ds) == {"aligned", "lowlevel", "shifted"}
    assert np.bincount(ds["aligned"].train.y).tolist() == [30] * 10
    assert np.bincount(ds["lowlevel"].eval.y).tolist() == [30, 30] and ds["lowlevel"].num_classes == 2
    again = make_task(SMALL_TASK)
    np.testing.assert_array_equal(again.upstream_train.x, task.upstream_train.x)
    with pytest.raises(ValueError):
        make_task(SMALL_TASK, kinds=("nope",))


# --- probes --------------------------------------------------------------------

def test_probe_rejects_too_few_examples():
    task = make_task(SMALL_TASK)
    m = build_model(small_spec())
    with pytest.raises(ProbeDataError):
        few_shot_probe(m, 1, task.downstream["aligned"], 31)
    with pytest.raises(ProbeDataError):
        few_shot_probe(m, 1, task.downstream["aligned"], 0)


def test_probe_default_l2():
    task = make_task(SMALL_TASK)
    r = few_shot_probe(build_model(small_spec()), 2, task.downstream["aligned"], 5)
    assert r.l2_regularizer == DEFAULT_PROBE_L2 == 4096.0 and r.converged


def test_probe_solves_stationarity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 5))
    y = rng.integers(0, 3, 40)
    w, b, converged, gnorm = fit_linear_probe(x, y, 3, l2=2.0)
    assert converged and gnorm < 1e-8
    s = x @ w + b
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(x.T @ (p - onehot) + 2.0 * w, 0, atol=1e-8)
    np.testing.assert_allclose((p - onehot).sum(axis=0), 0, atol=1e-8)


def test_layer0_probe_on_separable_data_matches_lda_oracle():
    rng = np.random.default_rng(0)
    means = np.array([[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0]])
    y = np.repeat(np.arange(3), 20)
    ye = np.repeat(np.arange(3), 200)
    x = means[y] + rng.standard_normal((60, 2))
    xe = means[ye] + rng.standard_normal((600, 2))
    # LDA with the known shared identity covariance: nearest class mean
    lda = np.mean(np.argmin(((xe[:, None, :] - means[None]) ** 2).sum(-1), axis=1) == ye)
    w, b, converged, _ = fit_linear_probe(x, y, 3, l2=1.0)
    acc = np.mean(np.argmax(xe @ w + b, axis=1) == ye)
    assert converged and acc >= 0.9 and acc >= lda - 0.03


def test_untrained_model_probe_near_chance():
    task = make_task(SMALL_TASK)
    m = build_model(small_spec(init_scale=1e-3))
    r = few_shot_probe(m, m.depth, task.downstream["aligned"], 10)
    assert r.ds_accuracy <= 1 / 10 + 0.2


def test_more_probe_data_helps():
    task = make_task(SMALL_TASK)
    m, _ = train_upstream(build_model(small_spec()), task.upstream_train.x, task.upstream_train.y,
                          TrainOptions(epochs=20))
    ds = task.downstream["aligned"]
    few = np.mean([few_shot_probe(m, m.depth, ds, 1, seed=s).ds_accuracy for s in range(10)])
    many = np.mean([few_shot_probe(m, m.depth, ds, 20, seed=s).ds_accuracy for s in range(10)])
    assert many >= few


# --- margins and norms ---------------------------------------------------------------

def test_head_margin_examples():
    assert margins_from_logits(np.array([[3.0, 1.0, 0.0]]), np.array([0]))[0] == 2.0
    assert margins_from_logits(np.array([[1.0, 3.0]]), np.array([0]))[0] == -2.0
    assert margins_from_logits(np.array([[2.0, 2.0, 0.0]]), np.array([0]))[0] == 0.0


def linear_two_class_model(w_diff_scale=1.0):
    # one relu hidden layer that stays active on positive inputs, identity-like
    spec = ToyModelSpec(2, (2, 2), 2, seed=0)
    eye = np.eye(2)
    head = np.array([[1.0, -1.0], [0.5, 0.0]]) * w_diff_scale
    return ToyModel(spec, [eye, eye, head], [np.zeros(2), np.zeros(2), np.zeros(2)])


def test_normalized_margin_linear_closed_form_and_scale_invariance():
    m = linear_two_class_model()
    data = LabeledSet(np.array([[1.0, 2.0], [3.0, 0.5]]), np.array([0, 1]))
    d = np.array([2.0, 0.5])  # column 0 minus column 1 of the head
    expected = (data.x @ d) * np.array([1, -1]) / np.linalg.norm(d)
    np.testing.assert_allclose(normalized_layer_margins(m, data, 2), expected, rtol=1e-12)
    np.testing.assert_allclose(normalized_layer_margins(m, data, 0), expected, rtol=1e-12)
    scaled = linear_two_class_model(7.5)
    np.testing.assert_allclose(normalized_layer_margins(scaled, data, 2), expected, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_margin_sign_matches_correctness(seed):
    rng = np.random.default_rng(seed)
    m = build_model(ToyModelSpec(3, (5, 5), 4, seed=seed))
    x = rng.standard_normal((20, 3))
    y = rng.integers(0, 4, 20)
    data = LabeledSet(x, y)
    logits = m.logits(x)
    correct = np.argmax(logits, axis=1) == y
    unique_top = np.sort(logits, axis=1)[:, -1] > np.sort(logits, axis=1)[:, -2]
    for margins in (margins_from_logits(logits, y), normalized_layer_margins(m, data, 2)):
        assert np.all((margins > 0)[unique_top] == correct[unique_top])


def test_norms():
    m = build_model(ToyModelSpec(3, (4, 4), 2, seed=0))
    m.biases[0] += 3.0
    assert layer_norms(m)[0] == pytest.approx(np.linalg.norm(m.weights[0]))
    assert layer_norms(m, include_bias=True)[0] == pytest.approx(math.sqrt(np.sum(m.weights[0] ** 2) + 4 * 9))
    assert distance_to_init(m) == [0.0, 0.0, 0.0]
    assert distance_to_init(m, include_bias=True)[0] == pytest.approx(6.0)


# --- sweeps -------------------------------------------------------------------------

def test_single_value_sweep_matches_standalone_run():
    task = make_task(SMALL_TASK)
    spec = small_spec()
    opts = TrainOptions(epochs=3, seed=1)
    [snap] = head_hyperparam_sweep(spec, task, opts, "head_wd", [0.3], shots=(5,), ds_tasks=["aligned"], seed=2)
    model, _ = train_upstream(build_model(spec), task.upstream_train.x, task.upstream_train.y,
                              replace(opts, head_wd=0.3))
    assert snap == snapshot(model, task, 0.3, (5,), ["aligned"], seed=2)
    assert not snap.failed and snap.head_norm == layer_norms(model)[-1]


def test_sweep_validation_and_failed_points():
    task = make_task(SMALL_TASK)
    with pytest.raises(ValueError):
        head_hyperparam_sweep(small_spec(), task, TrainOptions(epochs=1), "body_wd", [0.1])
    with pytest.raises(ValueError):
        head_hyperparam_sweep(small_spec(), task, TrainOptions(epochs=1), "head_wd", [])
    snaps = head_hyperparam_sweep(small_spec(), task, TrainOptions(epochs=2), "head_lr", [0.05, 1e300, -1.0],
                                  shots=(5,), ds_tasks=["aligned"])
    assert [s.failed for s in snaps] == [False, True, True]
    assert "TrainingDivergedError" in snaps[1].error and "ValueError" in snaps[2].error
    rows = sweep_csv(snaps).splitlines()
    assert len(rows) == 4 and rows[2].endswith(snaps[1].error)
    assert optimal_head_wd(snaps, "aligned", 5) == 0.05


def snap(value, acc, error=None):
    return DiagnosticsSnapshot(value, 0.5, {} if error else {("a", 10): acc}, (1.0, 1.0), (0.0, 0.0), 0.0, 0.0,
                               error)


def test_optimal_head_wd_examples():
    assert optimal_head_wd([snap(0.0, 0.5), snap(0.1, 0.7), snap(1.0, 0.6)], "a", 10) == 0.1
    assert optimal_head_wd([snap(1.0, 0.7), snap(0.1, 0.7)], "a", 10) == 0.1
    assert optimal_head_wd([snap(0.0, 0.5), snap(0.1, 0.9, error="boom")], "a", 10) == 0.0
    with pytest.raises(ValueError):
        optimal_head_wd([], "a", 10)
    with pytest.raises(ValueError):
        optimal_head_wd([snap(0.0, 0.5)], "b", 10)


def test_loss_difference_matches_direct_subtraction():
    from transferscale.toylab.sweep import _loss_difference
    rng = np.random.default_rng(0)
    minus = rng.standard_normal((3, 6, 4))
    plus = minus + 0.1 * rng.standard_normal((3, 6, 4))
    y = rng.integers(0, 4, 6)

    def loss(s):
        lse = np.log(np.exp(s).sum(axis=2))
        return np.mean(lse - s[:, np.arange(6), y], axis=1)

    np.testing.assert_allclose(_loss_difference(plus, minus, y), loss(plus) - loss(minus), rtol=1e-12)
    # a change far below the loss's rounding granularity is still resolved
    tiny = minus.copy()
    tiny[:, :, 0] += 1e-13
    p0 = np.exp(minus)[:, :, 0] / np.exp(minus).sum(axis=2)
    expected = 1e-13 * np.mean(p0 - (y == 0), axis=1)
    np.testing.assert_allclose(_loss_difference(tiny, minus, y), expected, rtol=1e-3)


def test_head_margin_is_mean_of_example_margins():
    m = build_model(ToyModelSpec(3, (5, 5), 4, seed=1))
    rng = np.random.default_rng(1)
    data = LabeledSet(rng.standard_normal((30, 3)), rng.integers(0, 4, 30))
    assert head_margin(m, data) == pytest.approx(np.mean(margins_from_logits(m.logits(data.x), data.y)))
    with pytest.raises(ValueError):
        head_margin(m, LabeledSet(np.zeros((0, 3)), np.zeros(0, dtype=int)))
