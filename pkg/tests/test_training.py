import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crackcnn.data import Dataset, synthetic_dataset, split_dataset
from crackcnn.gradcheck import network_gradient_errors, relative_error, tiny_network
from crackcnn.layers import softmax
from crackcnn.network import CONV_PARAMS, Checkpoint, build_network
from crackcnn.tensor import make_rng
from crackcnn.training import (
    Adam,
    AdamState,
    TrainConfig,
    adam_step,
    cross_entropy_loss,
    evaluate,
    format_metrics_csv,
    steps_to_accuracy,
    train,
    transfer_train,
)
from oracles import adam_scalar

SIZE = 32


@pytest.fixture(scope="module")
def tiny_data():
    ds = synthetic_dataset("crack2", 8, seed=11, size=SIZE)
    return split_dataset(ds, 0.25, seed=0)


def tiny_net(num_classes=2, seed=0):
    return build_network(num_classes, True, make_rng(seed), input_shape=(3, SIZE, SIZE))


# --- loss ------------------------------------------------------------------


def test_loss_perfect_prediction():
    loss, _ = cross_entropy_loss(np.array([[1.0, 0.0]]), [0])
    assert loss == 0


def test_loss_uniform_two_class():
    loss, d = cross_entropy_loss(softmax(np.zeros((1, 2))), [0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert loss == pytest.approx(0.693147, abs=1e-6)
    np.testing.assert_allclose(d, [[-0.5, 0.5]])


def test_loss_probability_inverse():
    # printed confidence 0.951548 corresponds to loss -ln(0.951548)
    loss, _ = cross_entropy_loss(np.array([[0.951548, 0.048452]]), [0])
    assert loss == pytest.approx(0.049665, abs=1e-6)
    assert math.exp(-loss) == pytest.approx(0.951548, abs=1e-12)


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.array([[0.5, 0.5]]), [2])
    with pytest.raises(ValueError):
        cross_entropy_loss(np.array([[0.5, 0.5]]), [-1])


def test_dlogits_formula():
    p = softmax(np.array([[0.2, -1.0, 0.5], [1.0, 1.0, 0.0]]))
    _, d = cross_entropy_loss(p, [2, 0])
    expected = p.copy()
    expected[0, 2] -= 1
    expected[1, 0] -= 1
    np.testing.assert_allclose(d, expected / 2)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
@settings(max_examples=30, deadline=None)
def test_dlogits_matches_finite_differences(logits, labels):
    _, d = cross_entropy_loss(softmax(logits), labels)
    num = np.zeros_like(logits)
    eps = 1e-6
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += eps
        lm[idx] -= eps
        num[idx] = (cross_entropy_loss(softmax(lp), labels)[0] - cross_entropy_loss(softmax(lm), labels)[0]) / (2 * eps)
    assert relative_error(d, num).max() < 1e-3


@given(hnp.arrays(np.float32, (4, 3), elements=st.floats(-20, 20, width=32)), st.integers(0, 2))
@settings(max_examples=50, deadline=None)
def test_loss_probability_duality(logits, label):
    p = softmax(logits)
    for row in range(4):
        loss, _ = cross_entropy_loss(p[row : row + 1], [label])
        assert abs(math.exp(-loss) - p[row, label]) < 1e-6


# --- Adam ----------------------------------------------------------------------


def test_adam_zero_grad_keeps_param():
    w = np.array([0.3, -1.2], np.float32)
    st_ = AdamState.zeros_like(w)
    adam_step(w, np.zeros(2, np.float32), st_, TrainConfig())
    assert w.tolist() == pytest.approx([0.3, -1.2]) and w.tobytes() == np.array([0.3, -1.2], np.float32).tobytes()


def test_adam_first_step_closed_form():
    w = np.zeros(1)
    adam_step(w, np.ones(1), AdamState.zeros_like(w), TrainConfig())
    # -lr * g / (|g| + eps)
    assert w[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


@pytest.mark.parametrize("grads", [[1.0, 1.0], [1.0] * 5, [0.5, -2.0, 3.0, 0.0, 1e-3]])
def test_adam_matches_scalar_oracle(grads):
    w = np.array([0.25])
    state = AdamState.zeros_like(w)
    for g, expected in zip(grads, adam_scalar(0.25, grads)):
        adam_step(w, np.array([g]), state, TrainConfig())
        assert abs(w[0] - expected) < 1e-9
    assert state.t == len(grads)


def test_adam_shape_mismatch():
    w = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step(w, np.zeros(2), AdamState.zeros_like(w), TrainConfig())


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_adam_elementwise_permutation(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(8)
    grads = rng.standard_normal((3, 8))
    perm = rng.permutation(8)
    a, b = w.copy(), w[perm].copy()
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    for g in grads:
        adam_step(a, g, sa, TrainConfig())
        adam_step(b, g[perm], sb, TrainConfig())
    assert np.array_equal(a[perm], b)


def test_adam_state_file_roundtrip(tmp_path):
    cfg = TrainConfig()
    opt = Adam(cfg)
    params = {"w": np.ones((2, 3), np.float32)}
    opt.step(params, {"w": np.full((2, 3), 0.5, np.float32)})
    opt.save(tmp_path / "o.adam")
    back = Adam.load(tmp_path / "o.adam", cfg)
    assert back.states["w"].t == 1
    assert back.states["w"].m.tobytes() == opt.states["w"].m.tobytes()
    assert back.states["w"].v.tobytes() == opt.states["w"].v.tobytes()


def test_train_config_validation():
    for bad in (dict(steps=-1), dict(batch_size=0), dict(learning_rate=0), dict(beta1=1.0), dict(eps=0), dict(eval_interval=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- evaluate --------------------------------------------------------------------


def test_evaluate_zero_network_balanced(tiny_data):
    net = tiny_net()
    for p in net.params.values():
        p[...] = 0
    loss, acc = evaluate(net, tiny_data[0])
    # ties go to index 0, so exactly the class-0 half is "correct"
    assert acc == pytest.approx(np.mean(tiny_data[0].labels == 0))
    assert acc == 0.5
    assert loss == pytest.approx(math.log(2), abs=1e-6)


def test_evaluate_single_correct_sample(tiny_data):
    net = tiny_net()
    ds = tiny_data[0].subset([0])
    _, probs = net.forward(ds.images)
    ds.labels[:] = probs.argmax(axis=1)
    assert evaluate(net, ds)[1] == 1.0


def test_evaluate_matches_recount():
    ds = synthetic_dataset("crackjoint3", 7, seed=3, size=SIZE).subset(range(20))
    net = tiny_net(3, seed=5)
    loss, acc = evaluate(net, ds, batch_size=6)
    correct, losses = 0, []
    for i in range(len(ds)):
        p = net.forward(ds.images[i : i + 1])[1][0]
        correct += int(np.argmax(p) == ds.labels[i])
        losses.append(-math.log(p[ds.labels[i]]))
    assert acc == correct / 20
    assert loss == pytest.approx(np.mean(losses), rel=1e-5)


def test_evaluate_empty():
    empty = Dataset(np.zeros((0, 3, SIZE, SIZE), np.float32), np.zeros(0, np.int64), ["a", "b"])
    with pytest.raises(ValueError, match="empty dataset"):
        evaluate(tiny_net(), empty)


# --- train -------------------------------------------------------------------------


def test_train_zero_steps_is_noop(tiny_data):
    net = tiny_net()
    before = {k: v.copy() for k, v in net.params.items()}
    ckpt, metrics = train(net, *tiny_data, TrainConfig(steps=0))
    assert metrics == []
    assert ckpt.step == 0
    for k in before:
        assert net.params[k].tobytes() == before[k].tobytes()


def test_single_step_descends(tiny_data):
    net = tiny_net(seed=2)
    one = tiny_data[0].subset([3])
    before = evaluate(net, one)[0]
    train(net, one, tiny_data[1], TrainConfig(steps=1, batch_size=1, learning_rate=1e-4))
    assert evaluate(net, one)[0] < before


def test_train_errors(tiny_data):
    with pytest.raises(ValueError, match="class count mismatch"):
        train(tiny_net(3), *tiny_data, TrainConfig(steps=1))
    empty = tiny_data[0].subset([])
    with pytest.raises(ValueError, match="empty dataset"):
        train(tiny_net(), empty, tiny_data[1], TrainConfig(steps=1))


def test_train_metrics_cadence_and_checkpoint(tiny_data):
    ckpt, metrics = train(tiny_net(), *tiny_data, TrainConfig(steps=7, batch_size=4, eval_interval=3))
    assert [r.step for r in metrics] == [3, 6, 7]
    assert ckpt.step == 7 and ckpt.class_labels == ["crack", "negative"]
    for r in metrics:
        assert 0 <= r.train_accuracy <= 1 and 0 <= r.test_accuracy <= 1
        assert r.train_loss >= 0 and r.test_loss >= 0


def test_train_callback_stops(tiny_data):
    _, metrics = train(tiny_net(), *tiny_data, TrainConfig(steps=20, batch_size=4, eval_interval=2), callback=lambda r: True)
    assert [r.step for r in metrics] == [2]


def test_train_deterministic_csv(tiny_data):
    cfg = TrainConfig(steps=6, batch_size=4, eval_interval=2, seed=3)
    a = format_metrics_csv(train(tiny_net(seed=1), *tiny_data, cfg)[1])
    b = format_metrics_csv(train(tiny_net(seed=1), *tiny_data, cfg)[1])
    assert a == b
    lines = a.splitlines()
    assert lines[0] == "step,train_loss,train_acc,test_loss,test_acc,wall_seconds"
    assert len(lines) == 4 and lines[1].startswith("2,")
    assert all(len(f.split(".")[1]) == 6 for f in lines[1].split(",")[1:])
    assert "\r" not in a


def test_metrics_csv_records_time_on_request(tiny_data):
    _, metrics = train(tiny_net(), *tiny_data, TrainConfig(steps=2, batch_size=2, eval_interval=2))
    assert format_metrics_csv(metrics).strip().endswith(",0.000000")
    assert not format_metrics_csv(metrics, record_time=True).strip().endswith(",0.000000")


def test_transfer_freeze_conv_keeps_tensors(tiny_data):
    base = Checkpoint(tiny_net(seed=8), ["crack", "negative"], step=50)
    three = synthetic_dataset("crackjoint3", 4, seed=2, size=SIZE)
    tr, te = split_dataset(three, 0.25, 0)
    ckpt, _ = transfer_train(base, 3, tr, te, TrainConfig(steps=5, batch_size=4, freeze_conv=True))
    for name in CONV_PARAMS:
        assert ckpt.network.params[name].tobytes() == base.network.params[name].tobytes()
    assert not np.array_equal(ckpt.network.params["fc1.weight"], base.network.params["fc1.weight"])
    assert ckpt.network.params["fc2.weight"].shape == (3, 128)
    assert ckpt.class_labels == ["crack", "joint", "negative"]
    assert ckpt.info["base_step"] == 50


def test_transfer_unfrozen_updates_conv(tiny_data):
    base = Checkpoint(tiny_net(seed=8), ["crack", "negative"])
    ckpt, _ = transfer_train(base, 2, *tiny_data, TrainConfig(steps=2, batch_size=4))
    assert not np.array_equal(ckpt.network.params["conv1.weight"], base.network.params["conv1.weight"])


def test_steps_to_accuracy(tiny_data):
    from crackcnn.training import MetricsRow

    rows = [MetricsRow(10, 0, 0.5, 0, 0, 0), MetricsRow(20, 0, 0.97, 0, 0, 0), MetricsRow(30, 0, 1.0, 0, 0, 0)]
    assert steps_to_accuracy(rows, 0.97) == 20
    assert steps_to_accuracy(rows[:1], 0.97) is None


# --- end-to-end gradient ------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_pipeline_gradient(seed):
    net = tiny_network(seed)
    x = make_rng(100 + seed).random((2, 3, 8, 8))
    errs = network_gradient_errors(net, x, np.array([0, 1]))
    assert max(errs.values()) < 1e-2, errs


def test_backward_skip_frozen_layers():
    net = tiny_net()
    x = make_rng(0).random((2, 3, SIZE, SIZE), dtype=np.float32)
    _, p = net.forward(x, train=True)
    _, d = cross_entropy_loss(p, [0, 1])
    full = net.backward(d)
    _, p = net.forward(x, train=True)
    part = net.backward(d, skip=set(CONV_PARAMS))
    assert set(part) == {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}
    for k in part:
        np.testing.assert_array_equal(part[k], full[k])
