import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amvpred import nn
from amvpred.errors import FormatError, ShapeError


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    out = np.zeros((n, k, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for f in range(k):
            for r in range(h - kh + 1):
                for s in range(wd - kw + 1):
                    out[i, f, r, s] = np.sum(x[i, :, r : r + kh, s : s + kw] * w[f]) + b[f]
    return out


def naive_pool(x, ph, pw):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // ph, w // pw))
    for i in range(n):
        for j in range(c):
            for r in range(h // ph):
                for s in range(w // pw):
                    out[i, j, r, s] = x[i, j, r * ph : (r + 1) * ph, s * pw : (s + 1) * pw].max()
    return out


def test_conv_all_ones():
    out = nn.conv2d_forward(np.ones((1, 1, 2, 3)), np.ones((1, 1, 2, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 6


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    assert np.array_equal(nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_conv_matches_naive_2x3x8x9():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8, 9))
    w = rng.normal(size=(4, 3, 2, 3))
    b = rng.normal(size=4)
    assert np.max(np.abs(nn.conv2d_forward(x, w, b) - naive_conv(x, w, b))) < 1e-6


def test_conv_float32_close_to_naive():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 8, 9)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = nn.conv2d_forward(x, w, b)
    assert out.dtype == np.float32
    assert np.max(np.abs(out - naive_conv(x, w, b))) < 1e-4


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 1)), np.zeros(1))


def test_maxpool_window_max():
    x = np.arange(1, 7, dtype=float).reshape(1, 1, 2, 3)
    out, arg = nn.maxpool_forward(x, 2, 3)
    assert out[0, 0, 0, 0] == 6 and arg[0, 0, 0, 0] == 5


def test_maxpool_unit_is_identity():
    x = np.random.default_rng(3).normal(size=(2, 3, 4, 5))
    out, _ = nn.maxpool_forward(x, 1, 1)
    assert np.array_equal(out, x)


def test_maxpool_floor_shape():
    out, _ = nn.maxpool_forward(np.zeros((1, 1, 223, 222)), 2, 3)
    assert out.shape == (1, 1, 111, 74)


def test_maxpool_matches_naive():
    x = np.random.default_rng(4).normal(size=(2, 3, 9, 11))
    out, _ = nn.maxpool_forward(x, 2, 3)
    assert np.array_equal(out, naive_pool(x, 2, 3))


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[[1.0, 5.0, 2.0], [0.0, 3.0, 4.0], [9.0, 9.0, 9.0]]]])
    out, arg = nn.maxpool_forward(x, 2, 3)
    dx = nn.maxpool_backward(np.array([[[[2.0]]]]), arg, x.shape, 2, 3)
    expected = np.zeros_like(x)
    expected[0, 0, 0, 1] = 2.0
    assert np.array_equal(dx, expected)


def test_stage_shapes_224():
    s = nn.CnnConfig().stage_shapes((3, 224, 224))
    assert s["conv1"] == (32, 223, 222) and s["pool1"] == (32, 111, 74)
    assert s["conv2"] == (64, 109, 72) and s["pool2"] == (64, 54, 24)
    assert s["flatten"] == 82944 == 64 * 54 * 24


def test_stage_shapes_33x41():
    s = nn.CnnConfig().stage_shapes((3, 33, 41))
    assert [s[k] for k in ("conv1", "pool1", "conv2", "pool2")] == [
        (32, 32, 39), (32, 16, 13), (64, 14, 11), (64, 7, 3)]
    assert s["flatten"] == 1344


def test_forward_output_shape_and_input_check():
    model = nn.init_model(nn.CnnConfig(), (3, 33, 41), seed=0)
    assert nn.forward(model, np.zeros((5, 3, 33, 41))).shape == (5, 3)
    with pytest.raises(ShapeError):
        nn.forward(model, np.zeros((5, 3, 32, 41)))


def test_zero_parameters_uniform_softmax():
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=0)
    for p in model.params.values():
        p[...] = 0
    x = np.random.default_rng(0).normal(size=(4,) + nn.TOY_INPUT)
    assert np.all(nn.forward(model, x) == 0)
    _, probs = nn.predict(model, x)
    assert np.allclose(probs, 1 / 3)


def test_uniform_logits_loss_ln3():
    loss, _ = nn.cross_entropy(np.zeros((3, 3)), np.array([0, 1, 2]))
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_predict_softmax_and_tie_break():
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=0, dtype=np.float64)
    for p in model.params.values():
        p[...] = 0
    model.params["fc2.b"][:] = [2.0, 0.0, 0.0]
    labels, probs = nn.predict(model, np.zeros((2,) + nn.TOY_INPUT))
    assert labels.tolist() == [0, 0]
    assert probs[0, 0] == pytest.approx(math.exp(2) / (math.exp(2) + 2), abs=1e-12)
    assert probs[0, 0] == pytest.approx(0.787, abs=5e-4)
    model.params["fc2.b"][:] = 0.5
    labels, _ = nn.predict(model, np.zeros((3,) + nn.TOY_INPUT))
    assert labels.tolist() == [0, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_rows_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5, size=(6, 3))
    labels = rng.integers(0, 3, 6)
    p = nn.softmax(logits)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-9)
    l1, _ = nn.cross_entropy(logits, labels)
    l2, _ = nn.cross_entropy(logits + shift, labels)
    assert abs(l1 - l2) < 1e-9
    assert np.array_equal(p.argmax(axis=1), nn.softmax(logits + shift).argmax(axis=1))


def finite_difference(model, x, y, name, index, eps=1e-4):
    p = model.params[name]
    old = p[index]
    p[index] = old + eps
    up, _ = nn.loss_and_grads(model, x, y)
    p[index] = old - eps
    down, _ = nn.loss_and_grads(model, x, y)
    p[index] = old
    return (up - down) / (2 * eps)


@pytest.mark.parametrize("name", nn.PARAM_ORDER)
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=5, dtype=np.float64)
    for k, p in model.params.items():
        if k.endswith(".b"):
            p[...] = rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(3,) + nn.TOY_INPUT)
    y = np.array([0, 2, 1])
    _, grads = nn.loss_and_grads(model, x, y)
    p = model.params[name]
    for flat in rng.choice(p.size, size=min(20, p.size), replace=False):
        i = np.unravel_index(flat, p.shape)
        num = finite_difference(model, x, y, name, i)
        assert nn.relative_error(grads[name][i], num) < 1e-3


def test_duplicate_sample_gradient():
    rng = np.random.default_rng(12)
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=6, dtype=np.float64)
    x1 = rng.normal(size=(1,) + nn.TOY_INPUT)
    x2 = rng.normal(size=(1,) + nn.TOY_INPUT)
    _, g1 = nn.loss_and_grads(model, x1, [1])
    _, g2 = nn.loss_and_grads(model, x2, [2])
    _, gb = nn.loss_and_grads(model, np.concatenate([x1, x1, x2]), [1, 1, 2])
    for k in nn.PARAM_ORDER:
        assert np.allclose(gb[k], (2 * g1[k] + g2[k]) / 3, atol=1e-12)


def test_gradcheck_helper_all_groups():
    errors = nn.gradcheck(seed=0)
    assert set(errors) == set(nn.PARAM_ORDER)
    assert max(errors.values()) < 1e-3


def test_gradcheck_detects_corruption():
    def corrupted(model, x, y):
        loss, g = nn.loss_and_grads(model, x, y)
        g["fc1.b"] = g["fc1.b"] * 1.05
        return loss, g

    assert nn.gradcheck(seed=0, grad_fn=corrupted)["fc1.b"] > 1e-3


def test_early_stopping_trace():
    stopper = nn.EarlyStopping(patience=3)
    decisions = [stopper.step(v) for v in [1.0, 0.9, 0.95, 0.97, 0.99]]
    assert decisions == [False, False, False, False, True]
    assert stopper.best_epoch == 2


def test_early_stopping_never_fires_on_decrease():
    stopper = nn.EarlyStopping(3)
    assert not any(stopper.step(1.0 / e) for e in range(1, 21))
    assert stopper.best_epoch == 20


def test_early_stopping_resets_after_drop():
    stopper = nn.EarlyStopping(3)
    decisions = [stopper.step(v) for v in [1.0, 1.1, 1.2, 1.0, 1.1, 1.2, 1.3]]
    assert decisions == [False] * 6 + [True]


def _separable_toy(n=20, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.normal(scale=0.3, size=(n,) + nn.TOY_INPUT)
    x[:, 0] += (y - 1)[:, None, None] * 2.0
    return x.astype(np.float32), y


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_train_separable_toy_reaches_low_loss(seed):
    shape = (3, 12, 20)  # smallest input the default architecture accepts comfortably
    rng = np.random.default_rng(0)
    y = np.arange(20) % 3
    x = rng.normal(scale=0.3, size=(20,) + shape)
    x[:, 0] += (y - 1)[:, None, None] * 2.0
    model = nn.init_model(nn.CnnConfig(), shape, seed=seed)
    _, history = nn.train(model, x.astype(np.float32), y, x, y, nn.TrainConfig(learning_rate=0.01))
    assert min(e.train_loss for e in history.epochs) < 0.1


def test_train_returns_best_epoch_parameters():
    x, y = _separable_toy(30, seed=1)
    xv, yv = _separable_toy(12, seed=2)
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=2)
    cfg = nn.TrainConfig(max_epochs=6, batch_size=5, learning_rate=0.05, seed=3)
    trained, history = nn.train(model, x, y, xv, yv, cfg)
    val_loss, _ = nn.evaluate_loss(trained, xv, yv)
    assert val_loss == pytest.approx(history.best_val_loss, rel=1e-6)
    assert history.best_val_loss == min(e.val_loss for e in history.epochs)
    assert len(history.epochs) <= 6


def test_train_runs_all_epochs_when_improving():
    x, y = _separable_toy(30, seed=4)
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=2)
    cfg = nn.TrainConfig(max_epochs=5, batch_size=30, learning_rate=0.001, seed=3)
    _, history = nn.train(model, x, y, x, y, cfg)
    losses = [e.val_loss for e in history.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert len(losses) == 5 and not history.stopped_early


def test_train_deterministic():
    x, y = _separable_toy(24, seed=5)
    cfg = nn.TrainConfig(max_epochs=4, batch_size=6, seed=9)
    runs = [nn.train(nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=4), x, y, x, y, cfg)
            for _ in range(2)]
    assert runs[0][1].as_rows() == runs[1][1].as_rows()
    for k in nn.PARAM_ORDER:
        assert np.array_equal(runs[0][0].params[k], runs[1][0].params[k])


def test_init_deterministic_and_he_bounds():
    a = nn.init_model(nn.CnnConfig(), (3, 33, 41), seed=3)
    b = nn.init_model(nn.CnnConfig(), (3, 33, 41), seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in nn.PARAM_ORDER)
    assert a.dtype == np.float32
    assert np.abs(a.params["conv1.w"]).max() <= np.sqrt(6 / 18)
    assert np.all(a.params["fc1.b"] == 0)


def test_checkpoint_round_trip(tmp_path):
    model = nn.init_model(nn.CnnConfig(), (3, 33, 41), seed=7)
    path = nn.save_checkpoint(model, tmp_path / "m.ckpt", epoch=4)
    back, header = nn.load_checkpoint(path)
    assert header["epoch"] == 4 and header["param_order"] == list(nn.PARAM_ORDER)
    assert back.config == model.config and back.input_shape == model.input_shape
    for k in nn.PARAM_ORDER:
        assert np.array_equal(back.params[k], model.params[k])
    size = path.stat().st_size
    header_len = len(path.read_bytes().split(b"\n", 1)[0]) + 1
    assert size - header_len == 4 * model.n_parameters()


def test_checkpoint_truncated(tmp_path):
    model = nn.init_model(nn.TOY_CONFIG, nn.TOY_INPUT, seed=7)
    path = nn.save_checkpoint(model, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        nn.load_checkpoint(path)
