"""A two-convolution-layer classifier written directly in numpy.

Layout is NCHW throughout.  Convolutions are valid cross-correlations with
stride 1; pooling uses non-overlapping windows and drops trailing rows and
columns that do not fill a window.

Parameters live in a plain dict keyed by :data:`PARAM_ORDER`, which is also
the order of the binary blob in a checkpoint file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from amvpred.errors import FormatError, IoError, NumericError, ShapeError

PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")
CHECKPOINT_MAGIC = "amvpred-cnn"


@dataclass(frozen=True)
class CnnConfig:
    conv1_filters: int = 32
    conv1_kernel: tuple = (2, 3)
    pool1: tuple = (2, 3)
    conv2_filters: int = 64
    conv2_kernel: tuple = (3, 3)
    pool2: tuple = (2, 3)
    fc_hidden: int = 128
    n_classes: int = 3

    def __post_init__(self):
        for name in ("conv1_kernel", "pool1", "conv2_kernel", "pool2"):
            object.__setattr__(self, name, tuple(int(k) for k in getattr(self, name)))
        if self.n_classes != 3:
            raise ShapeError("the classifier has exactly three output classes")

    def stage_shapes(self, input_shape):
        """Per-sample shapes after each stage for a (C, H, W) input.

        Returns a dict with keys conv1, pool1, conv2, pool2 and flatten.
        """
        c, h, w = input_shape
        shapes = {}
        for conv, pool, k in (
            ("conv1", "pool1", self.conv1_filters),
            ("conv2", "pool2", self.conv2_filters),
        ):
            kh, kw = getattr(self, f"{conv}_kernel")
            if kh > h or kw > w:
                raise ShapeError(f"{conv} kernel {kh}x{kw} exceeds input {h}x{w}")
            h, w = h - kh + 1, w - kw + 1
            shapes[conv] = (k, h, w)
            ph, pw = getattr(self, pool)
            if ph > h or pw > w:
                raise ShapeError(f"{pool} window {ph}x{pw} exceeds input {h}x{w}")
            h, w = h // ph, w // pw
            shapes[pool] = (k, h, w)
        shapes["flatten"] = self.conv2_filters * h * w
        return shapes

    def param_shapes(self, input_shape):
        c = input_shape[0]
        flat = self.stage_shapes(input_shape)["flatten"]
        return {
            "conv1.w": (self.conv1_filters, c) + self.conv1_kernel,
            "conv1.b": (self.conv1_filters,),
            "conv2.w": (self.conv2_filters, self.conv1_filters) + self.conv2_kernel,
            "conv2.b": (self.conv2_filters,),
            "fc1.w": (flat, self.fc_hidden),
            "fc1.b": (self.fc_hidden,),
            "fc2.w": (self.fc_hidden, self.n_classes),
            "fc2.b": (self.n_classes,),
        }


# Reduced kernels so that an 8x9 input still passes through both pooling stages.
TOY_CONFIG = CnnConfig(
    conv1_filters=4,
    conv1_kernel=(2, 3),
    pool1=(2, 3),
    conv2_filters=5,
    conv2_kernel=(2, 2),
    pool2=(2, 1),
    fc_hidden=6,
)
TOY_INPUT = (3, 8, 9)


@dataclass
class CnnModel:
    config: CnnConfig
    input_shape: tuple
    params: dict
    init_seed: int = 0

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    def copy(self):
        return CnnModel(
            self.config,
            self.input_shape,
            {k: v.copy() for k, v in self.params.items()},
            self.init_seed,
        )

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return CnnModel(self.config, self.input_shape, params, self.init_seed)

    def n_parameters(self):
        return sum(p.size for p in self.params.values())


def init_model(config, input_shape, seed, dtype=np.float32):
    """He-uniform weights scaled by fan-in, zero biases."""
    input_shape = tuple(int(d) for d in input_shape)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x434E4E]))
    params = {}
    for name, shape in config.param_shapes(input_shape).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        limit = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return CnnModel(config, input_shape, params, int(seed))


# -- layers -------------------------------------------------------------------


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, Ho, Wo, kh, kw)
    ho, wo = h - kh + 1, w - kw + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d_forward(x, kernels, biases, return_cols=False):
    """Valid cross-correlation of ``x`` (N, C, H, W) with ``kernels`` (K, C, kh, kw)."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernels")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"kernel channels {kc} != input channels {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} exceeds input {h}x{w}")
    if biases.shape != (k,):
        raise ShapeError(f"bias shape {biases.shape} != ({k},)")
    cols, ho, wo = _im2col(x, kh, kw)
    out = cols @ kernels.reshape(k, -1).T + biases
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, cols, kernels, need_dx=True):
    """Gradients of :func:`conv2d_forward` given the cached im2col matrix."""
    n, c, h, w = x_shape
    k, _, kh, kw = kernels.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dmat.T @ cols).reshape(kernels.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dmat @ kernels.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def maxpool_forward(x, pool_h, pool_w):
    """Non-overlapping max pooling; returns the output and flat in-window argmax."""
    n, c, h, w = x.shape
    if pool_h > h or pool_w > w:
        raise ShapeError(f"pool {pool_h}x{pool_w} exceeds input {h}x{w}")
    ho, wo = h // pool_h, w // pool_w
    win = (
        x[:, :, : ho * pool_h, : wo * pool_w]
        .reshape(n, c, ho, pool_h, wo, pool_w)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, pool_h * pool_w)
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, argmax, x_shape, pool_h, pool_w):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dwin = np.zeros((n, c, ho, wo, pool_h * pool_w), dtype=dout.dtype)
    np.put_along_axis(dwin, argmax[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, : ho * pool_h, : wo * pool_w] = (
        dwin.reshape(n, c, ho, wo, pool_h, pool_w)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * pool_h, wo * pool_w)
    )
    return dx


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / n


# -- network ------------------------------------------------------------------


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input {x.shape} does not match model input {model.input_shape}")
    return x.astype(model.dtype, copy=False)


def forward(model, x, keep_cache=False):
    """Logits (N, 3) for input ``x`` (N, C, H, W)."""
    x = _check_input(model, x)
    p, cfg = model.params, model.config
    a1, cols1 = conv2d_forward(x, p["conv1.w"], p["conv1.b"], return_cols=True)
    r1 = np.maximum(a1, 0)
    m1, arg1 = maxpool_forward(r1, *cfg.pool1)
    a2, cols2 = conv2d_forward(m1, p["conv2.w"], p["conv2.b"], return_cols=True)
    r2 = np.maximum(a2, 0)
    m2, arg2 = maxpool_forward(r2, *cfg.pool2)
    flat = m2.reshape(m2.shape[0], -1)
    h = flat @ p["fc1.w"] + p["fc1.b"]
    hr = np.maximum(h, 0)
    logits = hr @ p["fc2.w"] + p["fc2.b"]
    if not keep_cache:
        return logits
    cache = dict(
        x_shape=x.shape, cols1=cols1, a1=a1, arg1=arg1, m1_shape=m1.shape, cols2=cols2,
        a2=a2, arg2=arg2, m2_shape=m2.shape, flat=flat, h=h, hr=hr,
    )
    return logits, cache


def backward(model, cache, dlogits):
    p, cfg = model.params, model.config
    grads = {}
    grads["fc2.w"] = cache["hr"].T @ dlogits
    grads["fc2.b"] = dlogits.sum(axis=0)
    dh = (dlogits @ p["fc2.w"].T) * (cache["h"] > 0)
    grads["fc1.w"] = cache["flat"].T @ dh
    grads["fc1.b"] = dh.sum(axis=0)
    dm2 = (dh @ p["fc1.w"].T).reshape(cache["m2_shape"])
    dr2 = maxpool_backward(dm2, cache["arg2"], cache["a2"].shape, *cfg.pool2)
    da2 = dr2 * (cache["a2"] > 0)
    dm1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(
        da2, cache["m1_shape"], cache["cols2"], p["conv2.w"]
    )
    dr1 = maxpool_backward(dm1, cache["arg1"], cache["a1"].shape, *cfg.pool1)
    da1 = dr1 * (cache["a1"] > 0)
    _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(
        da1, cache["x_shape"], cache["cols1"], p["conv1.w"], need_dx=False
    )
    return grads


def loss_and_grads(model, x, labels):
    """Mean cross-entropy over the batch and the gradient of every parameter."""
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels >= model.config.n_classes)):
        raise ShapeError("labels must be class codes 0, 1 or 2")
    logits, cache = forward(model, x, keep_cache=True)
    loss, dlogits = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss, backward(model, cache, dlogits)


def batched_logits(model, x, batch_size=256):
    x = np.asarray(x)
    return np.concatenate(
        [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    )


def predict(model, x, batch_size=256):
    """Class codes (argmax, lowest index on ties) and softmax probabilities."""
    x = _check_input(model, x)
    logits = batched_logits(model, x, batch_size)
    return logits.argmax(axis=1), softmax(logits.astype(np.float64))


def evaluate_loss(model, x, labels, batch_size=256):
    logits = batched_logits(model, x, batch_size)
    loss, _ = cross_entropy(logits, np.asarray(labels))
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, acc


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class EarlyStopping:
    """Stop once the monitored loss has risen ``patience`` epochs in a row.

    Tracks the epoch (1-based) with the lowest loss seen so far.
    """

    def __init__(self, patience=3):
        self.patience = patience
        self.rises = 0
        self.previous = None
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, self.epoch
        self.rises = self.rises + 1 if self.previous is not None and loss > self.previous else 0
        self.previous = loss
        return self.rises >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_loss(self):
        return self.epochs[self.best_epoch - 1].val_loss

    def as_rows(self):
        return [asdict(e) for e in self.epochs]


def train(model, x_train, y_train, x_val, y_val, cfg=TrainConfig()):
    """Mini-batch SGD with early stopping on validation loss.

    Returns a new model holding the parameters of the epoch with the lowest
    validation loss, and the per-epoch history.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    x_train = _check_input(model, x_train)
    x_val = _check_input(model, x_val)
    y_train = np.asarray(y_train)
    y_val = np.asarray(y_val)
    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    lr = model.dtype.type(cfg.learning_rate)
    mu = model.dtype.type(cfg.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x5447]))
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    best_params = copy.deepcopy(model.params)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_train))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(model, x_train[idx], y_train[idx])
            total += loss * len(idx)
            for name, g in grads.items():
                v = velocity[name]
                v *= mu
                v -= lr * g
                model.params[name] += v
        if not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise NumericError(f"parameters diverged in epoch {epoch}")
        train_loss, train_acc = evaluate_loss(model, x_train, y_train)
        val_loss, val_acc = evaluate_loss(model, x_val, y_val)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss in epoch {epoch}")
        history.epochs.append(EpochStats(epoch, train_loss, train_acc, val_loss, val_acc))
        stop = stopper.step(val_loss)
        if stopper.best_epoch == epoch:
            best_params = copy.deepcopy(model.params)
        if stop:
            history.stopped_early = epoch < cfg.max_epochs
            break
    history.best_epoch = stopper.best_epoch
    model.params = best_params
    return model, history


# -- gradient check -----------------------------------------------------------


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def gradcheck(seed=0, n_per_group=20, eps=1e-4, batch=4, grad_fn=None):
    """Central-difference check of :func:`loss_and_grads` on the toy network.

    Runs in float64.  Returns the largest relative error for every
    parameter group.
    """
    grad_fn = grad_fn or loss_and_grads
    rng = np.random.default_rng(seed)
    model = init_model(TOY_CONFIG, TOY_INPUT, seed, dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p[...] = rng.normal(0.0, 0.1, size=p.shape)
    x = rng.normal(size=(batch,) + TOY_INPUT)
    y = rng.integers(0, 3, size=batch)
    _, grads = grad_fn(model, x, y)
    errors = {}
    for name in PARAM_ORDER:
        p = model.params[name]
        picks = rng.choice(p.size, size=min(n_per_group, p.size), replace=False)
        worst = 0.0
        for flat in picks:
            i = np.unravel_index(flat, p.shape)
            old = p[i]
            p[i] = old + eps
            up, _ = loss_and_grads(model, x, y)
            p[i] = old - eps
            down, _ = loss_and_grads(model, x, y)
            p[i] = old
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(grads[name][i], numeric)))
        errors[name] = worst
    return errors


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model, path, **extra):
    """One JSON header line, then every parameter as little-endian float32 in
    :data:`PARAM_ORDER`."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "config": asdict(model.config),
        "input_shape": list(model.input_shape),
        "init_seed": model.init_seed,
        "param_order": list(PARAM_ORDER),
        "param_shapes": {k: list(model.params[k].shape) for k in PARAM_ORDER},
        "dtype": "f32le",
    }
    header.update(extra)
    blob = b"".join(model.params[k].astype("<f4").tobytes() for k in PARAM_ORDER)
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return Path(path)


def load_checkpoint(path):
    """Return ``(model, header)`` from a file written by :func:`save_checkpoint`."""
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an amvpred checkpoint")
    config = CnnConfig(**header["config"])
    input_shape = tuple(header["input_shape"])
    shapes = config.param_shapes(input_shape)
    sizes = [int(np.prod(shapes[k])) for k in PARAM_ORDER]
    if len(blob) != 4 * sum(sizes):
        raise FormatError(f"{path}: parameter blob has {len(blob)} bytes, expected {4 * sum(sizes)}")
    flat = np.frombuffer(blob, dtype="<f4")
    params, offset = {}, 0
    for k, size in zip(PARAM_ORDER, sizes):
        params[k] = flat[offset : offset + size].reshape(shapes[k]).astype(np.float32)
        offset += size
    return CnnModel(config, input_shape, params, int(header.get("init_seed", 0))), header
