"""Layers, forward/backward passes, optimizers and the regularized training loop."""

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import regularizers
from .errors import DimensionError, NumericError, TrainingDiverged
from .tensor import col2im_batch, conv_output_size, im2col_batch

LAYER_KINDS = ("dense", "conv2d", "activation", "flatten")
ACTIVATIONS = ("relu", "sine", "identity")


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    pad: int = 0
    activation: str = ""
    omega0: float = 30.0
    has_bias: bool = True
    weight_key: str = ""
    bias_key: str = ""
    # Set on layers produced by SVD factorization; such layers are never re-factorized.
    factorized: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.kind == "dense":
            if self.in_features < 1 or self.out_features < 1:
                raise ValueError(f"layer {self.name}: dense sizes must be positive")
        elif self.kind == "conv2d":
            if min(self.in_channels, self.out_channels, *self.kernel) < 1 or self.stride < 1 or self.pad < 0:
                raise ValueError(f"layer {self.name}: invalid conv geometry")
        elif self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name}: unknown activation {self.activation!r}")
        if self.parameterized:
            self.weight_key = self.weight_key or f"{self.name}.weight"
            if self.has_bias:
                self.bias_key = self.bias_key or f"{self.name}.bias"
            else:
                self.bias_key = ""

    @property
    def parameterized(self):
        return self.kind in ("dense", "conv2d")

    @property
    def n_out(self):
        return self.out_features if self.kind == "dense" else self.out_channels

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels) + self.kernel
        return None

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown layer fields: {sorted(unknown)}")
        return cls(**d)


def dense(name, n_in, n_out, has_bias=True):
    return LayerSpec("dense", name, in_features=n_in, out_features=n_out, has_bias=has_bias)


def conv2d(name, c_in, c_out, kernel=3, stride=1, pad=0, has_bias=True):
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return LayerSpec("conv2d", name, in_channels=c_in, out_channels=c_out,
                     kernel=kernel, stride=stride, pad=pad, has_bias=has_bias)


def activation(name, kind, omega0=30.0):
    return LayerSpec("activation", name, activation=kind, omega0=omega0)


def flatten(name):
    return LayerSpec("flatten", name)


class Model:
    """Ordered layers plus a parameter store keyed by name.

    Several layers may reference the same weight key (shared factors after
    joint compression); such parameters are stored and counted once.
    """

    def __init__(self, layers, params, input_shape):
        self.layers = list(layers)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.input_shape = tuple(int(s) for s in input_shape)
        self.validate()

    def copy(self):
        return Model(copy.deepcopy(self.layers), {k: v.copy() for k, v in self.params.items()},
                     self.input_shape)

    def parameterized(self):
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.parameterized]

    def weight_keys(self):
        """Unique weight keys of dense/conv layers, in layer order."""
        seen = []
        for _, layer in self.parameterized():
            if layer.weight_key not in seen:
                seen.append(layer.weight_key)
        return seen

    def param_keys(self):
        """Unique parameter keys in storage order: per layer, weight then bias."""
        keys = []
        for _, layer in self.parameterized():
            for k in (layer.weight_key, layer.bias_key):
                if k and k not in keys:
                    keys.append(k)
        return keys

    @property
    def layer_count(self):
        return len(self.weight_keys())

    def param_count(self):
        return int(sum(self.params[k].size for k in self.param_keys()))

    def output_shape(self):
        return self.validate()

    def validate(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = _layer_out_shape(layer, shape)
            if layer.parameterized:
                w = self.params.get(layer.weight_key)
                if w is None or w.shape != layer.weight_shape:
                    got = None if w is None else w.shape
                    raise DimensionError(f"layer {layer.name}: weight shape {got} != {layer.weight_shape}")
                if layer.has_bias:
                    b = self.params.get(layer.bias_key)
                    if b is None or b.shape != (layer.n_out,):
                        raise DimensionError(f"layer {layer.name}: bias missing or mis-shaped")
        stale = set(self.params) - set(self.param_keys())
        if stale:
            raise DimensionError(f"parameters not referenced by any layer: {sorted(stale)}")
        return shape


def _layer_out_shape(layer, shape):
    if layer.kind == "dense":
        if shape != (layer.in_features,):
            raise DimensionError(f"layer {layer.name}: expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise DimensionError(f"layer {layer.name}: expects {layer.in_channels} x H x W, got {shape}")
        try:
            ho, wo = conv_output_size(shape[1], shape[2], *layer.kernel, layer.stride, layer.pad)
        except ValueError as exc:
            raise DimensionError(f"layer {layer.name}: {exc}") from exc
        return (layer.out_channels, ho, wo)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


# ---------------------------------------------------------------------------
# initialization and presets


def init_params(layers, input_shape, rng):
    """Uniform +-sqrt(1/fan_in) init; sine-activated dense layers use the SIREN rule."""
    params = {}
    following = {}
    for i, layer in enumerate(layers[:-1]):
        nxt = layers[i + 1]
        if nxt.kind == "activation":
            following[i] = nxt
    first_sine = True
    for i, layer in enumerate(layers):
        if not layer.parameterized:
            continue
        fan_in = int(np.prod(layer.weight_shape[1:]))
        act = following.get(i)
        if act is not None and act.activation == "sine":
            if first_sine:
                bound = 1.0 / fan_in
                first_sine = False
            else:
                bound = math.sqrt(6.0 / fan_in) / act.omega0
        else:
            bound = math.sqrt(1.0 / fan_in)
        params[layer.weight_key] = rng.uniform(-bound, bound, size=layer.weight_shape)
        if layer.has_bias:
            b_bound = math.sqrt(1.0 / fan_in)
            params[layer.bias_key] = rng.uniform(-b_bound, b_bound, size=layer.n_out)
    return params


def build(layers, input_shape, seed=0):
    rng = np.random.default_rng(seed)
    return Model(layers, init_params(layers, input_shape, rng), input_shape)


def inr_mlp(hidden=256, hidden_layers=2, omega0=30.0, in_features=2, out_features=3, seed=0):
    """Sine-activated coordinate network: first layer, ``hidden_layers`` square layers, linear head."""
    layers = [dense("fc0", in_features, hidden), activation("act0", "sine", omega0)]
    for i in range(1, hidden_layers + 1):
        layers += [dense(f"fc{i}", hidden, hidden), activation(f"act{i}", "sine", omega0)]
    layers.append(dense(f"fc{hidden_layers + 1}", hidden, out_features))
    return build(layers, (in_features,), seed)


def cnn_classifier(input_shape=(1, 16, 16), channels=(8, 16, 32), classes=2, seed=0):
    """Plain conv-relu stack (first conv stride 1, the rest stride 2) with a dense head."""
    c, h, w = input_shape
    layers = []
    for i, c_out in enumerate(channels):
        stride = 1 if i == 0 else 2
        layers += [conv2d(f"conv{i}", c, c_out, 3, stride=stride, pad=1), activation(f"relu{i}", "relu")]
        c = c_out
    layers += [flatten("flatten"), None]
    shape = tuple(input_shape)
    for layer in layers[:-1]:
        shape = _layer_out_shape(layer, shape)
    layers[-1] = dense("head", shape[0], classes)
    return build(layers, input_shape, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(layer, params, x):
    if layer.kind == "dense":
        out = x @ params[layer.weight_key].T
        if layer.has_bias:
            out = out + params[layer.bias_key]
        return out, None
    if layer.kind == "conv2d":
        kh, kw = layer.kernel
        cols = im2col_batch(x, kh, kw, layer.stride, layer.pad)
        w = params[layer.weight_key].reshape(layer.out_channels, -1)
        out = np.matmul(w, cols)
        if layer.has_bias:
            out = out + params[layer.bias_key][:, None]
        ho, wo = conv_output_size(x.shape[2], x.shape[3], kh, kw, layer.stride, layer.pad)
        return out.reshape(x.shape[0], layer.out_channels, ho, wo), (cols, x.shape)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if layer.activation == "relu":
        return np.maximum(x, 0.0), x
    if layer.activation == "sine":
        return np.sin(layer.omega0 * x), x
    return x, None


def _layer_backward(layer, params, x, saved, g, grads):
    if layer.kind == "dense":
        gw = g.T @ x
        _accumulate(grads, layer.weight_key, gw)
        if layer.has_bias:
            _accumulate(grads, layer.bias_key, g.sum(axis=0))
        return g @ params[layer.weight_key]
    if layer.kind == "conv2d":
        cols, in_shape = saved
        b = g.shape[0]
        g2 = g.reshape(b, layer.out_channels, -1)
        w = params[layer.weight_key].reshape(layer.out_channels, -1)
        gw = np.einsum("bol,bkl->ok", g2, cols)
        _accumulate(grads, layer.weight_key, gw.reshape(layer.weight_shape))
        if layer.has_bias:
            _accumulate(grads, layer.bias_key, g2.sum(axis=(0, 2)))
        gcols = np.matmul(w.T, g2)
        return col2im_batch(gcols, in_shape, *layer.kernel, layer.stride, layer.pad)
    if layer.kind == "flatten":
        return g.reshape(saved)
    if layer.activation == "relu":
        return g * (saved > 0.0)
    if layer.activation == "sine":
        return g * layer.omega0 * np.cos(layer.omega0 * saved)
    return g


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def forward(model, x, keep_tape=False):
    """Evaluate the model on a batch; ``x`` has shape ``(batch,) + input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    tape = []
    for layer in model.layers:
        # overflow is reported below as NumericError, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            out, saved = _layer_forward(layer, model.params, x)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output at layer {layer.name!r}")
        if keep_tape:
            tape.append((x, saved))
        x = out
    return (x, tape) if keep_tape else x


def backward(model, tape, grad_out):
    grads = {}
    g = grad_out
    for layer, (x, saved) in zip(reversed(model.layers), reversed(tape)):
        g = _layer_backward(layer, model.params, x, saved, g, grads)
    for key in model.param_keys():
        if key not in grads:
            grads[key] = np.zeros_like(model.params[key])
    return grads


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred, target):
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    b = logits.shape[0]
    logp = log_softmax(logits)
    value = -float(np.mean(logp[np.arange(b), labels]))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return value, grad / b


LOSSES = {"mse": mse_loss, "cross_entropy": cross_entropy_loss}


# ---------------------------------------------------------------------------
# configuration, schedules, optimizers


@dataclass
class TrainConfig:
    loss: str = "mse"
    regularizer: str = "none"
    lam: float = 0.0
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 0  # 0 means full batch
    schedule: str = "constant"
    warmup_epochs: int = 0
    min_lr_factor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.regularizer not in ("none",) + regularizers.KINDS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")


def learning_rate(config, step, total_steps, warmup_steps=0):
    """Learning rate used for optimizer step ``step`` (0-based)."""
    lr0 = config.lr
    if config.schedule == "constant":
        return lr0
    floor = config.min_lr_factor
    if config.schedule == "warmup_cosine" and step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    if config.schedule == "warmup_cosine":
        step -= warmup_steps
        total_steps -= warmup_steps
    if total_steps <= 1:
        return lr0
    progress = min(step / (total_steps - 1), 1.0)
    return lr0 * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class SGD:
    def __init__(self, momentum=0.0, nesterov=False, weight_decay=0.0):
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.buf = {}

    def step(self, params, grads, lr):
        for key, g in grads.items():
            p = params[key]
            if self.momentum:
                buf = self.buf.get(key)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buf[key] = buf
                g = g + self.momentum * buf if self.nesterov else buf
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * g


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            p = params[key]
            m = self.beta1 * self.m.get(key, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(key, 0.0) + (1.0 - self.beta2) * g * g
            self.m[key], self.v[key] = m, v
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config):
    if config.optimizer == "sgd":
        return SGD(config.momentum, config.nesterov, config.weight_decay)
    return Adam(config.beta1, config.beta2, config.eps, config.weight_decay)


# ---------------------------------------------------------------------------
# objective and training


@dataclass
class Objective:
    total: float
    data: float
    reg: float
    grads: dict
    pred: np.ndarray


def objective(model, batch_x, batch_y, config):
    if len(batch_x) == 0:
        raise ValueError("empty batch")
    pred, tape = forward(model, batch_x, keep_tape=True)
    with np.errstate(over="ignore", invalid="ignore"):
        data, dpred = LOSSES[config.loss](pred, batch_y)
    if not math.isfinite(data):
        raise NumericError(f"non-finite {config.loss} loss at output layer {model.layers[-1].name!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        grads = backward(model, tape, dpred)
    reg = 0.0
    if config.regularizer != "none" and config.lam > 0:
        reg, reg_grads = regularizers.penalty(model, config.regularizer)
        for key, g in reg_grads.items():
            grads[key] = grads[key] + config.lam * g
    elif config.regularizer != "none":
        reg = regularizers.penalty(model, config.regularizer, with_grad=False)
    total = data + config.lam * reg
    return Objective(total, data, reg, grads, pred)


def loss_and_grads(model, batch_x, batch_y, config):
    """Regularized loss ``l(model(x), y) + lam * R(W)`` and its parameter gradients."""
    obj = objective(model, batch_x, batch_y, config)
    return obj.total, obj.grads


def _task_metric(loss_kind, pred, y):
    if loss_kind == "mse":
        mse = float(np.mean((pred - np.asarray(y).reshape(pred.shape)) ** 2))
        return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return float(np.mean(np.argmax(pred, axis=1) == np.asarray(y).reshape(-1)))


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)


def train(model, dataset, config, augment=None, callback=None):
    """Train ``model`` in place on ``dataset = (x, y)``.

    One log row per epoch with keys ``epoch, lr, data_loss, reg_value,
    total_loss, metric`` (metric is PSNR for mse, accuracy for cross-entropy,
    both measured on the training batches before each update).
    """
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("empty dataset")
    bs = config.batch_size or n
    batches = math.ceil(n / bs)
    total_steps = config.epochs * batches
    warmup_steps = config.warmup_epochs * batches
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config)
    log = []
    step = 0
    last_good = -1
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        sums = {"data": 0.0, "reg": 0.0, "total": 0.0}
        preds, targets = [], []
        lr = config.lr
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb = augment(rng, xb)
            lr = learning_rate(config, step, total_steps, warmup_steps)
            try:
                obj = objective(model, xb, yb, config)
            except NumericError as exc:
                raise TrainingDiverged(epoch, last_good, str(exc)) from exc
            if not math.isfinite(obj.total):
                raise TrainingDiverged(epoch, last_good, "non-finite total loss")
            w = len(idx) / n
            sums["data"] += w * obj.data
            sums["reg"] += w * obj.reg
            sums["total"] += w * obj.total
            preds.append(obj.pred)
            targets.append(yb)
            opt.step(model.params, obj.grads, lr)
            step += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "data_loss": sums["data"],
            "reg_value": sums["reg"],
            "total_loss": sums["total"],
            "metric": _task_metric(config.loss, np.concatenate(preds), np.concatenate(targets)),
        }
        log.append(row)
        last_good = epoch
        if callback is not None:
            callback(row)
    return TrainResult(model, log)
