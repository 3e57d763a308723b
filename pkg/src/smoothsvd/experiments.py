"""Experiment presets shared by the CLI and the acceptance suite.

Two tasks are supported:

``inr``
    A sine-activated coordinate MLP fitted to an image sampled on every second
    row and column (a 4x coordinate subsampling); quality is PSNR on the full
    grid.
``classify``
    A plain conv-relu CNN with a dense head trained with cross-entropy;
    quality is test accuracy.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, compress, data, nn

INR_MODEL = {"hidden": 256, "hidden_layers": 2, "omega0": 5.0}
INR_TRAIN = {
    "loss": "mse", "optimizer": "adam", "lr": 1e-3, "epochs": 2000, "batch_size": 0,
    "schedule": "cosine", "min_lr_factor": 0.1,
}
CLASSIFY_MODEL = {"channels": [16, 32, 64]}
CLASSIFY_TRAIN = {
    "loss": "cross_entropy", "optimizer": "sgd", "lr": 0.05, "momentum": 0.9, "nesterov": True,
    "weight_decay": 5e-4, "epochs": 5, "batch_size": 32, "schedule": "warmup_cosine",
    "warmup_epochs": 1,
}
METHODS = ("svd", "svd_joint", "l1_structured", "l1_unstructured")
# Sparsity token meaning "no truncation".
FULL = "full"
# Seed offset for held-out synthetic classification data.
TEST_SEED_OFFSET = 1000


@dataclass
class TaskData:
    task: str
    train: tuple
    test: tuple
    image: object = None

    @property
    def metric_name(self):
        return "psnr" if self.task == "inr" else "accuracy"


def default_data_spec(task):
    if task == "inr":
        return {"kind": "synthetic", "synthetic": "blobs", "size": 64}
    return {"kind": "synthetic", "synthetic": "rings", "size": 16, "n": 512}


def inr_task(image, subsample=2):
    image = np.asarray(image, dtype=np.float64)
    return TaskData("inr", data.inr_training_set(image, subsample), data.inr_full_set(image), image)


def classify_task(train, test):
    return TaskData("classify", train, test)


def _holdout(x, y, frac=0.2):
    n = len(x)
    perm = np.random.default_rng(0).permutation(n)
    cut = n - max(1, int(round(frac * n)))
    return (x[perm[:cut]], y[perm[:cut]]), (x[perm[cut:]], y[perm[cut:]])


def load_task_data(task, spec=None, seed=0, base_dir="."):
    spec = dict(spec or default_data_spec(task))
    kind = spec.get("kind", "synthetic")
    base = Path(base_dir)
    if task == "inr":
        if kind == "synthetic":
            name = spec.get("synthetic", "blobs")
            if name not in ("gradient", "blobs"):
                raise ValueError(f"synthetic kind {name!r} is not an image")
            image = data.synth_dataset(name, seed=spec.get("seed", 0), size=spec.get("size"))
        elif kind == "image":
            image = data.ingest_image(base / spec["path"])
        else:
            raise ValueError(f"data kind {kind!r} does not fit the inr task")
        return inr_task(image, spec.get("subsample", 2))
    if kind == "synthetic":
        name = spec.get("synthetic", "rings")
        if name != "rings":
            raise ValueError(f"synthetic kind {name!r} is not a classification set")
        dseed = spec.get("seed", 0)
        n, size = spec.get("n", 512), spec.get("size", 16)
        train = data.ring_dataset(n, size, dseed)
        test = data.ring_dataset(n, size, dseed + TEST_SEED_OFFSET)
        return classify_task(train, test)
    if kind == "idx":
        x, y = data.ingest_idx(base / spec["path"], base / spec["labels"])
        if spec.get("test_path"):
            test = data.ingest_idx(base / spec["test_path"], base / spec["test_labels"])
            return classify_task((x, y), test)
        train, test = _holdout(x, y)
        return classify_task(train, test)
    raise ValueError(f"data kind {kind!r} does not fit the classify task")


def build_model(task, model_spec, task_data, seed=0):
    spec = dict(INR_MODEL if task == "inr" else CLASSIFY_MODEL)
    spec.update(model_spec or {})
    if task == "inr":
        c = task_data.image.shape[0]
        return nn.inr_mlp(spec["hidden"], spec["hidden_layers"], spec["omega0"],
                          in_features=2, out_features=c, seed=seed)
    x, y = task_data.train
    classes = int(max(np.max(y), np.max(task_data.test[1]))) + 1
    return nn.cnn_classifier(tuple(x.shape[1:]), tuple(spec["channels"]), max(classes, 2), seed=seed)


def train_config(task, train_spec=None, seed=0, lam=None):
    spec = dict(INR_TRAIN if task == "inr" else CLASSIFY_TRAIN)
    spec.update(train_spec or {})
    spec.pop("augment", None)
    if "lambda" in spec:
        spec["lam"] = spec.pop("lambda")
    if lam is not None:
        spec["lam"] = lam
    if isinstance(spec.get("lam"), list):
        raise ValueError("resolve the lambda sweep before building a TrainConfig")
    spec["seed"] = seed
    return nn.TrainConfig(**spec)


def pad_crop_augment(pad=4):
    """Seeded zero-pad then random crop back to the original size."""
    def augment(rng, xb):
        b, c, h, w = xb.shape
        padded = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
        return np.stack([padded[i, :, oy:oy + h, ox:ox + w] for i, (oy, ox) in enumerate(offs)])
    return augment


def metric(model, task_data):
    if task_data.task == "inr":
        coords, values = task_data.test
        pred = nn.forward(model, coords)
        return analysis.psnr(values, pred)
    x, y = task_data.test
    return analysis.accuracy(model, x, y)


def evaluate(model, task_data):
    return {task_data.metric_name: metric(model, task_data)}


def hidden_square_layers(model):
    """Indices of dense layers strictly between the first and last that share one input width."""
    dense = [i for i, layer in model.parameterized() if layer.kind == "dense"]
    inner = dense[1:-1]
    if not inner:
        raise ValueError("model has no hidden dense layers to compress jointly")
    width = model.layers[inner[0]].in_features
    if any(model.layers[i].in_features != width for i in inner):
        raise ValueError("hidden layers differ in input width")
    return inner


@dataclass
class CompressionResult:
    method: str
    target: float
    model: object
    params_before: int
    params_after: int
    achieved: float
    ranks: list


def apply_method(model, method, sparsity, skip_when_larger=False):
    """Compress ``model`` with one of :data:`METHODS` at target ``sparsity``.

    ``sparsity`` may be :data:`FULL`: SVD methods then keep full rank and the
    pruning methods remove nothing.
    """
    before = model.param_count()
    ranks = []
    full = sparsity == FULL
    if method == "svd":
        options = compress.CompressOptions(skip_when_larger=skip_when_larger,
                                           rank="full" if full else None)
        new, report = compress.compress_model(model, 0.0 if full else sparsity, options)
        ranks = report.plan.ranks
        after = new.param_count()
        achieved = 1.0 - after / before
    elif method == "svd_joint":
        idx = hidden_square_layers(model)
        layers = [model.layers[i] for i in idx]
        outs = [layer.out_features for layer in layers]
        if full:
            r = min(layers[0].in_features, sum(outs))
        else:
            r = compress.rank_for_sparsity_joint(layers[0].in_features, outs, sparsity)
        new = compress.compress_joint_stacked(model, idx, r)
        ranks = [r]
        after = new.param_count()
        achieved = 1.0 - after / before
    elif method == "l1_structured":
        new = compress.prune_structured_l1(model, 0.0 if full else sparsity)
        after = new.param_count()
        ranks = [layer.n_out for _, layer in new.parameterized()]
        achieved = 1.0 - after / before
    elif method == "l1_unstructured":
        new = compress.prune_unstructured_l1(model, 0.0 if full else sparsity)
        zeros = sum(int(np.sum(new.params[k] == 0.0)) - int(np.sum(model.params[k] == 0.0))
                    for k in new.weight_keys())
        after = before - zeros
        achieved = zeros / before
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return CompressionResult(method, sparsity, new, before, after, achieved, ranks)


def format_float(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"
