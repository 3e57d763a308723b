"""Fine-tuning-free compression: truncated-SVD factorization and L1 pruning baselines."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import LayerSpec, Model, _layer_out_shape
from .regularizers import flatten_for_reg
from .tensor import svd, truncate


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def rank_for_sparsity_dense(n_i, n_o, s):
    """Rank whose factorized layer (with bias) best matches sparsity ``s``."""
    before = n_i * n_o + n_o
    r = _round_half_up(((1.0 - s) * before - n_o) / (n_i + n_o))
    return min(max(r, 1), min(n_i, n_o))


def rank_for_sparsity_conv(n_i, n_o, h, w, s):
    fan_in = n_i * h * w
    before = n_o * fan_in + n_o
    r = _round_half_up(((1.0 - s) * before - n_o) / (fan_in + n_o))
    return min(max(r, 1), min(n_o, fan_in))


def rank_for_sparsity_joint(n, outs, s):
    """Shared-rank analogue for layers with common input width ``n`` and outputs ``outs``."""
    total_out = sum(outs)
    before = n * total_out + total_out
    r = _round_half_up(((1.0 - s) * before - total_out) / (n + total_out))
    return min(max(r, 1), min(n, total_out))


def factorized_param_count(layer, r):
    fan_in = int(np.prod(layer.weight_shape[1:]))
    return r * (fan_in + layer.n_out) + (layer.n_out if layer.has_bias else 0)


def layer_param_count(layer):
    return int(np.prod(layer.weight_shape)) + (layer.n_out if layer.has_bias else 0)


def max_rank(layer):
    return min(layer.n_out, int(np.prod(layer.weight_shape[1:])))


@dataclass
class PlanEntry:
    layer_index: int
    name: str
    target: float
    rank: int
    params_before: int
    params_after: int
    skipped: bool = False

    @property
    def achieved_sparsity(self):
        return 1.0 - self.params_after / self.params_before


@dataclass
class CompressionPlan:
    entries: list
    params_before: int
    params_after: int

    @property
    def achieved_sparsity(self):
        return 1.0 - self.params_after / self.params_before

    @property
    def ranks(self):
        return [e.rank for e in self.entries if not e.skipped]


@dataclass
class CompressionReport:
    plan: CompressionPlan
    errors: dict = field(default_factory=dict)
    metric_before: float = float("nan")
    metric_after: float = float("nan")
    seconds: float = 0.0


@dataclass
class CompressOptions:
    """``rank``: None resolves ranks from the sparsity formulas, ``"full"`` keeps
    every layer at full rank, an int fixes the rank (clipped per layer)."""

    skip_when_larger: bool = False
    rank: object = None


def _factor_layers(layer, weight, bias, r):
    """Return ``([first, second], params, frob_error)`` replacing ``layer`` at rank ``r``."""
    flat = flatten_for_reg(weight)
    fac = svd(flat)
    if not 1 <= r <= fac.k:
        raise ValueError(f"layer {layer.name}: rank {r} outside [1, {fac.k}]")
    w1, w2 = truncate(fac, r)
    err = float(np.sqrt(np.sum(fac.sigma[r:] ** 2)))
    n1, n2 = f"{layer.name}.svd1", f"{layer.name}.svd2"
    if layer.kind == "dense":
        first = LayerSpec("dense", n1, in_features=layer.in_features, out_features=r,
                          has_bias=False, factorized=True)
        second = LayerSpec("dense", n2, in_features=r, out_features=layer.out_features,
                           has_bias=layer.has_bias, factorized=True)
        params = {first.weight_key: w1, second.weight_key: w2}
    else:
        first = LayerSpec("conv2d", n1, in_channels=layer.in_channels, out_channels=r,
                          kernel=layer.kernel, stride=layer.stride, pad=layer.pad,
                          has_bias=False, factorized=True)
        second = LayerSpec("conv2d", n2, in_channels=r, out_channels=layer.out_channels,
                           kernel=(1, 1), stride=1, pad=0, has_bias=layer.has_bias, factorized=True)
        params = {first.weight_key: w1.reshape(first.weight_shape),
                  second.weight_key: w2.reshape(second.weight_shape)}
    if layer.has_bias:
        params[second.bias_key] = bias.copy()
    return [first, second], params, err


def _replace(model, replacements):
    """Build a new model where ``replacements[i] = (layers, params)`` substitutes layer ``i``."""
    layers = []
    params = {}
    for i, layer in enumerate(model.layers):
        if i in replacements:
            new_layers, new_params = replacements[i]
            layers.extend(new_layers)
            params.update(new_params)
        else:
            layers.append(layer)
    for layer in layers:
        for key in (layer.weight_key, layer.bias_key):
            if key and key not in params:
                params[key] = model.params[key].copy()
    return Model(layers, params, model.input_shape)


def _compress_single(model, index, r, kind):
    layer = model.layers[index]
    if layer.kind != kind:
        raise ValueError(f"layer {index} is {layer.kind}, not {kind}")
    if layer.factorized:
        raise ValueError(f"layer {layer.name} is already factorized")
    bias = model.params[layer.bias_key] if layer.has_bias else None
    new_layers, params, _ = _factor_layers(layer, model.params[layer.weight_key], bias, r)
    return _replace(model, {index: (new_layers, params)})


def compress_dense(model, index, r):
    """Replace dense layer ``index`` by ``x -> U_r (S_r V_r^T x) + b``."""
    return _compress_single(model, index, r, "dense")


def compress_conv(model, index, r):
    """Replace conv layer ``index`` by a rank-``r`` conv followed by a 1x1 conv."""
    return _compress_single(model, index, r, "conv2d")


def resolve_rank(layer, target):
    if layer.kind == "dense":
        return rank_for_sparsity_dense(layer.in_features, layer.out_features, target)
    return rank_for_sparsity_conv(layer.in_channels, layer.out_channels, *layer.kernel, target)


def compress_model(model, target_sparsity, options=None, evaluate=None):
    """Factorize every dense and conv layer at a uniform target sparsity.

    Returns the new model and a :class:`CompressionReport`. The input model is
    not modified. ``evaluate(model) -> float`` fills the metric fields.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise ValueError("target sparsity must lie in [0, 1]")
    options = options or CompressOptions()
    if any(layer.factorized for layer in model.layers):
        raise ValueError("model already contains factorized layers; refusing to compress again")
    t0 = time.perf_counter()
    replacements = {}
    entries = []
    errors = {}
    for i, layer in model.parameterized():
        before = layer_param_count(layer)
        if options.rank is None:
            r = resolve_rank(layer, target_sparsity)
        elif options.rank == "full":
            r = max_rank(layer)
        else:
            r = min(max(int(options.rank), 1), max_rank(layer))
        after = factorized_param_count(layer, r)
        if options.skip_when_larger and after > before:
            entries.append(PlanEntry(i, layer.name, target_sparsity, r, before, before, skipped=True))
            errors[layer.name] = 0.0
            continue
        bias = model.params[layer.bias_key] if layer.has_bias else None
        new_layers, params, err = _factor_layers(layer, model.params[layer.weight_key], bias, r)
        replacements[i] = (new_layers, params)
        entries.append(PlanEntry(i, layer.name, target_sparsity, r, before, after))
        errors[layer.name] = err
    new_model = _replace(model, replacements)
    plan = CompressionPlan(entries, model.param_count(), new_model.param_count())
    report = CompressionReport(plan, errors)
    if evaluate is not None:
        report.metric_before = evaluate(model)
        report.metric_after = evaluate(new_model)
    report.seconds = time.perf_counter() - t0
    return new_model, report


def compress_joint_stacked(model, layer_indices, r, return_error=False):
    """Jointly factorize dense layers that share an input width.

    The weights are stacked vertically, one SVD is taken, and the shared
    ``S_r V_r^T`` factor becomes a single projection (stored once) placed in
    front of each original layer's slice of ``U_r``.
    """
    layer_indices = list(layer_indices)
    if not layer_indices:
        raise ValueError("no layers given")
    layers = [model.layers[i] for i in layer_indices]
    for layer in layers:
        if layer.kind != "dense":
            raise ValueError(f"layer {layer.name} is not dense")
        if layer.factorized:
            raise ValueError(f"layer {layer.name} is already factorized")
    n = layers[0].in_features
    if any(layer.in_features != n for layer in layers):
        raise ValueError("joint compression needs equal input widths")
    stacked = np.vstack([model.params[layer.weight_key] for layer in layers])
    fac = svd(stacked)
    if not 1 <= r <= fac.k:
        raise ValueError(f"rank {r} outside [1, {fac.k}]")
    w1, w2 = truncate(fac, r)
    shared_name = "joint." + "+".join(layer.name for layer in layers)
    shared_key = f"{shared_name}.weight"
    replacements = {}
    offset = 0
    for i, layer in zip(layer_indices, layers):
        proj = LayerSpec("dense", f"{layer.name}.proj", in_features=n, out_features=r,
                         has_bias=False, weight_key=shared_key, factorized=True)
        out = LayerSpec("dense", f"{layer.name}.svd2", in_features=r, out_features=layer.out_features,
                        has_bias=layer.has_bias, factorized=True)
        params = {shared_key: w1, out.weight_key: w2[offset:offset + layer.out_features].copy()}
        if layer.has_bias:
            params[out.bias_key] = model.params[layer.bias_key].copy()
        offset += layer.out_features
        replacements[i] = ([proj, out], params)
    new_model = _replace(model, replacements)
    if return_error:
        return new_model, float(np.sqrt(np.sum(fac.sigma[r:] ** 2)))
    return new_model


def joint_param_count(n, outs, r, biases=True):
    return r * n + r * sum(outs) + (sum(outs) if biases else 0)


def prune_unstructured_l1(model, p):
    """Zero the globally smallest-magnitude fraction ``p`` of weight entries.

    Ties are broken by flat position (weights concatenated in layer order).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    out = model.copy()
    keys = out.weight_keys()
    flat = np.concatenate([out.params[k].ravel() for k in keys])
    k = _round_half_up(p * flat.size)
    if k == 0:
        return out
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0.0
    offset = 0
    for key in keys:
        size = out.params[key].size
        out.params[key] = flat[offset:offset + size].reshape(out.params[key].shape)
        offset += size
    return out


def channels_to_keep(n_o, sparsity):
    return max(1, math.ceil(round((1.0 - sparsity) * n_o, 9)))


def lowest_norm_channels(weight, n_remove):
    """Indices of the ``n_remove`` rows with the smallest L1 norm (lower index first on ties)."""
    norms = np.abs(flatten_for_reg(weight)).sum(axis=1)
    order = np.argsort(norms, kind="stable")
    return np.sort(order[:n_remove])


def prune_structured_l1(model, sparsity):
    """Remove lowest-L1 output channels of every dense/conv layer except the last.

    The consumer layer's matching input slices are dropped so shapes keep
    composing. The final parameterized layer keeps its outputs.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    if len(model.weight_keys()) != len(model.parameterized()):
        raise ValueError("structured pruning does not support shared weights")
    layers = [LayerSpec.from_dict(layer.to_dict()) for layer in model.layers]
    params = {k: v.copy() for k, v in model.params.items()}
    # per-layer input shapes of the original model, for flatten bookkeeping
    shapes = []
    shape = model.input_shape
    for layer in model.layers:
        shapes.append(shape)
        shape = _layer_out_shape(layer, shape)
    pidx = [i for i, layer in enumerate(layers) if layer.parameterized]
    for pos, i in enumerate(pidx[:-1]):
        layer = layers[i]
        n_o = layer.n_out
        keep_n = channels_to_keep(n_o, sparsity)
        if keep_n >= n_o:
            continue
        # norms come from the unpruned weight so each layer's choice is order-independent
        removed = lowest_norm_channels(model.params[layer.weight_key], n_o - keep_n)
        keep = np.setdiff1d(np.arange(n_o), removed)
        params[layer.weight_key] = params[layer.weight_key][keep]
        if layer.has_bias:
            params[layer.bias_key] = params[layer.bias_key][keep]
        if layer.kind == "dense":
            layer.out_features = keep_n
        else:
            layer.out_channels = keep_n
        j = pidx[pos + 1]
        nxt = layers[j]
        w = params[nxt.weight_key]
        if nxt.kind == "conv2d":
            params[nxt.weight_key] = w[:, keep]
            nxt.in_channels = keep_n
        else:
            in_shape = shapes[j]
            spatial = in_shape[0] // n_o
            cols = (keep[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
            params[nxt.weight_key] = w[:, cols]
            nxt.in_features = keep_n * spatial
    return Model(layers, params, model.input_shape)
