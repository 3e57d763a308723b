"""Smoothness penalties along the output dimension of each weight tensor.

All three penalties act on the *flattened* weight: dense weights as-is,
conv weights reshaped so that row ``j`` is the kernel of output channel ``j``.
Each layer's term is normalized by its own size factor and the sum is
divided by the number of parameterized layers ``N``. Biases are never
regularized.
"""

import warnings

import numpy as np

from .tensor import svd

KINDS = ("r1", "r2", "nuc")


def flatten_for_reg(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return w
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1)
    raise ValueError(f"expected a 2-D or 4-D weight, got shape {w.shape}")


def unflatten_from_reg(flat, shape):
    return np.asarray(flat).reshape(shape)


def _weights(model):
    """(key, weight) for every distinct dense/conv weight of the model."""
    return [(k, model.params[k]) for k in model.weight_keys()]


def _r1_layer(f):
    n_o = f.shape[0]
    d = f[:-1] - f[1:]
    value = np.abs(d).sum() / (n_o - 1)
    s = np.sign(d)
    g = np.zeros_like(f)
    g[:-1] += s
    g[1:] -= s
    return value, g / (n_o - 1)


def _r2_layer(f):
    n_o = f.shape[0]
    d = f[:-2] - 2.0 * f[1:-1] + f[2:]
    value = np.abs(d).sum() / (n_o - 2)
    s = np.sign(d)
    g = np.zeros_like(f)
    g[:-2] += s
    g[1:-1] -= 2.0 * s
    g[2:] += s
    return value, g / (n_o - 2)


def _nuc_layer(f):
    fac = svd(f)
    m = fac.k
    return fac.sigma.sum() / m, (fac.u @ fac.v.T) / m


_LAYER_TERMS = {"r1": (_r1_layer, 2), "r2": (_r2_layer, 3), "nuc": (_nuc_layer, 1)}


def penalty(model, kind, with_grad=True):
    """Value of penalty ``kind`` over ``model``, plus per-weight gradients if requested."""
    if kind not in _LAYER_TERMS:
        raise ValueError(f"unknown regularizer {kind!r}")
    term, min_rows = _LAYER_TERMS[kind]
    weights = _weights(model)
    n_layers = len(weights)
    total = 0.0
    grads = {}
    for key, w in weights:
        f = flatten_for_reg(w)
        if f.shape[0] < min_rows:
            warnings.warn(f"{kind}: weight {key!r} has {f.shape[0]} output rows; contributes 0",
                          stacklevel=2)
            grads[key] = np.zeros_like(w)
            continue
        value, g = term(f)
        total += value
        grads[key] = unflatten_from_reg(g, w.shape) / n_layers
    total = float(total / n_layers) if n_layers else 0.0
    if with_grad:
        return total, grads
    return total


def r1_penalty(model):
    return penalty(model, "r1")


def r2_penalty(model):
    return penalty(model, "r2")


def nuc_penalty(model):
    return penalty(model, "nuc")
