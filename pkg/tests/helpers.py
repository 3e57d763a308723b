"""Oracles and small model builders shared by the test modules."""

import numpy as np

from smoothsvd import nn
from smoothsvd.nn import _layer_out_shape


def fd_max_rel_error(model, x, y, cfg, h=1e-5, floor=1e-6, keys=None):
    """Worst relative error of analytic gradients against central differences."""
    _, grads = nn.loss_and_grads(model, x, y, cfg)
    worst = 0.0
    for key in keys or model.param_keys():
        p = model.params[key]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = nn.loss_and_grads(model, x, y, cfg)
            p[idx] = old - h
            lm, _ = nn.loss_and_grads(model, x, y, cfg)
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            a = grads[key][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


def naive_conv(x, w, b, stride=1, pad=0):
    """Direct nested-loop convolution of a batch ``x`` (B, C, H, W)."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, oc, i, j] = np.sum(patch * w[oc]) + (0.0 if b is None else b[oc])
    return out


def small_cnn(act="relu", classes=3, seed=0, omega0=30.0):
    """conv(stride 2, pad 1) -> act -> conv -> act -> flatten -> dense -> act -> dense."""
    layers = [
        nn.conv2d("c0", 2, 4, 3, stride=2, pad=1), nn.activation("a0", act, omega0),
        nn.conv2d("c1", 4, 5, 2, stride=1, pad=0), nn.activation("a1", act, omega0),
        nn.flatten("flat"),
        nn.dense("d0", 5 * 2 * 2, 6), nn.activation("a2", act, omega0),
        nn.dense("d1", 6, classes),
    ]
    return nn.build(layers, (2, 6, 6), seed)


def small_mlp(act="sine", out=2, seed=0, omega0=30.0, hidden=6):
    layers = [
        nn.dense("d0", 3, hidden), nn.activation("a0", act, omega0),
        nn.dense("d1", hidden, hidden), nn.activation("a1", act, omega0),
        nn.dense("d2", hidden, out),
    ]
    return nn.build(layers, (3,), seed)


def single_dense(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float64)
    layer = nn.dense("fc", weight.shape[1], weight.shape[0], has_bias=bias is not None)
    params = {layer.weight_key: weight}
    if bias is not None:
        params[layer.bias_key] = np.asarray(bias, dtype=np.float64)
    return nn.Model([layer], params, (weight.shape[1],))


def single_conv(weight, bias=None, stride=1, pad=0, hw=(5, 5)):
    weight = np.asarray(weight, dtype=np.float64)
    o, c, kh, kw = weight.shape
    layer = nn.conv2d("cv", c, o, (kh, kw), stride=stride, pad=pad, has_bias=bias is not None)
    params = {layer.weight_key: weight}
    if bias is not None:
        params[layer.bias_key] = np.asarray(bias, dtype=np.float64)
    return nn.Model([layer], params, (c,) + tuple(hw))


def random_sequential(rng):
    """Random plain CNN or MLP with 2-4 parameterized layers."""
    if rng.random() < 0.5:
        widths = rng.integers(2, 9, size=rng.integers(2, 5))
        n_in = int(rng.integers(2, 7))
        layers, prev = [], n_in
        for i, w in enumerate(widths):
            layers.append(nn.dense(f"d{i}", prev, int(w), has_bias=bool(rng.random() < 0.8)))
            layers.append(nn.activation(f"a{i}", "relu"))
            prev = int(w)
        layers.pop()
        return nn.build(layers, (n_in,), int(rng.integers(1 << 30)))
    c_in = int(rng.integers(1, 4))
    chans = rng.integers(2, 7, size=rng.integers(1, 3))
    layers, prev = [], c_in
    for i, c in enumerate(chans):
        layers.append(nn.conv2d(f"c{i}", prev, int(c), int(rng.integers(1, 4)), pad=1))
        layers.append(nn.activation(f"r{i}", "relu"))
        prev = int(c)
    layers.append(nn.flatten("flat"))
    shape = (c_in, 5, 5)
    s = shape
    for layer in layers:
        s = _layer_out_shape(layer, s)
    layers.append(nn.dense("head", s[0], int(rng.integers(2, 5))))
    return nn.build(layers, shape, int(rng.integers(1 << 30)))


def digits_split(labels="digits"):
    """sklearn 8x8 digits upsampled to 1x16x16; first 1200 of a seeded shuffle train.

    ``labels="parity"`` maps each digit to its parity (two classes).
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    x = np.kron(d.images / 16.0, np.ones((1, 2, 2)))[:, None]
    y = d.target % 2 if labels == "parity" else d.target
    perm = np.random.default_rng(0).permutation(len(x))
    tr, te = perm[:1200], perm[1200:]
    return (x[tr], y[tr]), (x[te], y[te])
