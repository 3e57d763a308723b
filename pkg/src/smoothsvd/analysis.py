"""Singular-value spectra, weight-slice export, PSNR and accuracy."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NumericError
from .nn import forward
from .regularizers import flatten_for_reg
from .tensor import svd


@dataclass
class LayerSpectrum:
    name: str
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    curve: np.ndarray = field(default_factory=lambda: np.zeros(0))
    error: str = ""

    def at_fraction(self, frac):
        """c(k) at ``k = max(1, round(frac * len(sigma)))``."""
        k = max(1, int(math.floor(frac * len(self.sigma) + 0.5)))
        return float(self.curve[k - 1])


@dataclass
class SpectrumReport:
    layers: list
    energy: bool = False

    def mean_curve(self):
        """Mean over layers of c(k); a layer's curve is extended with 1 past its rank."""
        good = [s for s in self.layers if not s.error]
        length = max(len(s.curve) for s in good)
        padded = [np.concatenate([s.curve, np.ones(length - len(s.curve))]) for s in good]
        return np.mean(padded, axis=0)

    def mean_at_fraction(self, frac):
        return float(np.mean([s.at_fraction(frac) for s in self.layers if not s.error]))


def cumulative_curve(sigma, energy=False):
    vals = np.asarray(sigma, dtype=np.float64)
    if energy:
        vals = vals ** 2
    total = vals.sum()
    if total == 0:
        return np.ones_like(vals)
    c = np.cumsum(vals) / total
    c[-1] = 1.0
    return c


def spectrum(model, energy=False):
    """Descending singular values and cumulative curves of every flattened weight."""
    out = []
    for _, layer in model.parameterized():
        w = model.params[layer.weight_key]
        try:
            sigma = svd(flatten_for_reg(w)).sigma
        except (ConvergenceError, NumericError) as exc:
            out.append(LayerSpectrum(layer.name, error=str(exc)))
            continue
        out.append(LayerSpectrum(layer.name, sigma, cumulative_curve(sigma, energy)))
    return SpectrumReport(out, energy)


def spectrum_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "index", "sigma", "cumulative"])
    for s in report.layers:
        if s.error:
            writer.writerow([s.name, "", "", f"error: {s.error}"])
            continue
        for k, (sig, c) in enumerate(zip(s.sigma, s.curve), start=1):
            writer.writerow([s.name, k, f"{sig:.6g}", f"{c:.6g}"])
    for k, c in enumerate(report.mean_curve(), start=1):
        writer.writerow(["mean", k, "", f"{c:.6g}"])
    return buf.getvalue()


def export_weight_slice(model, layer_index, input_channel=0):
    """Kernels ``(n_o, h, w)`` of one input channel of a conv layer, row j = output channel j."""
    layer = model.layers[layer_index]
    if layer.kind != "conv2d":
        raise ValueError(f"layer {layer.name} is {layer.kind}; weight slices need a conv layer")
    if not 0 <= input_channel < layer.in_channels:
        raise ValueError(f"input channel {input_channel} out of range")
    return model.params[layer.weight_key][:, input_channel].copy()


def weight_slice_csv(kernels, layer_name="", input_channel=0):
    """CSV with one row per output channel; kernel entries row-major.

    Values use 17 significant digits so re-import is exact.
    """
    n_o, h, w = kernels.shape
    buf = io.StringIO()
    buf.write(f"# layer={layer_name} input_channel={input_channel} kernel={h}x{w} "
              "order=output channels left-to-right then top-to-bottom\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["output_channel"] + [f"k{i}_{j}" for i in range(h) for j in range(w)])
    for o in range(n_o):
        writer.writerow([o] + [f"{v:.17g}" for v in kernels[o].ravel()])
    return buf.getvalue()


def read_weight_slice_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    h = 1 + max(int(c[1:].split("_")[0]) for c in header[1:])
    w = 1 + max(int(c.split("_")[1]) for c in header[1:])
    return np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), h, w)


def psnr(reference, candidate):
    """PSNR in dB for images on a unit peak; ``inf`` for identical images."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {candidate.shape}")
    mse = float(np.mean((reference - candidate) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def predict_labels(model, x, batch=512):
    preds = [np.argmax(forward(model, x[i:i + batch]), axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(preds)


def accuracy(model, x, y):
    """Fraction of argmax matches; ties resolve to the lowest class index."""
    y = np.asarray(y).reshape(-1)
    return float(np.mean(predict_labels(model, np.asarray(x, dtype=np.float64)) == y))
