"""Model files: a JSON manifest plus a sidecar of little-endian float32 parameters.

Parameters are written in manifest layer order, weight then bias per layer;
a weight shared by several layers is written once, at its first use.
"""

import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .nn import LayerSpec, Model

FORMAT_VERSION = 1


def _paths(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    # append rather than replace so stems like "svd_s0.5" survive
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def manifest_for(model, task=None, provenance=None, data=None, binary_name=None):
    params = [{"key": k, "shape": list(model.params[k].shape)} for k in model.param_keys()]
    return {
        "format_version": FORMAT_VERSION,
        "task": task,
        "input_shape": list(model.input_shape),
        "layers": [layer.to_dict() for layer in model.layers],
        "params": params,
        "param_count": model.param_count(),
        "binary": binary_name,
        "dtype": "float32-le",
        "provenance": provenance or {},
        "data": data or {},
    }


def dump_manifest(manifest):
    return json.dumps(manifest, indent=2) + "\n"


def save_model(model, path, task=None, provenance=None, data=None):
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the manifest path."""
    json_path, bin_path = _paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(model, task, provenance, data, bin_path.name)
    blob = b"".join(model.params[k].astype("<f4").tobytes() for k in model.param_keys())
    bin_path.write_bytes(blob)
    json_path.write_text(dump_manifest(manifest), encoding="utf-8", newline="\n")
    return json_path


def load_model(path):
    """Read a model file; returns ``(model, manifest)``."""
    json_path, bin_path = _paths(path)
    try:
        manifest = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(json_path, exc.pos, f"invalid JSON manifest: {exc.msg}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(json_path, 0, f"unsupported format_version {manifest.get('format_version')!r}")
    if manifest.get("binary"):
        bin_path = json_path.parent / manifest["binary"]
    raw = bin_path.read_bytes()
    expected = 4 * int(manifest["param_count"])
    if len(raw) != expected:
        raise DataFormatError(bin_path, min(len(raw), expected),
                              f"binary holds {len(raw)} bytes, manifest declares {expected}")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    params = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[entry["key"]] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise DataFormatError(bin_path, offset, "parameter table does not cover the binary")
    model = Model(layers, params, manifest["input_shape"])
    if model.param_count() != manifest["param_count"]:
        raise DataFormatError(json_path, 0, "param_count does not match the layer list")
    return model, manifest
