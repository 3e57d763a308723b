"""Command-line driver: ``train``, ``compress``, ``spectrum`` and ``evaluate``.

Exit codes: 0 on success, 2 for bad configuration, bad input files, unknown
methods or task/data mismatches, 3 when training diverges.

The results root is ``--results``, else ``paths.results`` from the config,
else ``$SMOOTHSVD_RESULTS``, else ``./results``.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from . import analysis, experiments, modelio, nn
from .errors import DataFormatError, TrainingDiverged

RESULTS_ENV = "SMOOTHSVD_RESULTS"
METRICS_COLUMNS = ["epoch", "lr", "data_loss", "reg_value", "total_loss", "metric"]
REPORT_COLUMNS = ["method", "target_sparsity", "achieved_sparsity", "params_before",
                  "params_after", "ranks", "metric_before", "metric_after"]
IMAGE_SUFFIXES = (".png", ".pgm")


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


def load_schema():
    text = resources.files(__package__).joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _line_of(text, path):
    """Best-effort line number of the config field at ``path``."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return 1
    pos = 0
    for key in keys:
        hit = text.find(f'"{key}"', pos)
        if hit < 0:
            break
        pos = hit
    return text.count("\n", 0, pos) + 1


def parse_config(text, source="<config>"):
    """Parse and schema-validate a run config; raises :class:`UsageError` with diagnostics."""
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        for err in errors:
            path = list(err.absolute_path)
            if err.validator == "additionalProperties" and isinstance(err.instance, dict):
                extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
                path += extra[:1]
            field = ".".join(str(p) for p in path) or "<root>"
            lines.append(f"{source}:{_line_of(text, path)}: field {field}: {err.message}")
        raise UsageError("\n".join(lines))
    return config


def results_root(cli_value=None, config=None):
    if cli_value:
        return Path(cli_value)
    if config and config.get("paths", {}).get("results"):
        return Path(config["paths"]["results"])
    return Path(os.environ.get(RESULTS_ENV) or "results")


def _resolve_data_spec(spec, base_dir):
    spec = dict(spec)
    for key in ("path", "labels", "test_path", "test_labels"):
        if spec.get(key):
            spec[key] = str((Path(base_dir) / spec[key]).resolve())
    return spec


def _lambda_tag(lam):
    return f"lam_{lam:g}"


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def metrics_csv(log):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in log:
        writer.writerow([row["epoch"]] + [experiments.format_float(float(row[c]))
                                          for c in METRICS_COLUMNS[1:]])
    return buf.getvalue()


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def train_from_config(config, base_dir=".", root=None, log=print):
    """Run every lambda of ``config``; returns a list of written model manifest paths."""
    task = config["task"]
    seed = config.get("seed", 0)
    name = config.get("name", task)
    root = Path(root) if root is not None else results_root(config=config)
    data_spec = _resolve_data_spec(config.get("data") or experiments.default_data_spec(task), base_dir)
    try:
        task_data = experiments.load_task_data(task, data_spec, seed=seed, base_dir=base_dir)
    except ValueError as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise UsageError(str(exc)) from exc
    train_spec = dict(config.get("train", {}))
    lams = train_spec.get("lambda", 0.0)
    lams = list(lams) if isinstance(lams, list) else [lams]
    model_out = config.get("paths", {}).get("model_out")
    if model_out and len(lams) > 1:
        raise UsageError("paths.model_out needs a single lambda; drop it to sweep")
    augment = None
    if train_spec.get("augment") and task == "classify":
        augment = experiments.pad_crop_augment()
    written = []
    for lam in lams:
        try:
            cfg = experiments.train_config(task, train_spec, seed=seed, lam=lam)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"train: {exc}") from exc
        model = experiments.build_model(task, config.get("model"), task_data, seed=seed)
        result = nn.train(model, task_data.train, cfg, augment=augment)
        final = experiments.metric(model, task_data)
        out_dir = root / name if len(lams) == 1 else root / name / _lambda_tag(lam)
        model_path = Path(model_out) if model_out else out_dir / "model.json"
        provenance = {
            "name": name,
            "seed": seed,
            "regularizer": cfg.regularizer,
            "lambda": lam,
            "epochs": cfg.epochs,
            task_data.metric_name: _json_value(final),
        }
        json_path = modelio.save_model(model, model_path, task=task, provenance=provenance,
                                       data=data_spec)
        _write_text(out_dir / "metrics.csv", metrics_csv(result.log))
        log(f"lambda={lam:g} {task_data.metric_name}={experiments.format_float(final)} -> {json_path}")
        written.append(json_path)
    return written


def _task_data_for(manifest, data_arg=None, labels=None):
    task = manifest.get("task")
    if task not in ("inr", "classify"):
        raise UsageError(f"model file has no usable task ({task!r})")
    if data_arg is None:
        spec = manifest.get("data") or experiments.default_data_spec(task)
    elif data_arg.startswith("synthetic:"):
        spec = {"kind": "synthetic", "synthetic": data_arg.split(":", 1)[1]}
    elif labels:
        spec = {"kind": "idx", "path": str(Path(data_arg).resolve()), "labels": str(Path(labels).resolve())}
    elif Path(data_arg).suffix.lower() in IMAGE_SUFFIXES:
        spec = {"kind": "image", "path": str(Path(data_arg).resolve())}
    else:
        raise UsageError(f"cannot tell the format of {data_arg!r}; pass --labels for IDX data")
    if task == "inr" and spec.get("kind") == "idx":
        raise UsageError("IDX classification data does not fit an inr model")
    if task == "classify" and spec.get("kind") == "image":
        raise UsageError("a single image does not fit a classify model")
    seed = manifest.get("provenance", {}).get("seed", 0)
    try:
        task_data = experiments.load_task_data(task, spec, seed=seed)
    except DataFormatError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return task_data, spec


def _check_shapes(model, task_data):
    x = task_data.test[0]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise UsageError(f"data samples have shape {tuple(x.shape[1:])}, "
                         f"model expects {tuple(model.input_shape)}")
    if task_data.task == "inr":
        out = model.output_shape()
        if tuple(out) != tuple(task_data.test[1].shape[1:]):
            raise UsageError(f"image has {task_data.test[1].shape[1]} channels, model emits {out[0]}")


def parse_list(text, kind=float):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"empty list {text!r}")
    try:
        return [kind(t) for t in items]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from exc


def _target_text(s):
    return s if s == experiments.FULL else f"{s:g}"


def parse_sparsities(text):
    """Comma list of floats in [0, 1]; the token ``full`` requests full rank."""
    out = []
    for tok in parse_list(text, str):
        if tok == experiments.FULL:
            out.append(tok)
            continue
        try:
            out.append(float(tok))
        except ValueError as exc:
            raise UsageError(f"bad sparsity {tok!r}") from exc
    return out


def compress_sweep(model_path, methods, sparsities, out_dir, data_arg=None, labels=None,
                   skip_when_larger=False):
    """Compress one model per (method, sparsity); returns the report CSV text."""
    for m in methods:
        if m not in experiments.METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {', '.join(experiments.METHODS)}")
    for s in sparsities:
        if s != experiments.FULL and not 0.0 <= s <= 1.0:
            raise UsageError(f"sparsity {s} outside [0, 1]")
    model, manifest = modelio.load_model(model_path)
    task_data, spec = _task_data_for(manifest, data_arg, labels)
    _check_shapes(model, task_data)
    before = experiments.metric(model, task_data)
    out_dir = Path(out_dir)
    rows = []
    for method in methods:
        for s in sparsities:
            try:
                res = experiments.apply_method(model, method, s, skip_when_larger)
            except ValueError as exc:
                raise UsageError(f"{method} at sparsity {s}: {exc}") from exc
            after = experiments.metric(res.model, task_data)
            provenance = dict(manifest.get("provenance", {}))
            provenance["compression"] = {"method": method, "target_sparsity": s,
                                         "achieved_sparsity": res.achieved, "ranks": res.ranks,
                                         "source": Path(model_path).name}
            tag = _target_text(s)
            modelio.save_model(res.model, out_dir / f"{method}_s{tag}", task=manifest.get("task"),
                               provenance=provenance, data=spec)
            rows.append([method, tag, experiments.format_float(res.achieved), res.params_before,
                         res.params_after, ";".join(str(r) for r in res.ranks),
                         experiments.format_float(before), experiments.format_float(after)])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    text = buf.getvalue()
    _write_text(out_dir / "report.csv", text)
    return text


def evaluate_model(model_path, data_arg=None, labels=None):
    model, manifest = modelio.load_model(model_path)
    task_data, _ = _task_data_for(manifest, data_arg, labels)
    _check_shapes(model, task_data)
    return {task_data.metric_name: _json_value(experiments.metric(model, task_data))}


# ---------------------------------------------------------------------------
# argparse glue


def _cmd_train(args):
    path = Path(args.config)
    text = path.read_text(encoding="utf-8")
    config = parse_config(text, str(path))
    train_from_config(config, base_dir=path.parent, root=results_root(args.results, config))
    return 0


def _model_stem(path):
    path = Path(path)
    return f"{path.parent.name}_{path.stem}" if path.parent.name else path.stem


def _cmd_compress(args):
    methods = parse_list(args.method, str)
    sparsities = parse_sparsities(args.sparsity)
    out = Path(args.out) if args.out else results_root(args.results) / "compress" / _model_stem(args.model)
    text = compress_sweep(args.model, methods, sparsities, out, args.data, args.labels,
                          args.skip_when_larger)
    sys.stdout.write(text)
    return 0


def _cmd_spectrum(args):
    model, _ = modelio.load_model(args.model)
    text = analysis.spectrum_csv(analysis.spectrum(model, energy=args.energy))
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_evaluate(args):
    text = json.dumps(evaluate_model(args.model, args.data, args.labels), sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="smoothsvd", description=__doc__.splitlines()[0])
    parser.add_argument("--results", help=f"results root (default ${RESULTS_ENV} or ./results)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per lambda in a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="compress a model file over methods and sparsities")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, help="comma list of " + ", ".join(experiments.METHODS))
    p.add_argument("--sparsity", required=True, help="comma list of targets in [0, 1], or 'full' for full rank")
    p.add_argument("--data", help="evaluation data (defaults to the data recorded in the model file)")
    p.add_argument("--labels", help="IDX labels file when --data is IDX images")
    p.add_argument("--out", help="output directory")
    p.add_argument("--skip-when-larger", action="store_true",
                   help="leave layers dense when factoring would add parameters")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("spectrum", help="singular-value spectrum CSV of every weight")
    p.add_argument("--model", required=True)
    p.add_argument("--energy", action="store_true", help="cumulate squared singular values")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("evaluate", help="PSNR or accuracy of a model file as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="image path, IDX images path or synthetic:<kind>")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
