"""Deterministic file formats for datasets, parameters, and reports.

Arrays travel as raw little-endian float64 with a JSON sidecar manifest
(written with sorted keys and no timestamps, so regenerating a file with
the same seed is byte identical). The sidecar of `X` is `X.json`; it
carries a schema version and loading refuses anything newer, so stale
tools fail loudly instead of misreading.
"""

import csv
import dataclasses
import json
import os

import numpy as np

from . import autodiff as ad
from . import training
from .errors import SchemaError

SCHEMA_VERSION = 1


def _manifest_path(path):
    return path + ".json"


def _write_json(path, doc):
    text = json.dumps(doc, sort_keys=True, indent=2)
    with open(path, "w") as f:
        f.write(text + "\n")


def _read_manifest(path, expect_kind):
    mpath = _manifest_path(path)
    if not os.path.exists(mpath):
        raise SchemaError(f"missing manifest {mpath}")
    with open(mpath) as f:
        doc = json.load(f)
    version = doc.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION:
        raise SchemaError(f"{mpath}: schema {version!r} is newer than {SCHEMA_VERSION}")
    if doc.get("kind") != expect_kind:
        raise SchemaError(f"{mpath}: kind {doc.get('kind')!r}, expected {expect_kind!r}")
    return doc


def _write_arrays(path, arrays):
    with open(path, "wb") as f:
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_arrays(path, shapes):
    raw = np.fromfile(path, dtype="<f8")
    total = sum(int(np.prod(s, dtype=int)) for s in shapes)
    if raw.size != total:
        raise SchemaError(f"{path}: {raw.size} values on disk, manifest says {total}")
    out = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape, dtype=int))
        out.append(raw[offset : offset + n].reshape([int(k) for k in shape]).copy())
        offset += n
    return out


def save_dataset(path, dataset, meta=None):
    """Write anchors ++ targets ++ offline targets and the manifest."""
    arrays = [dataset.anchors, dataset.targets]
    shapes = {
        "anchors": list(dataset.anchors.shape),
        "targets": list(dataset.targets.shape),
        "offline_targets": None,
    }
    if dataset.offline_targets is not None:
        arrays.append(dataset.offline_targets)
        shapes["offline_targets"] = list(dataset.offline_targets.shape)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset",
        "h": dataset.h,
        "shapes": shapes,
        "meta": dict(meta or {}),
    }
    _write_arrays(path, arrays)
    _write_json(_manifest_path(path), doc)


def load_dataset(path):
    doc = _read_manifest(path, "dataset")
    shapes = doc["shapes"]
    want = [shapes["anchors"], shapes["targets"]]
    if shapes["offline_targets"] is not None:
        want.append(shapes["offline_targets"])
    arrays = _read_arrays(path, want)
    offline = arrays[2] if len(arrays) > 2 else None
    return training.Dataset(
        anchors=arrays[0], targets=arrays[1], h=float(doc["h"]), offline_targets=offline
    )


def save_params(path, params, meta=None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "params",
        "layout": [[name, list(shape)] for name, shape, _ in params.layout],
        "meta": dict(meta or {}),
    }
    _write_arrays(path, [params.data])
    _write_json(_manifest_path(path), doc)


def load_params(path):
    doc = _read_manifest(path, "params")
    layout = doc["layout"]
    shapes = [shape for _, shape in layout]
    arrays = _read_arrays(path, shapes)
    return ad.ParamVector.pack([(name, arr) for (name, _), arr in zip(layout, arrays)])


def config_doc(config):
    """TrainConfig (with nested mode/solver dataclasses) as plain JSON data."""
    doc = dataclasses.asdict(config)
    return doc


def save_report(path, report, meta=None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "report",
        "config": config_doc(report.config),
        "train_loss": [float(v) for v in report.train_loss],
        "val_loss": [float(v) for v in report.val_loss],
        "initial_val_loss": float(report.initial_val_loss),
        "skipped_batches": int(report.skipped_batches),
        "meta": dict(meta or {}),
    }
    _write_json(path, doc)


def load_report(path):
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema {version!r} is newer than {SCHEMA_VERSION}")
    if doc.get("kind") != "report":
        raise SchemaError(f"{path}: kind {doc.get('kind')!r}, expected 'report'")
    return doc


def save_summary(path, doc):
    """JSON summary with the schema header; `doc` must be JSON-ready."""
    out = {"schema_version": SCHEMA_VERSION, "kind": "summary"}
    out.update(doc)
    _write_json(path, out)


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def read_csv(path):
    """(header, rows as str lists); callers convert the columns they use."""
    with open(path, newline="") as f:
        r = csv.reader(f)
        rows = list(r)
    return rows[0], rows[1:]
