"""Plain-text parameter documents.

A document is JSON of the form::

    {"format": "advcnp-params", "version": 1,
     "tensors": [{"name": "encoder.layers.0.weight", "shape": [2, 64],
                  "values": [...row-major...]}, ...]}

Floats are written with ``repr`` precision, so loading reproduces every
value bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "advcnp-params"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-mismatched parameter document."""


def tensors_to_doc(tensors: dict[str, np.ndarray]) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "tensors": [
            {"name": k, "shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in tensors.items()
        ],
    }


def doc_to_tensors(doc: dict) -> dict[str, np.ndarray]:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not a parameter document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported parameter document version {doc.get('version')!r}")
    out = {}
    try:
        for entry in doc["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise CheckpointError(f"tensor {entry['name']!r}: {values.size} values for shape {shape}")
            out[entry["name"]] = values.reshape(shape)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed parameter document: {exc}") from exc
    return out


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_text(json.dumps(tensors_to_doc(tensors)), encoding="utf-8")


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt parameter file {path}: {exc}") from exc
    return doc_to_tensors(doc)
