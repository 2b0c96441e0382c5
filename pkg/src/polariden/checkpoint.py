"""Flat named-array checkpoint container.

JSON layout::

    {"format": "polariden-checkpoint", "version": 1, "kind": "...",
     "meta": {...},
     "arrays": [{"name": "...", "shape": [..], "values": [row-major floats]}]}

``version`` is mandatory; readers reject any other version.
"""

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT = "polariden-checkpoint"
VERSION = 1


def save_checkpoint(path, arrays, kind, meta=None):
    entries = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=float)
        entries.append({"name": name, "shape": list(a.shape), "values": a.ravel().tolist()})
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta or {},
           "arrays": entries}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path, kind=None):
    """Return ``(arrays, meta)``; checks format, version and optionally kind."""
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {p} is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{p}: unexpected format {doc.get('format')!r}")
    if "version" not in doc:
        raise CheckpointError(f"{p}: missing version tag")
    if doc["version"] != VERSION:
        raise CheckpointError(f"{p}: unsupported version {doc['version']}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"{p}: expected kind {kind!r}, found {doc.get('kind')!r}")
    arrays = {}
    for entry in doc["arrays"]:
        values = np.asarray(entry["values"], dtype=float)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{p}: array {entry['name']} has {values.size} values for shape {shape}")
        arrays[entry["name"]] = values.reshape(shape)
    return arrays, doc.get("meta", {})
