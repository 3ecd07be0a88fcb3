"""Array bundles: ``manifest.json`` plus raw little-endian float32 blobs.

Layout of a bundle directory::

    manifest.json   {name: {"shape": [...], "dtype": "f32le", "file": "name.f32", "byte_length": n}}
    <name>.f32      row-major little-endian float32 data
    *.json          optional JSON side documents (config echo, counters, RNG state)
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

DTYPE = "f32le"
_NP_DTYPE = np.dtype("<f4")
_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


class BundleError(IOError):
    pass


def _blob_name(name: str) -> str:
    return _SAFE.sub("_", name) + ".f32"


def save_bundle(path, arrays: dict, documents: dict | None = None) -> Path:
    """Write ``arrays`` (name -> array-like) and JSON ``documents`` (filename -> obj)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {}
    used = set()
    for name, value in arrays.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype=_NP_DTYPE))
        fname = _blob_name(name)
        if fname in used:
            raise BundleError(f"array name collision for {name!r}")
        used.add(fname)
        data = arr.tobytes(order="C")
        (root / fname).write_bytes(data)
        manifest[name] = {"shape": list(arr.shape), "dtype": DTYPE, "file": fname, "byte_length": len(data)}
    for fname, doc in (documents or {}).items():
        if fname == "manifest.json":
            raise BundleError("manifest.json is reserved")
        (root / fname).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / "manifest.json")
    return root


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        return json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise BundleError(f"no manifest.json in {root}") from exc


def load_bundle(path) -> dict[str, np.ndarray]:
    root = Path(path)
    out = {}
    for name, entry in read_manifest(root).items():
        if entry.get("dtype") != DTYPE:
            raise BundleError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * _NP_DTYPE.itemsize
        if entry["byte_length"] != expected:
            raise BundleError(f"{name}: byte_length {entry['byte_length']} does not match shape {shape}")
        data = (root / entry["file"]).read_bytes()
        if len(data) != expected:
            raise BundleError(f"{name}: file has {len(data)} bytes, expected {expected}")
        out[name] = np.frombuffer(data, dtype=_NP_DTYPE).reshape(shape).copy()
    return out


def load_document(path, fname: str):
    try:
        return json.loads((Path(path) / fname).read_text())
    except FileNotFoundError as exc:
        raise BundleError(f"missing {fname} in {path}") from exc
