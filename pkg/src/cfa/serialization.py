"""Manifest + flat payload storage for named float64 arrays.

A stored object is two files next to each other::

    model.json   manifest: kind, metadata, and one entry per array
                 (name, shape, byte offset, element count), plus the
                 payload size and its SHA-256
    model.bin    every array, C order, little-endian float64, concatenated

Checkpoints, replay memories and synthetic datasets all use this layout,
which round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .nn import Network, network_from_arch

FORMAT_NAME = "cfa-arrays"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_name(path.name + ".json")
    return path, path.with_suffix(".bin")


def save_arrays(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    kind: str,
    meta: Mapping | None = None,
) -> Path:
    """Write ``arrays`` (in mapping order) and return the manifest path."""
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "float64-le",
        "payload": payload_path.name,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": dict(meta or {}),
        "entries": entries,
    }
    payload_path.write_bytes(payload)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_arrays(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"{manifest_path}: expected kind {kind!r}, found {manifest.get('kind')!r}")
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"{manifest_path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise FormatError(f"{manifest_path}: payload checksum mismatch")
    arrays = {}
    for entry in manifest["entries"]:
        start = entry["offset"]
        stop = start + entry["count"] * _DTYPE.itemsize
        if stop > len(payload):
            raise FormatError(f"{manifest_path}: entry {entry['name']!r} runs past the payload")
        flat = np.frombuffer(payload[start:stop], dtype=_DTYPE)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def save_network(path: str | Path, net: Network, extra: Mapping | None = None) -> Path:
    meta = {"arch": net.arch(), **(extra or {})}
    return save_arrays(path, net.state_dict(), kind="network", meta=meta)


def load_network(path: str | Path) -> Network:
    arrays, meta = load_arrays(path, kind="network")
    net = network_from_arch(meta["arch"])
    net.load_state_dict(arrays)
    return net
