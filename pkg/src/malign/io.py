"""Binary containers for checkpoints and perturbation sets.

Layout (all integers little-endian)::

    magic        8 bytes   b"MALNCKPT" or b"MALNPERT"
    manifest_len u64       byte length of the manifest
    manifest     UTF-8 JSON, sorted keys, no insignificant whitespace
    blob         float32 values of every array, in manifest order

The manifest lists each array as ``{"name", "shape", "offset"}`` with
``offset`` counted in float32 elements from the start of the blob. Parameters
are stored as float32 and widened to float64 on load, so a round trip is exact
up to float32 rounding (about 6e-8 relative).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ContainerError, ManifestShapeError, TruncatedBlobError
from .tensor import LayerSpec, Model

CHECKPOINT_MAGIC = b"MALNCKPT"
PERTURBATION_MAGIC = b"MALNPERT"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, magic: bytes, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        offset += int(arr.size)
    manifest = dict(manifest, arrays=entries, format_version=FORMAT_VERSION)
    head = canonical_json(manifest).encode("utf-8")
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays.values())
    Path(path).write_bytes(magic + struct.pack("<Q", len(head)) + head + blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != magic:
        raise BadMagicError(f"{path}: not a {magic.decode()} container")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + head_len > len(raw):
        raise TruncatedBlobError(f"{path}: manifest runs past end of file")
    try:
        manifest = json.loads(raw[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest ({exc})") from None
    blob = raw[16 + head_len :]
    entries = manifest.get("arrays", [])
    expected = 0
    for e in entries:
        if e["offset"] != expected:
            raise ManifestShapeError(f"{path}: array {e['name']} offset {e['offset']} does not follow previous arrays")
        expected += int(np.prod(e["shape"], dtype=np.int64))
    if len(blob) < expected * 4:
        raise TruncatedBlobError(f"{path}: blob has {len(blob)} bytes, manifest needs {expected * 4}")
    if len(blob) > expected * 4:
        raise ManifestShapeError(f"{path}: blob has {len(blob)} bytes but manifest shapes account for {expected * 4}")
    data = np.frombuffer(blob, dtype="<f4")
    arrays = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = data[e["offset"] : e["offset"] + n].astype(np.float64).reshape(e["shape"])
    return manifest, arrays


def save_checkpoint(model: Model, path, provenance: dict | None = None) -> None:
    manifest = {
        "arch_id": model.arch_id,
        "init_seed": int(model.init_seed),
        "input_shape": list(model.input_shape),
        "layers": [spec.to_dict() for spec in model.layers],
        "provenance": provenance or {},
    }
    write_container(path, CHECKPOINT_MAGIC, manifest, {k: model.params[k] for k in sorted(model.params)})


def load_checkpoint(path) -> Model:
    manifest, arrays = read_container(path, CHECKPOINT_MAGIC)
    try:
        layers = tuple(LayerSpec.from_dict(d) for d in manifest["layers"])
        return Model(layers, arrays, tuple(manifest["input_shape"]), manifest["arch_id"], manifest["init_seed"])
    except KeyError as exc:
        raise ContainerError(f"{path}: manifest missing field {exc}") from None
    except ValueError as exc:
        raise ManifestShapeError(f"{path}: {exc}") from None


def checkpoint_provenance(path) -> dict:
    return read_container(path, CHECKPOINT_MAGIC)[0].get("provenance", {})


def save_perturbations(path, delta: np.ndarray, sample_ids, fingerprint: str, model_ids: list[str],
                       config: dict | None = None) -> None:
    manifest = {
        "fingerprint": fingerprint,
        "model_ids": list(model_ids),
        "sample_ids": [int(i) for i in sample_ids],
        "config": config or {},
    }
    write_container(path, PERTURBATION_MAGIC, manifest, {"delta": delta})


def load_perturbations(path) -> tuple[dict, np.ndarray]:
    """Return ``(manifest, delta)``; delta is float32-quantised."""
    manifest, arrays = read_container(path, PERTURBATION_MAGIC)
    if "delta" not in arrays:
        raise ContainerError(f"{path}: no delta array")
    delta = arrays["delta"]
    if len(manifest.get("sample_ids", [])) != len(delta):
        raise ManifestShapeError(f"{path}: {len(manifest['sample_ids'])} sample ids for {len(delta)} perturbations")
    return manifest, delta
