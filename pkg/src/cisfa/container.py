"""Raw-array container IO.

Two layouts share the same idea (little-endian binary blobs described by a
JSON sidecar) so datasets and checkpoints stay readable from any language:

* volume directories: ``<root>/<domain>/<volume_id>/{image.bin,label.bin,meta.json}``
* packed bundles: a single ``data.bin`` holding many named arrays plus a
  ``manifest.json`` with dtype/shape/offset per entry (used for checkpoints).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError

# dtypes are pinned to explicit little-endian codes so files are bit-exact
# across platforms
_DTYPES = {"float32": "<f4", "float64": "<f8", "int16": "<i2", "int32": "<i4",
           "int64": "<i8", "uint8": "<u1"}


def _dtype_code(arr: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if np.dtype(code) == arr.dtype.newbyteorder("<"):
            return name
    raise DataError(f"unsupported dtype {arr.dtype}")


def write_array(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    arr.astype(arr.dtype.newbyteorder("<"), copy=False).tofile(path)


def read_array(path: Path, dtype: str, shape) -> np.ndarray:
    if dtype not in _DTYPES:
        raise DataError(f"unknown dtype {dtype!r} in manifest")
    arr = np.fromfile(path, dtype=np.dtype(_DTYPES[dtype]))
    expected = int(np.prod(shape)) if len(shape) else 1
    if arr.size != expected:
        raise DataError(f"{path}: expected {expected} elements, found {arr.size}")
    return arr.reshape(shape)


# ---------------------------------------------------------------------------
# volume directories
# ---------------------------------------------------------------------------

def write_volume_dir(vol_dir: Path, voxels: np.ndarray, spacing, modality: str,
                     labels: np.ndarray | None = None, roi=None) -> None:
    """Write one volume as image.bin (+ label.bin) + meta.json."""
    vol_dir = Path(vol_dir)
    vol_dir.mkdir(parents=True, exist_ok=True)
    voxels = np.ascontiguousarray(voxels, dtype=np.dtype("<f4"))
    write_array(vol_dir / "image.bin", voxels)
    meta = {
        "shape": [int(s) for s in voxels.shape],
        "dtype": "float32",
        "spacing_mm": [float(s) for s in spacing],
        "modality": modality,
    }
    if labels is not None:
        if tuple(labels.shape) != tuple(voxels.shape):
            raise DataError("labels shape differs from voxels shape")
        write_array(vol_dir / "label.bin", np.ascontiguousarray(labels, dtype=np.dtype("<i2")))
        meta["label_dtype"] = "int16"
    if roi is not None:
        meta["roi"] = [int(v) for v in roi]
    with open(vol_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_volume_dir(vol_dir: Path):
    """Return (voxels, labels_or_None, meta dict) for one volume directory."""
    vol_dir = Path(vol_dir)
    meta_path = vol_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing meta.json in {vol_dir}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    shape = meta["shape"]
    voxels = read_array(vol_dir / "image.bin", meta.get("dtype", "float32"), shape)
    labels = None
    if (vol_dir / "label.bin").exists():
        labels = read_array(vol_dir / "label.bin", meta.get("label_dtype", "int16"), shape)
    return voxels, labels, meta


def list_volume_dirs(domain_dir: Path) -> list[Path]:
    domain_dir = Path(domain_dir)
    if not domain_dir.is_dir():
        raise DataError(f"no such domain directory: {domain_dir}")
    return sorted(p for p in domain_dir.iterdir() if (p / "meta.json").exists())


# ---------------------------------------------------------------------------
# packed bundles (checkpoints, optimizer state, RNG state)
# ---------------------------------------------------------------------------

def save_bundle(bundle_dir: Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Pack named arrays into data.bin + manifest.json under bundle_dir."""
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(bundle_dir / "data.bin", "wb") as fh:
        for name in sorted(arrays):
            shape = list(np.asarray(arrays[name]).shape)
            arr = np.ascontiguousarray(arrays[name])    # note: promotes 0-d to 1-d
            code = _dtype_code(arr)
            arr = arr.astype(np.dtype(_DTYPES[code]), copy=False)
            raw = arr.tobytes()
            fh.write(raw)
            entries[name] = {"dtype": code, "shape": shape, "offset": offset,
                             "nbytes": len(raw)}
            offset += len(raw)
    manifest = {"entries": entries, "meta": meta or {}}
    with open(bundle_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_bundle(bundle_dir: Path):
    """Return (arrays dict, meta dict) written by save_bundle."""
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest.json in {bundle_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    arrays = {}
    with open(bundle_dir / "data.bin", "rb") as fh:
        blob = fh.read()
    for name, ent in manifest["entries"].items():
        dt = np.dtype(_DTYPES[ent["dtype"]])
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(ent["shape"])) if ent["shape"] else 1,
                            offset=ent["offset"])
        arrays[name] = arr.reshape(ent["shape"]).copy()
    return arrays, manifest.get("meta", {})


def tree_hash(root: Path) -> str:
    """SHA-256 over relative paths and file contents; stable dataset fingerprint."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
