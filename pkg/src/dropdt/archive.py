"""Deterministic on-disk archive: JSON manifest + named raw arrays in a zip.

Dataset and checkpoint files share this container. Arrays are stored
little-endian row-major (float32 / int32 / uint8); entry timestamps are
pinned so identical content yields byte-identical files.
"""

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError

SCHEMA_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4"), "<u1": np.dtype("<u1")}
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt:
            return tag
    raise FormatError(f"unsupported array dtype {arr.dtype}; use f4/i4/u1")


def write_archive(path, kind: str, manifest: dict, arrays: dict) -> None:
    """Write manifest + arrays to `path`, byte-deterministically."""
    meta = dict(manifest)
    meta["kind"] = kind
    meta["schema_version"] = SCHEMA_VERSION
    meta["arrays"] = {
        name: {"dtype": _dtype_tag(np.ascontiguousarray(a)), "shape": list(a.shape)}
        for name, a in sorted(arrays.items())
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=1, sort_keys=True))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            info = zipfile.ZipInfo(f"arrays/{name}.bin", date_time=_EPOCH)
            zf.writestr(info, arr.tobytes())


def read_archive(path, kind):
    """Read back (manifest, arrays); raises FormatError on any defect.

    `kind` may be a string or a tuple of acceptable kinds.
    """
    kinds = (kind,) if isinstance(kind, str) else tuple(kind)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("manifest.json"))
            if meta.get("kind") not in kinds:
                raise FormatError(
                    f"{path}: expected a {'/'.join(kinds)} archive, found {meta.get('kind')!r}"
                )
            if meta.get("schema_version") != SCHEMA_VERSION:
                raise FormatError(
                    f"{path}: schema_version {meta.get('schema_version')} "
                    f"is incompatible with {SCHEMA_VERSION}"
                )
            arrays = {}
            for name, desc in meta["arrays"].items():
                raw = zf.read(f"arrays/{name}.bin")
                arr = np.frombuffer(raw, dtype=_DTYPES[desc["dtype"]])
                expected = int(np.prod(desc["shape"])) if desc["shape"] else 1
                if arr.size != expected:
                    raise FormatError(f"{path}: array {name} truncated")
                arrays[name] = arr.reshape(desc["shape"]).copy()
    except FormatError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise FormatError(f"{path}: unreadable archive ({exc})") from exc
    return meta, arrays
