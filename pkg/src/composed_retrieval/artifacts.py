"""File plumbing: atomic writes, content hashing, JSONL, named-array archives.

Every artifact writer in the package funnels through these helpers so that
two runs with identical inputs produce byte-identical files. The archive
writer pins zip timestamps for that reason (``np.savez`` stamps members
with the current time).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

SCHEMA_VERSION = 1

# Fixed member timestamp so archives are byte-reproducible.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators (stable bytes)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj: Any) -> str:
    return sha256_bytes(canonical_json(obj).encode("utf-8"))


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    """One canonical-JSON object per line; atomic."""
    buf = io.StringIO()
    for rec in records:
        buf.write(canonical_json(rec))
        buf.write("\n")
    atomic_write_text(path, buf.getvalue())


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_manifest(artifact_path: str | Path, *, kind: str, configs: dict,
                   input_hashes: dict | None = None, extra: dict | None = None) -> Path:
    """Sidecar ``<artifact>.manifest.json`` describing how the artifact was made."""
    artifact_path = Path(artifact_path)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "artifact": artifact_path.name,
        "content_hash": sha256_file(artifact_path),
        "configs": configs,
        "config_hash": config_hash(configs),
        "input_hashes": input_hashes or {},
    }
    if extra:
        manifest.update(extra)
    path = artifact_path.with_name(artifact_path.name + ".manifest.json")
    atomic_write_text(path, canonical_json(manifest) + "\n")
    return path


def read_manifest(artifact_path: str | Path) -> dict:
    path = Path(str(artifact_path) + ".manifest.json")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Named-array zip archive with a JSON header member.

    Arrays round-trip bit-exactly; the file bytes are deterministic for
    identical contents.
    """
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, canonical_json(header))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            # np.ascontiguousarray would promote 0-d arrays to 1-d.
            np.lib.format.write_array(arr_buf, np.asarray(arrays[name], order="C"))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, arr_buf.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json").decode("utf-8"))
        for member in zf.namelist():
            if member.startswith("arrays/") and member.endswith(".npy"):
                name = member[len("arrays/"):-len(".npy")]
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(member)))
    return arrays, header
