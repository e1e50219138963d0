import csv
import hashlib
import io
import json
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from validators import IntegrityError

CHECKPOINT_VERSION = "CORLD-CKPT v1"
CSV_SCHEMA = "corld-results v1"
_MAGIC = {b"F32T": np.dtype("<f4"), b"F64T": np.dtype("<f8")}
_storage_lock = threading.Lock()


def _atomic_write(path: Path, payload: bytes) -> None:
    """Write through a temp file so readers never see a partial artifact"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with _storage_lock:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Tensor container: magic, u32 rank, rank x u32 dims, row-major LE payload
# ---------------------------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        magic, dtype = b"F32T", np.dtype("<f4")
    elif array.dtype == np.float64:
        magic, dtype = b"F64T", np.dtype("<f8")
    else:
        raise IntegrityError(f"tensor container holds float32/float64, got {array.dtype}")
    header = magic + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(buffer: bytes, offset: int = 0, name: str = "tensor") -> Tuple[np.ndarray, int]:
    """Decode one container starting at offset; returns (array, next offset)"""
    magic = bytes(buffer[offset:offset + 4])
    if magic not in _MAGIC:
        raise IntegrityError(f"{name}: bad magic {magic!r}")
    dtype = _MAGIC[magic]
    if len(buffer) < offset + 8:
        raise IntegrityError(f"{name}: truncated header")
    (rank,) = struct.unpack_from("<I", buffer, offset + 4)
    pos = offset + 8
    if len(buffer) < pos + 4 * rank:
        raise IntegrityError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buffer, pos)
    pos += 4 * rank
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buffer) < pos + nbytes:
        raise IntegrityError(f"{name}: truncated payload ({len(buffer) - pos} of {nbytes} bytes)")
    array = np.frombuffer(buffer, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims)
    return array.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, array: np.ndarray) -> None:
    _atomic_write(Path(path), encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    buffer = path.read_bytes()
    array, end = decode_tensor(buffer, 0, name=path.name)
    if end != len(buffer):
        raise IntegrityError(f"{path.name}: {len(buffer) - end} trailing bytes")
    return array


# ---------------------------------------------------------------------------
# Checkpoints: header line, u32 count, (u16 name length, name, container)*
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: Dict[str, np.ndarray], header: Dict[str, Any]) -> None:
    """Write named tensors with a versioned descriptor header"""
    out = io.BytesIO()
    out.write(f"{CHECKPOINT_VERSION} {json.dumps(header, sort_keys=True)}\n".encode("utf-8"))
    out.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(encode_tensor(array))
    _atomic_write(Path(path), out.getvalue())


def load_checkpoint(path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    buffer = path.read_bytes()
    newline = buffer.find(b"\n")
    if newline < 0:
        raise IntegrityError(f"{path.name}: missing checkpoint header")
    line = buffer[:newline].decode("utf-8")
    if not line.startswith(CHECKPOINT_VERSION + " "):
        raise IntegrityError(f"{path.name}: unsupported checkpoint header {line[:20]!r}")
    header = json.loads(line[len(CHECKPOINT_VERSION) + 1:])
    pos = newline + 1
    if len(buffer) < pos + 4:
        raise IntegrityError(f"{path.name}: truncated tensor count")
    (count,) = struct.unpack_from("<I", buffer, pos)
    pos += 4
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buffer) < pos + 2:
            raise IntegrityError(f"{path.name}: truncated entry")
        (length,) = struct.unpack_from("<H", buffer, pos)
        pos += 2
        name = bytes(buffer[pos:pos + length]).decode("utf-8")
        pos += length
        tensors[name], pos = decode_tensor(buffer, pos, name=f"{path.name}:{name}")
    if pos != len(buffer):
        raise IntegrityError(f"{path.name}: {len(buffer) - pos} trailing bytes")
    return header, tensors


# ---------------------------------------------------------------------------
# Text artifacts
# ---------------------------------------------------------------------------

def crc32_of(path) -> str:
    return f"{zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF:08x}"


def sha256_of(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]], schema_note: Optional[str] = None) -> None:
    """CSV with a versioned schema comment line, then a header row"""
    buffer = io.StringIO()
    comment = f"# {CSV_SCHEMA}" + (f" {schema_note}" if schema_note else "")
    buffer.write(comment + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    _atomic_write(Path(path), buffer.getvalue().encode("utf-8"))


def _csv_cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


def read_csv(path) -> List[Dict[str, str]]:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def write_run_manifest(out_dir, argv: Sequence[str], config: Dict[str, Any], seed: int,
                       versions: Dict[str, str]) -> Path:
    """Record argv, config, seed, versions and SHA-256 of every artifact in out_dir"""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "run_manifest.json"
    artifacts = {
        str(p.relative_to(out_dir)): sha256_of(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p != manifest_path and not p.name.endswith(".tmp")
    }
    manifest = {
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "versions": versions,
        "artifacts": artifacts,
    }
    write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest_path
