import json

import numpy as np
import pytest

from storage import (
    CSV_SCHEMA,
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    load_tensor,
    read_csv,
    save_checkpoint,
    save_tensor,
    sha256_of,
    write_csv,
    write_run_manifest,
)
from validators import IntegrityError


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_container_is_bit_exact(tmp_path, rng, dtype):
    array = rng.standard_normal((3, 1, 5, 4)).astype(dtype)
    save_tensor(tmp_path / "t.bin", array)
    loaded = load_tensor(tmp_path / "t.bin")
    assert loaded.dtype == dtype
    assert loaded.shape == array.shape
    assert loaded.tobytes() == array.tobytes()


def test_container_layout():
    raw = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:4] == b"F32T"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert len(raw) == 4 + 4 + 2 * 4 + 6 * 4


def test_integer_arrays_rejected():
    with pytest.raises(IntegrityError):
        encode_tensor(np.arange(3))


def test_bad_magic():
    raw = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    raw[:4] = b"XXXX"
    with pytest.raises(IntegrityError, match="magic"):
        decode_tensor(bytes(raw))


def test_truncated_payload(tmp_path):
    raw = encode_tensor(np.zeros((4, 4), dtype=np.float64))
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(IntegrityError, match="truncated"):
        load_tensor(tmp_path / "t.bin")


def test_trailing_bytes(tmp_path):
    (tmp_path / "t.bin").write_bytes(encode_tensor(np.zeros(2, dtype=np.float32)) + b"\0")
    with pytest.raises(IntegrityError, match="trailing"):
        load_tensor(tmp_path / "t.bin")


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "b": np.ones(4)}
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"kind": "test", "n": 2})
    header, loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert header == {"kind": "test", "n": 2}
    assert list(loaded) == ["a.weight", "b"]
    for name in tensors:
        assert loaded[name].tobytes() == tensors[name].tobytes(), name


def test_checkpoint_version_checked(tmp_path):
    (tmp_path / "m.ckpt").write_bytes(b"CORLD-CKPT v0 {}\n\0\0\0\0")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_csv_has_schema_comment(tmp_path):
    write_csv(tmp_path / "r.csv", ["a", "b"], [[1, 0.1], [2, 1e-9]], "note")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == f"# {CSV_SCHEMA} note"
    assert lines[1] == "a,b"
    rows = read_csv(tmp_path / "r.csv")
    assert float(rows[1]["b"]) == 1e-9


def test_run_manifest_hashes_artifacts(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "x.txt").write_text("hello")
    path = write_run_manifest(tmp_path, ["corld", "selftest"], {"seed": 3}, 3, {"corld": "1.0.0"})
    manifest = json.loads(path.read_text())
    assert manifest["argv"] == ["corld", "selftest"]
    assert manifest["seed"] == 3
    assert manifest["artifacts"] == {"sub/x.txt": sha256_of(tmp_path / "sub" / "x.txt")}
